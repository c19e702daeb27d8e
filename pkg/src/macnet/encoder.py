"""Everything around the cell: question encoding, projections, classifier.

The question encoder is a hand-rolled bidirectional LSTM (d/2 hidden units
per direction), producing one d-dimensional contextual word per token and
a 2d question vector.  The knowledge-base projection maps symbolic grid
features to the cell's hidden size once per sample; per-step query
projections and the two-layer answer classifier live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cell import CellParams, CellConfig, MacVariant, run_reasoning, xavier, zeros_param
from .tensor import ContractError, ShapeMismatch, Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocabulary:
    """Bijective token <-> index map with reserved pad/unknown slots."""

    def __init__(self, tokens=()):
        self.index_to_token = [PAD_TOKEN, UNK_TOKEN]
        self.token_to_index = {PAD_TOKEN: 0, UNK_TOKEN: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_index:
            self.token_to_index[token] = len(self.index_to_token)
            self.index_to_token.append(token)
        return self.token_to_index[token]

    def encode(self, tokens) -> list:
        unk = self.token_to_index[UNK_TOKEN]
        return [self.token_to_index.get(t, unk) for t in tokens]

    def decode(self, indices) -> list:
        return [self.index_to_token[i] for i in indices]

    def __len__(self):
        return len(self.index_to_token)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.index_to_token == other.index_to_token

    @classmethod
    def from_token_list(cls, tokens):
        vocab = cls.__new__(cls)
        vocab.index_to_token = list(tokens)
        vocab.token_to_index = {t: i for i, t in enumerate(tokens)}
        if vocab.index_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ContractError("vocabulary token list must start with pad/unk")
        return vocab


@dataclass
class LstmParams:
    """One direction of the encoder; separate weights per gate (i, f, g, o)."""

    W_xi: Tensor; W_hi: Tensor; b_i: Tensor
    W_xf: Tensor; W_hf: Tensor; b_f: Tensor
    W_xg: Tensor; W_hg: Tensor; b_g: Tensor
    W_xo: Tensor; W_ho: Tensor; b_o: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, input_size: int, hidden: int):
        def gate():
            return xavier(rng, hidden, input_size), xavier(rng, hidden, hidden), zeros_param(hidden)
        wi = gate(); wf = gate(); wg = gate(); wo = gate()
        return cls(*wi, *wf, *wg, *wo)

    def named(self, prefix: str):
        for gate in ("i", "f", "g", "o"):
            yield f"{prefix}.W_x{gate}", getattr(self, f"W_x{gate}")
            yield f"{prefix}.W_h{gate}", getattr(self, f"W_h{gate}")
            yield f"{prefix}.b_{gate}", getattr(self, f"b_{gate}")

    def step(self, x: Tensor, h: Tensor, c: Tensor):
        i = T.sigmoid(T.matmul(x, T.transpose(self.W_xi)) + T.matmul(h, T.transpose(self.W_hi)) + self.b_i)
        f = T.sigmoid(T.matmul(x, T.transpose(self.W_xf)) + T.matmul(h, T.transpose(self.W_hf)) + self.b_f)
        g = T.tanh(T.matmul(x, T.transpose(self.W_xg)) + T.matmul(h, T.transpose(self.W_hg)) + self.b_g)
        o = T.sigmoid(T.matmul(x, T.transpose(self.W_xo)) + T.matmul(h, T.transpose(self.W_ho)) + self.b_o)
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the full model around one cell."""

    d: int
    p: int
    H: int
    W: int
    S: int
    d_in: int
    vocab_size: int
    n_answers: int

    def cell_config(self) -> CellConfig:
        return CellConfig(self.d, self.p, self.H, self.W, self.S)


@dataclass
class EncoderParams:
    embedding: Tensor  # [V x d]
    fwd: LstmParams
    bwd: LstmParams
    U: list  # per-step [d x 2d] query projections (position-aware)
    b_u: list  # per-step [d] biases (position-aware)
    W_k: Tensor  # [d_in x d] knowledge-base projection
    b_k: Tensor  # [d]
    W_o1: Tensor  # [d x 3d] classifier hidden layer
    b_o1: Tensor
    W_o2: Tensor  # [answers x d]
    b_o2: Tensor

    @classmethod
    def create(cls, cfg: ModelConfig, rng: np.random.Generator):
        d, h = cfg.d, cfg.d // 2
        return cls(
            embedding=xavier(rng, cfg.vocab_size, d),
            fwd=LstmParams.create(rng, d, h),
            bwd=LstmParams.create(rng, d, h),
            U=[xavier(rng, d, 2 * d) for _ in range(cfg.p)],
            b_u=[zeros_param(d) for _ in range(cfg.p)],
            W_k=xavier(rng, cfg.d_in, d),
            b_k=zeros_param(d),
            W_o1=xavier(rng, d, 3 * d),
            b_o1=zeros_param(d),
            W_o2=xavier(rng, cfg.n_answers, d),
            b_o2=zeros_param(cfg.n_answers),
        )

    def named(self, prefix: str = "encoder"):
        yield f"{prefix}.embedding", self.embedding
        yield from self.fwd.named(f"{prefix}.lstm_fwd")
        yield from self.bwd.named(f"{prefix}.lstm_bwd")
        for i, (u, b) in enumerate(zip(self.U, self.b_u), start=1):
            yield f"{prefix}.step_proj.U_{i}", u
            yield f"{prefix}.step_proj.b_{i}", b
        yield f"{prefix}.W_k", self.W_k
        yield f"{prefix}.b_k", self.b_k
        yield f"{prefix}.W_o1", self.W_o1
        yield f"{prefix}.b_o1", self.b_o1
        yield f"{prefix}.W_o2", self.W_o2
        yield f"{prefix}.b_o2", self.b_o2


def is_position_aware(name: str) -> bool:
    """True for the per-step query projection parameters."""
    return ".step_proj." in name


def encode_question(params: EncoderParams, tokens: np.ndarray, lengths: np.ndarray):
    """Run the bidirectional LSTM over a padded [B x S] token batch.

    Returns (cw [B x S x d], mask [B x S], q [B x 2d]).  The question
    vector is the contextual word at the sequence-final position of each
    direction (position L-1 forward, position 0 backward), which carries
    both directions' final hidden states.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeMismatch(f"tokens must be [batch x S], got {tokens.shape}")
    B, S = tokens.shape
    if lengths.shape != (B,):
        raise ContractError(f"lengths shape {lengths.shape} != ({B},)")
    if (lengths < 1).any() or (lengths > S).any():
        raise ContractError("question lengths must be in [1, S]")
    V = params.embedding.shape[0]
    if tokens.min() < 0 or tokens.max() >= V:
        raise ContractError("token index outside vocabulary")

    h_dim = params.fwd.W_hi.shape[0]
    mask = np.arange(S)[None, :] < lengths[:, None]

    def run_direction(lstm: LstmParams, order):
        h = Tensor(np.zeros((B, h_dim)))
        c = Tensor(np.zeros((B, h_dim)))
        outputs = [None] * S
        for t in order:
            x = T.take_rows(params.embedding, tokens[:, t])
            h_new, c_new = lstm.step(x, h, c)
            keep = Tensor(mask[:, t:t + 1].astype(float))
            h = keep * h_new + (1.0 - keep) * h
            c = keep * c_new + (1.0 - keep) * c
            outputs[t] = h
        return outputs

    fwd_states = run_direction(params.fwd, range(S))
    bwd_states = run_direction(params.bwd, range(S - 1, -1, -1))
    cw = T.concat_last(T.stack(fwd_states, axis=1), T.stack(bwd_states, axis=1))

    # contextual word at each sample's last valid position
    gather_last = np.zeros((B, S))
    gather_last[np.arange(B), lengths - 1] = 1.0
    last_cw = T.sum_axis(T.reshape(Tensor(gather_last), (B, S, 1)) * cw, axis=1)
    first_cw = T.sum_axis(
        T.reshape(Tensor(np.eye(S)[0][None, :].repeat(B, axis=0)), (B, S, 1)) * cw, axis=1)
    q = T.concat_last(last_cw, first_cw)
    return cw, mask, q


def project_knowledge_base(params: EncoderParams, grid) -> Tensor:
    """Per-position affine map of a [B x H x W x d_in] feature grid to [B x H*W x d]."""
    if not isinstance(grid, Tensor):
        grid = Tensor(np.asarray(grid, dtype=float))
    if grid.ndim != 4:
        raise ShapeMismatch(f"feature grid must be [B x H x W x d_in], got {grid.shape}")
    B, H, W, d_in = grid.shape
    if d_in != params.W_k.shape[0]:
        raise ShapeMismatch(f"grid feature width {d_in} != projection input {params.W_k.shape[0]}")
    flat = T.reshape(grid, (B * H * W, d_in))
    out = T.matmul(flat, params.W_k) + params.b_k
    return T.reshape(out, (B, H * W, params.W_k.shape[1]))


def position_project(params: EncoderParams, q: Tensor, i: int) -> Tensor:
    """Step-i query projection q_i = U_i q + b_i."""
    if not 1 <= i <= len(params.U):
        raise ContractError(f"step index {i} outside 1..{len(params.U)}")
    return T.matmul(q, T.transpose(params.U[i - 1])) + params.b_u[i - 1]


def output_unit(params: EncoderParams, m_p: Tensor, q: Tensor) -> Tensor:
    """Answer logits from [final memory, question vector]."""
    x = T.concat_last(m_p, q)
    hidden = T.tanh(T.matmul(x, T.transpose(params.W_o1)) + params.b_o1)
    return T.matmul(hidden, T.transpose(params.W_o2)) + params.b_o2


class MacModel:
    """Encoder + reasoning cell + classifier for one variant."""

    def __init__(self, config: ModelConfig, variant: MacVariant,
                 encoder: EncoderParams, cell: CellParams):
        self.config = config
        self.variant = variant
        self.encoder = encoder
        self.cell = cell

    @classmethod
    def create(cls, config: ModelConfig, variant: MacVariant, rng: np.random.Generator):
        return cls(config, variant,
                   EncoderParams.create(config, rng),
                   CellParams.create(variant, config.cell_config(), rng))

    def named_parameters(self):
        yield from self.encoder.named()
        yield from self.cell.named()

    def forward(self, tokens: np.ndarray, lengths: np.ndarray, grids: np.ndarray):
        """Full pass over a batch; returns (logits, per-step traces)."""
        cw, mask, q = encode_question(self.encoder, tokens, lengths)
        k = project_knowledge_base(self.encoder, grids)
        m_p, traces = run_reasoning(
            self.cell, cw, mask, q, k,
            lambda qv, i: position_project(self.encoder, qv, i))
        logits = output_unit(self.encoder, m_p, q)
        return logits, traces
