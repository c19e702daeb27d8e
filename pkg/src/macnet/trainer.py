"""Training, evaluation, fine-tuning, timing and the experiment matrix.

The optimizer is plain Adam with global gradient-norm clipping.  Training
holds out a validation slice of the corpus, tracks per-epoch accuracy and
returns the best-validation checkpoint; fine-tuning continues from a
checkpoint on a disjoint shard.  Checkpoints round-trip bitwise through a
small versioned binary container.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .cell import MacVariant
from .encoder import MacModel, ModelConfig, Vocabulary
from .microgen import ANSWER_TOKENS, Corpus, FEATURE_WIDTH, render_feature_grid
from .tensor import ContractError, Tensor


class DivergenceError(Exception):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    variant: str = "smac"
    d: int = 64
    p: int = 4
    batch_size: int = 64
    lr: float = 1e-4
    epochs: int = 15
    seed: int = 0
    split_ratio: float = 0.9
    clip_norm: float = 8.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ContractError("split_ratio must lie in (0, 1)")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")

    def mac_variant(self) -> MacVariant:
        return MacVariant.parse(self.variant)


@dataclass
class Metrics:
    accuracy: float
    loss: float
    per_category: dict
    n: int
    wall_time: float = 0.0
    step_time_mean: float = 0.0


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    model_config: ModelConfig
    params: dict  # name -> np.ndarray
    vocab: Vocabulary
    answers: list
    history: list
    rng_state: dict


class Adam:
    """Adam with global gradient-norm clipping; one closed-form step per call."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float = 0.0):
        self.params = list(params)  # (name, Tensor) pairs
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for name, p in self.params}
        if self.clip_norm > 0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {name: g * scale for name, g in grads.items()}
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- corpus encoding ---------------------------------------------------


@dataclass
class EncodedCorpus:
    tokens: np.ndarray  # [N x S] int64
    lengths: np.ndarray  # [N]
    grids: np.ndarray  # [N x H x W x d_in]
    labels: np.ndarray  # [N]
    categories: list
    sample_ids: list
    H: int
    W: int


def build_vocab(corpus: Corpus) -> Vocabulary:
    tokens = sorted({tok for s in corpus.samples for tok in s.tokens})
    return Vocabulary(tokens)


def encode_corpus(corpus: Corpus, vocab: Vocabulary, strict: bool = False) -> EncodedCorpus:
    """Index and pad a corpus; `strict` rejects out-of-vocabulary tokens."""
    if not corpus.samples:
        raise ContractError("corpus is empty")
    if strict:
        missing = {tok for s in corpus.samples for tok in s.tokens
                   if tok not in vocab.token_to_index}
        if missing:
            raise ContractError(f"corpus tokens missing from vocabulary: {sorted(missing)[:5]}")
    S = max(len(s.tokens) for s in corpus.samples)
    N = len(corpus.samples)
    first_scene = next(iter(corpus.scenes.values()))
    H, W = first_scene.H, first_scene.W
    tokens = np.zeros((N, S), dtype=np.int64)
    lengths = np.zeros(N, dtype=np.int64)
    grids = np.zeros((N, H, W, FEATURE_WIDTH))
    labels = np.zeros(N, dtype=np.int64)
    grid_cache = {}
    answer_index = {a: i for i, a in enumerate(ANSWER_TOKENS)}
    for i, sample in enumerate(corpus.samples):
        idx = vocab.encode(sample.tokens)
        tokens[i, :len(idx)] = idx
        lengths[i] = len(idx)
        if sample.scene_id not in grid_cache:
            grid_cache[sample.scene_id] = render_feature_grid(corpus.scenes[sample.scene_id])
        grids[i] = grid_cache[sample.scene_id]
        if sample.answer not in answer_index:
            raise ContractError(f"answer {sample.answer!r} outside the closed answer set")
        labels[i] = answer_index[sample.answer]
    return EncodedCorpus(tokens, lengths, grids, labels,
                         [s.category for s in corpus.samples],
                         [s.question_id for s in corpus.samples], H, W)


def split_corpus(corpus: Corpus, ratio: float, seed: int):
    """Split into (first, second) shards of sizes ratio : 1-ratio, ids disjoint."""
    if not 0.0 < ratio < 1.0:
        raise ContractError("split ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus.samples))
    cut = max(1, int(round(ratio * len(corpus.samples))))
    first_idx, second_idx = order[:cut], order[cut:]

    def subset(indices):
        samples = [corpus.samples[i] for i in sorted(indices)]
        scene_ids = {s.scene_id for s in samples}
        return Corpus({sid: corpus.scenes[sid] for sid in scene_ids}, samples, corpus.meta)

    return subset(first_idx), subset(second_idx)


# -- core loops --------------------------------------------------------


def _batch_loss(model: MacModel, enc: EncodedCorpus, idx: np.ndarray):
    logits, _ = model.forward(enc.tokens[idx], enc.lengths[idx], enc.grids[idx])
    return T.cross_entropy_logits(logits, enc.labels[idx]), logits


def evaluate_encoded(model: MacModel, enc: EncodedCorpus, batch_size: int = 256) -> Metrics:
    correct = 0
    loss_sum = 0.0
    per_cat = {}
    start = time.perf_counter()
    with T.no_grad():
        for lo in range(0, len(enc.labels), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(enc.labels)))
            loss, logits = _batch_loss(model, enc, idx)
            loss_sum += loss.item() * len(idx)
            preds = logits.data.argmax(axis=1)
            for j, i in enumerate(idx):
                cat = enc.categories[i]
                ok = preds[j] == enc.labels[i]
                hit, total = per_cat.get(cat, (0, 0))
                per_cat[cat] = (hit + int(ok), total + 1)
                correct += int(ok)
    n = len(enc.labels)
    return Metrics(correct / n, loss_sum / n, per_cat, n,
                   wall_time=time.perf_counter() - start)


def evaluate(checkpoint: Checkpoint, corpus: Corpus, batch_size: int = 256) -> Metrics:
    """Deterministic, update-free accuracy of a checkpointed model on a corpus."""
    model, vocab = model_from_checkpoint(checkpoint)
    return evaluate_encoded(model, encode_corpus(corpus, vocab), batch_size)


def _snapshot(model: MacModel) -> dict:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def _restore(model: MacModel, params: dict):
    for name, p in model.named_parameters():
        p.data = params[name].copy()


def _fit(model: MacModel, vocab: Vocabulary, enc: EncodedCorpus, config: TrainConfig,
         val_enc: EncodedCorpus = None, log=None):
    """Run the epoch loop; returns (best_params, history)."""
    opt = Adam(model.named_parameters(), config.lr, config.beta1, config.beta2,
               config.eps, config.clip_norm)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    best = (-1.0, 0, _snapshot(model))  # (val acc, epoch, params)
    n = len(enc.labels)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        step_times = []
        t0 = time.perf_counter()
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            ts = time.perf_counter()
            opt.zero_grad()
            loss, _ = _batch_loss(model, enc, idx)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {lo // config.batch_size}")
            loss.backward()
            opt.step()
            step_times.append(time.perf_counter() - ts)
            epoch_loss += value * len(idx)
        record = {"epoch": epoch, "train_loss": epoch_loss / n,
                  "epoch_time": time.perf_counter() - t0,
                  "step_time_mean": float(np.mean(step_times))}
        if val_enc is not None:
            val = evaluate_encoded(model, val_enc)
            record["val_acc"] = val.accuracy
            if val.accuracy > best[0]:
                best = (val.accuracy, epoch, _snapshot(model))
        history.append(record)
        if log:
            log(record)
    if val_enc is None or config.epochs == 0:
        best = (best[0], config.epochs, _snapshot(model))
    return best[2], history


def train(config: TrainConfig, corpus: Corpus, log=None):
    """Train from scratch; returns (best-validation Checkpoint, validation Metrics)."""
    if not corpus.samples:
        raise ContractError("corpus is empty")
    vocab = build_vocab(corpus)
    enc = encode_corpus(corpus, vocab)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(enc.labels))
    cut = int(round(config.split_ratio * len(order)))
    cut = min(max(cut, 1), len(order) - 1) if len(order) > 1 else 1
    train_idx, val_idx = order[:cut], order[cut:]

    def take(indices):
        return EncodedCorpus(enc.tokens[indices], enc.lengths[indices], enc.grids[indices],
                             enc.labels[indices], [enc.categories[i] for i in indices],
                             [enc.sample_ids[i] for i in indices], enc.H, enc.W)

    train_enc = take(train_idx)
    val_enc = take(val_idx) if len(val_idx) else None

    model_cfg = ModelConfig(config.d, config.p, enc.H, enc.W, enc.tokens.shape[1],
                            FEATURE_WIDTH, len(vocab), len(ANSWER_TOKENS))
    model = MacModel.create(model_cfg, config.mac_variant(), rng)
    best_params, history = _fit(model, vocab, train_enc, config, val_enc, log)
    _restore(model, best_params)
    metrics = evaluate_encoded(model, val_enc if val_enc is not None else train_enc)
    ckpt = Checkpoint(1, config, model_cfg, best_params, vocab, list(ANSWER_TOKENS),
                      history, rng.bit_generator.state)
    return ckpt, metrics


def finetune(checkpoint: Checkpoint, shard: Corpus, epochs: int = 10,
             lr: float = None, seed: int = None, log=None):
    """Continue optimization from a checkpoint on a (disjoint) shard."""
    model, vocab = model_from_checkpoint(checkpoint)
    enc = encode_corpus(shard, vocab, strict=True)
    config = replace(checkpoint.config, epochs=epochs,
                     lr=lr if lr is not None else checkpoint.config.lr,
                     seed=seed if seed is not None else checkpoint.config.seed + 7)
    best_params, history = _fit(model, vocab, enc, config, val_enc=None, log=log)
    _restore(model, best_params)
    metrics = evaluate_encoded(model, enc)
    ckpt = Checkpoint(1, config, checkpoint.model_config, best_params, vocab,
                      list(checkpoint.answers), checkpoint.history + history,
                      checkpoint.rng_state)
    return ckpt, metrics


def model_from_checkpoint(checkpoint: Checkpoint):
    rng = np.random.default_rng(0)
    model = MacModel.create(checkpoint.model_config, checkpoint.config.mac_variant(), rng)
    _restore(model, checkpoint.params)
    return model, checkpoint.vocab


# -- checkpoint container ---------------------------------------------

_MAGIC = b"MACCKPT\x01"


def save_checkpoint(checkpoint: Checkpoint, path):
    """Versioned binary container: header key=value block, then named tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {}
    for key, value in asdict(checkpoint.config).items():
        header[f"config.{key}"] = json.dumps(value)
    for key, value in asdict(checkpoint.model_config).items():
        header[f"model.{key}"] = json.dumps(value)
    header["vocab"] = json.dumps(checkpoint.vocab.index_to_token)
    header["answers"] = json.dumps(checkpoint.answers)
    header["history"] = json.dumps(checkpoint.history)
    header["rng_state"] = json.dumps(checkpoint.rng_state)
    header_bytes = "\n".join(f"{k}={v}" for k, v in header.items()).encode("utf-8")

    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", checkpoint.version))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(checkpoint.params)))
        for name in sorted(checkpoint.params):
            data = np.ascontiguousarray(checkpoint.params[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        version, = struct.unpack("<I", fh.read(4))
        header_len, = struct.unpack("<Q", fh.read(8))
        header = {}
        for line in fh.read(header_len).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            header[key] = json.loads(value)
        config = TrainConfig(**{k.split(".", 1)[1]: v for k, v in header.items()
                                if k.startswith("config.")})
        model_config = ModelConfig(**{k.split(".", 1)[1]: v for k, v in header.items()
                                      if k.startswith("model.")})
        n_tensors, = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_tensors):
            name_len, = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            rank, = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
            params[name] = data.astype(np.float64)
    return Checkpoint(version, config, model_config, params,
                      Vocabulary.from_token_list(header["vocab"]), header["answers"],
                      header["history"], header["rng_state"])


# -- timing ------------------------------------------------------------


def measure_step_time(variant: str, d: int = 512, p: int = 6, batch_size: int = 32,
                      n_steps: int = 30, warmup: int = 5, seed: int = 0,
                      H: int = 6, W: int = 6, S: int = 12, vocab_size: int = 40) -> dict:
    """Median/mean wall time per optimizer step on synthetic batches.

    Batch contents depend only on `seed`, so paired runs of both variants
    see identical data.
    """
    if n_steps < 30:
        raise ContractError("n_steps must be >= 30 for a stable median")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(2, vocab_size, size=(batch_size, S))
    lengths = np.full(batch_size, S, dtype=np.int64)
    grids = rng.random((batch_size, H, W, FEATURE_WIDTH))
    labels = rng.integers(0, len(ANSWER_TOKENS), size=batch_size)

    model_cfg = ModelConfig(d, p, H, W, S, FEATURE_WIDTH, vocab_size, len(ANSWER_TOKENS))
    model = MacModel.create(model_cfg, MacVariant.parse(variant),
                            np.random.default_rng(seed + 1))
    opt = Adam(model.named_parameters(), lr=1e-4, clip_norm=8.0)
    times = []
    for step in range(warmup + n_steps):
        t0 = time.perf_counter()
        opt.zero_grad()
        logits, _ = model.forward(tokens, lengths, grids)
        loss = T.cross_entropy_logits(logits, labels)
        loss.backward()
        opt.step()
        if step >= warmup:
            times.append(time.perf_counter() - t0)
    return {"variant": variant, "median": float(np.median(times)),
            "mean": float(np.mean(times)), "times": times,
            "fingerprint": (f"variant={variant} d={d} p={p} batch={batch_size} "
                            f"steps={n_steps} warmup={warmup} seed={seed} dtype=float64")}


# -- experiment matrix -------------------------------------------------


@dataclass
class PlanRow:
    label: str
    variant: str
    train_dir: str
    finetune_dir: str  # empty string for none
    test_dirs: list  # (name, directory) pairs


@dataclass
class ExperimentPlan:
    rows: list = field(default_factory=list)


@dataclass
class RowResult:
    label: str
    variant: str
    train_name: str
    finetune_name: str
    test_name: str
    accuracy: float
    train_time: float
    error: str = ""


def _corpus_name(directory: str) -> str:
    return Path(directory).name if directory else "-"


def run_experiment_matrix(plan: ExperimentPlan, config: TrainConfig,
                          finetune_epochs: int = 10, work_dir=None, log=None):
    """Execute every plan row (train -> optional fine-tune -> test each corpus).

    Trained and fine-tuned checkpoints are cached per corpus so rows that
    share a training set reuse it.  A failing row is recorded and the
    remaining rows continue.  Returns a list of RowResult.
    """
    results = []
    train_cache = {}
    ft_cache = {}
    corpus_cache = {}

    def corpus(directory):
        if directory not in corpus_cache:
            from .microgen import load_corpus
            corpus_cache[directory] = load_corpus(directory)
        return corpus_cache[directory]

    for row in plan.rows:
        try:
            key = (row.variant, row.train_dir)
            if key not in train_cache:
                cfg = replace(config, variant=row.variant)
                ckpt, _ = train(cfg, corpus(row.train_dir), log=log)
                elapsed = sum(r["epoch_time"] for r in ckpt.history)
                train_cache[key] = (ckpt, elapsed)
                if work_dir:
                    save_checkpoint(ckpt, Path(work_dir) / f"{row.variant}-{_corpus_name(row.train_dir)}.ckpt")
            ckpt, elapsed = train_cache[key]
            if row.finetune_dir:
                ft_key = key + (row.finetune_dir,)
                if ft_key not in ft_cache:
                    shard = corpus(row.finetune_dir)
                    ft_ckpt, _ = finetune(ckpt, shard, epochs=finetune_epochs, log=log)
                    ft_cache[ft_key] = ft_ckpt
                    if work_dir:
                        save_checkpoint(ft_ckpt, Path(work_dir) /
                                        f"{row.variant}-{_corpus_name(row.train_dir)}-ft-{_corpus_name(row.finetune_dir)}.ckpt")
                ckpt = ft_cache[ft_key]
                ft_ids = set(s.question_id for s in corpus(row.finetune_dir).samples)
            else:
                ft_ids = set()
            for test_name, test_dir in row.test_dirs:
                test_corpus = corpus(test_dir)
                overlap = ft_ids & {s.question_id for s in test_corpus.samples}
                if overlap:
                    raise ContractError(
                        f"fine-tune shard leaks into test corpus {test_name}: {len(overlap)} ids")
                metrics = evaluate(ckpt, test_corpus)
                results.append(RowResult(row.label, row.variant,
                                         _corpus_name(row.train_dir),
                                         _corpus_name(row.finetune_dir),
                                         test_name, metrics.accuracy, elapsed))
        except Exception as exc:  # row failures recorded, remaining rows continue
            results.append(RowResult(row.label, row.variant, _corpus_name(row.train_dir),
                                     _corpus_name(row.finetune_dir), "-", float("nan"),
                                     0.0, error=f"{type(exc).__name__}: {exc}"))
    return results


def format_report(results) -> str:
    """Human table plus machine-readable record lines."""
    lines = [f"{'row':<6}{'variant':<9}{'train':<22}{'finetune':<22}{'test':<22}"
             f"{'acc%':>8}{'time_s':>10}"]
    for r in results:
        acc = f"{100 * r.accuracy:.2f}" if np.isfinite(r.accuracy) else "ERR"
        lines.append(f"{r.label:<6}{r.variant:<9}{r.train_name:<22}{r.finetune_name:<22}"
                     f"{r.test_name:<22}{acc:>8}{r.train_time:>10.1f}")
        if r.error:
            lines.append(f"      ! {r.error}")
    lines.append("")
    for r in results:
        lines.append(f"row={r.label}\tvariant={r.variant}\ttrain={r.train_name}"
                     f"\tfinetune={r.finetune_name}\ttest={r.test_name}"
                     f"\taccuracy={r.accuracy:.6f}\ttime={r.train_time:.2f}"
                     + (f"\terror={r.error}" if r.error else ""))
    return "\n".join(lines) + "\n"
