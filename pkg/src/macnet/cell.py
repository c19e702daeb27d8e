"""The recurrent reasoning cell, in its original and simplified variants.

The cell runs p reasoning steps; each step attends over the question words
(control unit), attends over the knowledge base (read unit) and updates a
memory vector (write unit).  The simplified variant fuses consecutive
linear layers, dropping roughly half the position-independent parameters
per unit; `embed_smac_into_mac` builds the explicit original-parameter
construction showing every simplified cell is a special case of the
original one.

All unit functions are batched: activations carry a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeMismatch, Tensor

MASK_LOGIT = -1e30  # additive logit penalty for padded words; exp underflows to exactly 0


class MacVariant(Enum):
    ORIGINAL = "mac"
    SIMPLIFIED = "smac"

    @classmethod
    def parse(cls, name: str) -> "MacVariant":
        for v in cls:
            if v.value == name.lower():
                return v
        raise ContractError(f"unknown variant {name!r} (expected 'mac' or 'smac')")


@dataclass(frozen=True)
class CellConfig:
    """Dimensions of one reasoning cell."""

    d: int
    p: int
    H: int
    W: int
    S: int

    def __post_init__(self):
        for name in ("d", "p", "H", "W", "S"):
            if getattr(self, name) < 1:
                raise ContractError(f"CellConfig.{name} must be positive")
        if self.d % 2 != 0:
            raise ContractError("hidden dimension d must be even (bidirectional encoder halves)")


def xavier(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """Fan-based uniform initialization for a [rows x cols] weight."""
    limit = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class ControlUnitParams:
    W_cq: Tensor  # original [d x 2d], simplified [d x d]
    b_cq: Tensor  # [d]
    W_ca: Tensor  # [1 x d]
    b_ca: Tensor | None  # [1] in the original variant only

    @classmethod
    def create(cls, variant: MacVariant, d: int, rng: np.random.Generator):
        if variant is MacVariant.ORIGINAL:
            return cls(xavier(rng, d, 2 * d), zeros_param(d), xavier(rng, 1, d), zeros_param(1))
        return cls(xavier(rng, d, d), zeros_param(d), xavier(rng, 1, d), None)

    def named(self, prefix: str = "control"):
        yield f"{prefix}.W_cq", self.W_cq
        yield f"{prefix}.b_cq", self.b_cq
        yield f"{prefix}.W_ca", self.W_ca
        if self.b_ca is not None:
            yield f"{prefix}.b_ca", self.b_ca


@dataclass
class ReadUnitParams:
    W_I2: Tensor  # original [d x 2d], simplified [d x d]
    b_I2: Tensor  # [d]
    W_ra: Tensor  # [1 x d]
    W_m: Tensor | None = None  # [d x d], original only
    b_m: Tensor | None = None  # [d], original only
    b_ra: Tensor | None = None  # [1], original only

    @classmethod
    def create(cls, variant: MacVariant, d: int, rng: np.random.Generator):
        if variant is MacVariant.ORIGINAL:
            return cls(xavier(rng, d, 2 * d), zeros_param(d), xavier(rng, 1, d),
                       W_m=xavier(rng, d, d), b_m=zeros_param(d), b_ra=zeros_param(1))
        return cls(xavier(rng, d, d), zeros_param(d), xavier(rng, 1, d))

    def named(self, prefix: str = "read"):
        if self.W_m is not None:
            yield f"{prefix}.W_m", self.W_m
            yield f"{prefix}.b_m", self.b_m
        yield f"{prefix}.W_I'", self.W_I2
        yield f"{prefix}.b_I'", self.b_I2
        yield f"{prefix}.W_ra", self.W_ra
        if self.b_ra is not None:
            yield f"{prefix}.b_ra", self.b_ra


@dataclass
class WriteUnitParams:
    W_rm: Tensor  # original [d x 2d], simplified [d x d]
    b_rm: Tensor  # [d]

    @classmethod
    def create(cls, variant: MacVariant, d: int, rng: np.random.Generator):
        cols = 2 * d if variant is MacVariant.ORIGINAL else d
        return cls(xavier(rng, d, cols), zeros_param(d))

    def named(self, prefix: str = "write"):
        yield f"{prefix}.W_rm", self.W_rm
        yield f"{prefix}.b_rm", self.b_rm


@dataclass
class CellParams:
    """Complete weight set for one cell, plus learned initial states."""

    variant: MacVariant
    config: CellConfig
    control: ControlUnitParams
    read: ReadUnitParams
    write: WriteUnitParams
    c0: Tensor = field(default=None)  # [d], learned, counted with neither unit
    m0: Tensor = field(default=None)

    @classmethod
    def create(cls, variant: MacVariant, config: CellConfig, rng: np.random.Generator):
        d = config.d
        return cls(variant, config,
                   ControlUnitParams.create(variant, d, rng),
                   ReadUnitParams.create(variant, d, rng),
                   WriteUnitParams.create(variant, d, rng),
                   c0=zeros_param(d), m0=zeros_param(d))

    def named(self, prefix: str = "cell"):
        yield from self.control.named(f"{prefix}.control")
        yield from self.read.named(f"{prefix}.read")
        yield from self.write.named(f"{prefix}.write")
        yield f"{prefix}.c0", self.c0
        yield f"{prefix}.m0", self.m0


@dataclass
class StepTrace:
    """Per-step attention snapshot for visualization and invariant checks."""

    step: int
    cv: np.ndarray  # [B x S] word attention
    rv: np.ndarray  # [B x H x W] spatial attention
    c: np.ndarray  # [B x d]
    m: np.ndarray  # [B x d]


def _project_rows(x: Tensor, W: Tensor) -> Tensor:
    """Apply a [out x in] weight to the trailing axis of a [B x N x in] tensor."""
    B, N, k = x.shape
    flat = T.matmul(T.reshape(x, (B * N, k)), T.transpose(W))
    return T.reshape(flat, (B, N, W.shape[0]))


def _mask_bias(mask: np.ndarray) -> Tensor:
    return Tensor(np.where(mask, 0.0, MASK_LOGIT))


def control_unit(variant: MacVariant, params: ControlUnitParams, c_prev: Tensor,
                 q_i: Tensor, cw: Tensor, mask: np.ndarray):
    """One control step: attend over contextual words, return (c_i, cv).

    `mask` is a [B x S] boolean array; padded words get exactly zero
    attention.
    """
    B, S, d = cw.shape
    if mask.shape != (B, S):
        raise ShapeMismatch(f"mask shape {mask.shape} != {(B, S)}")
    if not mask.any(axis=1).all():
        raise ContractError("control_unit: a sample has no valid words")
    if variant is MacVariant.ORIGINAL:
        cq = T.matmul(T.concat_last(c_prev, q_i), T.transpose(params.W_cq)) + params.b_cq
    else:
        cq = T.matmul(c_prev, T.transpose(params.W_cq)) + params.b_cq + q_i
    interact = T.reshape(cq, (B, 1, d)) * cw
    logits = T.reshape(_project_rows(interact, params.W_ca), (B, S))
    if params.b_ca is not None:
        logits = logits + params.b_ca
    cv = T.softmax_over(logits + _mask_bias(mask), axis=1)
    c_i = T.sum_axis(T.reshape(cv, (B, S, 1)) * cw, axis=1)
    return c_i, cv


def read_unit(variant: MacVariant, params: ReadUnitParams, m_prev: Tensor,
              k: Tensor, c_i: Tensor):
    """One read step over the projected knowledge base [B x H*W x d].

    Returns (r_i, rv) where rv is the spatial attention over all H*W
    positions.
    """
    B, P, d = k.shape
    if variant is MacVariant.ORIGINAL:
        mm = T.matmul(m_prev, T.transpose(params.W_m)) + params.b_m
        interact = T.reshape(mm, (B, 1, d)) * k
        fused = _project_rows(T.concat_last(interact, k), params.W_I2) + params.b_I2
    else:
        interact = T.reshape(m_prev, (B, 1, d)) * k
        fused = _project_rows(interact, params.W_I2) + params.b_I2 + k
    ra = T.reshape(_project_rows(T.reshape(c_i, (B, 1, d)) * fused, params.W_ra), (B, P))
    if params.b_ra is not None:
        ra = ra + params.b_ra
    rv = T.softmax_over(ra, axis=1)
    r = T.sum_axis(T.reshape(rv, (B, P, 1)) * k, axis=1)
    return r, rv


def write_unit(variant: MacVariant, params: WriteUnitParams, r: Tensor,
               m_prev: Tensor) -> Tensor:
    """Memory update; the simplified form ignores m_prev by construction."""
    if variant is MacVariant.ORIGINAL:
        return T.matmul(T.concat_last(r, m_prev), T.transpose(params.W_rm)) + params.b_rm
    return T.matmul(r, T.transpose(params.W_rm)) + params.b_rm


def run_reasoning(params: CellParams, cw: Tensor, mask: np.ndarray, q: Tensor,
                  k: Tensor, project_q):
    """Execute p steps of control -> read -> write.

    `project_q(q, i)` supplies the step-i query vector (the position-aware
    projection of the 2d question vector).  Returns the final memory [B x d]
    and one StepTrace per step.
    """
    cfg = params.config
    B = q.shape[0]
    zeros = Tensor(np.zeros((B, cfg.d)))
    c = T.reshape(params.c0, (1, cfg.d)) + zeros
    m = T.reshape(params.m0, (1, cfg.d)) + zeros
    traces = []
    for i in range(1, cfg.p + 1):
        q_i = project_q(q, i)
        c, cv = control_unit(params.variant, params.control, c, q_i, cw, mask)
        r, rv = read_unit(params.variant, params.read, m, k, c)
        m = write_unit(params.variant, params.write, r, m)
        traces.append(StepTrace(i, cv.data.copy(),
                                rv.data.reshape(B, cfg.H, cfg.W).copy(),
                                c.data.copy(), m.data.copy()))
    return m, traces


def count_parameters(variant: MacVariant, d: int) -> dict:
    """Position-independent parameter counts per unit.

    Convention: the shared knowledge-base projection is counted with the
    encoder, per-step query projections are position-aware and excluded,
    and the simplified control unit keeps its bias (the published count
    is only reachable with it).
    """
    if d < 1:
        raise ContractError("d must be >= 1")
    if variant is MacVariant.ORIGINAL:
        return {"control": 2 * d * d + 2 * d + 1,
                "read": 3 * d * d + 3 * d + 1,
                "write": 2 * d * d + d}
    return {"control": d * d + 2 * d,
            "read": d * d + 2 * d,
            "write": d * d + d}


def reduction_percent(d: int) -> dict:
    """Per-unit parameter reduction of the simplified variant, rounded to whole %."""
    full = count_parameters(MacVariant.ORIGINAL, d)
    slim = count_parameters(MacVariant.SIMPLIFIED, d)
    return {unit: round(100.0 * (1.0 - slim[unit] / full[unit])) for unit in full}


def _copy_param(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=True)


def embed_smac_into_mac(smac: CellParams) -> CellParams:
    """Construct original-variant parameters that reproduce a simplified cell.

    Given identical inputs (contextual words, step queries, pre-projected
    knowledge base, initial states), the returned cell's forward traces
    match the simplified cell's exactly: the fused linear layers are
    unfolded into [W | I] / [W | 0] blocks and the redundant attention
    biases are zeroed.
    """
    if smac.variant is not MacVariant.SIMPLIFIED:
        raise ContractError("embed_smac_into_mac expects simplified parameters")
    d = smac.config.d
    eye = np.eye(d)

    control = ControlUnitParams(
        W_cq=Tensor(np.concatenate([smac.control.W_cq.data, eye], axis=1), requires_grad=True),
        b_cq=_copy_param(smac.control.b_cq),
        W_ca=_copy_param(smac.control.W_ca),
        b_ca=zeros_param(1),
    )
    read = ReadUnitParams(
        W_I2=Tensor(np.concatenate([smac.read.W_I2.data, eye], axis=1), requires_grad=True),
        b_I2=_copy_param(smac.read.b_I2),
        W_ra=_copy_param(smac.read.W_ra),
        W_m=Tensor(eye.copy(), requires_grad=True),
        b_m=zeros_param(d),
        b_ra=zeros_param(1),
    )
    write = WriteUnitParams(
        W_rm=Tensor(np.concatenate([smac.write.W_rm.data, np.zeros((d, d))], axis=1),
                    requires_grad=True),
        b_rm=_copy_param(smac.write.b_rm),
    )
    return CellParams(MacVariant.ORIGINAL, smac.config, control, read, write,
                      c0=_copy_param(smac.c0), m0=_copy_param(smac.m0))
