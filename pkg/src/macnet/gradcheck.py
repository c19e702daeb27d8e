"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cell import MacVariant
from .encoder import MacModel, ModelConfig
from .microgen import ANSWER_TOKENS, FEATURE_WIDTH


def finite_difference_check(forward_fn, params, n_coords: int = 100,
                            h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `forward_fn` recomputes the scalar loss from the current parameter
    values; `params` is a list of (name, Tensor) leaves.  `n_coords`
    coordinates are sampled across all parameters.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = None
    loss = forward_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}

    sizes = np.array([p.size for _, p in params])
    probs = sizes / sizes.sum()
    worst = 0.0
    with T.no_grad():
        for _ in range(n_coords):
            which = rng.choice(len(params), p=probs)
            name, p = params[which]
            flat_index = rng.integers(p.size)
            idx = np.unravel_index(flat_index, p.shape)
            original = p.data[idx]
            p.data[idx] = original + h
            up = forward_fn().item()
            p.data[idx] = original - h
            down = forward_fn().item()
            p.data[idx] = original
            fd = (up - down) / (2 * h)
            an = analytic[name][idx]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
    return worst


def end_to_end_check(variant: str, d: int = 8, p: int = 2, n_coords: int = 200,
                     seed: int = 0, H: int = 3, W: int = 3, S: int = 5,
                     batch: int = 2) -> float:
    """Finite-difference sweep through encoder, reasoning steps, classifier
    and cross-entropy on a tiny random batch."""
    rng = np.random.default_rng(seed)
    vocab_size = 12
    cfg = ModelConfig(d, p, H, W, S, FEATURE_WIDTH, vocab_size, len(ANSWER_TOKENS))
    model = MacModel.create(cfg, MacVariant.parse(variant), rng)
    tokens = rng.integers(2, vocab_size, size=(batch, S))
    lengths = rng.integers(2, S + 1, size=batch)
    grids = rng.random((batch, H, W, FEATURE_WIDTH))
    labels = rng.integers(0, len(ANSWER_TOKENS), size=batch)
    params = list(model.named_parameters())

    def forward():
        logits, _ = model.forward(tokens, lengths, grids)
        return T.cross_entropy_logits(logits, labels)

    return finite_difference_check(forward, params, n_coords=n_coords, seed=seed + 1)
