"""Mask plans: random, tube, frame, and motion-ranked top-k token sampling.

The motion-ranked sampler ("surgmae") scores every token by the euclidean
distance between its embedding and the embedding at the same spatial
position in the previous temporal slice, then keeps the highest-scoring
tokens visible. Scores are computed on pre-positional embeddings and no
gradient ever flows through them; token selection is non-differentiable
by contract.

Rounding conventions (load-bearing, tested):
  * random / surgmae mask exactly floor(ratio * N) tokens,
  * tube masks floor(ratio * nh * nw) spatial cells, every slice,
  * frame masks floor(ratio * nt) whole slices,
so exact masked counts differ slightly across strategies at equal ratio.
Score ties break by ascending flat token index.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

STRATEGIES = ("random", "tube", "frame", "surgmae", "surgmae_static")


@dataclass
class MaskPlan:
    """Disjoint visible/masked token index sets plus how they were chosen."""

    n: int
    ratio: float
    strategy: str
    visible: np.ndarray
    masked: np.ndarray
    seed: int | None = None
    scores: np.ndarray | None = None  # per-token, motion-ranked strategies only

    def validate(self):
        merged = np.concatenate([self.visible, self.masked])
        if len(np.unique(merged)) != self.n or merged.size != self.n:
            raise ContractError("visible/masked do not partition the token set")
        return self

    def to_json(self):
        return json.dumps(
            {
                "n": int(self.n),
                "ratio": float(self.ratio),
                "strategy": self.strategy,
                "visible": [int(i) for i in self.visible],
                "seed": None if self.seed is None else int(self.seed),
            }
        )


@dataclass
class ScoreField:
    """Per-token motion scores s(t, r, c) and the rule that produced each slice."""

    values: np.ndarray  # (nt, nh, nw), >= 0
    slice_rule: list[str]  # "adjacent-diff" or "backfill" per temporal slice

    def flat(self):
        return self.values.reshape(-1)  # t-major, matching token order


def _check_ratio(ratio):
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"masking ratio must lie in (0, 1), got {ratio}")


def _plan(n, ratio, strategy, visible, seed=None, scores=None):
    visible = np.sort(np.asarray(visible, dtype=np.intp))
    masked = np.setdiff1d(np.arange(n, dtype=np.intp), visible, assume_unique=False)
    return MaskPlan(
        n=n, ratio=ratio, strategy=strategy, visible=visible, masked=masked, seed=seed, scores=scores
    )


def score_tokens(grid):
    """Adjacent-slice embedding distances at fixed spatial positions.

    ``s(t) = ||X(t) - X(t-1)||`` for t >= 1; the first slice has no
    predecessor and is backfilled with the second slice's scores so its
    tokens compete on the same motion evidence. Reads raw values only:
    the scores never join the autodiff graph.
    """
    if grid.positional:
        raise ContractError("scores must be computed on pre-positional embeddings")
    if grid.nt < 2:
        raise ConfigError("scoring needs at least 2 temporal slices")
    emb = grid.tokens.data.reshape(grid.nt, grid.nh, grid.nw, grid.dim)
    diffs = np.linalg.norm(emb[1:] - emb[:-1], axis=-1)  # (nt-1, nh, nw)
    values = np.concatenate([diffs[:1], diffs], axis=0)
    return ScoreField(values=values, slice_rule=["backfill"] + ["adjacent-diff"] * (grid.nt - 1))


def _ranked_by_score(scores):
    """Token order: descending score, ties by ascending flat index."""
    n = scores.size
    return np.lexsort((np.arange(n), -scores))


def mask_surgmae(grid, ratio, seed=None):
    """Keep the top-(N - floor(ratio*N)) tokens by motion score visible.

    Fully deterministic: the seed is accepted for interface uniformity
    but never consulted (selection is rank-based). Grids with a single
    temporal slice fall back to random masking with a logged warning.
    """
    _check_ratio(ratio)
    if grid.nt < 2:
        log.warning("surgmae masking needs >=2 temporal slices; falling back to random")
        return mask_random(grid.n, ratio, seed if seed is not None else 0)
    scores = score_tokens(grid).flat()
    n = grid.n
    n_visible = n - math.floor(ratio * n)
    order = _ranked_by_score(scores)
    return _plan(n, ratio, "surgmae", order[:n_visible], seed=seed, scores=scores)


def mask_surgmae_static(grid, ratio, alpha=0.5, seed=0):
    """Motion-ranked sampling that reserves part of the budget for static regions.

    ``ceil(alpha * n_visible)`` tokens come from the top of the score
    ranking; the rest are drawn uniformly without replacement (seeded)
    from the remaining tokens. ``alpha=1`` degenerates to mask_surgmae,
    ``alpha=0`` to a uniform random visible set.
    """
    _check_ratio(ratio)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if grid.nt < 2:
        log.warning("surgmae_static masking needs >=2 temporal slices; falling back to random")
        return mask_random(grid.n, ratio, seed)
    scores = score_tokens(grid).flat()
    n = grid.n
    n_visible = n - math.floor(ratio * n)
    n_top = math.ceil(alpha * n_visible)
    order = _ranked_by_score(scores)
    top = order[:n_top]
    rng = np.random.default_rng(seed)
    rest = rng.choice(order[n_top:], size=n_visible - n_top, replace=False)
    return _plan(n, ratio, "surgmae_static", np.concatenate([top, rest]), seed=seed, scores=scores)


def mask_random(n, ratio, seed):
    """Uniform sample of floor(ratio*N) masked tokens, without replacement."""
    _check_ratio(ratio)
    rng = np.random.default_rng(seed)
    n_masked = math.floor(ratio * n)
    masked = rng.choice(n, size=n_masked, replace=False)
    visible = np.setdiff1d(np.arange(n, dtype=np.intp), masked)
    return _plan(n, ratio, "random", visible, seed=seed)


def mask_tube(grid, ratio, seed):
    """Mask floor(ratio * nh * nw) spatial cells across every temporal slice."""
    _check_ratio(ratio)
    cells = grid.nh * grid.nw
    rng = np.random.default_rng(seed)
    masked_cells = rng.choice(cells, size=math.floor(ratio * cells), replace=False)
    keep = np.setdiff1d(np.arange(cells), masked_cells)
    visible = (np.arange(grid.nt)[:, None] * cells + keep[None, :]).reshape(-1)
    return _plan(grid.n, ratio, "tube", visible, seed=seed)


def mask_frame(grid, ratio, seed=None, past=False):
    """Mask floor(ratio * nt) whole temporal slices: the last ones (future)
    by default, the first ones with ``past=True``."""
    _check_ratio(ratio)
    n_slices = math.floor(ratio * grid.nt)
    cells = grid.nh * grid.nw
    slices = np.arange(grid.nt)
    keep = slices[n_slices:] if past else slices[: grid.nt - n_slices]
    visible = (keep[:, None] * cells + np.arange(cells)[None, :]).reshape(-1)
    return _plan(grid.n, ratio, "frame", visible, seed=seed)


def make_plan(strategy, grid, ratio, seed, alpha=0.5):
    """Dispatch by strategy tag (the CLI-facing strategy names)."""
    if strategy == "random":
        return mask_random(grid.n, ratio, seed)
    if strategy == "tube":
        return mask_tube(grid, ratio, seed)
    if strategy == "frame":
        return mask_frame(grid, ratio, seed)
    if strategy == "surgmae":
        return mask_surgmae(grid, ratio, seed)
    if strategy == "surgmae_static":
        return mask_surgmae_static(grid, ratio, alpha=alpha, seed=seed)
    raise ConfigError(f"unknown masking strategy {strategy!r}; choose from {STRATEGIES}")
