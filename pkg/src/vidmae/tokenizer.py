"""Tubelet tokenization, positional embeddings, and reconstruction targets.

A clip is cut into non-overlapping pt x ph x pw tubelets; each tubelet is
flattened (tubelet-frame, row, column, channel order) and linearly mapped
to the embedding dim, which is exactly a stride-equals-kernel 3D
convolution. Token enumeration order is fixed and load-bearing for mask
plans and checkpoints: temporal slice major, then row, then column, i.e.
``k = t * nh * nw + r * nw + c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, matmul
from .errors import ConfigError

POSITIONAL_MODES = ("separable_fixed", "joint_fixed")


def token_count(frames, height, width, pt, ph, pw):
    """Number of tokens for a clip geometry; errors on non-divisible patches."""
    if frames % pt or height % ph or width % pw:
        raise ConfigError(
            f"geometry {frames}x{height}x{width} not divisible by patch {pt}x{ph}x{pw}"
        )
    return (frames // pt) * (height // ph) * (width // pw)


@dataclass
class TokenGrid:
    """Per-clip token embeddings plus the (t, r, c) <-> flat index map."""

    tokens: Tensor  # (N, dim)
    nt: int
    nh: int
    nw: int
    positional: bool = False  # True once positional embeddings were added

    @property
    def n(self):
        return self.nt * self.nh * self.nw

    @property
    def dim(self):
        return self.tokens.shape[1]

    def flat_index(self, t, r, c):
        if not (0 <= t < self.nt and 0 <= r < self.nh and 0 <= c < self.nw):
            raise ConfigError(f"token coords ({t},{r},{c}) outside {self.nt}x{self.nh}x{self.nw}")
        return (t * self.nh + r) * self.nw + c

    def coords(self, k):
        if not 0 <= k < self.n:
            raise ConfigError(f"flat index {k} outside [0, {self.n})")
        t, rem = divmod(k, self.nh * self.nw)
        r, c = divmod(rem, self.nw)
        return t, r, c


def extract_patches(values, patch):
    """Flatten a (T, 3, H, W) array into (N, pt*ph*pw*3) tubelet rows."""
    pt, ph, pw = patch
    t, c, h, w = values.shape
    n = token_count(t, h, w, pt, ph, pw)
    nt, nh, nw = t // pt, h // ph, w // pw
    cut = values.reshape(nt, pt, c, nh, ph, nw, pw)
    cut = cut.transpose(0, 3, 5, 1, 4, 6, 2)  # (nt, nh, nw, pt, ph, pw, c)
    return np.ascontiguousarray(cut).reshape(n, pt * ph * pw * c)


class PatchEmbed:
    """Learnable per-tubelet linear map (weights + optional bias)."""

    def __init__(self, patch, dim, rng, bias=True):
        pt, ph, pw = patch
        self.patch = (pt, ph, pw)
        self.dim = dim
        patch_dim = pt * ph * pw * 3
        self.weight = Tensor(rng.normal(0.0, 0.02, size=(patch_dim, dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True) if bias else None

    def parameters(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, clip):
        return patch_embed(clip, self)


def patch_embed(clip, weights):
    """Tokenize a clip with the given PatchEmbed weights (differentiable)."""
    pt, ph, pw = weights.patch
    t, _, h, w = clip.values.shape
    token_count(t, h, w, pt, ph, pw)
    patches = Tensor(extract_patches(clip.values, weights.patch))
    tokens = matmul(patches, weights.weight)
    if weights.bias is not None:
        tokens = add(tokens, weights.bias)
    return TokenGrid(tokens=tokens, nt=t // pt, nh=h // ph, nw=w // pw)


def sincos_1d(positions, dim):
    """Interleaved sin/cos table: out[p, 2i] = sin(p * f_i), out[p, 2i+1] = cos."""
    if dim % 2:
        raise ConfigError(f"sin/cos embedding needs an even dim, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = 1.0 / 10000.0 ** (2.0 * np.arange(dim // 2) / dim)
    angles = positions[:, None] * freqs[None, :]
    out = np.empty((positions.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def spatial_table(nh, nw, dim):
    """2D sin/cos: first half of the dims encodes the row, second half the column."""
    if dim % 4:
        raise ConfigError(f"separable spatial embedding needs dim divisible by 4, got {dim}")
    rows = sincos_1d(np.arange(nh), dim // 2)
    cols = sincos_1d(np.arange(nw), dim // 2)
    table = np.concatenate(
        [
            np.repeat(rows, nw, axis=0),
            np.tile(cols, (nh, 1)),
        ],
        axis=1,
    )
    return table  # (nh*nw, dim), row-major over (r, c)


def positional_table(nt, nh, nw, dim, mode):
    """Fixed positional table for all N tokens in flat enumeration order."""
    n = nt * nh * nw
    if mode == "separable_fixed":
        spatial = spatial_table(nh, nw, dim)  # (nh*nw, dim)
        temporal = sincos_1d(np.arange(nt), dim)  # (nt, dim)
        return np.tile(spatial, (nt, 1)) + np.repeat(temporal, nh * nw, axis=0)
    if mode == "joint_fixed":
        return sincos_1d(np.arange(n), dim)
    raise ConfigError(f"positional mode must be one of {POSITIONAL_MODES}, got {mode!r}")


def positional_embedding(grid, mode="separable_fixed"):
    """Add the fixed positional table; content plays no role in the table."""
    table = positional_table(grid.nt, grid.nh, grid.nw, grid.dim, mode)
    return TokenGrid(
        tokens=add(grid.tokens, Tensor(table)),
        nt=grid.nt,
        nh=grid.nh,
        nw=grid.nw,
        positional=True,
    )


NORM_EPS = 1e-8


@dataclass
class PatchTargets:
    """Raw and per-patch standardized pixel targets, with the statistics kept."""

    raw: np.ndarray  # (N, patch_dim)
    normalized: np.ndarray
    mean: np.ndarray  # (N,)
    var: np.ndarray  # (N,)

    def pick(self, normalize):
        return self.normalized if normalize else self.raw


def reconstruction_targets(clip, patch, normalize=True):
    """Per-token flattened pixel patches, optionally standardized per patch.

    Standardization is (x - mean) / sqrt(var + 1e-8); the epsilon keeps
    constant patches at zero instead of blowing up.
    """
    del normalize  # both variants are materialized; ``pick`` selects one
    raw = extract_patches(clip.values, patch)
    mean = raw.mean(axis=1)
    var = raw.var(axis=1)
    normalized = (raw - mean[:, None]) / np.sqrt(var + NORM_EPS)[:, None]
    return PatchTargets(raw=raw, normalized=normalized, mean=mean, var=var)
