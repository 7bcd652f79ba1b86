"""Joint space-time attention encoder, light decoder, classifier, and Bi-GRU.

The autoencoder encodes only the visible tokens of a mask plan with full
self-attention over space and time jointly, then projects the latents to
the decoder width, fills every masked slot with one shared learnable mask
token, restores canonical token order from the plan, adds fixed
positional embeddings for all positions, and decodes to per-token pixel
patches. The classifier reuses the same patch embedding and encoder on
all tokens (no mask plan is ever consulted), mean-pools the latents, and
applies a linear head; the Bi-GRU consumes per-clip pooled features of a
long video and emits per-clip phase logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .tokenizer import PatchEmbed, patch_embed, positional_embedding, positional_table, token_count


@dataclass
class ModelConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 2
    patch: tuple = (2, 8, 8)
    frames: int = 16
    height: int = 64
    width: int = 64
    pos_mode: str = "separable_fixed"
    patch_bias: bool = True
    learnable_pos: bool = False

    def validate(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}"
            )
        if self.decoder_depth < 1:
            raise ConfigError("decoder_depth must be >= 1")
        token_count(self.frames, self.height, self.width, *self.patch)
        return self

    @property
    def tokens(self):
        return token_count(self.frames, self.height, self.width, *self.patch)

    @property
    def grid_shape(self):
        pt, ph, pw = self.patch
        return self.frames // pt, self.height // ph, self.width // pw

    @property
    def patch_dim(self):
        pt, ph, pw = self.patch
        return pt * ph * pw * 3

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


# "tiny" is the tested desk-scale preset; "vit-b" reproduces the reference
# geometry (1568 tokens) and exists for configuration only.
PRESETS = {
    "tiny": ModelConfig(),
    "vit-b": ModelConfig(
        dim=768,
        depth=12,
        heads=12,
        decoder_dim=384,
        decoder_depth=4,
        decoder_heads=6,
        patch=(2, 16, 16),
        frames=16,
        height=224,
        width=224,
    ),
}


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Linear:
    def __init__(self, rng, d_in, d_out):
        self.weight = Tensor(trunc_normal(rng, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class LayerNorm:
    def __init__(self, dim):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class Attention:
    """Multi-head self-attention over all input tokens (space and time jointly)."""

    def __init__(self, rng, dim, heads):
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x):
        n, dim = x.shape
        fused = ad.reshape(self.qkv(x), (n, 3, self.heads, self.head_dim))
        fused = ad.transpose(fused, (1, 2, 0, 3))  # (3, heads, n, head_dim)
        q = ad.reshape(ad.gather(fused, [0]), (self.heads, n, self.head_dim))
        k = ad.reshape(ad.gather(fused, [1]), (self.heads, n, self.head_dim))
        v = ad.reshape(ad.gather(fused, [2]), (self.heads, n, self.head_dim))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.head_dim))
        mixed = ad.matmul(ad.softmax(scores), v)  # (heads, n, head_dim)
        merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (n, dim))
        return self.proj(merged)

    def parameters(self):
        return {f"qkv.{k}": v for k, v in self.qkv.parameters().items()} | {
            f"proj.{k}": v for k, v in self.proj.parameters().items()
        }


class Block:
    """Pre-norm transformer block with a GELU MLP."""

    def __init__(self, rng, dim, heads, mlp_ratio):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim)

    def __call__(self, x):
        x = ad.add(x, self.attn(self.ln1(x)))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))

    def parameters(self):
        out = {}
        for prefix, mod in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2), ("fc1", self.fc1), ("fc2", self.fc2)):
            out.update({f"{prefix}.{k}": v for k, v in mod.parameters().items()})
        return out


class TransformerStack:
    def __init__(self, rng, dim, depth, heads, mlp_ratio):
        self.blocks = [Block(rng, dim, heads, mlp_ratio) for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def __call__(self, x):
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def parameters(self):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in block.parameters().items()})
        out.update({f"norm.{k}": v for k, v in self.norm.parameters().items()})
        return out


def _collect(groups):
    out = {}
    for prefix, params in groups:
        out.update({f"{prefix}.{k}": v for k, v in params.items()})
    return out


class MaskedAutoencoder:
    """Visible-token encoder plus mask-token decoder reconstructing pixel patches."""

    def __init__(self, cfg: ModelConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 404])
        self.patch = PatchEmbed(cfg.patch, cfg.dim, rng, bias=cfg.patch_bias)
        self.encoder = TransformerStack(rng, cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio)
        self.to_decoder = Linear(rng, cfg.dim, cfg.decoder_dim)
        self.mask_token = Tensor(rng.normal(0.0, 0.02, size=cfg.decoder_dim), requires_grad=True)
        self.decoder = TransformerStack(rng, cfg.decoder_dim, cfg.decoder_depth, cfg.decoder_heads, cfg.mlp_ratio)
        self.recon = Linear(rng, cfg.decoder_dim, cfg.patch_dim)
        nt, nh, nw = cfg.grid_shape
        self.pos_enc = positional_table(nt, nh, nw, cfg.dim, cfg.pos_mode)
        self.pos_dec = positional_table(nt, nh, nw, cfg.decoder_dim, cfg.pos_mode)
        self.pos_learn = (
            Tensor(np.zeros((cfg.tokens, cfg.dim)), requires_grad=True) if cfg.learnable_pos else None
        )

    def tokens(self, clip):
        """Pre-positional token grid for a clip (the scoring input)."""
        return patch_embed(clip, self.patch)

    def add_positions(self, grid):
        grid = positional_embedding(grid, self.cfg.pos_mode)
        if self.pos_learn is not None:
            grid.tokens = ad.add(grid.tokens, self.pos_learn)
        return grid

    def encode(self, tokens):
        """Run the encoder over already-positioned tokens (any count >= 1)."""
        if tokens.shape[0] < 1:
            raise ContractError("cannot encode an empty token set")
        return self.encoder(tokens)

    def encode_visible(self, grid, plan):
        positioned = self.add_positions(grid)
        return self.encode(ad.gather(positioned.tokens, plan.visible))

    def decode(self, latents, plan, order=None):
        """Reconstruct all N token patches from visible latents and the plan.

        ``order`` gives the token position of each latent row and defaults
        to ``plan.visible``; any consistent (latents, order) pairing yields
        bit-identical output because rows are scattered to canonical
        positions before any decoder arithmetic.
        """
        order = plan.visible if order is None else np.asarray(order)
        if latents.shape[0] != len(order):
            raise ContractError(
                f"plan expects {len(order)} visible latents, got {latents.shape[0]}"
            )
        n = plan.n
        projected = self.to_decoder(latents)
        filled = ad.scatter(projected, order, n)
        if len(plan.masked):
            ones = Tensor(np.ones((len(plan.masked), 1)))
            mask_rows = ad.matmul(ones, ad.reshape(self.mask_token, (1, self.cfg.decoder_dim)))
            filled = ad.add(filled, ad.scatter(mask_rows, plan.masked, n))
        decoded = self.decoder(ad.add(filled, Tensor(self.pos_dec)))
        return self.recon(decoded)

    def reconstruct(self, clip, plan):
        grid = self.tokens(clip)
        return self.decode(self.encode_visible(grid, plan), plan)

    def named_parameters(self):
        groups = [
            ("patch", self.patch.parameters()),
            ("enc", self.encoder.parameters()),
            ("dec_embed", self.to_decoder.parameters()),
            ("dec", self.decoder.parameters()),
            ("recon", self.recon.parameters()),
        ]
        out = _collect(groups)
        out["mask_token"] = self.mask_token
        if self.pos_learn is not None:
            out["pos_learn"] = self.pos_learn
        return out


class Classifier:
    """Patch embed + encoder + mean pool + linear head; ignores masking entirely."""

    def __init__(self, cfg: ModelConfig, n_classes, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.n_classes = n_classes
        rng = np.random.default_rng([seed, 505])
        self.patch = PatchEmbed(cfg.patch, cfg.dim, rng, bias=cfg.patch_bias)
        self.encoder = TransformerStack(rng, cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio)
        self.head = Linear(rng, cfg.dim, n_classes)
        self.pos_learn = (
            Tensor(np.zeros((cfg.tokens, cfg.dim)), requires_grad=True) if cfg.learnable_pos else None
        )

    def adopt_encoder(self, autoencoder):
        """Share patch-embedding and encoder weights with a pretrained autoencoder."""
        self.patch = autoencoder.patch
        self.encoder = autoencoder.encoder
        self.pos_learn = autoencoder.pos_learn
        return self

    def feature(self, clip):
        """Mean-pooled encoder latent for one clip, as a (1, dim) tensor."""
        grid = patch_embed(clip, self.patch)
        grid = positional_embedding(grid, self.cfg.pos_mode)
        tokens = grid.tokens if self.pos_learn is None else ad.add(grid.tokens, self.pos_learn)
        latents = self.encoder(tokens)
        return ad.reshape(latents.mean(axis=0), (1, self.cfg.dim))

    def logits(self, clip):
        """Class logits for one clip, shape (n_classes,)."""
        return ad.reshape(self.head(self.feature(clip)), (self.n_classes,))

    def named_parameters(self):
        out = _collect(
            [("patch", self.patch.parameters()), ("enc", self.encoder.parameters()), ("head", self.head.parameters())]
        )
        if self.pos_learn is not None:
            out["pos_learn"] = self.pos_learn
        return out


def extract_features(classifier, video):
    """Per-clip mean-pooled latents of a long video, as an (L, dim) array."""
    if len(video.clips) == 0:
        raise ContractError("cannot extract features from an empty video")
    return np.stack([classifier.feature(clip).data[0] for clip in video.clips])


_GRU_GATES = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")


class BiGRU:
    """Single-layer bidirectional GRU over a feature sequence, with a linear head."""

    def __init__(self, input_dim, hidden, n_classes, seed=0):
        self.input_dim = input_dim
        self.hidden = hidden
        self.n_classes = n_classes
        rng = np.random.default_rng([seed, 606])
        self.fwd = self._direction_params(rng)
        self.bwd = self._direction_params(rng)
        self.head = Linear(rng, 2 * hidden, n_classes)

    def _direction_params(self, rng):
        params = {}
        for gate in _GRU_GATES:
            if gate.startswith("w"):
                params[gate] = Tensor(trunc_normal(rng, (self.input_dim, self.hidden)), requires_grad=True)
            elif gate.startswith("u"):
                params[gate] = Tensor(trunc_normal(rng, (self.hidden, self.hidden)), requires_grad=True)
            else:
                params[gate] = Tensor(np.zeros(self.hidden), requires_grad=True)
        return params

    def run_direction(self, params, xs):
        """Hidden states (list of (1, hidden)) of one direction over xs."""
        h = Tensor(np.zeros((1, self.hidden)))
        states = []
        for x in xs:
            z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params["wz"]), ad.matmul(h, params["uz"])), params["bz"]))
            r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params["wr"]), ad.matmul(h, params["ur"])), params["br"]))
            cand = ad.tanh(
                ad.add(ad.add(ad.matmul(x, params["wh"]), ad.matmul(ad.multiply(r, h), params["uh"])), params["bh"])
            )
            h = ad.add(ad.multiply(ad.subtract(1.0, z), h), ad.multiply(z, cand))
            states.append(h)
        return states

    def _joined_states(self, features):
        xs = [Tensor(row.reshape(1, -1)) for row in np.asarray(features, dtype=np.float64)]
        forward_states = self.run_direction(self.fwd, xs)
        backward_states = self.run_direction(self.bwd, xs[::-1])[::-1]
        joined = [ad.concatenate([f, b], axis=1) for f, b in zip(forward_states, backward_states)]
        return ad.concatenate(joined, axis=0)

    def hidden_states(self, features):
        """Concatenated (forward, backward) hidden states, (L, 2*hidden) array."""
        return self._joined_states(features).data

    def forward(self, features):
        """Per-step phase logits, shape (len(features), n_classes)."""
        return self.head(self._joined_states(features))

    def named_parameters(self):
        out = {f"fwd.{k}": v for k, v in self.fwd.items()}
        out.update({f"bwd.{k}": v for k, v in self.bwd.items()})
        out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return out
