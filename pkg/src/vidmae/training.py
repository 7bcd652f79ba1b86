"""Masked-reconstruction training, fine-tuning, and checkpointing.

The pretraining objective averages, over the masked token set only, the
per-token mean of squared (or absolute) differences between predicted
and target pixel patches; visible tokens contribute exactly zero, to the
loss and to every gradient. Optimization is decoupled-weight-decay Adam
with bias correction, linear warmup into a cosine decay, and optional
global-norm gradient clipping.

Every source of randomness inside a loop is derived statelessly from
(seed, step), so a run checkpointed at step k and resumed continues
bit-identically with the uninterrupted run.

Checkpoint file layout: one JSON header line
``{"names", "shapes", "offsets", "step", "epoch", "config_hash", "token_order"}``
followed by the concatenated little-endian float64 blobs, offsets
relative to the first byte after the newline.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, CheckpointNotFound, ConfigError, ContractError, NumericsError
from .masking import make_plan
from .tokenizer import reconstruction_targets

LOSS_KINDS = ("mse", "l1", "l2norm")
TOKEN_ORDER = "t-major"


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    warmup_epochs: int = 20
    epochs: int = 200
    batch: int = 8
    ratio: float = 0.9
    strategy: str = "surgmae"
    alpha: float = 0.5  # static-region budget share for surgmae_static
    loss: str = "mse"
    normalize: bool = True
    grad_clip: float | None = 0.02
    seed: int = 0
    layer_decay: float = 1.0  # fine-tuning only

    def validate(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"mask ratio must lie in (0, 1), got {self.ratio}")
        if self.epochs < self.warmup_epochs:
            raise ConfigError("epochs must be >= warmup_epochs")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        return self


def masked_loss(pred, targets, plan, kind="mse", normalize=True):
    """Reconstruction loss over the masked token set only.

    ``pred`` is (N, patch_dim); targets come from reconstruction_targets.
    Only masked rows are gathered, so a visible-token prediction can
    never move the loss or any gradient. ``l2norm`` is the per-patch
    euclidean-norm variant kept for exactness studies.
    """
    if len(plan.masked) == 0:
        raise ContractError("mask plan has no masked tokens; nothing to reconstruct")
    target = Tensor(targets.pick(normalize)[plan.masked])
    diff = ad.subtract(ad.gather(pred, plan.masked), target)
    if kind == "mse":
        return ad.multiply(diff, diff).mean()
    if kind == "l1":
        return ad.absolute(diff).mean()
    if kind == "l2norm":
        return ad.sqrt(ad.multiply(diff, diff).sum(axis=1)).mean()
    raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {kind!r}")


def lr_schedule(step, total_steps, warmup_steps, base_lr):
    """Linear warmup 0 -> base_lr, then cosine decay to 0."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(param, grad, m, v, t, lr, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update, in place, with bias correction."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ContractError(f"adamw_step shape mismatch: {param.shape} vs {grad.shape}")
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad**2
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    param -= lr * weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Moment state plus per-parameter learning-rate scales over named tensors."""

    def __init__(self, params, betas=(0.9, 0.95), weight_decay=0.05, eps=1e-8, lr_scales=None):
        self.params = dict(params)
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.lr_scales = lr_scales or {}
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self):
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad**2).sum())
        return math.sqrt(total)

    def clip_gradients(self, max_norm):
        """Global-norm clipping; returns the pre-clip norm."""
        norm = self.grad_norm()
        if max_norm is not None and norm > max_norm:
            factor = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * factor
        return norm

    def step(self, lr):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(
                p.data,
                p.grad,
                self.m[name],
                self.v[name],
                self.t,
                lr * self.lr_scales.get(name, 1.0),
                betas=self.betas,
                eps=self.eps,
                weight_decay=self.weight_decay,
            )

    def state_arrays(self):
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, t):
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()
        self.t = t


def layer_scales(depth, layer_decay, param_names):
    """Geometric learning-rate scales for fine-tuning.

    The head (and the encoder's final norm) sits at layer index ``depth``,
    block ``i`` at index ``i``, and the patch embedding alongside block 0,
    so with decay d the scales run head : block_{depth-1} : ... : block_0
    = 1 : d : ... : d^depth.
    """
    scales = {}
    for name in param_names:
        if name.startswith("enc.block"):
            index = int(name.split(".")[1][len("block"):])
        elif name.startswith(("head.", "enc.norm")):
            index = depth
        else:  # patch embedding, learnable positions
            index = 0
        scales[name] = layer_decay ** (depth - index)
    return scales


# -- metric records -----------------------------------------------------------


def record(step, split, metric, value, wall_ms):
    return {"step": int(step), "split": split, "metric": metric, "value": float(value), "wall_ms": wall_ms}


def write_metrics(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _step_rng(seed, salt, step):
    return np.random.default_rng([seed, salt, step])


# -- pretraining --------------------------------------------------------------


def pretrain(dataset, model, cfg: TrainConfig, optimizer=None, start_step=0, stop_step=None, on_step=None):
    """Masked-reconstruction training; returns (metric records, optimizer).

    ``cfg.epochs`` counts optimizer steps here: each step samples a fresh
    batch with replacement, builds one mask plan per clip (motion scores
    recomputed from the current embedding weights, gradients stopped),
    and applies one clipped AdamW update. Deterministic in cfg.seed.
    ``start_step``/``stop_step`` bound the executed range while the
    learning-rate schedule still spans all of ``cfg.epochs``, so a run
    can stop for checkpointing and resume bit-identically.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ContractError("empty pretraining dataset")
    total_steps, warmup_steps = cfg.epochs, cfg.warmup_epochs
    if optimizer is None:
        optimizer = AdamW(model.named_parameters(), betas=cfg.betas, weight_decay=cfg.weight_decay)
    records = []
    for step in range(start_step, total_steps if stop_step is None else min(stop_step, total_steps)):
        begin = time.perf_counter()
        rng = _step_rng(cfg.seed, 11, step)
        batch = rng.integers(0, len(dataset), size=cfg.batch)
        lr = lr_schedule(step, total_steps, warmup_steps, cfg.base_lr)
        try:
            losses = []
            for i in batch:
                clip = dataset[int(i)]
                grid = model.tokens(clip)
                plan = make_plan(cfg.strategy, grid, cfg.ratio, seed=int(rng.integers(2**31)), alpha=cfg.alpha)
                pred = model.decode(model.encode_visible(grid, plan), plan)
                targets = reconstruction_targets(clip, model.cfg.patch, cfg.normalize)
                losses.append(masked_loss(pred, targets, plan, kind=cfg.loss, normalize=cfg.normalize))
            loss = ad.stack(losses).mean()
            optimizer.zero_grad()
            loss.backward()
        except NumericsError as err:
            raise NumericsError(
                f"pretraining aborted at step {step} (lr {lr:.3e}, grad norm {optimizer.grad_norm():.3e}): {err}"
            ) from err
        grad_norm = optimizer.clip_gradients(cfg.grad_clip)
        optimizer.step(lr)
        wall_ms = (time.perf_counter() - begin) * 1000.0
        records.append(record(step, "pretrain", "loss", loss.item(), wall_ms))
        records.append(record(step, "pretrain", "grad_norm", grad_norm, wall_ms))
        if on_step is not None:
            on_step(step, records[-2])
    return records, optimizer


# -- fine-tuning ----------------------------------------------------------------


def finetune(labeled, classifier, cfg: TrainConfig, eval_set=None):
    """Cross-entropy fine-tuning over (clip, label) pairs.

    ``cfg.epochs`` counts dataset passes; layer-wise learning-rate decay
    applies geometric scales to earlier encoder blocks. Returns metric
    records (train loss per step, eval accuracy per epoch if eval_set).
    """
    cfg.validate()
    if len(labeled) == 0:
        raise ContractError("empty fine-tuning dataset")
    params = classifier.named_parameters()
    scales = layer_scales(classifier.cfg.depth, cfg.layer_decay, params)
    optimizer = AdamW(params, betas=cfg.betas, weight_decay=cfg.weight_decay, lr_scales=scales)
    steps_per_epoch = math.ceil(len(labeled) / cfg.batch)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    records = []
    step = 0
    for epoch in range(cfg.epochs):
        order = _step_rng(cfg.seed, 13, epoch).permutation(len(labeled))
        for chunk in (order[i * cfg.batch : (i + 1) * cfg.batch] for i in range(steps_per_epoch)):
            begin = time.perf_counter()
            lr = lr_schedule(step, total, warmup, cfg.base_lr)
            logits = ad.concatenate(
                [ad.reshape(classifier.logits(labeled[int(i)][0]), (1, classifier.n_classes)) for i in chunk]
            )
            labels = np.array([labeled[int(i)][1] for i in chunk])
            loss = ad.cross_entropy(logits, labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.clip_gradients(cfg.grad_clip)
            optimizer.step(lr)
            records.append(record(step, "finetune", "loss", loss.item(), (time.perf_counter() - begin) * 1000.0))
            step += 1
        if eval_set is not None:
            acc = classify_accuracy(classifier, eval_set)
            records.append(record(step, "finetune", "top1", acc, 0.0))
    return records


def classify_accuracy(classifier, labeled):
    hits = 0
    for clip, label in labeled:
        logits = classifier.logits(clip).data
        hits += int(np.argmax(logits) == label)
    return hits / len(labeled)


def train_temporal(sequences, gru, cfg: TrainConfig):
    """Train the Bi-GRU on frozen (features, labels) sequences, one step per video."""
    cfg.validate()
    if len(sequences) == 0:
        raise ContractError("no feature sequences to train on")
    optimizer = AdamW(gru.named_parameters(), betas=cfg.betas, weight_decay=cfg.weight_decay)
    records = []
    step = 0
    for epoch in range(cfg.epochs):
        order = _step_rng(cfg.seed, 17, epoch).permutation(len(sequences))
        for i in order:
            begin = time.perf_counter()
            features, labels = sequences[int(i)]
            loss = ad.cross_entropy(gru.forward(features), np.asarray(labels))
            optimizer.zero_grad()
            loss.backward()
            optimizer.clip_gradients(cfg.grad_clip)
            optimizer.step(cfg.base_lr)
            records.append(record(step, "temporal", "loss", loss.item(), (time.perf_counter() - begin) * 1000.0))
            step += 1
    return records


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, named_arrays, step=0, epoch=0, config_hash=""):
    """Write named float64 arrays with a one-line JSON header."""
    names = sorted(named_arrays)
    header = {
        "names": names,
        "shapes": {n: list(named_arrays[n].shape) for n in names},
        "offsets": {},
        "step": int(step),
        "epoch": int(epoch),
        "config_hash": config_hash,
        "token_order": TOKEN_ORDER,
    }
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(named_arrays[name], dtype="<f8")
        header["offsets"][name] = offset
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (header dict, name -> float64 array)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointNotFound(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"no header line in {path}")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable checkpoint header in {path}: {err}") from err
    body = raw[newline + 1 :]
    arrays = {}
    for name in header["names"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        start = header["offsets"][name]
        end = start + count * 8
        if end > len(body):
            raise CheckpointError(f"checkpoint truncated while reading tensor {name!r}")
        arrays[name] = np.frombuffer(body[start:end], dtype="<f8").reshape(shape).copy()
    return header, arrays


def model_checkpoint_arrays(model, optimizer=None):
    arrays = {f"param.{name}": p.data for name, p in model.named_parameters().items()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    return arrays


def load_model_arrays(model, arrays, strict=True):
    """Copy ``param.*`` arrays into the model; mismatch names the offender."""
    params = model.named_parameters()
    for name, tensor in params.items():
        key = f"param.{name}"
        if key not in arrays:
            if strict:
                raise CheckpointError(f"checkpoint is missing tensor {key!r}")
            continue
        if arrays[key].shape != tensor.data.shape:
            raise CheckpointError(
                f"checkpoint tensor {key!r} has shape {arrays[key].shape}, model expects {tensor.data.shape}"
            )
        tensor.data[...] = arrays[key]
    return model


def save_training_state(path, model, optimizer, step, cfg_hash):
    return save_checkpoint(path, model_checkpoint_arrays(model, optimizer), step=step, config_hash=cfg_hash)


def resume_training_state(path, model, cfg: TrainConfig):
    """Load model + optimizer moments; returns (optimizer, step)."""
    header, arrays = load_checkpoint(path)
    load_model_arrays(model, arrays)
    optimizer = AdamW(model.named_parameters(), betas=cfg.betas, weight_decay=cfg.weight_decay)
    try:
        optimizer.load_state_arrays(arrays, t=header["step"])
    except KeyError as err:
        raise CheckpointError(f"checkpoint has no optimizer state for {err.args[0]!r}") from err
    return optimizer, header["step"]
