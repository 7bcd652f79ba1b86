"""Metrics, masking diagnostics, and the strategy/ratio ablation harness.

Average precision ranks instances by descending score (ties broken by
ascending original index) and averages precision at each positive rank;
mAP is the unweighted macro mean over classes with at least one positive.
The overlap diagnostic measures how often visible tokens land on moving
content, against the motion-token fraction a uniform sampler would hit
in expectation.

The ablation harness runs the full two-stage protocol per axis value:
pretrain on unlabeled clips, fine-tune a clip classifier on a labeled
video fraction, extract full-video features, train the Bi-GRU, and
report mAP / top-1 on held-out videos.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import gen_long_video
from .errors import ConfigError, ContractError
from .masking import make_plan
from .model import BiGRU, Classifier, MaskedAutoencoder, ModelConfig, extract_features
from .training import TrainConfig, finetune, pretrain, train_temporal

ABLATION_AXES = ("ratio", "decoder_depth", "strategy", "steps", "loss")

# axis values mirroring the reference ablation grids
ABLATION_DEFAULTS = {
    "strategy": ["random", "tube", "frame", "surgmae"],
    "ratio": [0.80, 0.85, 0.90, 0.95],
    "decoder_depth": [1, 2, 4, 8],
    "steps": [50, 100, 200, 400],
    "loss": ["mse_norm", "mse_raw", "l1_norm", "l1_raw"],
}


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    top1: float
    excluded_classes: list = field(default_factory=list)
    overlap: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "map": self.map,
            "top1": self.top1,
            "excluded_classes": self.excluded_classes,
            "overlap": self.overlap,
            "meta": self.meta,
        }


def average_precision(scores, labels):
    """AP = (1/P) * sum over positive ranks of precision@rank.

    Instances sort by descending score; equal scores keep ascending
    original index. Requires at least one positive label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    n_pos = int((labels != 0).sum())
    if n_pos == 0:
        raise ContractError("average precision is undefined without a positive instance")
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranked = labels[order] != 0
    cumulative = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    return float((cumulative[ranks - 1] / ranks).sum() / n_pos)


def mean_average_precision(score_matrix, labels):
    """Macro mAP over classes with >= 1 positive; returns (map, per-class, excluded)."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    n, n_classes = score_matrix.shape
    if labels.shape != (n,):
        raise ContractError("one label per score row required")
    per_class = {}
    excluded = []
    for cls in range(n_classes):
        binary = (labels == cls).astype(int)
        if binary.sum() == 0:
            excluded.append(cls)
            continue
        per_class[cls] = average_precision(score_matrix[:, cls], binary)
    if not per_class:
        raise ContractError("no class has a positive instance")
    return float(np.mean(list(per_class.values()))), per_class, excluded


def top1(logits, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ContractError(f"logits {logits.shape} do not match labels {labels.shape}")
    return float((np.argmax(logits, axis=1) == labels).mean())


def motion_token_indicator(motion_mask, patch):
    """Per-token flag: does the tubelet intersect moving-object support?"""
    pt, ph, pw = patch
    t, h, w = motion_mask.shape
    nt, nh, nw = t // pt, h // ph, w // pw
    cells = motion_mask.reshape(nt, pt, nh, ph, nw, pw)
    return cells.any(axis=(1, 3, 5)).reshape(-1)


def mask_overlap_diagnostic(plan, motion_mask, patch):
    """Visible-token motion overlap vs the all-token motion fraction."""
    if motion_mask is None:
        raise ContractError("clip has no motion mask; overlap diagnostic unavailable")
    motion = motion_token_indicator(motion_mask, patch)
    if motion.size != plan.n:
        raise ContractError(f"plan covers {plan.n} tokens but the clip yields {motion.size}")
    overlap = float(motion[plan.visible].mean()) if len(plan.visible) else 0.0
    return {
        "overlap": overlap,
        "motion_fraction": float(motion.mean()),
        "n_visible": int(len(plan.visible)),
        "n_motion_tokens": int(motion.sum()),
        "strategy": plan.strategy,
    }


# -- two-stage pipeline ---------------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything one end-to-end run needs: data, model, and stage configs."""

    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=200, warmup_epochs=20))
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=5, warmup_epochs=1, base_lr=6e-4, layer_decay=0.65)
    )
    temporal: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=25, warmup_epochs=0, base_lr=1e-3))
    n_videos: int = 10
    n_phases: int = 4
    clips_per_phase: tuple = (3, 5)
    label_fraction: float = 0.05
    gru_hidden: int = 64
    seed: int = 0

    def generate_videos(self):
        return [
            gen_long_video(
                self.seed * 1000 + i,
                n_phases=self.n_phases,
                clips_per_phase_range=self.clips_per_phase,
                frames=self.model.frames,
                height=self.model.height,
                width=self.model.width,
                patch=self.model.patch,
                video_id=f"video-{self.seed}-{i:03d}",
            )
            for i in range(self.n_videos)
        ]


def split_videos(videos, seed, test_fraction=0.2):
    """Seeded train/test split at video granularity (held-out videos)."""
    rng = np.random.default_rng([seed, 71])
    order = rng.permutation(len(videos))
    n_test = max(1, round(test_fraction * len(videos)))
    test_idx = set(order[:n_test].tolist())
    train = [v for i, v in enumerate(videos) if i not in test_idx]
    test = [v for i, v in enumerate(videos) if i in test_idx]
    return train, test


def label_subset(train_videos, fraction, seed):
    """Seeded low-data subset: a fraction of the training videos keeps labels."""
    rng = np.random.default_rng([seed, 73])
    n_labeled = max(1, math.floor(fraction * len(train_videos)))
    chosen = rng.permutation(len(train_videos))[:n_labeled]
    return [train_videos[int(i)] for i in chosen]


def evaluate_phase_detection(gru, classifier, videos):
    """mAP and top-1 of Bi-GRU phase logits over held-out videos."""
    scores, labels = [], []
    for video in videos:
        features = extract_features(classifier, video)
        logits = gru.forward(features).data
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        scores.append(probs)
        labels.extend(video.labels)
    score_matrix = np.vstack(scores)
    labels = np.asarray(labels)
    mean_ap, per_class, excluded = mean_average_precision(score_matrix, labels)
    return EvalReport(
        per_class_ap=per_class,
        map=mean_ap,
        top1=top1(score_matrix, labels),
        excluded_classes=excluded,
    )


def run_pipeline(cfg: PipelineConfig, scratch=False):
    """Generate data, (optionally) pretrain, fine-tune, temporal model, evaluate."""
    videos = cfg.generate_videos()
    train_videos, test_videos = split_videos(videos, cfg.seed)
    classifier = Classifier(cfg.model, n_classes=cfg.n_phases, seed=cfg.seed)
    if not scratch:
        auto = MaskedAutoencoder(cfg.model, seed=cfg.seed)
        pretrain([c for v in train_videos for c in v.clips], auto, cfg.pretrain)
        classifier.adopt_encoder(auto)
    labeled_videos = label_subset(train_videos, cfg.label_fraction, cfg.seed)
    labeled_clips = [(clip, label) for v in labeled_videos for clip, label in zip(v.clips, v.labels)]
    finetune(labeled_clips, classifier, cfg.finetune)
    sequences = [(extract_features(classifier, v), np.asarray(v.labels)) for v in labeled_videos]
    gru = BiGRU(cfg.model.dim, cfg.gru_hidden, cfg.n_phases, seed=cfg.seed)
    train_temporal(sequences, gru, cfg.temporal)
    report = evaluate_phase_detection(gru, classifier, test_videos)
    report.meta = {
        "seed": cfg.seed,
        "config_hash": cfg.model.config_hash(),
        "strategy": cfg.pretrain.strategy,
        "scratch": scratch,
        "n_test_videos": len(test_videos),
    }
    return report


def _apply_axis(cfg: PipelineConfig, axis, value):
    if axis == "ratio":
        return replace(cfg, pretrain=replace(cfg.pretrain, ratio=float(value)))
    if axis == "decoder_depth":
        return replace(cfg, model=replace(cfg.model, decoder_depth=int(value)))
    if axis == "strategy":
        return replace(cfg, pretrain=replace(cfg.pretrain, strategy=str(value)))
    if axis == "steps":
        steps = int(value)
        warmup = min(cfg.pretrain.warmup_epochs, steps // 10)
        return replace(cfg, pretrain=replace(cfg.pretrain, epochs=steps, warmup_epochs=warmup))
    if axis == "loss":
        kind, _, norm = str(value).partition("_")
        return replace(cfg, pretrain=replace(cfg.pretrain, loss=kind, normalize=norm != "raw"))
    raise ConfigError(f"ablation axis must be one of {ABLATION_AXES}, got {axis!r}")


def ablation_run(axis, values, base_cfg: PipelineConfig):
    """One full pipeline per axis value; returns report rows in value order."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation axis must be one of {ABLATION_AXES}, got {axis!r}")
    values = list(values) if values is not None else ABLATION_DEFAULTS[axis]
    rows = []
    for value in values:
        report = run_pipeline(_apply_axis(base_cfg, axis, value))
        rows.append(
            {
                "axis": axis,
                "value": value,
                "map": report.map,
                "top1": report.top1,
                "excluded_classes": len(report.excluded_classes),
            }
        )
    return rows
