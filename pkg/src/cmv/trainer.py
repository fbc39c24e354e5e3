"""Optimization and the training loops.

All randomness inside a run derives from (seed, stream, epoch,
sample_index) seed sequences, so batch assembly could be pipelined ahead
of the optimizer without changing results, and resuming from a checkpoint
replays the exact metrics stream of an uninterrupted run.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as vd
from . import objectives
from .autodiff import Tensor
from .model import (
    ModelConfig,
    VideoModel,
    load_checkpoint,
    load_model_state,
    model_state,
    random_tube_mask,
    save_checkpoint,
    tubify,
)

_EPOCH_STREAM = 0xE9
_SAMPLE_STREAM = 0x5A


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending batch seeds."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 2.4e-2
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    total_epochs: int = 100
    mask_ratio: float = 0.9
    contrastive_weight: float = 1.0
    recon_weight: float = 1.0
    tau: float = 0.1
    ema_momentum: float = 0.98
    shift: vd.ShiftConfig = field(default_factory=vd.ShiftConfig)
    color_strength: float = 0.05
    repeated_samples: int = 2
    seed: int = 0
    mode: str = "pretrain"
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} exceeds total_epochs {self.total_epochs}"
            )
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")
        if self.contrastive_weight < 0 or self.recon_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.contrastive_weight == 0 and self.recon_weight == 0:
            raise ValueError("at least one of contrastive_weight / recon_weight must be positive")
        if self.repeated_samples < 1:
            raise ValueError(f"repeated_samples must be >= 1, got {self.repeated_samples}")
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"mode must be pretrain or finetune, got {self.mode!r}")

    @property
    def effective_lr(self) -> float:
        return linear_scale_lr(self.base_lr, self.batch_size)


def linear_scale_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: lr = base_lr * batch_size / 256."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return base_lr * batch_size / 256.0


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to the effective rate, then cosine decay to zero."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    eff = cfg.effective_lr
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if step < warmup:
        return eff * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return eff * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Update: theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    Parameters whose gradient is None are skipped entirely.
    """

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.95,
        weight_decay: float = 0.05,
        eps: float = 1e-8,
    ):
        self.params = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.moment1 = {name: np.zeros_like(p.data) for name, p in self.params}
        self.moment2 = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params:
            grad = p.grad
            if grad is None:
                continue
            if grad.shape != p.data.shape:
                raise ValueError(f"gradient shape {grad.shape} != param {p.data.shape} for {name}")
            m = self.moment1[name]
            v = self.moment2[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * grad
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (grad * grad)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        entries: list[tuple[str, np.ndarray]] = [
            ("opt.step", np.array([self.step_count], dtype=np.uint64))
        ]
        for name, _ in self.params:
            entries.append((f"opt.m.{name}", self.moment1[name]))
            entries.append((f"opt.v.{name}", self.moment2[name]))
        return entries

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["opt.step"][0])
        for name, p in self.params:
            self.moment1[name] = arrays[f"opt.m.{name}"].astype(p.data.dtype, copy=True)
            self.moment2[name] = arrays[f"opt.v.{name}"].astype(p.data.dtype, copy=True)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    lr: float
    recon_loss: float
    contrastive_loss: float
    total_loss: float
    ema_momentum: float
    wall_time: float
    accuracy: float | None = None

    def to_json(self) -> str:
        # wall_time is intentionally not serialized: identical runs must
        # produce byte-identical metrics files.
        payload = {
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.lr,
            "recon_loss": self.recon_loss,
            "contrastive_loss": self.contrastive_loss,
            "total_loss": self.total_loss,
            "ema_momentum": self.ema_momentum,
        }
        if self.accuracy is not None:
            payload["accuracy"] = self.accuracy
        return json.dumps(payload)


class MetricsWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: MetricsRecord) -> None:
        with open(self.path, "a") as fh:
            fh.write(record.to_json() + "\n")


def _stream_rng(seed: int, stream: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, *key)))


def _stack_tokens(dataset: vd.VideoDataset, clips, model: VideoModel) -> np.ndarray:
    cfg = model.cfg
    rows = [
        tubify(
            vd.normalize(clip.pixels, dataset.mean, dataset.std),
            cfg.tube_size,
            cfg.patch_size,
            cfg.d_model,
        ).tokens
        for clip in clips
    ]
    return np.stack(rows)


def _gather_rows(tokens: np.ndarray, index: np.ndarray) -> np.ndarray:
    return np.take_along_axis(tokens, index[:, :, None], axis=1)


def build_model(dataset: vd.VideoDataset, model_cfg: ModelConfig, cfg: TrainConfig) -> VideoModel:
    return VideoModel(
        model_cfg,
        clip_frames=cfg.shift.frames,
        channels=dataset.channels,
        height=dataset.height,
        width=dataset.width,
        seed=cfg.seed,
    )


def _meta_entries(seed: int, next_epoch: int, global_step: int) -> list[tuple[str, np.ndarray]]:
    return [
        ("meta.seed", np.array([seed], dtype=np.uint64)),
        ("meta.next_epoch", np.array([next_epoch], dtype=np.uint64)),
        ("meta.global_step", np.array([global_step], dtype=np.uint64)),
    ]


def _save_training_checkpoint(
    path: Path, model: VideoModel, opt: AdamW, cfg: TrainConfig, next_epoch: int, global_step: int
) -> Path:
    entries = model_state(model) + opt.state_entries() + _meta_entries(cfg.seed, next_epoch, global_step)
    return save_checkpoint(path, entries)


def _abort_non_finite(
    out_dir: Path, value: float, epoch: int, step: int, cfg: TrainConfig, sample_indices
) -> None:
    diagnostics = {
        "reason": "non-finite loss",
        "value": repr(value),
        "epoch": epoch,
        "step": step,
        "run_seed": cfg.seed,
        "sample_stream": _SAMPLE_STREAM,
        "sample_indices": [int(i) for i in sample_indices],
    }
    with open(out_dir / "abort.json", "w") as fh:
        json.dump(diagnostics, fh, indent=2)
    raise TrainingDiverged(
        f"non-finite loss {value!r} at epoch {epoch} step {step}; "
        f"batch seeds dumped to {out_dir / 'abort.json'}",
        diagnostics,
    )


def pretrain(
    dataset: vd.VideoDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> Path:
    """Run the self-supervised loop; returns the final checkpoint path.

    Per step: sample a start frame per video, build the temporally shifted
    view pair, mask the online view, color-augment the target view, encode
    both branches, decode masked pixels, combine the losses, update the
    online parameters with AdamW, then EMA the target branch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(dataset, model_cfg, cfg)
    opt = AdamW(model.trainable_parameters(), cfg.beta1, cfg.beta2, cfg.weight_decay)

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        arrays = load_checkpoint(resume_from)
        if int(arrays["meta.seed"][0]) != cfg.seed:
            raise ValueError(
                f"checkpoint seed {int(arrays['meta.seed'][0])} != config seed {cfg.seed}"
            )
        load_model_state(model, arrays)
        opt.load_state(arrays)
        start_epoch = int(arrays["meta.next_epoch"][0])
        global_step = int(arrays["meta.global_step"][0])

    steps_per_epoch = dataset.num_videos // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds dataset size {dataset.num_videos}"
        )
    max_start = vd.max_clip_start(dataset.total_frames, cfg.shift, with_shift=True)
    if max_start < 0:
        raise ValueError(
            f"videos of {dataset.total_frames} frames are too short for clips spanning "
            f"{cfg.shift.span} frames plus disturbance {cfg.shift.max_disturbance}"
        )

    metrics = MetricsWriter(out_dir / "metrics.jsonl")
    checkpoints = out_dir / "checkpoints"
    started = time.monotonic()

    for epoch in range(start_epoch, cfg.total_epochs):
        order = _stream_rng(cfg.seed, _EPOCH_STREAM, epoch).permutation(dataset.num_videos)
        for batch_no in range(steps_per_epoch):
            batch = order[batch_no * cfg.batch_size : (batch_no + 1) * cfg.batch_size]

            online_clips, target_clips, plans = [], [], []
            for video_index in batch:
                rng = _stream_rng(cfg.seed, _SAMPLE_STREAM, epoch, int(video_index))
                start = int(rng.integers(0, max_start + 1))
                frames = dataset.frames_float(int(video_index))
                online_clip, target_clip = vd.temporal_shift(frames, start, cfg.shift, rng)
                target_clip = vd.color_augment(target_clip, cfg.color_strength, rng)
                plans.append(random_tube_mask(model.num_tokens, cfg.mask_ratio, rng))
                online_clips.append(online_clip)
                target_clips.append(target_clip)

            online_tokens = _stack_tokens(dataset, online_clips, model)
            visible_index = np.stack([p.visible for p in plans])
            masked_index = np.stack([p.masked for p in plans])

            opt.zero_grad()
            visible_embeddings = model.encode_online(
                _gather_rows(online_tokens, visible_index), visible_index
            )

            recon_term = None
            if cfg.recon_weight > 0:
                full = model.assemble_full_sequence(visible_embeddings, visible_index, masked_index)
                predicted = model.pixel_decode(full, masked_index)
                targets = Tensor(_gather_rows(online_tokens, masked_index))
                recon_term = objectives.recon_loss(predicted, targets)

            contrastive_term = None
            if cfg.contrastive_weight > 0:
                pooled = model.contrastive_feature(visible_embeddings, visible_index, masked_index)
                online_proj = model.project_predict(pooled, "online")
                target_tokens = _stack_tokens(dataset, target_clips, model)
                target_proj = model.project_predict(model.encode_target(target_tokens), "target")
                contrastive_term = objectives.infonce(online_proj, target_proj, cfg.tau)

            loss = _combine(recon_term, contrastive_term, cfg.recon_weight, cfg.contrastive_weight)
            total_value = loss.item()
            if not np.isfinite(total_value):
                _abort_non_finite(out_dir, total_value, epoch, global_step, cfg, batch)

            lr = lr_schedule(global_step, steps_per_epoch, cfg)
            loss.backward()
            opt.step(lr)
            model.ema_update(cfg.ema_momentum)

            global_step += 1
            metrics.write(
                MetricsRecord(
                    step=global_step,
                    epoch=epoch,
                    lr=lr,
                    recon_loss=recon_term.item() if recon_term is not None else 0.0,
                    contrastive_loss=(
                        contrastive_term.item() if contrastive_term is not None else 0.0
                    ),
                    total_loss=total_value,
                    ema_momentum=cfg.ema_momentum,
                    wall_time=time.monotonic() - started,
                )
            )

        if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            _save_training_checkpoint(
                checkpoints / f"epoch_{epoch + 1:04d}.cmvc", model, opt, cfg, epoch + 1, global_step
            )

    return _save_training_checkpoint(
        out_dir / "final.cmvc", model, opt, cfg, cfg.total_epochs, global_step
    )


def _combine(recon, contrastive, recon_weight: float, contrastive_weight: float) -> Tensor:
    terms = []
    if recon is not None:
        terms.append(recon if recon_weight == 1.0 else recon * recon_weight)
    if contrastive is not None:
        terms.append(contrastive * contrastive_weight)
    if not terms:
        raise ValueError("no loss terms enabled")
    loss = terms[0]
    for term in terms[1:]:
        loss = loss + term
    return loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    batch, classes = logits.shape
    onehot = np.zeros((batch, classes), dtype=logits.data.dtype)
    onehot[np.arange(batch), labels] = 1.0
    picked = ad.tensor_sum(logits * Tensor(onehot), axis=1)
    return ad.mean(ad.logsumexp(logits, axis=1) - picked)


def finetune(
    dataset: vd.VideoDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    init_from: str | Path | None = None,
    freeze_encoder: bool = False,
) -> Path:
    """Supervised classification on top of the (optionally pretrained) encoder.

    Every video contributes ``repeated_samples`` independently augmented
    clips per epoch. ``freeze_encoder`` turns the run into a linear probe.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(dataset, model_cfg, cfg)

    if init_from is not None:
        arrays = load_checkpoint(init_from)
        classifier_key = "param.classifier.weight"
        if classifier_key in arrays:
            stored_classes = arrays[classifier_key].shape[1]
            if stored_classes != dataset.num_classes:
                raise ValueError(
                    f"checkpoint classifier has {stored_classes} classes, "
                    f"dataset has {dataset.num_classes}"
                )
            model.add_classifier(dataset.num_classes, cfg.seed)
            load_model_state(model, arrays)
        else:
            load_model_state(model, arrays)
            model.add_classifier(dataset.num_classes, cfg.seed)
    else:
        model.add_classifier(dataset.num_classes, cfg.seed)

    if freeze_encoder:
        classifier_params = {id(p) for p in model.classifier.parameters()}
        for _, p in model.named_parameters():
            if id(p) not in classifier_params:
                p.requires_grad = False

    opt = AdamW(model.trainable_parameters(), cfg.beta1, cfg.beta2, cfg.weight_decay)

    replicas = cfg.repeated_samples
    num_samples = dataset.num_videos * replicas
    steps_per_epoch = max(1, math.ceil(num_samples / cfg.batch_size))
    max_start = vd.max_clip_start(dataset.total_frames, cfg.shift)
    if max_start < 0:
        raise ValueError(
            f"videos of {dataset.total_frames} frames are too short for clips spanning "
            f"{cfg.shift.span} frames"
        )

    metrics = MetricsWriter(out_dir / "metrics.jsonl")
    started = time.monotonic()
    global_step = 0

    for epoch in range(cfg.total_epochs):
        order = _stream_rng(cfg.seed, _EPOCH_STREAM, epoch).permutation(num_samples)
        for batch_no in range(steps_per_epoch):
            batch = order[batch_no * cfg.batch_size : (batch_no + 1) * cfg.batch_size]
            if batch.size == 0:
                continue
            clips, labels = [], []
            for sample_index in batch:
                video_index = int(sample_index) // replicas
                rng = _stream_rng(cfg.seed, _SAMPLE_STREAM, epoch, int(sample_index))
                start = int(rng.integers(0, max_start + 1))
                clips.append(vd.sample_clip(dataset.frames_float(video_index), start, cfg.shift))
                labels.append(int(dataset.labels[video_index]))
            tokens = _stack_tokens(dataset, clips, model)
            labels = np.asarray(labels)

            opt.zero_grad()
            logits = model.classify(tokens)
            loss = cross_entropy(logits, labels)
            total_value = loss.item()
            if not np.isfinite(total_value):
                _abort_non_finite(out_dir, total_value, epoch, global_step, cfg, batch)

            lr = lr_schedule(global_step, steps_per_epoch, cfg)
            loss.backward()
            opt.step(lr)

            global_step += 1
            accuracy = float(np.mean(np.argmax(logits.data, axis=1) == labels))
            metrics.write(
                MetricsRecord(
                    step=global_step,
                    epoch=epoch,
                    lr=lr,
                    recon_loss=0.0,
                    contrastive_loss=0.0,
                    total_loss=total_value,
                    ema_momentum=cfg.ema_momentum,
                    wall_time=time.monotonic() - started,
                    accuracy=accuracy,
                )
            )

    return _save_training_checkpoint(
        out_dir / "final.cmvc", model, opt, cfg, cfg.total_epochs, global_step
    )


# -- evaluation -----------------------------------------------------------------


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def make_predict_fn(model: VideoModel, dataset: vd.VideoDataset):
    """Batch of raw [0, 1] clips -> logits array, without recording gradients."""
    cfg = model.cfg

    def predict(batch_pixels: np.ndarray) -> np.ndarray:
        tokens = np.stack(
            [
                tubify(
                    vd.normalize(p, dataset.mean, dataset.std),
                    cfg.tube_size,
                    cfg.patch_size,
                    cfg.d_model,
                ).tokens
                for p in batch_pixels
            ]
        )
        with ad.no_grad():
            return model.classify(tokens).data

    return predict


def evaluate_multiview(
    predict_fn,
    dataset: vd.VideoDataset,
    n_temporal_views: int,
    n_spatial_views: int,
    clip_cfg: vd.ShiftConfig,
) -> float:
    """Top-1 accuracy with softmax averaging over temporal x spatial views.

    Temporal views sample evenly spaced start frames; spatial views are the
    identity plus horizontal flips (there is no room to crop at this frame
    size), so views beyond the first are flipped.
    """
    if n_temporal_views < 1 or n_spatial_views < 1:
        raise ValueError("view counts must be >= 1")
    max_start = vd.max_clip_start(dataset.total_frames, clip_cfg)
    if max_start < 0 or n_temporal_views > max_start + 1:
        raise ValueError(
            f"videos of {dataset.total_frames} frames are too short for "
            f"{n_temporal_views} temporal views of span {clip_cfg.span}"
        )
    if n_temporal_views == 1:
        starts = [max_start // 2]
    else:
        starts = np.round(np.linspace(0, max_start, n_temporal_views)).astype(int).tolist()

    correct = 0
    for video_index in range(dataset.num_videos):
        frames = dataset.frames_float(video_index)
        views = []
        for start in starts:
            clip = vd.sample_clip(frames, int(start), clip_cfg)
            for spatial in range(n_spatial_views):
                pixels = clip.pixels if spatial == 0 else clip.pixels[:, :, :, ::-1].copy()
                views.append(pixels)
        probs = _softmax_np(predict_fn(np.stack(views))).mean(axis=0)
        if int(np.argmax(probs)) == int(dataset.labels[video_index]):
            correct += 1
    return correct / dataset.num_videos


def evaluate_checkpoint(
    checkpoint: str | Path,
    dataset: vd.VideoDataset,
    model_cfg: ModelConfig,
    clip_cfg: vd.ShiftConfig,
    n_temporal_views: int,
    n_spatial_views: int,
) -> float:
    arrays = load_checkpoint(checkpoint)
    classifier_key = "param.classifier.weight"
    if classifier_key not in arrays:
        raise ValueError(f"{checkpoint}: no classifier head; finetune before evaluating")
    if arrays[classifier_key].shape[1] != dataset.num_classes:
        raise ValueError(
            f"checkpoint classifier has {arrays[classifier_key].shape[1]} classes, "
            f"dataset has {dataset.num_classes}"
        )
    model = VideoModel(
        model_cfg,
        clip_frames=clip_cfg.frames,
        channels=dataset.channels,
        height=dataset.height,
        width=dataset.width,
        seed=0,
    )
    model.add_classifier(dataset.num_classes, seed=0)
    load_model_state(model, arrays)
    predict = make_predict_fn(model, dataset)
    return evaluate_multiview(predict, dataset, n_temporal_views, n_spatial_views, clip_cfg)


# -- objective comparison study ---------------------------------------------------


def transfer_study(
    out_dir: str | Path,
    seeds: tuple[int, ...] = (0, 1, 2),
    train_videos: int = 64,
    eval_videos: int = 48,
    num_classes: int = 4,
    pretrain_epochs: int = 30,
    finetune_epochs: int = 20,
    data_seed: int = 100,
) -> dict:
    """Pretrain-objective comparison on held-out synthetic motion data.

    Arms: reconstruction-only pretraining, contrastive-only pretraining,
    the full combined objective, and a from-scratch finetune of equal
    epochs. Writes ``report.json`` and returns the report dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry = dict(total_frames=64, height=32, width=32, channels=1, noise_level=0.05)
    train_set = vd.synthesize_dataset(train_videos, num_classes, seed=data_seed, **geometry)
    eval_set = vd.synthesize_dataset(eval_videos, num_classes, seed=data_seed + 1, **geometry)
    model_cfg = ModelConfig()

    def pretrain_cfg(seed: int, contrastive_weight: float, recon_weight: float) -> TrainConfig:
        return TrainConfig(
            total_epochs=pretrain_epochs,
            warmup_epochs=max(1, pretrain_epochs // 10),
            contrastive_weight=contrastive_weight,
            recon_weight=recon_weight,
            seed=seed,
        )

    def finetune_cfg(seed: int) -> TrainConfig:
        return TrainConfig(
            base_lr=8e-3,
            beta2=0.999,
            total_epochs=finetune_epochs,
            warmup_epochs=5,
            seed=seed,
            mode="finetune",
        )

    arms = {
        "reconstruction_only": dict(contrastive_weight=0.0, recon_weight=1.0),
        "contrastive_only": dict(contrastive_weight=1.0, recon_weight=0.0),
        "full": dict(contrastive_weight=1.0, recon_weight=1.0),
    }
    report: dict = {
        "task": "synthetic-motion-classification",
        "num_classes": num_classes,
        "train_videos": train_videos,
        "eval_videos": eval_videos,
        "pretrain_epochs": pretrain_epochs,
        "finetune_epochs": finetune_epochs,
        "eval_views": "2x1",
        "seeds": list(seeds),
        "arms": {},
    }

    accuracies: dict[str, list[float]] = {name: [] for name in (*arms, "from_scratch")}
    for seed in seeds:
        for arm_name, weights in arms.items():
            arm_dir = out_dir / f"seed{seed}" / arm_name
            ckpt = pretrain(train_set, model_cfg, pretrain_cfg(seed, **weights), arm_dir / "pretrain")
            final = finetune(
                train_set, model_cfg, finetune_cfg(seed), arm_dir / "finetune", init_from=ckpt
            )
            acc = evaluate_checkpoint(final, eval_set, model_cfg, TrainConfig().shift, 2, 1)
            accuracies[arm_name].append(acc)
        scratch_dir = out_dir / f"seed{seed}" / "from_scratch"
        final = finetune(train_set, model_cfg, finetune_cfg(seed), scratch_dir)
        accuracies["from_scratch"].append(
            evaluate_checkpoint(final, eval_set, model_cfg, TrainConfig().shift, 2, 1)
        )

    for name, values in accuracies.items():
        report["arms"][name] = {
            "per_seed_top1": values,
            "mean_top1": float(np.mean(values)),
        }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    return report


def parse_views(views: str) -> tuple[int, int]:
    """Parse a views protocol like '5x3' into (temporal, spatial) counts."""
    parts = views.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"views must look like '2x3', got {views!r}")
    try:
        temporal, spatial = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ValueError(f"views must look like '2x3', got {views!r}") from exc
    if temporal < 1 or spatial < 1:
        raise ValueError(f"view counts must be >= 1, got {views!r}")
    return temporal, spatial
