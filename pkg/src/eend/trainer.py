"""Training loop: Adam with the Noam schedule, segment batching, checkpointing."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from eend import nncore as nn
from eend.datagen import FRAME_PERIOD, Recording
from eend.loss import batch_pit_loss, intermediate_terms
from eend.model import (
    CheckpointError,
    ModelConfig,
    build_params,
    forward,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from eend.nncore import ParameterStore

log = logging.getLogger(__name__)

MIN_WINDOW_FRAMES = 10


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    segment_seconds: float = 50.0
    warmup_steps: int = 200_000
    epochs: int = 100
    adapt_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    average_last_k: int = 10
    clip_norm: float = 5.0
    # stop after this many optimizer steps (0 = run every epoch to the end)
    max_steps: int = 0
    # epoch checkpoints kept on disk (0 = keep all)
    keep_checkpoints: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "segment_seconds", "warmup_steps", "adapt_lr", "average_last_k"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train {name} must be positive")
        if self.epochs < 0 or self.max_steps < 0 or self.keep_checkpoints < 0:
            raise ValueError("epochs, max_steps and keep_checkpoints must be non-negative")
        if self.epochs and self.average_last_k > self.epochs:
            raise ValueError("average_last_k cannot exceed epochs")

    @property
    def segment_frames(self) -> int:
        return int(round(self.segment_seconds / FRAME_PERIOD))


# ---------------------------------------------------------------- schedule / optimizer


def noam_lr(step: int, model_dim: int, warmup: int, scale: float = 1.0) -> float:
    """Linear warm-up to ``warmup`` steps, then inverse square-root decay."""
    if step < 1:
        raise ValueError("noam_lr is defined for step >= 1")
    return scale * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState, lr: float,
              betas=(0.9, 0.98), eps: float = 1e-9, grads: dict | None = None):
    """Bias-corrected Adam update, in place."""
    b1, b2 = betas
    grads = grads if grads is not None else {k: params.grad(k) for k in params}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------- batching


@dataclass
class Window:
    recording_id: str
    start: int
    features: np.ndarray  # input_dim x T
    labels: np.ndarray  # C x T


def split_windows(recordings: Sequence[Recording], segment_frames: int) -> list[Window]:
    """Cut every recording into consecutive non-overlapping windows.

    A trailing remainder is kept when it has at least ``MIN_WINDOW_FRAMES``.
    """
    windows = []
    for rec in recordings:
        n = rec.features.shape[1]
        for start in range(0, n, segment_frames):
            stop = min(start + segment_frames, n)
            if stop - start < min(MIN_WINDOW_FRAMES, segment_frames):
                continue
            windows.append(Window(rec.recording_id, start, rec.features[:, start:stop],
                                  rec.labels[:, start:stop]))
    return windows


def make_batches(recordings: Sequence[Recording], segment_seconds: float, batch_size: int,
                 seed: int | np.random.Generator) -> Iterator[list[Window]]:
    """One epoch of shuffled window batches; the last batch may be short."""
    if not recordings:
        raise ValueError("no recordings to batch")
    windows = split_windows(recordings, int(round(segment_seconds / FRAME_PERIOD)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(windows))
    for i in range(0, len(order), batch_size):
        yield [windows[j] for j in order[i:i + batch_size]]


# ---------------------------------------------------------------- one step


@dataclass
class StepResult:
    loss: float
    final_loss: float
    inter_loss: float | None


def batch_loss(config: ModelConfig, params: ParameterStore, batch: list[Window],
               train: bool = True, rng: np.random.Generator | None = None):
    """Mean loss over the batch as a graph, plus its components.

    Windows of equal length are stacked and run together; each group is
    weighted by its share of the batch.
    """
    groups: dict[int, list[Window]] = {}
    for w in batch:
        groups.setdefault(w.features.shape[1], []).append(w)
    total = None
    final_sum = inter_sum = 0.0
    for length in sorted(groups):
        items = groups[length]
        x = np.stack([w.features for w in items])
        y = np.stack([w.labels for w in items])
        out = forward(config, params, x, train=train, rng=rng)
        if out.intermediate_posteriors:
            loss, inter = intermediate_terms(y, out.final_posteriors, out.intermediate_posteriors,
                                             config.mixing_ratio)
            final = loss.item() - config.mixing_ratio * inter.item()
            inter_sum += inter.item() * len(items)
        else:
            loss, _ = batch_pit_loss(y, out.final_posteriors)
            final = loss.item()
        final_sum += final * len(items)
        weighted = nn.scale(loss, len(items) / len(batch))
        total = weighted if total is None else nn.add(total, weighted)
    n = len(batch)
    has_inter = bool(config.taps)
    return total, final_sum / n, (inter_sum / n if has_inter else None)


class Trainer:
    """Owns parameters, optimizer state and RNG for one training run."""

    def __init__(self, config: ModelConfig, train_cfg: TrainConfig,
                 params: ParameterStore | None = None):
        self.config = config
        self.train_cfg = train_cfg
        self.params = params if params is not None else build_params(config)
        self.adam = AdamState()
        self.epoch = 0
        self.rng = np.random.default_rng(train_cfg.seed)
        self.history: list[dict] = []

    def lr(self, adapt: bool) -> float:
        if adapt:
            return self.train_cfg.adapt_lr
        return noam_lr(self.adam.step + 1, self.config.model_dim, self.train_cfg.warmup_steps)

    def step(self, batch: list[Window], adapt: bool = False) -> tuple[StepResult, float]:
        cfg = self.train_cfg
        self.params.zero_grad()
        try:
            total, final, inter = batch_loss(self.config, self.params, batch, True, self.rng)
        except FloatingPointError as exc:
            raise DivergenceError(f"step {self.adam.step + 1}: {exc}") from exc
        value = total.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {self.adam.step + 1}")
        total.backward()
        grads = {k: self.params.grad(k) for k in self.params}
        clip_global_norm(grads, cfg.clip_norm)
        lr = self.lr(adapt)
        adam_step(self.params, self.adam, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, grads)
        return StepResult(value, final, inter), lr

    def run(self, recordings: Sequence[Recording], out_dir=None, adapt: bool = False,
            log_path=None) -> list[Path]:
        """Train for the configured epochs; returns the checkpoint paths written."""
        cfg = self.train_cfg
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "a") if log_path is not None else None
        checkpoints = []
        start_time = time.perf_counter()
        try:
            while self.epoch < cfg.epochs:
                if cfg.max_steps and self.adam.step >= cfg.max_steps:
                    break
                for batch in make_batches(recordings, cfg.segment_seconds, cfg.batch_size, self.rng):
                    try:
                        result, lr = self.step(batch, adapt)
                    except DivergenceError:
                        if out is not None:
                            self.save_state(out / "divergence_state.npz")
                        raise
                    record = {
                        "step": self.adam.step, "epoch": self.epoch + 1, "lr": lr,
                        "loss": result.loss, "final_loss": result.final_loss,
                        "inter_loss": result.inter_loss,
                        "wall": round(time.perf_counter() - start_time, 4),
                    }
                    self.history.append(record)
                    if log_fh is not None:
                        log_fh.write(json.dumps(record) + "\n")
                    if cfg.max_steps and self.adam.step >= cfg.max_steps:
                        break
                self.epoch += 1
                if out is not None:
                    path = out / f"epoch_{self.epoch}.ckpt"
                    save_checkpoint(path, self.config, self.params)
                    self.save_state(out / "train_state.npz")
                    checkpoints.append(path)
                    if cfg.keep_checkpoints and len(checkpoints) > cfg.keep_checkpoints:
                        checkpoints.pop(0).unlink(missing_ok=True)
                log.info("epoch %d done at step %d", self.epoch, self.adam.step)
        finally:
            if log_fh is not None:
                log_fh.close()
        return checkpoints

    # full-precision state for exact resumption
    def save_state(self, path):
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        arrays.update({f"m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"v/{k}": v for k, v in self.adam.v.items()})
        meta = {
            "step": self.adam.step, "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
            "model": self.config.to_dict(), "train": asdict(self.train_cfg),
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load_state(cls, path, train_cfg: TrainConfig | None = None) -> "Trainer":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            config = ModelConfig.from_dict(meta["model"])
            trainer = cls(config, train_cfg or TrainConfig(**meta["train"]))
            trainer.params.load_state_dict(
                {k[6:]: z[k] for k in z.files if k.startswith("param/")})
            trainer.adam.m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m/")}
            trainer.adam.v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v/")}
        trainer.adam.step = meta["step"]
        trainer.epoch = meta["epoch"]
        trainer.rng.bit_generator.state = meta["rng"]
        return trainer


def train(config: ModelConfig, train_cfg: TrainConfig, recordings: Sequence[Recording],
          out_dir=None, params: ParameterStore | None = None, log_path=None) -> Trainer:
    trainer = Trainer(config, train_cfg, params)
    trainer.run(recordings, out_dir, adapt=False, log_path=log_path)
    return trainer


def adapt(config: ModelConfig, train_cfg: TrainConfig, recordings: Sequence[Recording],
          params: ParameterStore, out_dir=None, log_path=None) -> Trainer:
    """Fine-tune a trained model at the constant adaptation learning rate."""
    trainer = Trainer(config, train_cfg, params)
    trainer.run(recordings, out_dir, adapt=True, log_path=log_path)
    return trainer


# ---------------------------------------------------------------- checkpoint averaging


def average_checkpoints(paths: Sequence) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Elementwise mean of each named parameter across checkpoints."""
    if not paths:
        raise ValueError("no checkpoints to average")
    config, total = None, None
    for path in paths:
        cfg, state = parse_checkpoint(Path(path).read_bytes())
        if config is None:
            config, total = cfg, {k: v.astype(np.float64) for k, v in state.items()}
            continue
        if cfg != config:
            raise CheckpointError(f"{path}: model config differs from {paths[0]}")
        if set(state) != set(total):
            raise CheckpointError(f"{path}: parameter names differ from {paths[0]}")
        for k, v in state.items():
            total[k] += v
    return config, {k: v / len(paths) for k, v in total.items()}


def load_params(path) -> tuple[ModelConfig, ParameterStore]:
    return load_checkpoint(path)


# ---------------------------------------------------------------- throughput


def synthetic_batch(config: ModelConfig, batch_size: int, frames: int, seed: int = 0) -> list[Window]:
    rng = np.random.default_rng(seed)
    return [
        Window("bench", 0, rng.normal(size=(config.input_dim, frames)),
               (rng.random((config.num_speakers, frames)) < 0.4).astype(np.float64))
        for _ in range(batch_size)
    ]


def bench_throughput(config: ModelConfig, n_steps: int = 30, batch_size: int = 8, frames: int = 500,
                     warmup: int = 3, seed: int = 0) -> float:
    """Median batches/second of full train steps on a fixed synthetic batch."""
    trainer = Trainer(config, TrainConfig(batch_size=batch_size, warmup_steps=1000, seed=seed))
    batch = synthetic_batch(config, batch_size, frames, seed)
    times = []
    for i in range(warmup + n_steps):
        t0 = time.perf_counter()
        trainer.step(batch)
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return 1.0 / float(np.median(times))
