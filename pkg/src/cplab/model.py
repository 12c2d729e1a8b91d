"""Small frame encoder with hand-written reverse mode, Adagrad and input masking.

Architecture (per utterance, all frames of a batch are stacked into one
matrix for the dense layers)::

    features (T, F)
      -> strided window of ``conv_kernel`` frames, step ``conv_stride``
      -> linear + ReLU + dropout                       (conv frontend)
      -> [concat neighbours within +-context, linear + ReLU + dropout] * n
      -> linear to ``vocab_size`` logits               (blank = last class)

Everything is float64.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when an update would inject non-finite values into the parameters."""


@dataclass
class EncoderConfig:
    feat_dim: int = 16
    vocab_size: int = 9
    conv_kernel: int = 7
    conv_stride: int = 3
    conv_channels: int = 48
    hidden_dims: list[int] = field(default_factory=lambda: [48])
    context: int = 1
    dropout: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.conv_stride < 1 or self.conv_kernel < 1:
            raise ValueError("conv_kernel and conv_stride must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.feat_dim < 1 or self.conv_channels < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be >= 1")
        if self.context < 0:
            raise ValueError("context must be >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must be in [0, 1]")

    def output_frames(self, n_frames: int) -> int:
        return (n_frames - self.conv_kernel) // self.conv_stride + 1

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [
            ("conv_w", (self.conv_kernel * self.feat_dim, self.conv_channels)),
            ("conv_b", (self.conv_channels,)),
        ]
        width = self.conv_channels
        for i, h in enumerate(self.hidden_dims):
            shapes.append((f"fc{i}_w", ((2 * self.context + 1) * width, h)))
            shapes.append((f"fc{i}_b", (h,)))
            width = h
        shapes += [("out_w", (width, self.vocab_size)), ("out_b", (self.vocab_size,))]
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


@dataclass
class AugmentConfig:
    n_freq_masks: int = 2
    freq_mask_param: int = 3
    n_time_masks: int = 2
    time_mask_param: int = 5
    max_time_mask_ratio: float = 0.1
    activate_after_step: int = 200

    def validate(self) -> None:
        for name in ("n_freq_masks", "freq_mask_param", "n_time_masks", "time_mask_param",
                     "activate_after_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.max_time_mask_ratio <= 1.0:
            raise ValueError("max_time_mask_ratio must be in [0, 1]")


@dataclass
class LRSchedule:
    """Linear warmup to ``base_lr``, constant, then multiply by ``decay_factor``
    at each step listed in ``decay_steps``."""

    base_lr: float = 0.05
    warmup_steps: int = 100
    decay_steps: list[int] = field(default_factory=list)
    decay_factor: float = 0.5

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        n_decays = sum(1 for s in self.decay_steps if step >= s)
        return self.base_lr * self.decay_factor**n_decays


@dataclass
class ModelState:
    config: EncoderConfig
    theta: np.ndarray
    accum: np.ndarray
    step: int = 0
    dropout_rate: float = 0.0

    def params(self) -> dict[str, np.ndarray]:
        """Named views into ``theta``."""
        return _unflatten(self.theta, self.config)

    def copy(self) -> "ModelState":
        return ModelState(self.config, self.theta.copy(), self.accum.copy(), self.step,
                          self.dropout_rate)


def _unflatten(flat: np.ndarray, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in cfg.param_shapes():
        n = int(np.prod(shape))
        out[name] = flat[pos : pos + n].reshape(shape)
        pos += n
    return out


def init_state(cfg: EncoderConfig, rng: np.random.Generator | None = None) -> ModelState:
    """He-initialised weights, zero biases, empty Adagrad accumulator."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    theta = np.zeros(cfg.n_params())
    for name, view in _unflatten(theta, cfg).items():
        if name.endswith("_w"):
            view[...] = rng.normal(size=view.shape) * np.sqrt(2.0 / view.shape[0])
    return ModelState(cfg, theta, np.zeros_like(theta), 0, cfg.dropout)


def set_dropout(state: ModelState, rate: float) -> ModelState:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1], got {rate}")
    state.dropout_rate = float(rate)
    return state


@dataclass
class Tape:
    """Intermediates kept by :func:`forward` for :func:`backward`."""

    lengths: list[int]
    windows: np.ndarray
    gather: np.ndarray
    valid: np.ndarray
    layer_inputs: list[np.ndarray]
    pre_acts: list[np.ndarray]
    masks: list[np.ndarray | None]
    final_hidden: np.ndarray
    theta: np.ndarray


def _context_index(lengths: Sequence[int], context: int) -> tuple[np.ndarray, np.ndarray]:
    n = int(sum(lengths))
    seg = np.repeat(np.arange(len(lengths)), lengths)
    offsets = np.arange(-context, context + 1)
    idx = np.arange(n)[:, None] + offsets[None, :]
    inside = (idx >= 0) & (idx < n)
    clipped = np.clip(idx, 0, max(n - 1, 0))
    valid = inside & (seg[clipped] == seg[:, None])
    return clipped, valid


def _dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate >= 1.0:
        # still consume the stream so rate changes do not shift later draws
        rng.random(shape)
        return np.zeros(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def forward(
    state: ModelState,
    features: Sequence[np.ndarray],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[list[np.ndarray], Tape]:
    """Per-frame logits for each utterance in ``features``.

    ``train=True`` applies dropout at ``state.dropout_rate`` and needs
    ``rng``; inference mode is deterministic.
    """
    cfg = state.config
    p = state.params()
    if isinstance(features, np.ndarray) and features.ndim == 2:
        features = [features]
    wins, lengths = [], []
    for x in features:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.feat_dim:
            raise ValueError(f"features must be (T, {cfg.feat_dim}), got {x.shape}")
        if x.shape[0] < cfg.conv_kernel:
            raise ValueError(
                f"utterance has {x.shape[0]} frames, fewer than conv_kernel={cfg.conv_kernel}"
            )
        w = sliding_window_view(x, cfg.conv_kernel, axis=0)[:: cfg.conv_stride]
        # (T', F, K) -> (T', K*F) with frame-major layout
        wins.append(w.transpose(0, 2, 1).reshape(w.shape[0], -1))
        lengths.append(w.shape[0])
    windows = np.concatenate(wins, axis=0)
    gather, valid = _context_index(lengths, cfg.context)

    use_dropout = train and state.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")

    layer_inputs, pre_acts, masks = [], [], []
    z = windows @ p["conv_w"] + p["conv_b"]
    layer_inputs.append(windows)
    pre_acts.append(z)
    h = np.maximum(z, 0.0)
    m = _dropout_mask(h.shape, state.dropout_rate, rng) if use_dropout else None
    masks.append(m)
    if m is not None:
        h = h * m
    for i in range(len(cfg.hidden_dims)):
        ctx = (h[gather] * valid[..., None]).reshape(h.shape[0], -1)
        z = ctx @ p[f"fc{i}_w"] + p[f"fc{i}_b"]
        layer_inputs.append(ctx)
        pre_acts.append(z)
        h = np.maximum(z, 0.0)
        m = _dropout_mask(h.shape, state.dropout_rate, rng) if use_dropout else None
        masks.append(m)
        if m is not None:
            h = h * m
    logits = h @ p["out_w"] + p["out_b"]
    splits = np.cumsum(lengths)[:-1]
    tape = Tape(lengths, windows, gather, valid, layer_inputs, pre_acts, masks, h,
                state.theta.copy())
    return np.split(logits, splits, axis=0), tape


def backward(state: ModelState, tape: Tape, grad_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Gradient of ``sum <grad_logits, logits>`` w.r.t. the flat parameter vector."""
    cfg = state.config
    if len(grad_logits) != len(tape.lengths):
        raise ValueError("grad_logits does not match the taped batch")
    for g, n in zip(grad_logits, tape.lengths):
        if g.shape != (n, cfg.vocab_size):
            raise ValueError(f"grad shape {g.shape} != {(n, cfg.vocab_size)}")
    p = _unflatten(tape.theta, cfg)
    grad = np.zeros_like(tape.theta)
    gp = _unflatten(grad, cfg)

    dy = np.concatenate(grad_logits, axis=0)
    gp["out_w"][...] = tape.final_hidden.T @ dy
    gp["out_b"][...] = dy.sum(0)
    dh = dy @ p["out_w"].T

    names = ["conv"] + [f"fc{i}" for i in range(len(cfg.hidden_dims))]
    for layer in range(len(names) - 1, -1, -1):
        if tape.masks[layer] is not None:
            dh = dh * tape.masks[layer]
        dz = dh * (tape.pre_acts[layer] > 0)
        name = names[layer]
        gp[f"{name}_w"][...] = tape.layer_inputs[layer].T @ dz
        gp[f"{name}_b"][...] = dz.sum(0)
        if layer == 0:
            break
        dctx = (dz @ p[f"{name}_w"].T).reshape(dz.shape[0], 2 * cfg.context + 1, -1)
        dctx = dctx * tape.valid[..., None]
        dh = np.zeros((dz.shape[0], dctx.shape[2]))
        np.add.at(dh, tape.gather.ravel(), dctx.reshape(-1, dctx.shape[2]))
    return grad


def adagrad_step(
    state: ModelState, grad: np.ndarray, schedule: LRSchedule, eps: float = 1e-8
) -> ModelState:
    """One Adagrad update; returns a new state and leaves ``state`` untouched."""
    if grad.shape != state.theta.shape:
        raise ValueError(f"grad shape {grad.shape} != theta shape {state.theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient at step {state.step}")
    lr = schedule(state.step)
    accum = state.accum + grad * grad
    theta = state.theta - lr * grad / (np.sqrt(accum) + eps)
    return ModelState(state.config, theta, accum, state.step + 1, state.dropout_rate)


def augment(
    features: np.ndarray, cfg: AugmentConfig, step: int, rng: np.random.Generator
) -> np.ndarray:
    """Zero random feature bands and time bands once ``step`` reaches activation."""
    if step < cfg.activate_after_step:
        return features
    out = np.array(features, dtype=np.float64, copy=True)
    n_t, n_f = out.shape
    for _ in range(cfg.n_freq_masks):
        w = int(rng.integers(0, min(cfg.freq_mask_param, n_f) + 1))
        f0 = int(rng.integers(0, n_f - w + 1))
        out[:, f0 : f0 + w] = 0.0
    max_w = min(cfg.time_mask_param, int(cfg.max_time_mask_ratio * n_t))
    for _ in range(cfg.n_time_masks):
        w = int(rng.integers(0, max_w + 1))
        t0 = int(rng.integers(0, n_t - w + 1))
        out[t0 : t0 + w] = 0.0
    return out


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(state.config),
        "step": state.step,
        "dropout_rate": state.dropout_rate,
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 theta=state.theta, accum=state.accum)


def load_checkpoint(path: str | Path) -> ModelState:
    with np.load(path) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        return ModelState(
            EncoderConfig(**meta["config"]),
            data["theta"].copy(),
            data["accum"].copy(),
            int(meta["step"]),
            float(meta["dropout_rate"]),
        )
