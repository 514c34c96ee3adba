"""Pixelwise cross-entropy, Adam with polynomial decay, and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import LabelError, SegSample
from .graph import NetworkGraph, forward, init_buffers, init_params
from .ops import RunningStats
from .tensor import NumericError, Tape, Tensor, backprop, load, record, save

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.0005
    max_iters: int = 3000
    poly_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_decay: float = 0.0
    batch_size: int = 4
    seed: int = 0
    log_every: int = 50
    precision: str = "float32"

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, last_finite: float | None):
        super().__init__(f"loss became non-finite at iteration {iteration}; last finite loss {last_finite}")
        self.iteration = iteration
        self.last_finite = last_finite


def softmax_ce_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true label]."""
    n, k, h, w = logits.shape
    mask = np.asarray(mask)
    if mask.shape != (n, h, w):
        raise ValueError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    if mask.size and (mask.max() >= k or mask.min() < 0):
        bad = np.argwhere((mask >= k) | (mask < 0))[0]
        raise LabelError(f"label {mask[tuple(bad)]} out of range for {k} classes at {tuple(int(i) for i in bad)}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    idx = mask[:, None].astype(np.intp)
    count = n * h * w
    loss = -np.take_along_axis(logp, idx, axis=1).sum() / count
    out = Tensor(np.full((1, 1, 1, 1), loss, dtype=logits.dtype))

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
        return [grad * (g.reshape(()) / count)]

    return record("softmax_ce_loss", (logits,), out, backward)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration <= cfg.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iters}]")
    return cfg.lr0 * (1.0 - iteration / cfg.max_iters) ** cfg.poly_power


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam, in place. Optional decoupled L2 term lr * l2_decay * param."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.l2_decay > 0:
            update = update + lr * cfg.l2_decay * p.data
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# batching


def batch_indices(iteration: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Sample indices for one iteration: the train set in a fresh seeded
    permutation per epoch, consumed in order and wrapped across epochs."""
    out = []
    perms: dict[int, np.ndarray] = {}
    for pos in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, k = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perms[epoch][k]))
    return out


def stack(samples: Sequence[SegSample], dtype) -> tuple[Tensor, np.ndarray]:
    x = np.concatenate([s.image.data for s in samples]).astype(dtype)
    y = np.stack([s.mask for s in samples])
    return Tensor(x, dtype=dtype), y


# ---------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + one SDT1 file per tensor


def save_checkpoint(path, params: Mapping[str, Tensor], buffers: Mapping[str, RunningStats],
                    state: AdamState | None = None, iteration: int = 0, meta: dict | None = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    manifest: dict = {"iteration": iteration, "params": {}, "buffers": {}, "meta": meta or {}}
    for name, p in params.items():
        rel = f"params/{name}.sdt"
        save(p, path / rel)
        manifest["params"][name] = rel
    if buffers:
        (path / "buffers").mkdir(exist_ok=True)
    for name, st in buffers.items():
        entry = {}
        for kind in ("mean", "var"):
            rel = f"buffers/{name}.{kind}.sdt"
            save(getattr(st, kind), path / rel)
            entry[kind] = rel
        manifest["buffers"][name] = entry
    if state is not None:
        (path / "adam").mkdir(exist_ok=True)
        adam = {"step": state.step, "m": {}, "v": {}}
        for kind in ("m", "v"):
            for name, arr in getattr(state, kind).items():
                rel = f"adam/{name}.{kind}.sdt"
                save(arr, path / rel)
                adam[kind][name] = rel
        manifest["adam"] = adam
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    buffers: dict[str, RunningStats]
    state: AdamState | None
    iteration: int
    meta: dict


def load_checkpoint(path, dtype=np.float64) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    params = {}
    for name, rel in manifest["params"].items():
        t = load(path / rel, dtype)
        t.name = name
        params[name] = t
    buffers = {name: RunningStats(load(path / e["mean"], dtype).data, load(path / e["var"], dtype).data)
               for name, e in manifest["buffers"].items()}
    state = None
    if "adam" in manifest:
        a = manifest["adam"]
        state = AdamState({k: load(path / r, dtype).data for k, r in a["m"].items()},
                          {k: load(path / r, dtype).data for k, r in a["v"].items()}, a["step"])
    return Checkpoint(params, buffers, state, manifest["iteration"], manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    buffers: dict[str, RunningStats]
    state: AdamState
    losses: list[tuple[int, float, float]]
    iterations: int


def train(graph: NetworkGraph, samples: Sequence[SegSample], cfg: TrainConfig, out_dir=None,
          resume: Checkpoint | None = None, stop_at: int | None = None, target_loss: float | None = None,
          on_log: Callable[[int, float, float], None] | None = None, meta: dict | None = None) -> TrainResult:
    """Train end to end on ``samples`` (a training split).

    ``stop_at`` ends the run early (for checkpoint/resume) without changing
    the schedule; ``target_loss`` stops once the batch loss drops below it.
    When ``out_dir`` is given a checkpoint and ``loss.csv`` are written there;
    ``meta`` is stored in the checkpoint manifest next to the train config.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    dtype = cfg.dtype
    if resume is None:
        params = init_params(graph, cfg.seed, dtype)
        buffers = init_buffers(graph, dtype)
        state = AdamState.zeros_like(params)
        start = 0
    else:
        params = {k: Tensor(p.data.astype(dtype), name=k, dtype=dtype) for k, p in resume.params.items()}
        buffers = {k: RunningStats(b.mean.astype(dtype), b.var.astype(dtype)) for k, b in resume.buffers.items()}
        state = resume.state or AdamState.zeros_like(params)
        state.m = {k: v.astype(dtype) for k, v in state.m.items()}
        state.v = {k: v.astype(dtype) for k, v in state.v.items()}
        start = resume.iteration
    end = min(cfg.max_iters, stop_at if stop_at is not None else cfg.max_iters)
    losses: list[tuple[int, float, float]] = []
    last_finite = None
    it = start
    while it < end:
        lr = poly_lr(it, cfg)
        x, y = stack([samples[i] for i in batch_indices(it, len(samples), cfg.batch_size, cfg.seed)], dtype)
        with Tape() as tape:
            logits = forward(graph, params, x, "train", buffers)
            loss = softmax_ce_loss(logits, y)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingAborted(it, last_finite)
        last_finite = value
        grads = backprop(tape, loss, params)
        adam_step(params, grads, state, lr, cfg)
        losses.append((it, value, lr))
        if on_log is not None and (it % cfg.log_every == 0 or it == end - 1):
            on_log(it, value, lr)
        it += 1
        if target_loss is not None and value < target_loss:
            break

    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "checkpoint", params, buffers, state, it, {**(meta or {}), "train": asdict(cfg)})
        write_loss_log(out_dir / "loss.csv", losses, cfg.log_every)
    return TrainResult(params, buffers, state, losses, it)


def write_loss_log(path, losses, every: int = 1) -> None:
    lines = ["iter,loss,lr"]
    last = losses[-1][0] if losses else None
    for it, loss, lr in losses:
        if it % every == 0 or it == last:
            lines.append(f"{it},{loss!r},{lr!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def predict(graph: NetworkGraph, params, buffers, samples: Sequence[SegSample], batch_size: int = 8) -> list[np.ndarray]:
    """Per-pixel argmax labels, batch statistics replaced by running ones."""
    dtype = next(iter(params.values())).dtype
    out = []
    for i in range(0, len(samples), batch_size):
        x, _ = stack(samples[i:i + batch_size], dtype)
        logits = forward(graph, params, x, "infer", buffers)
        out.extend(logits.data.argmax(axis=1))
    return out
