"""Optimization loop, checkpoint format, and evaluation driver."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as ddata
from . import losses, network
from .losses import LossWeights
from .network import ModelParams, NetworkConfig
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DAGM"
CHECKPOINT_VERSION = 1


# -- Adam ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Bias-corrected Adam accumulators, keyed like the parameter dict."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: OptimizerState) -> None:
    """One in-place update; missing accumulators are created lazily."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- checkpoint format --------------------------------------------------------
#
# magic "DAGM", version u32 LE, tensor count u32 LE, then per tensor:
# name length u16 LE, UTF-8 name, rank u8, extents u32 LE each,
# payload float32 LE row-major. Config scalars and optimizer state are
# stored as reserved "__cfg__." / "__opt__." entries.


class CheckpointError(ValueError):
    pass


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.asarray(arr, dtype=np.float64)
    head = struct.pack("<H", len(nb)) + nb + struct.pack("B", arr.ndim)
    head += b"".join(struct.pack("<I", n) for n in arr.shape)
    return head + arr.astype("<f4").tobytes()


def _config_entries(cfg: NetworkConfig) -> Dict[str, np.ndarray]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            out[f"__cfg__.{f.name}"] = np.asarray(v, dtype=np.float64)
        else:
            out[f"__cfg__.{f.name}"] = np.asarray(float(v))
    return out


def _config_from_entries(entries: Dict[str, np.ndarray]) -> NetworkConfig:
    kwargs = {}
    for f in dataclasses.fields(NetworkConfig):
        arr = entries[f"__cfg__.{f.name}"]
        if f.type.startswith("Tuple") or isinstance(getattr(NetworkConfig, f.name, None), tuple):
            kwargs[f.name] = tuple(int(x) for x in np.atleast_1d(arr))
        elif f.type == "bool":
            kwargs[f.name] = bool(arr)
        else:
            kwargs[f.name] = int(arr)
    return NetworkConfig(**kwargs)


def save_checkpoint(params: ModelParams, state: Optional[OptimizerState],
                    path: str, cfg: NetworkConfig) -> None:
    entries: Dict[str, np.ndarray] = {}
    entries.update(_config_entries(cfg))
    for name, t in params.tensors.items():
        entries[name] = t.data
    if state is not None:
        entries["__opt__.step"] = np.asarray(float(state.step))
        entries["__opt__.lr"] = np.asarray(state.lr)
        entries["__opt__.beta1"] = np.asarray(state.beta1)
        entries["__opt__.beta2"] = np.asarray(state.beta2)
        entries["__opt__.eps"] = np.asarray(state.eps)
        for name, arr in state.m.items():
            entries[f"__opt__.m.{name}"] = arr
        for name, arr in state.v.items():
            entries[f"__opt__.v.{name}"] = arr
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    for name, arr in entries.items():
        blob += _pack_tensor(name, arr)
    with open(path, "wb") as f:
        f.write(blob)


def _read_exact(raw: bytes, pos: int, n: int, what: str) -> Tuple[bytes, int]:
    if pos + n > len(raw):
        raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
    return raw[pos:pos + n], pos + n


def load_checkpoint(path: str) -> Tuple[ModelParams, Optional[OptimizerState], NetworkConfig]:
    with open(path, "rb") as f:
        raw = f.read()
    chunk, pos = _read_exact(raw, 0, 4, "magic")
    if chunk != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"bad magic {chunk!r}, expected {CHECKPOINT_MAGIC!r}")
    chunk, pos = _read_exact(raw, pos, 8, "header")
    version, count = struct.unpack("<II", chunk)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, pos = _read_exact(raw, pos, 2, "name length")
        (nlen,) = struct.unpack("<H", chunk)
        chunk, pos = _read_exact(raw, pos, nlen, "name")
        name = chunk.decode("utf-8")
        if name in entries:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        chunk, pos = _read_exact(raw, pos, 1, "rank")
        rank = chunk[0]
        shape = []
        for _ in range(rank):
            chunk, pos = _read_exact(raw, pos, 4, "extent")
            shape.append(struct.unpack("<I", chunk)[0])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        chunk, pos = _read_exact(raw, pos, 4 * n, f"payload of {name!r}")
        entries[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)

    cfg = _config_from_entries(entries)
    params = ModelParams()
    state = None
    if "__opt__.step" in entries:
        state = OptimizerState(
            lr=float(entries["__opt__.lr"]), beta1=float(entries["__opt__.beta1"]),
            beta2=float(entries["__opt__.beta2"]), eps=float(entries["__opt__.eps"]),
            step=int(entries["__opt__.step"]))
    for name, arr in entries.items():
        if name.startswith("__cfg__."):
            continue
        if name.startswith("__opt__."):
            if state is not None and name.startswith("__opt__.m."):
                state.m[name[len("__opt__.m."):]] = arr.copy()
            elif state is not None and name.startswith("__opt__.v."):
                state.v[name[len("__opt__.v."):]] = arr.copy()
            continue
        buffer = name.endswith(".rmean") or name.endswith(".rvar")
        params.add(name, Tensor(arr.copy(), requires_grad=not buffer))
    return params, state, cfg


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 4
    steps: int = 300
    lr_schedule: Tuple[Tuple[int, float], ...] = (
        (0, 1e-3), (150, 5e-4), (200, 2.5e-4), (250, 1.25e-4))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    phase: str = "pretrain"
    data_dir: str = "data/train"
    val_dir: Optional[str] = None
    eval_interval: int = 50
    out_dir: str = "run"
    grad_clip: Optional[float] = None
    edge_dilate_radius: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch size must be >= 1 and steps >= 0")
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"phase must be pretrain or finetune, got {self.phase!r}")
        starts = [s for s, _ in self.lr_schedule]
        if starts != sorted(starts) or (starts and starts[0] != 0):
            raise ValueError("lr schedule breakpoints must start at 0 and increase")


def _lr_at(schedule, step: int) -> float:
    lr = schedule[0][1]
    for start, value in schedule:
        if step >= start:
            lr = value
    return lr


def _load_dataset(directory: str) -> List[ddata.StereoSample]:
    indices = ddata.list_samples(directory)
    if not indices:
        raise FileNotFoundError(f"no samples found in {directory!r}")
    return [ddata.load_sample(directory, i) for i in indices]


def _batch_arrays(samples: Sequence[ddata.StereoSample], idx: Sequence[int],
                  dilate_radius: int, flip_rng: Optional[np.random.Generator] = None):
    left = np.stack([samples[i].left.data for i in idx])
    right = np.stack([samples[i].right.data for i in idx])
    disp = np.stack([samples[i].disparity.data for i in idx])
    valid = np.stack([samples[i].valid for i in idx])
    edges = np.stack([
        ddata.depth_edge_gt(samples[i].instance, samples[i].semantic, dilate_radius)
        for i in idx])
    if flip_rng is not None:
        # vertical flips keep the epipolar geometry (disparity is horizontal)
        for b in np.nonzero(flip_rng.uniform(size=len(idx)) < 0.5)[0]:
            left[b] = left[b, :, ::-1]
            right[b] = right[b, :, ::-1]
            disp[b] = disp[b, ::-1]
            valid[b] = valid[b, ::-1]
            edges[b] = edges[b, ::-1]
    return Tensor(left), Tensor(right), disp, valid, edges


def compute_losses(outputs: Dict[str, Tensor], disp: np.ndarray, valid: np.ndarray,
                   edges: np.ndarray, w: LossWeights,
                   cfg: NetworkConfig) -> Dict[str, Tensor]:
    """Loss components for one training batch."""
    l_disp = losses.disp_loss(
        [outputs["d1"], outputs["d2"], outputs["d3"]], disp, valid, w)
    parts = {"l_disp": l_disp}
    if cfg.use_edge_branch:
        parts["l_edge"] = losses.edge_loss(outputs["edge_prob"], edges)
        parts["l_dedge"] = losses.dedge_disp_smoothness(outputs["d3"], edges, w.gamma)
        parts["total"] = losses.total_loss(
            l_disp, parts["l_edge"], parts["l_dedge"], w)
    else:
        parts["total"] = l_disp
    return parts


def recalibrate_norm_stats(params: ModelParams, net: NetworkConfig,
                           samples: Sequence[ddata.StereoSample],
                           batch_size: int, seed: int, batches: int = 16) -> None:
    """Refresh batch-norm running buffers by streaming training batches.

    The exponential running estimates lag the weights after aggressive
    updates; forwarding a few frozen-weight batches in training mode pulls
    the buffers onto the current activation statistics before evaluation.
    """
    rng = np.random.default_rng(seed)
    n = min(batch_size, len(samples))
    for _ in range(batches):
        idx = rng.choice(len(samples), size=n, replace=False)
        left, right, *_ = _batch_arrays(samples, idx, 0)
        network.forward(left, right, params, net, "train")
    params.zero_grad()


def train(cfg: TrainConfig) -> Dict[str, object]:
    """Deterministic training run; writes JSONL log plus best/last checkpoints."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    samples = _load_dataset(cfg.data_dir)
    val_samples = _load_dataset(cfg.val_dir) if cfg.val_dir else None
    params = network.init_params(cfg.network, cfg.seed)
    state = OptimizerState(lr=_lr_at(cfg.lr_schedule, 0))
    rng = np.random.default_rng(cfg.seed)
    flip_rng = np.random.default_rng(cfg.seed + 1)

    log_path = os.path.join(cfg.out_dir, "log.jsonl")
    best_path = os.path.join(cfg.out_dir, "best.ckpt")
    last_path = os.path.join(cfg.out_dir, "last.ckpt")
    best_epe = np.inf
    order: List[int] = []

    def next_batch():
        nonlocal order
        while len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(samples)).tolist())
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        return idx

    with open(log_path, "w") as log:
        for step in range(1, cfg.steps + 1):
            state.lr = _lr_at(cfg.lr_schedule, step - 1)
            idx = next_batch()
            left, right, disp, valid, edges = _batch_arrays(
                samples, idx, cfg.edge_dilate_radius, flip_rng)
            outputs = network.forward(left, right, params, cfg.network, "train")
            parts = compute_losses(outputs, disp, valid, edges,
                                   cfg.loss_weights, cfg.network)
            record = {k: v.item() for k, v in parts.items()}
            if not all(np.isfinite(v) for v in record.values()):
                raise RuntimeError(
                    f"non-finite loss at step {step}: {json.dumps(record)}")
            params.zero_grad()
            parts["total"].backward()
            grads = {n: t.grad for n, t in params.trainable().items()
                     if t.grad is not None}
            if cfg.grad_clip is not None:
                norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > cfg.grad_clip:
                    scale = cfg.grad_clip / norm
                    grads = {n: g * scale for n, g in grads.items()}
            adam_step(params.trainable(), grads, state)

            entry = {"step": step, "lr": state.lr}
            entry.update(record)
            log.write(json.dumps(entry) + "\n")

            if val_samples and (step % cfg.eval_interval == 0 or step == cfg.steps):
                recalibrate_norm_stats(params, cfg.network, samples,
                                       cfg.batch_size, cfg.seed + step,
                                       batches=8)
                report = evaluate_params(params, cfg.network, val_samples)
                log.write(json.dumps({"step": step, "val": report}) + "\n")
                if report["epe"] < best_epe:
                    best_epe = report["epe"]
                    save_checkpoint(params, state, best_path, cfg.network)

    if cfg.steps:
        recalibrate_norm_stats(params, cfg.network, samples, cfg.batch_size,
                               cfg.seed)
    save_checkpoint(params, state, last_path, cfg.network)
    if not os.path.exists(best_path):
        save_checkpoint(params, state, best_path, cfg.network)
    result = {"log": log_path, "best": best_path, "last": last_path}
    if val_samples:
        result["val"] = evaluate_params(params, cfg.network, val_samples)
    return result


# -- evaluation ---------------------------------------------------------------


def predict(params: ModelParams, cfg: NetworkConfig,
            sample: ddata.StereoSample) -> np.ndarray:
    """Inference-mode disparity for one sample."""
    left = Tensor(sample.left.data[None])
    right = Tensor(sample.right.data[None])
    out = network.forward(left, right, params, cfg, "infer")
    return out[f"d{cfg.n_agm}"].data[0]


def evaluate_params(params: ModelParams, cfg: NetworkConfig,
                    samples: Sequence[ddata.StereoSample]) -> Dict[str, float]:
    """Aggregate metrics with all valid pixels pooled across the set."""
    preds, gts, valids = [], [], []
    for s in samples:
        preds.append(predict(params, cfg, s).ravel())
        gts.append(s.disparity.data.ravel())
        valids.append(s.valid.ravel())
    return losses.metrics_report(
        np.concatenate(preds), np.concatenate(gts), np.concatenate(valids))


def evaluate(checkpoint_path: str, dataset_dir: str) -> Dict[str, float]:
    params, _state, cfg = load_checkpoint(checkpoint_path)
    samples = _load_dataset(dataset_dir)
    expected = network.init_params(cfg, seed=0)
    missing = set(expected.tensors) - set(params.tensors)
    extra = set(params.tensors) - set(expected.tensors)
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match its config: missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]}")
    return evaluate_params(params, cfg, samples)


def zero_disparity_baseline(samples: Sequence[ddata.StereoSample]) -> float:
    """EPE of always predicting zero: the mean valid ground-truth disparity."""
    total, count = 0.0, 0
    for s in samples:
        mask = s.valid.astype(bool)
        total += float(s.disparity.data[mask].sum())
        count += int(mask.sum())
    return total / count
