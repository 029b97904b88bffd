"""Loss, AdamW, the epoch loop with best-validation selection, and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tape
from .model import ModelConfig, as_tensors, forward_op, init_params, predict_proba
from .s5 import clamp_stable
from .signal_io import ConfigurationError, FoldSplit, LabeledDataset, make_rng
from .wavelet_conv import fixed_features

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CSSMCK01"
CKPT_VERSION = 1


def cross_entropy(p: np.ndarray, y) -> float:
    """Mean of -log p[y] over a probability vector [N] or batch [B, N]."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    return float(-np.mean(np.log(p[np.arange(len(y)), y])))


@dataclass
class TrainHyper:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    precision: str = "single"  # single | double

    @property
    def dtype(self):
        if self.precision not in ("single", "double"):
            raise ConfigurationError(f"precision must be 'single' or 'double', got {self.precision!r}")
        return np.float32 if self.precision == "single" else np.float64


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], hyper: TrainHyper) -> "OptimState":
        return cls(hyper.lr, hyper.beta1, hyper.beta2, hyper.eps, hyper.weight_decay, 0,
                   {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})

    def hyper_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only (not norms, biases, eigenvalues or timescales)."""
    return value.ndim >= 2


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState) -> tuple[dict[str, np.ndarray], OptimState]:
    """One decoupled-weight-decay Adam update; returns new params and state, inputs untouched."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        q = p * (1 - state.lr * state.weight_decay) if decays(k, p) else p.copy()
        q = q - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[k], new_m[k], new_v[k] = q.astype(p.dtype), m.astype(p.dtype), v.astype(p.dtype)
    clamp_stable(new_p)
    out = dataclasses.replace(state, step=step, m=new_m, v=new_v)
    return new_p, out


def loss_and_grads(cfg: ModelConfig, params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray,
                   fixed: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    t = as_tensors(params)
    loss = tape.cross_entropy(forward_op(cfg, t, x, fixed)["logits"], y)
    tape.backward(loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in t.items()}
    return float(loss.data), grads


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt: OptimState
    epoch: int
    best_val_acc: float
    best_epoch: int
    best_params: dict[str, np.ndarray]
    rng_state: dict
    history: list[dict] = field(default_factory=list)
    hyper: TrainHyper = field(default_factory=TrainHyper)


def _accuracy(cfg, params, x, y, fixed, dtype) -> float:
    if len(y) == 0:
        return float("nan")
    probs = predict_proba(cfg, params, x, fixed, dtype=dtype)
    return float(np.mean(probs.argmax(axis=1) == y))


def precompute_fixed(cfg: ModelConfig, x: np.ndarray) -> np.ndarray | None:
    if cfg.enable_wavelet_conv and cfg.front_end.e_branch != "none":
        return fixed_features(x, cfg.front_end, cfg.fs)
    return None


def train(cfg: ModelConfig, dataset: LabeledDataset, split: FoldSplit, hyper: TrainHyper,
          resume: Checkpoint | None = None,
          on_epoch: Callable[[Checkpoint], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Mini-batch AdamW for ``hyper.epochs`` epochs, keeping the best-validation parameters.

    Ties in validation accuracy keep the earlier epoch. ``on_epoch`` receives the
    running checkpoint after each epoch (used to write resumable files).
    """
    cfg.validate()
    dtype = hyper.dtype
    tr, va = dataset.indices_for(split.train), dataset.indices_for(split.val)
    if not tr or not va:
        raise ConfigurationError(f"fold {split.fold_index}: empty training or validation split")
    if dataset.shape != (cfg.M, cfg.T) or dataset.n_classes != cfg.N or dataset.fs != cfg.fs:
        raise ConfigurationError("dataset dimensions do not match the model config")
    x_all = dataset.stacked()
    y_all = np.asarray(dataset.labels)
    fixed_all = precompute_fixed(cfg, x_all)
    x_tr, y_tr = x_all[tr].astype(dtype), y_all[tr]
    x_va, y_va = x_all[va].astype(dtype), y_all[va]
    f_tr = None if fixed_all is None else fixed_all[tr].astype(dtype)
    f_va = None if fixed_all is None else fixed_all[va].astype(dtype)

    if resume is None:
        params = {k: v.astype(dtype) for k, v in init_params(cfg, hyper.seed).items()}
        ck = Checkpoint(cfg, params, OptimState.for_params(params, hyper), 0, -1.0, 0,
                        {k: v.copy() for k, v in params.items()},
                        make_rng(hyper.seed + 1).bit_generator.state, [], hyper)
    else:
        ck = resume
    rng = make_rng(0)
    rng.bit_generator.state = ck.rng_state
    params, opt = ck.params, ck.opt

    for epoch in range(ck.epoch + 1, hyper.epochs + 1):
        order = rng.permutation(len(tr))
        total, seen = 0.0, 0
        for s in range(0, len(order), hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            f = None if f_tr is None else f_tr[idx]
            loss, grads = loss_and_grads(cfg, params, x_tr[idx], y_tr[idx], f)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            params, opt = adamw_step(params, grads, opt)
            total += loss * len(idx)
            seen += len(idx)
        val_acc = _accuracy(cfg, params, x_va, y_va, f_va, dtype)
        ck.history.append({"epoch": epoch, "train_loss": total / seen, "val_acc": val_acc})
        if val_acc > ck.best_val_acc:
            ck.best_val_acc, ck.best_epoch = val_acc, epoch
            ck.best_params = {k: v.copy() for k, v in params.items()}
        ck.params, ck.opt, ck.epoch, ck.rng_state = params, opt, epoch, rng.bit_generator.state
        log.info("fold %d epoch %d loss %.4f val_acc %.4f", split.fold_index, epoch, total / seen, val_acc)
        if on_epoch is not None:
            on_epoch(ck)
    return ck, ck.history


def _pack_arrays(groups: dict[str, dict[str, np.ndarray]]) -> tuple[list[dict], bytes]:
    index, blobs = [], []
    for group, arrays in groups.items():
        for name in sorted(arrays):
            a = np.asarray(arrays[name])
            dt = a.dtype.newbyteorder("<")
            index.append({"group": group, "name": name, "dtype": dt.str, "shape": list(a.shape)})
            blobs.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    return index, b"".join(blobs)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    index, blob = _pack_arrays({"params": ck.params, "best": ck.best_params, "m": ck.opt.m, "v": ck.opt.v})
    header = {
        "config": ck.config.to_dict(),
        "hyper": dataclasses.asdict(ck.hyper),
        "opt": ck.opt.hyper_dict(),
        "epoch": ck.epoch,
        "best_val_acc": ck.best_val_acc,
        "best_epoch": ck.best_epoch,
        "rng_state": ck.rng_state,
        "history": ck.history,
        "arrays": index,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "best": {}, "m": {}, "v": {}}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(raw, dtype=dt, count=n, offset=offset).reshape(entry["shape"])
        groups[entry["group"]][entry["name"]] = a.astype(dt.newbyteorder("="))
        offset += n * dt.itemsize
    if offset != len(raw):
        raise ConfigurationError(f"{path}: checkpoint size mismatch")
    o = header["opt"]
    opt = OptimState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"], o["step"],
                     groups["m"], groups["v"])
    return Checkpoint(ModelConfig.from_dict(header["config"]), groups["params"], opt, header["epoch"],
                      header["best_val_acc"], header["best_epoch"], groups["best"], header["rng_state"],
                      header["history"], TrainHyper(**header["hyper"]))
