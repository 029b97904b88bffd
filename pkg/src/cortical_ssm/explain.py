"""Gradient-weighted class activation maps for the two SSM branches.

For class n with score y_n (the pre-softmax logit by default), the channel map
weights each electrode's frequency rows of the Channel-SSM output V by their
time-averaged gradients and rectifies:

    alpha[f, m] = mean_t dy_n / dV[m, f, t]
    z_ch[m, t]  = relu(sum_f alpha[f, m] V[m, f, t])

The frequency map does the same on the Frequency-SSM output U with the roles
of electrodes and frequencies exchanged, giving z_freq[f, t].
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tape
from .model import ModelConfig, as_tensors, forward_op
from .signal_io import ConfigurationError

log = logging.getLogger(__name__)


@dataclass
class ExplanationMap:
    z_ch: np.ndarray  # [M, T]
    z_freq: np.ndarray  # [F, T]
    class_index: int
    sample_id: int | None = None


def _class_score(logits: tape.Tensor, n: int, post_softmax: bool) -> np.ndarray:
    """Seed gradient that makes backward() differentiate y_n (summed over the batch)."""
    seed = np.zeros_like(logits.data)
    if post_softmax:
        p = tape.softmax(logits.data)
        # d p_n / d logits = p_n (e_n - p)
        seed = -p[:, n:n + 1] * p
        seed[:, n] += p[:, n]
    else:
        seed[:, n] = 1.0
    return seed


def feature_gradients(cfg: ModelConfig, params: dict[str, np.ndarray], x: np.ndarray, n: int,
                      fixed: np.ndarray | None = None, post_softmax: bool = False):
    """Forward x[B, M, T] and backpropagate y_n to the last branch features.

    Returns (V, dV, U, dU) in the [B, M, F, T] layout; entries for a disabled branch are None.
    """
    if not 0 <= n < cfg.N:
        raise ConfigurationError(f"class index {n} outside [0, {cfg.N})")
    t = as_tensors(params, requires_grad=True)
    out = forward_op(cfg, t, x, fixed)
    tape.backward(out["logits"], seed=_class_score(out["logits"], n, post_softmax))
    V = dV = U = dU = None
    if "V" in out:
        v = out["V"]
        V = np.transpose(v.data, (0, 1, 3, 2))
        dV = np.transpose(v.grad if v.grad is not None else np.zeros_like(v.data), (0, 1, 3, 2))
    if "U" in out:
        u = out["U"]  # [B, F, T, M]
        U = np.transpose(u.data, (0, 3, 1, 2))
        dU = np.transpose(u.grad if u.grad is not None else np.zeros_like(u.data), (0, 3, 1, 2))
    return V, dV, U, dU


def channel_map(V: np.ndarray, dV: np.ndarray) -> np.ndarray:
    """z_ch[..., M, T] from V and dy/dV given as [..., M, F, T]."""
    alpha = dV.mean(axis=-1)  # [..., M, F]
    return np.maximum(np.einsum("...mf,...mft->...mt", alpha, V), 0.0)


def frequency_map(U: np.ndarray, dU: np.ndarray) -> np.ndarray:
    """z_freq[..., F, T] from U and dy/dU given as [..., M, F, T]."""
    alpha = dU.mean(axis=-1)  # [..., M, F]
    return np.maximum(np.einsum("...mf,...mft->...ft", alpha, U), 0.0)


def gradcam_channel(cfg: ModelConfig, params, x: np.ndarray, n: int, post_softmax: bool = False) -> np.ndarray:
    """Electrode-wise map z_ch [M, T] for one recording x[M, T]."""
    if not cfg.enable_channel_ssm:
        raise ConfigurationError("channel map needs the Channel-SSM branch")
    V, dV, _, _ = feature_gradients(cfg, params, x[None], n, post_softmax=post_softmax)
    return channel_map(V[0], dV[0])


def gradcam_freq(cfg: ModelConfig, params, x: np.ndarray, n: int, post_softmax: bool = False) -> np.ndarray:
    """Frequency-wise map z_freq [F, T] for one recording x[M, T]."""
    if not cfg.enable_frequency_ssm:
        raise ConfigurationError("frequency map needs the Frequency-SSM branch")
    _, _, U, dU = feature_gradients(cfg, params, x[None], n, post_softmax=post_softmax)
    return frequency_map(U[0], dU[0])


def explain_batch(cfg: ModelConfig, params, x: np.ndarray, n: int, fixed: np.ndarray | None = None,
                  post_softmax: bool = False, sample_ids: Sequence[int] | None = None) -> list[ExplanationMap]:
    """Both maps for every recording in x[B, M, T] with one backward pass.

    Samples in a batch do not interact, so the gradient of the summed class
    score with respect to each sample's features is that sample's own gradient.
    """
    V, dV, U, dU = feature_gradients(cfg, params, x, n, fixed, post_softmax)
    B = x.shape[0]
    zc = channel_map(V, dV) if V is not None else np.zeros((B, cfg.M, x.shape[-1]))
    zf = frequency_map(U, dU) if U is not None else np.zeros((B, cfg.F, x.shape[-1]))
    ids = list(sample_ids) if sample_ids is not None else [None] * B
    return [ExplanationMap(zc[i], zf[i], n, ids[i]) for i in range(B)]


def classwise_average(maps: Sequence[ExplanationMap], predictions: Sequence[int], labels: Sequence[int],
                      n: int) -> ExplanationMap | None:
    """Mean map over samples with label == prediction == n; None when there is no such sample."""
    chosen = [m for m, p, y in zip(maps, predictions, labels) if p == n and y == n]
    if not chosen:
        log.warning("class %d has no correctly classified samples to average", n)
        return None
    return ExplanationMap(np.mean([m.z_ch for m in chosen], axis=0),
                          np.mean([m.z_freq for m in chosen], axis=0), n, None)


def _write_matrix_csv(path: Path, row_labels: Sequence[str], header: str, mat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([header] + [f"t{i}" for i in range(mat.shape[1])])
        for lab, row in zip(row_labels, mat):
            w.writerow([lab] + [f"{v:.9g}" for v in row])


def read_map_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r[0] for r in rows], np.array([[float(v) for v in r[1:]] for r in rows])


def heatmap_rgb(mat: np.ndarray) -> np.ndarray:
    """Min-max normalise and map through a blue-white-red ramp; returns uint8 [H, W, 3].

    A constant map renders as uniform blue (the ramp's low end).
    """
    lo, hi = float(mat.min()), float(mat.max())
    v = (mat - lo) / (hi - lo) if hi > lo else np.zeros_like(mat, dtype=float)
    r = np.clip(2 * v, 0, 1)
    b = np.clip(2 * (1 - v), 0, 1)
    g = np.minimum(r, b)
    return (np.stack([r, g, b], axis=-1) * 255).round().astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def export_maps(m: ExplanationMap, electrode_labels: Sequence[str], freqs_hz: Sequence[float],
                out_dir: str | Path, stem: str, heatmap: bool = True) -> list[Path]:
    """Write z_ch / z_freq CSV and .npy, the per-electrode topo CSV, and optional PPM heatmaps."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        p = out / f"{stem}_zch.csv"
        _write_matrix_csv(p, list(electrode_labels), "electrode", m.z_ch)
        written.append(p)
        p = out / f"{stem}_zfreq.csv"
        _write_matrix_csv(p, [f"{f:.6g}" for f in freqs_hz], "freq_hz", m.z_freq)
        written.append(p)
        for name, arr in (("zch", m.z_ch), ("zfreq", m.z_freq)):
            p = out / f"{stem}_{name}.npy"
            np.save(p, arr)
            written.append(p)
        p = out / f"{stem}_topo.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["electrode_label", "score"])
            for lab, s in zip(electrode_labels, m.z_ch.mean(axis=1)):
                w.writerow([lab, f"{s:.9g}"])
        written.append(p)
        if heatmap:
            for name, arr in (("zch", m.z_ch), ("zfreq", m.z_freq)):
                p = out / f"{stem}_{name}.ppm"
                write_ppm(p, heatmap_rgb(arr))
                written.append(p)
    except OSError as exc:
        raise OSError(f"could not write maps to {out}: {exc}") from exc
    return written
