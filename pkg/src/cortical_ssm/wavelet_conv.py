"""Frequency front-end: fixed Morlet/STFT filter bank plus a learned convolution.

Each electrode's trace is expanded into F frequency rows by two branches. The
fixed branch correlates the trace with complex Morlet wavelets (or Hann
windowed complex exponentials) and keeps the magnitude; the learned branch is
a bias-free 1-D convolution with F kernels of length round(fs / 2). Both are
standardised along time and averaged with weights 1/2 and 1/2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal_io import ConfigurationError, SignalTensor
from .tape import Tensor, node

# envelope exp(-u^2/2) falls below 1e-4 of its peak at |u| = sqrt(2 ln 1e4)
ENVELOPE_CUTOFF = float(np.sqrt(2.0 * np.log(1e4)))
FFT_THRESHOLD = 2_000_000
BRANCH_WEIGHTS = (0.5, 0.5)


@dataclass
class MorletFilterbank:
    psi: np.ndarray  # complex [F, T_kernel], centred on the middle column
    freqs: np.ndarray
    scales: np.ndarray
    omega0: float
    fs: float

    @property
    def kernel_lengths(self) -> np.ndarray:
        """Per-row support where the envelope exceeds 1e-4 of its peak."""
        return 2 * np.ceil(ENVELOPE_CUTOFF * self.scales).astype(int) + 1

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "scale_s", "kernel_len"])
            for f, s, k in zip(self.freqs, self.scales, self.kernel_lengths):
                w.writerow([repr(float(f)), repr(float(s)), int(k)])


@dataclass
class FrontEndConfig:
    e_branch: str = "cwt"  # cwt | stft | none
    a_branch: str = "conv1d"  # conv1d | none
    F: int = 50
    f_min: float = 1.0
    f_max: float = 100.0
    omega0: float = 6.0
    reduction: str = "magnitude"  # magnitude | real

    def validate(self) -> None:
        if self.e_branch not in ("cwt", "stft", "none"):
            raise ConfigurationError(f"unknown E-branch {self.e_branch!r}")
        if self.a_branch not in ("conv1d", "none"):
            raise ConfigurationError(f"unknown A-branch {self.a_branch!r}")
        if self.e_branch == "none" and self.a_branch == "none":
            raise ConfigurationError("front-end needs at least one branch")
        if self.reduction not in ("magnitude", "real"):
            raise ConfigurationError(f"unknown reduction {self.reduction!r}")
        if self.F < 1 or not 0 < self.f_min < self.f_max:
            raise ConfigurationError("need F >= 1 and 0 < f_min < f_max")


def filter_freqs(F: int, f_min: float, f_max: float) -> np.ndarray:
    alpha = np.arange(1, F + 1)
    return f_min + alpha * (f_max - f_min) / F


def morlet_scale(freq, fs: float, omega0: float):
    return omega0 * fs / (2.0 * np.pi * np.asarray(freq, dtype=float))


def build_morlet_filterbank(F: int, f_min: float, f_max: float, fs: float,
                            omega0: float = 6.0) -> MorletFilterbank:
    if F < 1:
        raise ConfigurationError("F must be at least 1")
    if not 0 < f_min < f_max:
        raise ConfigurationError(f"need 0 < f_min < f_max, got ({f_min}, {f_max})")
    if f_max > fs / 2:
        raise ConfigurationError(f"f_max={f_max} Hz is beyond the Nyquist rate {fs / 2} Hz")
    freqs = filter_freqs(F, f_min, f_max)
    scales = morlet_scale(freqs, fs, omega0)
    half = int(np.ceil(ENVELOPE_CUTOFF * scales.max()))
    t = np.arange(-half, half + 1, dtype=float)
    u = t[None, :] / scales[:, None]
    psi = (np.sqrt(1.0 / scales)[:, None] * np.pi ** -0.25
           * np.exp(1j * omega0 * u) * np.exp(-0.5 * u ** 2))
    return MorletFilterbank(psi, freqs, scales, omega0, fs)


def stft_kernels(F: int, f_min: float, f_max: float, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed complex exponentials, normalised so a unit sinusoid reads ~1."""
    n = int(round(fs / 2))
    win = np.hanning(n + 2)[1:-1]
    freqs = np.linspace(f_min, f_max, F)
    tau = np.arange(n) - (n - 1) // 2
    kernels = win[None, :] * np.exp(2j * np.pi * freqs[:, None] * tau[None, :] / fs) * (2.0 / win.sum())
    return kernels, freqs


def complex_correlate(x: np.ndarray, kernels: np.ndarray, method: str = "auto") -> np.ndarray:
    """out[..., t, f] = sum_k x[..., t + k - c] * conj(kernels[f, k]), zero padded, c = (K - 1) // 2.

    ``x`` is real [..., T]; the result is complex [..., T, F].
    """
    x = np.asarray(x, dtype=float)
    F, K = kernels.shape
    T = x.shape[-1]
    left, right = (K - 1) // 2, K // 2
    if method == "auto":
        method = "fft" if T * F * K > FFT_THRESHOLD else "direct"
    if method == "direct":
        padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(left, right)])
        windows = np.lib.stride_tricks.sliding_window_view(padded, K, axis=-1)
        return windows @ np.conj(kernels).T
    if method != "fft":
        raise ValueError(f"unknown method {method!r}")
    n = T + K - 1
    nfft = 1 << (n - 1).bit_length()
    xs = np.fft.fft(x, nfft, axis=-1)
    # correlation with kernel k == convolution with reversed conj(k)
    ks = np.fft.fft(np.conj(kernels[:, ::-1]), nfft, axis=-1)
    full = np.fft.ifft(xs[..., None, :] * ks, axis=-1)  # [..., F, nfft]
    start = K - 1 - left
    return np.swapaxes(full[..., start:start + T], -1, -2)


def _reduce(z: np.ndarray, reduction: str) -> np.ndarray:
    return np.abs(z) if reduction == "magnitude" else z.real


def cwt(x: np.ndarray, bank: MorletFilterbank, method: str = "auto", reduction: str = "magnitude") -> np.ndarray:
    """Magnitude (or real part) of the Morlet transform of x[T]; returns [F, T]."""
    return _reduce(complex_correlate(x, bank.psi, method), reduction).T


def stft_branch(x: np.ndarray, F: int, f_min: float, f_max: float, fs: float) -> np.ndarray:
    """Sliding Hann-window DFT magnitude at hop 1, F bins over [f_min, f_max]; returns [F, T]."""
    kernels, _ = stft_kernels(F, f_min, f_max, fs)
    return np.abs(complex_correlate(x, kernels)).T


def conv_kernel_length(fs: float) -> int:
    return int(round(fs / 2))


def conv1d_branch(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """'same' cross-correlation of x[T] with each row of kernels[F, K]; returns [F, T]."""
    if kernels.shape[1] > len(x):
        raise ConfigurationError(f"kernel length {kernels.shape[1]} exceeds signal length {len(x)}")
    K = kernels.shape[1]
    padded = np.pad(np.asarray(x, dtype=float), ((K - 1) // 2, K // 2))
    return (np.lib.stride_tricks.sliding_window_view(padded, K) @ kernels.T).T


def temporal_layernorm(z: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Standardise each row of z[F, T] along time, then per-row affine."""
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    return (z - mu) / np.sqrt(var + eps) * gamma[:, None] + beta[:, None]


def fixed_features(x: np.ndarray, cfg: FrontEndConfig, fs: float, bank: MorletFilterbank | None = None) -> np.ndarray:
    """E-branch features for a batch x[..., T], laid out [..., T, F]. Parameter-free, so cacheable."""
    if cfg.e_branch == "cwt":
        bank = bank or build_morlet_filterbank(cfg.F, cfg.f_min, cfg.f_max, fs, cfg.omega0)
        return _reduce(complex_correlate(x, bank.psi), cfg.reduction)
    if cfg.e_branch == "stft":
        kernels, _ = stft_kernels(cfg.F, cfg.f_min, cfg.f_max, fs)
        return np.abs(complex_correlate(x, kernels))
    raise ConfigurationError("E-branch is disabled")


def conv1d_op(x: Tensor, kernels: Tensor) -> Tensor:
    """Tape op: x[..., T] correlated with kernels[F, K] -> [..., T, F]."""
    F, K = kernels.shape
    left, right = (K - 1) // 2, K // 2
    padded = np.pad(x.data, [(0, 0)] * (x.data.ndim - 1) + [(left, right)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, K, axis=-1)  # [..., T, K]
    out = windows @ kernels.data.T

    def back(g):
        gk = g.reshape(-1, F).T @ windows.reshape(-1, K)
        gx = None
        if x.requires_grad:
            gp = np.zeros(padded.shape, dtype=g.dtype)
            contrib = g @ kernels.data  # [..., T, K]
            T = x.shape[-1]
            for k in range(K):
                gp[..., k:k + T] += contrib[..., k]
            gx = gp[..., left:left + T]
        return gx, gk

    return node(out, (x, kernels), back, "conv1d")


def correlate_magnitude_op(x: Tensor, kernels: np.ndarray) -> Tensor:
    """Tape op for |complex_correlate(x, kernels)|, differentiable in the signal."""
    z = complex_correlate(x.data, kernels)
    mag = np.abs(z)
    K = kernels.shape[1]
    left = (K - 1) // 2

    def back(g):
        phase = np.divide(z, mag, out=np.zeros_like(z), where=mag > 0)
        contrib = ((g * phase) @ kernels).real  # [..., T, K]
        T = x.shape[-1]
        gp = np.zeros(x.shape[:-1] + (T + K - 1,))
        for k in range(K):
            gp[..., k:k + T] += contrib[..., k]
        return (gp[..., left:left + T],)

    return node(mag, (x,), back, "cwt_magnitude")


def wavelet_conv_forward(X: SignalTensor, cfg: FrontEndConfig, params: dict[str, np.ndarray],
                         eps: float = 1e-5) -> np.ndarray:
    """Reference front-end for one recording; returns [M, F, T].

    ``params`` holds ``conv`` [F, K], ``ln_e_gamma``/``ln_e_beta`` and
    ``ln_a_gamma``/``ln_a_beta`` ([F] each) as used by the enabled branches.
    """
    cfg.validate()
    parts = []
    for x in X.data:
        rows = []
        if cfg.e_branch == "cwt":
            bank = build_morlet_filterbank(cfg.F, cfg.f_min, cfg.f_max, X.fs, cfg.omega0)
            rows.append(temporal_layernorm(cwt(x, bank, reduction=cfg.reduction),
                                           params["ln_e_gamma"], params["ln_e_beta"], eps))
        elif cfg.e_branch == "stft":
            rows.append(temporal_layernorm(stft_branch(x, cfg.F, cfg.f_min, cfg.f_max, X.fs),
                                           params["ln_e_gamma"], params["ln_e_beta"], eps))
        if cfg.a_branch == "conv1d":
            rows.append(temporal_layernorm(conv1d_branch(x, params["conv"]),
                                           params["ln_a_gamma"], params["ln_a_beta"], eps))
        parts.append(BRANCH_WEIGHTS[0] * rows[0] + BRANCH_WEIGHTS[1] * rows[1] if len(rows) == 2 else rows[0])
    return np.stack(parts)
