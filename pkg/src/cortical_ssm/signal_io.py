"""Recordings, labelled datasets, preprocessing and grouped k-fold splitting.

Every random draw goes through ``make_rng`` (numpy's PCG64 seeded explicitly),
so datasets, noise injection and fold assignments are reproducible from a seed.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"CSSMDS01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIId")
_SAMPLE_HEADER = struct.Struct("<II")


class ConfigurationError(ValueError):
    """Invalid parameters for an operation (bad band, electrode index, k, ...)."""


class UnsupportedRateError(ConfigurationError):
    pass


class FormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class SignalTensor:
    data: np.ndarray  # [M, T]
    fs: float
    electrode_labels: list[str] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ConfigurationError(f"signal must be [M, T], got shape {self.data.shape}")
        m, t = self.data.shape
        if m < 1 or t < 2:
            raise ConfigurationError(f"need M >= 1 and T >= 2, got M={m}, T={t}")
        if not self.fs > 0:
            raise ConfigurationError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigurationError("signal contains NaN or Inf")
        if self.electrode_labels is not None and len(self.electrode_labels) != m:
            raise ConfigurationError("electrode_labels length must equal M")

    @property
    def n_electrodes(self) -> int:
        return self.data.shape[0]

    @property
    def n_times(self) -> int:
        return self.data.shape[1]


@dataclass
class LabeledDataset:
    samples: list[SignalTensor]
    labels: list[int]
    group_key: list[int]
    n_classes: int

    def __post_init__(self):
        if not (len(self.samples) == len(self.labels) == len(self.group_key)):
            raise ConfigurationError("samples, labels and group_key must have equal length")
        if self.samples:
            m, t = self.samples[0].data.shape
            fs = self.samples[0].fs
            for i, s in enumerate(self.samples):
                if s.data.shape != (m, t) or s.fs != fs:
                    raise ConfigurationError(f"sample {i} is not dimension-consistent")
        for y in self.labels:
            if not 0 <= int(y) < self.n_classes:
                raise ConfigurationError(f"label {y} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def fs(self) -> float:
        return self.samples[0].fs

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples[0].data.shape

    def stacked(self) -> np.ndarray:
        """All sample data as one [n, M, T] array."""
        return np.stack([s.data for s in self.samples])

    def groups(self) -> list[int]:
        return sorted(set(int(g) for g in self.group_key))

    def indices_for(self, groups: Sequence[int]) -> list[int]:
        wanted = set(int(g) for g in groups)
        return [i for i, g in enumerate(self.group_key) if int(g) in wanted]

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(
            [self.samples[i] for i in indices],
            [self.labels[i] for i in indices],
            [self.group_key[i] for i in indices],
            self.n_classes,
        )


@dataclass
class FoldSplit:
    fold_index: int
    train: list[int]
    val: list[int]
    test: list[int]
    metadata: dict = field(default_factory=dict)

    def check(self) -> None:
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ConfigurationError(f"fold {self.fold_index} has overlapping groups")


@dataclass
class SyntheticSpec:
    M: int = 8
    T: int = 250
    fs: float = 250.0
    n_classes: int = 2
    # informative_electrodes[c] lists the electrodes whose carrier-band power rises for class c
    informative_electrodes: list[list[int]] = field(default_factory=lambda: [[0], [1]])
    band: tuple[float, float] = (8.0, 12.0)
    modulation_depth: float = 1.0
    snr_db: float = 5.0
    n_samples: int = 600
    n_groups: int = 6
    seed: int = 0

    def validate(self) -> None:
        if self.M < 1 or self.T < 2 or self.fs <= 0:
            raise ConfigurationError("need M >= 1, T >= 2, fs > 0")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if len(self.informative_electrodes) != self.n_classes:
            raise ConfigurationError("informative_electrodes needs one entry per class")
        for c, elecs in enumerate(self.informative_electrodes):
            for e in elecs:
                if not 0 <= e < self.M:
                    raise ConfigurationError(f"class {c}: electrode index {e} not in [0, {self.M})")
        lo, hi = self.band
        if not 0 < lo < hi < self.fs / 2:
            raise ConfigurationError(f"carrier band {self.band} must lie inside (0, {self.fs / 2})")
        if self.modulation_depth < 0:
            raise ConfigurationError("modulation depth must be non-negative")
        if self.n_samples < self.n_classes or self.n_groups < 1:
            raise ConfigurationError("need n_samples >= n_classes and n_groups >= 1")


def _bandlimited_noise(rng: np.random.Generator, shape: tuple[int, ...], fs: float,
                       band: tuple[float, float]) -> np.ndarray:
    """Gaussian noise restricted to ``band`` by FFT masking, unit variance per row."""
    t = shape[-1]
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(t, d=1.0 / fs)
    spec[..., (freqs < band[0]) | (freqs > band[1])] = 0.0
    out = np.fft.irfft(spec, n=t, axis=-1)
    std = out.std(axis=-1, keepdims=True)
    return out / np.where(std > 0, std, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Two-or-more-class band-power task.

    Every electrode carries a carrier-band rhythm. For a class-``c`` sample the
    rhythm on ``informative_electrodes[c]`` has unit variance and elsewhere it is
    attenuated by ``1 / (1 + depth)``. White Gaussian noise is added with
    variance ``10**(-snr_db/10)`` relative to the unit-variance rhythm.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    n, c = spec.n_samples, spec.n_classes
    labels = np.arange(n) % c
    labels = labels[rng.permutation(n)]
    groups = np.arange(n) % spec.n_groups
    noise_std = 10.0 ** (-spec.snr_db / 20.0)
    base = 1.0 / (1.0 + spec.modulation_depth)
    samples = []
    for i in range(n):
        gain = np.full(spec.M, base)
        gain[spec.informative_electrodes[labels[i]]] = 1.0
        rhythm = _bandlimited_noise(rng, (spec.M, spec.T), spec.fs, spec.band)
        x = gain[:, None] * rhythm + noise_std * rng.standard_normal((spec.M, spec.T))
        # stored at single precision so the binary format round-trips bit-exactly
        samples.append(SignalTensor(x.astype(np.float32), spec.fs))
    return LabeledDataset(samples, [int(y) for y in labels], [int(g) for g in groups], c)


def lowpass_taps(ratio: int, cutoff: float) -> np.ndarray:
    """Hamming-windowed sinc; ``cutoff`` as a fraction of the input Nyquist rate."""
    n = 16 * ratio + 1
    k = np.arange(n) - (n - 1) / 2
    h = cutoff * np.sinc(cutoff * k) * np.hamming(n)
    return h / h.sum()


def downsample(x: SignalTensor, target_fs: float) -> SignalTensor:
    ratio_f = x.fs / target_fs
    ratio = int(round(ratio_f))
    if target_fs <= 0 or ratio < 1 or abs(ratio_f - ratio) > 1e-9:
        raise UnsupportedRateError(f"cannot decimate {x.fs} Hz to {target_fs} Hz by an integer factor")
    if ratio == 1:
        return SignalTensor(x.data.copy(), x.fs, x.electrode_labels)
    # anti-alias at 0.9 of the new Nyquist; edge padding keeps DC exact at the borders
    taps = lowpass_taps(ratio, 0.9 / ratio)
    half = len(taps) // 2
    padded = np.pad(x.data, ((0, 0), (half, half)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, len(taps), axis=1)
    picked = windows[:, ::ratio][:, : x.n_times // ratio]
    return SignalTensor(picked @ taps[::-1], target_fs, x.electrode_labels)


def kfold_split(dataset: LabeledDataset, k: int, seed: int, share: int | None = None) -> list[FoldSplit]:
    """Group-level k-fold assignment.

    Groups are shuffled with a seeded permutation and cut into consecutive
    blocks of ``share`` groups. Fold ``i`` tests on block ``i``, validates on
    block ``i + 1`` (cyclically) and trains on everything else. The default
    ``share = max(1, round(n_groups / (k + 2)))`` gives 44/5/5 for 54 groups,
    33/4/4 for 41 and 6/1/1 for 8 with k = 8; with k = n_groups every group is
    tested exactly once.
    """
    groups = dataset.groups()
    n = len(groups)
    if k < 1 or k > n:
        raise ConfigurationError(f"k={k} needs between 1 and {n} groups")
    if share is None:
        share = max(1, int(round(n / (k + 2))))
    if share < 1 or 2 * share > n - 1 + (n == 2 * share):
        raise ConfigurationError(f"hold-out share {share} leaves no training groups out of {n}")
    perm = [groups[i] for i in make_rng(seed).permutation(n)]
    folds = []
    for i in range(k):
        test = [perm[(i * share + j) % n] for j in range(share)]
        val = [perm[((i + 1) * share + j) % n] for j in range(share)]
        held = set(test) | set(val)
        train = [g for g in perm if g not in held]
        split = FoldSplit(i, train, val, test, {"share": share, "n_groups": n, "k": k, "seed": seed})
        split.check()
        folds.append(split)
    return folds


def _periodogram(data: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    t = data.shape[-1]
    win = np.hanning(t + 2)[1:-1]
    spec = np.fft.rfft(data * win, axis=-1)
    return np.fft.rfftfreq(t, d=1.0 / fs), np.abs(spec) ** 2


def band_powers(x: SignalTensor, signal_band: tuple[float, float]) -> tuple[float, float]:
    lo, hi = signal_band
    if not 0 < lo < hi < x.fs / 2:
        raise ConfigurationError(f"signal band {signal_band} must lie inside (0, {x.fs / 2})")
    freqs, power = _periodogram(x.data, x.fs)
    inside = (freqs >= lo) & (freqs <= hi)
    total = power.sum(axis=0)
    return float(total[inside].sum()), float(total[~inside].sum())


def compute_snr(x: SignalTensor, signal_band: tuple[float, float] = (1.0, 100.0)) -> float:
    """In-band over out-of-band periodogram power in dB, pooled over electrodes."""
    s, n = band_powers(x, signal_band)
    if n <= 0:
        return float("inf")
    if s <= 0:
        return float("-inf")
    return float(10.0 * np.log10(s / n))


def noise_floor_db(x: SignalTensor, seed: int, signal_band: tuple[float, float] = (1.0, 100.0)) -> float:
    """Lowest SNR that ``degrade_snr`` with this seed can reach on x (the SNR of its noise draw)."""
    ns, nn = band_powers(SignalTensor(make_rng(seed).standard_normal(x.data.shape), x.fs), signal_band)
    return float(10 * np.log10(ns / nn))


def _windowed_spectrum(data: np.ndarray) -> np.ndarray:
    t = data.shape[-1]
    return np.fft.rfft(data * np.hanning(t + 2)[1:-1], axis=-1)


def degrade_snr(x: SignalTensor, target_db: float, seed: int,
                signal_band: tuple[float, float] = (1.0, 100.0)) -> tuple[SignalTensor, bool]:
    """Add seeded white Gaussian noise ``a * n`` so ``compute_snr`` of the result is ``target_db``.

    Returns ``(signal, changed)``. A target at or above the current SNR leaves
    the signal untouched (``changed`` is False, a warning is logged).

    The periodogram of x + a n is |X|^2 + 2a Re(X conj N) + a^2 |N|^2, so the
    band sums give a quadratic in ``a`` that is solved exactly. White noise
    alone cannot push the SNR below the SNR of the noise itself; such targets
    raise ``ConfigurationError``.
    """
    lo, hi = signal_band
    if not 0 < lo < hi < x.fs / 2:
        raise ConfigurationError(f"signal band {signal_band} must lie inside (0, {x.fs / 2})")
    s, n = band_powers(x, signal_band)
    current = 10 * np.log10(s / n) if n > 0 else np.inf
    if target_db >= current:
        log.warning("target %.2f dB is not below current SNR %.2f dB; leaving signal unchanged", target_db, current)
        return SignalTensor(x.data.copy(), x.fs, x.electrode_labels), False
    noise = make_rng(seed).standard_normal(x.data.shape)
    freqs = np.fft.rfftfreq(x.n_times, d=1.0 / x.fs)
    inside = (freqs >= lo) & (freqs <= hi)
    X, N = _windowed_spectrum(x.data), _windowed_spectrum(noise)
    cross = (X * np.conj(N)).real
    nsq = np.abs(N) ** 2
    cs, cn = cross[:, inside].sum(), cross[:, ~inside].sum()
    ns, nn = nsq[:, inside].sum(), nsq[:, ~inside].sum()
    r = 10.0 ** (target_db / 10.0)
    # (s + 2a cs + a^2 ns) = r (n + 2a cn + a^2 nn)
    qa, qb, qc = ns - r * nn, 2 * (cs - r * cn), s - r * n
    roots = np.roots([qa, qb, qc]) if qa != 0 else np.array([-qc / qb])
    positive = sorted(float(z.real) for z in np.atleast_1d(roots) if abs(z.imag) < 1e-12 and z.real > 0)
    if not positive:
        floor = 10 * np.log10(ns / nn)
        raise ConfigurationError(f"target {target_db:.2f} dB is unreachable (white-noise floor {floor:.2f} dB)")
    out = SignalTensor(x.data + positive[0] * noise, x.fs, x.electrode_labels)
    return out, True


def save_dataset(dataset: LabeledDataset, path: str | Path) -> None:
    if not dataset.samples:
        raise ConfigurationError("cannot save an empty dataset")
    m, t = dataset.shape
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, m, t, len(dataset), dataset.n_classes, float(dataset.fs))]
    for sample, y, g in zip(dataset.samples, dataset.labels, dataset.group_key):
        parts.append(_SAMPLE_HEADER.pack(int(y), int(g)))
        parts.append(np.ascontiguousarray(sample.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path: str | Path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than header", len(raw))
    magic, version, m, t, n, n_classes, fs = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if m < 1 or t < 2 or not fs > 0:
        raise FormatError(f"invalid dimensions M={m}, T={t}, fs={fs}", 12)
    offset = _HEADER.size
    block = m * t * 4
    samples, labels, groups = [], [], []
    for i in range(n):
        if offset + _SAMPLE_HEADER.size + block > len(raw):
            raise FormatError(f"truncated at sample {i} of {n}", offset)
        y, g = _SAMPLE_HEADER.unpack_from(raw, offset)
        if y >= n_classes:
            raise FormatError(f"label {y} out of range for {n_classes} classes", offset)
        offset += _SAMPLE_HEADER.size
        data = np.frombuffer(raw, dtype="<f4", count=m * t, offset=offset).reshape(m, t)
        offset += block
        samples.append(SignalTensor(data.astype(np.float64), fs))
        labels.append(int(y))
        groups.append(int(g))
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes", offset)
    return LabeledDataset(samples, labels, groups, n_classes)


def load_csv_dataset(manifest: str | Path) -> LabeledDataset:
    """Import one-sample-per-file CSV tables.

    The manifest is JSON: ``{"fs": 250, "n_classes": 2, "samples":
    [{"file": "s0.csv", "label": 0, "group": 3}, ...]}`` with file paths
    relative to the manifest. Each CSV holds M rows of T comma-separated values.
    """
    manifest = Path(manifest)
    meta = json.loads(manifest.read_text())
    samples, labels, groups = [], [], []
    for entry in meta["samples"]:
        with open(manifest.parent / entry["file"], newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        samples.append(SignalTensor(np.array(rows), float(meta["fs"])))
        labels.append(int(entry["label"]))
        groups.append(int(entry["group"]))
    return LabeledDataset(samples, labels, groups, int(meta["n_classes"]))
