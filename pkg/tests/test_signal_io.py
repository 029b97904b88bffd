import json
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cortical_ssm.signal_io import (ConfigurationError, FormatError, LabeledDataset, SignalTensor,
                                    SyntheticSpec, UnsupportedRateError, compute_snr, degrade_snr,
                                    downsample, generate_synthetic, kfold_split, load_csv_dataset,
                                    load_dataset, noise_floor_db, save_dataset)


def small_spec(**kw):
    base = dict(M=4, T=128, fs=128.0, n_samples=24, n_groups=4, informative_electrodes=[[0], [1]])
    base.update(kw)
    return SyntheticSpec(**base)


def group_dataset(n_groups, per_group=1):
    samples = [SignalTensor(np.zeros((1, 4)), 100.0) for _ in range(n_groups * per_group)]
    groups = [g for g in range(n_groups) for _ in range(per_group)]
    return LabeledDataset(samples, [0] * len(samples), groups, 2)


# --- types -----------------------------------------------------------------

def test_signal_tensor_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        SignalTensor(np.zeros(5), 100.0)
    with pytest.raises(ConfigurationError):
        SignalTensor(np.zeros((2, 1)), 100.0)
    with pytest.raises(ConfigurationError):
        SignalTensor(np.array([[0.0, np.nan]]), 100.0)
    with pytest.raises(ConfigurationError):
        SignalTensor(np.zeros((2, 4)), 0.0)
    with pytest.raises(ConfigurationError):
        SignalTensor(np.zeros((2, 4)), 10.0, ["a"])


def test_dataset_rejects_inconsistent_samples():
    a = SignalTensor(np.zeros((2, 4)), 10.0)
    b = SignalTensor(np.zeros((3, 4)), 10.0)
    with pytest.raises(ConfigurationError):
        LabeledDataset([a, b], [0, 1], [0, 1], 2)
    with pytest.raises(ConfigurationError):
        LabeledDataset([a], [2], [0], 2)


# --- synthetic -------------------------------------------------------------

def test_synthetic_is_deterministic():
    a, b = generate_synthetic(small_spec(seed=7)), generate_synthetic(small_spec(seed=7))
    assert np.array_equal(a.stacked(), b.stacked())
    assert a.labels == b.labels and a.group_key == b.group_key
    c = generate_synthetic(small_spec(seed=8))
    assert not np.array_equal(a.stacked(), c.stacked())


@given(n=st.integers(4, 60), c=st.integers(2, 4))
def test_synthetic_class_balance(n, c):
    spec = small_spec(n_samples=n, n_classes=c, informative_electrodes=[[i % 4] for i in range(c)], T=16)
    counts = np.bincount(generate_synthetic(spec).labels, minlength=c)
    assert np.all(np.abs(counts - n / c) <= 1)


@pytest.mark.parametrize("bad", [
    dict(band=(0.0, 12.0)), dict(band=(8.0, 80.0)), dict(informative_electrodes=[[0], [9]]),
    dict(informative_electrodes=[[0]]), dict(modulation_depth=-1.0),
])
def test_synthetic_validation(bad):
    with pytest.raises(ConfigurationError):
        generate_synthetic(small_spec(**bad))


def _band_power(x, fs, lo, hi):
    """Welch-style oracle: average Hann periodogram over 4 half-overlapping segments."""
    n = x.shape[-1] // 2
    win = np.hanning(n)
    segs = [x[..., s:s + n] for s in range(0, x.shape[-1] - n + 1, n // 2)]
    freqs = np.fft.rfftfreq(n, 1 / fs)
    psd = np.mean([np.abs(np.fft.rfft(s * win, axis=-1)) ** 2 for s in segs], axis=0)
    return psd[..., (freqs >= lo) & (freqs <= hi)].sum(axis=-1)


def test_synthetic_informative_power_ratio():
    ds = generate_synthetic(SyntheticSpec(n_samples=200, seed=1))
    x, y = ds.stacked(), np.array(ds.labels)
    p = _band_power(x, ds.fs, 8, 12)
    for c, elec in enumerate([0, 1]):
        informative = p[y == c, elec].mean()
        others = np.delete(p[y == c], [0, 1], axis=1).mean()
        assert informative >= 2 * others


def test_synthetic_zero_depth_has_no_class_effect():
    ds = generate_synthetic(SyntheticSpec(n_samples=400, modulation_depth=0.0, seed=2))
    x, y = ds.stacked(), np.array(ds.labels)
    p = _band_power(x, ds.fs, 8, 12)
    m0, m1 = p[y == 0].mean(axis=0), p[y == 1].mean(axis=0)
    assert np.all(np.abs(m0 - m1) / m0 < 0.15)


# --- downsample ------------------------------------------------------------

def test_downsample_length_and_rate():
    out = downsample(SignalTensor(np.zeros((2, 4000)), 1000.0), 250.0)
    assert out.data.shape == (2, 1000) and out.fs == 250.0


def test_downsample_preserves_constant():
    out = downsample(SignalTensor(np.full((1, 400), 3.25), 1000.0), 250.0)
    assert np.allclose(out.data, 3.25, atol=1e-12)


def test_downsample_sinusoid_amplitude():
    t = np.arange(4000) / 1000.0
    out = downsample(SignalTensor(np.sin(2 * np.pi * 10 * t)[None], 1000.0), 250.0)
    ref = np.sin(2 * np.pi * 10 * np.arange(1000) / 250.0)
    core = slice(100, 900)
    amp = np.linalg.lstsq(ref[core, None], out.data[0, core], rcond=None)[0][0]
    assert abs(amp - 1) < 0.02
    assert np.max(np.abs(out.data[0, core] - ref[core])) < 0.02


def test_downsample_rejects_fractional_ratio():
    with pytest.raises(UnsupportedRateError):
        downsample(SignalTensor(np.zeros((1, 100)), 1000.0), 300.0)


# --- k-fold ----------------------------------------------------------------

@pytest.mark.parametrize("n, k, sizes", [(54, 8, (44, 5, 5)), (8, 8, (6, 1, 1)), (41, 8, (33, 4, 4))])
def test_kfold_sizes(n, k, sizes):
    folds = kfold_split(group_dataset(n), k, seed=0)
    assert len(folds) == k
    for f in folds:
        assert (len(f.train), len(f.val), len(f.test)) == sizes
        assert set(f.train) | set(f.val) | set(f.test) == set(range(n))


@given(n=st.integers(3, 30), seed=st.integers(0, 2 ** 32 - 1))
def test_kfold_full_rotation_tests_each_group_once(n, seed):
    folds = kfold_split(group_dataset(n), n, seed)
    tested = [g for f in folds for g in f.test]
    assert sorted(tested) == list(range(n))
    for f in folds:
        assert not (set(f.train) & set(f.val) or set(f.train) & set(f.test) or set(f.val) & set(f.test))


def test_kfold_too_many_folds():
    with pytest.raises(ConfigurationError):
        kfold_split(group_dataset(4), 5, seed=0)


def test_kfold_deterministic():
    a = kfold_split(group_dataset(20), 5, seed=3)
    b = kfold_split(group_dataset(20), 5, seed=3)
    assert [(f.train, f.val, f.test) for f in a] == [(f.train, f.val, f.test) for f in b]


# --- SNR -------------------------------------------------------------------

def tone(freq, fs=250.0, T=1000, amp=1.0):
    return SignalTensor(amp * np.sin(2 * np.pi * freq * np.arange(T) / fs)[None], fs)


def test_snr_pure_tones():
    assert compute_snr(tone(10)) >= 40
    assert compute_snr(tone(120)) <= -20


def test_snr_white_noise_bandwidth_ratio():
    rng = np.random.Generator(np.random.PCG64(0))
    x = SignalTensor(rng.standard_normal((16, 5000)), 250.0)
    assert abs(compute_snr(x) - 10 * np.log10(99 / 26)) < 0.3


def test_snr_infinite_sentinel_for_zero_out_of_band():
    # DC sits outside [1, 100] Hz; a zero signal has no power anywhere
    assert compute_snr(SignalTensor(np.zeros((1, 64)), 250.0)) in (float("inf"), float("-inf"))


def test_degrade_to_zero_db():
    x = tone(10, fs=1000.0, T=2000)
    y, changed = degrade_snr(x, 0.0, seed=5)
    assert changed
    assert -0.5 <= compute_snr(y) <= 0.5


def test_degrade_twice_is_near_noop():
    x = tone(10, fs=1000.0, T=2000)
    y, _ = degrade_snr(x, 3.0, seed=5)
    z, _ = degrade_snr(y, 3.0, seed=6)
    assert abs(compute_snr(z) - compute_snr(y)) <= 0.5


def test_degrade_deterministic_and_warns_above_current(caplog):
    x = tone(10, fs=1000.0, T=2000)
    assert np.array_equal(degrade_snr(x, 10.0, 1)[0].data, degrade_snr(x, 10.0, 1)[0].data)
    with caplog.at_level(logging.WARNING):
        y, changed = degrade_snr(x, 200.0, 1)
    assert not changed and np.array_equal(y.data, x.data) and caplog.records


def test_degrade_below_floor_is_configuration_error():
    x = tone(10)
    floor = noise_floor_db(x, 1)
    with pytest.raises(ConfigurationError):
        degrade_snr(x, floor - 1.0, 1)


@given(target=st.floats(8.0, 30.0), seed=st.integers(0, 1000))
def test_degrade_hits_target_property(target, seed):
    x = tone(10, fs=1000.0, T=1000)
    y, changed = degrade_snr(x, target, seed)
    assert changed and abs(compute_snr(y) - target) <= 0.5


# --- file formats ----------------------------------------------------------

def test_binary_round_trip_bit_exact(tmp_path):
    ds = generate_synthetic(small_spec())
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert np.array_equal(back.stacked(), ds.stacked())
    assert back.labels == ds.labels and back.group_key == ds.group_key and back.fs == ds.fs
    save_dataset(back, tmp_path / "e.bin")
    assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes()


def test_binary_header_layout(tmp_path):
    ds = generate_synthetic(small_spec(n_samples=2))
    save_dataset(ds, tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:8] == b"CSSMDS01"
    assert np.frombuffer(raw[8:28], "<u4").tolist() == [1, 4, 128, 2, 2]
    assert np.frombuffer(raw[28:36], "<f8")[0] == 128.0
    assert len(raw) == 36 + 2 * (8 + 4 * 128 * 4)


def test_truncated_and_corrupt_files(tmp_path):
    ds = generate_synthetic(small_spec(n_samples=4))
    save_dataset(ds, tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(FormatError) as err:
        load_dataset(tmp_path / "t.bin")
    assert err.value.offset > 0
    (tmp_path / "m.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "m.bin")
    (tmp_path / "x.bin").write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "x.bin")
    (tmp_path / "s.bin").write_bytes(raw[:10])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "s.bin")


def test_csv_import_matches_binary(tmp_path):
    ds = generate_synthetic(small_spec(n_samples=3))
    entries = []
    for i, (s, y, g) in enumerate(zip(ds.samples, ds.labels, ds.group_key)):
        np.savetxt(tmp_path / f"s{i}.csv", s.data, delimiter=",", fmt="%.9g")
        entries.append({"file": f"s{i}.csv", "label": y, "group": g})
    (tmp_path / "manifest.json").write_text(json.dumps({"fs": ds.fs, "n_classes": 2, "samples": entries}))
    via_csv = load_csv_dataset(tmp_path / "manifest.json")
    save_dataset(ds, tmp_path / "d.bin")
    via_bin = load_dataset(tmp_path / "d.bin")
    assert np.array_equal(via_csv.stacked().astype(np.float32), via_bin.stacked().astype(np.float32))
    assert via_csv.labels == via_bin.labels and via_csv.group_key == via_bin.group_key
