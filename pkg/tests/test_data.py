import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bandroute.data import (
    DATASET_MAGIC,
    ArtifactKind,
    SignalPair,
    SurrogateConfig,
    augment_snr_grid,
    contaminate,
    pairs_to_arrays,
    read_dataset,
    read_f32_matrix,
    solve_lambda,
    split,
    snr_rms_db,
    standardize,
    synth_surrogate,
    write_dataset,
)
from bandroute.exceptions import DataError
from bandroute.metrics import cc, rrmse_t
from bandroute.spectral import psd


def unit(rng, T=256):
    x = rng.standard_normal(T)
    return x / np.sqrt(np.mean(x**2))


def test_lambda_identity_ratio(rng):
    assert solve_lambda(unit(rng), unit(rng), 0.0) == pytest.approx(1.0, abs=1e-12)


def test_lambda_minus_ten_db(rng):
    assert solve_lambda(unit(rng), unit(rng), -10.0) == pytest.approx(10.0, rel=1e-12)


@given(st.floats(-20, 20), st.integers(0, 2**31))
def test_lambda_round_trip(snr, seed):
    rng = np.random.default_rng(seed)
    x, n = rng.standard_normal(128) * 3, rng.standard_normal(128)
    lam = solve_lambda(x, n, snr)
    assert abs(snr_rms_db(x, lam * n) - snr) <= 1e-9


def test_zero_artifact_is_rejected(rng):
    with pytest.raises(DataError):
        solve_lambda(unit(rng), np.zeros(256), 0.0)
    with pytest.raises(DataError):
        contaminate(unit(rng))


def test_infinite_snr_leaves_signal_clean(rng):
    x = unit(rng)
    pair = contaminate(x, n_eog=unit(rng), snr_db=math.inf)
    np.testing.assert_array_equal(pair.noisy, x)


def test_mixed_with_equal_artifacts(rng):
    x, n = unit(rng), unit(rng)
    pair = contaminate(x, n_eog=n, n_emg=n, snr_db=-3.0)
    lam = solve_lambda(x, n, -3.0)
    np.testing.assert_allclose(pair.noisy - x, 2 * lam * n, atol=1e-12)
    assert pair.artifact_kind is ArtifactKind.MIXED


def test_standardize_unit_std_and_invariants(rng):
    pair = contaminate(unit(rng) * 40, n_eog=unit(rng), snr_db=-5)
    s = standardize(pair)
    assert abs(np.std(s.noisy) - 1.0) <= 1e-9
    assert cc(s.noisy, s.clean) == pytest.approx(cc(pair.noisy, pair.clean), abs=1e-14)
    assert rrmse_t(s.noisy, s.clean) == pytest.approx(rrmse_t(pair.noisy, pair.clean), rel=1e-12)


def test_standardize_constant_noisy():
    with pytest.raises(DataError):
        standardize(SignalPair(np.ones(8), np.ones(8), 0.0))


def test_grid_counts(rng):
    clean = rng.standard_normal((10, 64))
    eog = rng.standard_normal((10, 64))
    pairs = augment_snr_grid(clean, eog, grid=range(-7, 3))
    assert len(pairs) == 100
    assert len(augment_snr_grid(clean, eog, grid=[0])) == 10


def test_grid_pairs_hit_their_labels(rng):
    clean, eog, emg = synth_surrogate(SurrogateConfig(n_clean=6, n_eog=6, n_emg=9, segment_length=128))
    for kind in ("eog", "emg"):
        for p in augment_snr_grid(clean, eog, emg, grid=range(-7, 3), kind=kind):
            assert abs(snr_rms_db(p.clean, p.noisy - p.clean) - p.snr_db) <= 1e-9


def test_emg_reuses_clean_segments(rng):
    clean = rng.standard_normal((3, 32))
    pairs = augment_snr_grid(clean, emg=rng.standard_normal((7, 32)), grid=[0.0], kind="emg", seed=1)
    assert len(pairs) == 7
    for p in pairs:
        assert any(np.array_equal(p.clean, c) for c in clean)


def test_missing_artifacts(rng):
    with pytest.raises(DataError):
        augment_snr_grid(rng.standard_normal((3, 32)), None, kind="eog")
    with pytest.raises(DataError):
        ArtifactKind.parse("ecg")


# -- surrogates --------------------------------------------------------------


def _energy_fraction(sig, lo, hi):
    est = psd(sig, fs=256.0)
    band = (est.freqs >= lo) & (est.freqs < hi)
    return est.density[..., band].sum(-1) / est.density.sum(-1)


def test_surrogate_spectra():
    clean, eog, emg = synth_surrogate(SurrogateConfig(n_clean=20, n_eog=20, n_emg=20))
    assert np.all(_energy_fraction(eog, 0, 8) >= 0.9)
    assert np.all(_energy_fraction(emg, 20, 1e9) >= 0.8)
    for arr in (clean, eog, emg):
        np.testing.assert_allclose(np.sqrt((arr**2).mean(-1)), 1.0, atol=1e-12)


def test_surrogate_is_seeded():
    a = synth_surrogate(SurrogateConfig(n_clean=4, n_eog=4, n_emg=4, seed=3))
    b = synth_surrogate(SurrogateConfig(n_clean=4, n_eog=4, n_emg=4, seed=3))
    c = synth_surrogate(SurrogateConfig(n_clean=4, n_eog=4, n_emg=4, seed=4))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a[0], c[0])


# -- splits ------------------------------------------------------------------


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (101, (81, 10, 10)), (2000, (1600, 200, 200))])
def test_split_sizes(n, sizes):
    assert split(n).sizes() == sizes


@given(st.integers(10, 500), st.integers(0, 1000))
def test_split_partitions(n, seed):
    s = split(n, seed=seed)
    allidx = np.concatenate([s.train, s.val, s.test])
    np.testing.assert_array_equal(np.sort(allidx), np.arange(n))
    np.testing.assert_array_equal(s.indices("all"), np.arange(n))
    t = split(n, seed=seed)
    np.testing.assert_array_equal(s.train, t.train)


def test_split_too_small():
    with pytest.raises(DataError):
        split(5)


# -- files -------------------------------------------------------------------


def _pairs(rng, n=3, T=16, kind=ArtifactKind.EOG):
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    return [
        SignalPair(f32(rng.standard_normal(T)), f32(rng.standard_normal(T)), float(i - 1), kind) for i in range(n)
    ]


def test_dataset_round_trip(tmp_path, rng):
    pairs = _pairs(rng)
    path = tmp_path / "d.eds"
    write_dataset(pairs, path)
    back = read_dataset(path)
    assert len(back) == 3
    for a, b in zip(pairs, back):
        np.testing.assert_array_equal(a.clean, b.clean)
        np.testing.assert_array_equal(a.noisy, b.noisy)
        assert a.snr_db == b.snr_db and b.artifact_kind is ArtifactKind.EOG
    write_dataset(back, tmp_path / "again.eds")
    assert path.read_bytes() == (tmp_path / "again.eds").read_bytes()


def test_dataset_layout(tmp_path, rng):
    path = tmp_path / "d.eds"
    write_dataset(_pairs(rng, 2, 4, ArtifactKind.MIXED), path)
    blob = path.read_bytes()
    assert blob[:4] == DATASET_MAGIC
    assert struct.unpack_from("<IIIB", blob, 4) == (1, 2, 4, 2)
    assert len(blob) == 17 + 2 * 4 * 9


def _corrupt(tmp_path, rng, edit):
    path = tmp_path / "d.eds"
    write_dataset(_pairs(rng), path)
    blob = bytearray(path.read_bytes())
    edit(blob)
    path.write_bytes(bytes(blob))
    return path


@pytest.mark.parametrize(
    "edit",
    [
        lambda b: b.__setitem__(slice(0, 4), b"XXXX"),
        lambda b: b.__setitem__(slice(4, 8), struct.pack("<I", 9)),
        lambda b: b.__setitem__(slice(12, 16), struct.pack("<I", 15)),
        lambda b: b.__setitem__(16, 7),
        lambda b: b.__delitem__(slice(-4, None)),
        lambda b: b.__delitem__(slice(10, None)),
    ],
    ids=["magic", "version", "length", "kind", "truncated", "header"],
)
def test_corrupt_dataset_rejected(tmp_path, rng, edit):
    with pytest.raises(DataError):
        read_dataset(_corrupt(tmp_path, rng, edit))


def test_mixed_kinds_refused(tmp_path, rng):
    pairs = _pairs(rng) + _pairs(rng, 1, kind=ArtifactKind.EMG)
    with pytest.raises(DataError):
        write_dataset(pairs, tmp_path / "d.eds")
    assert not (tmp_path / "d.eds").exists()


def test_f32_matrix_reader(tmp_path, rng):
    arr = rng.standard_normal((3, 8)).astype("<f4")
    arr.tofile(tmp_path / "m.f32")
    np.testing.assert_array_equal(read_f32_matrix(tmp_path / "m.f32", 8), arr)
    with pytest.raises(DataError):
        read_f32_matrix(tmp_path / "m.f32", 5)


def test_pairs_to_arrays(rng):
    noisy, clean, snr = pairs_to_arrays(_pairs(rng, 4, 8))
    assert noisy.shape == clean.shape == (4, 8)
    np.testing.assert_array_equal(snr, [-1, 0, 1, 2])
    with pytest.raises(DataError):
        pairs_to_arrays([])
