import csv
import json

import numpy as np
import pytest

from bandroute import cli
from bandroute.checkpoint import load_checkpoint
from bandroute.data import ArtifactKind, read_dataset, write_dataset
from bandroute.metrics import CSV_COLUMNS

T = 64
TOY_CONFIG = {
    "model": {
        "channels": 8,
        "heads": 2,
        "band_spec": {
            "sample_rate_hz": 256.0,
            "bands": [
                {"name": "low", "lo_hz": 0.0, "hi_hz": 8.0},
                {"name": "mid", "lo_hz": 8.0, "hi_hz": 30.0},
                {"name": "high", "lo_hz": 30.0, "hi_hz": 128.0},
            ],
        },
    },
    "train": {"epochs": 2, "batch_size": 8, "lr": 3e-3},
    "data": {"snr_grid": [-2, -1, 0, 1, 2]},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "toy.json"
    cfg.write_text(json.dumps(TOY_CONFIG))
    assert run("synth", "--config", cfg, "--out", d / "d.eds", "--n-clean", 4, "--n-eog", 4,
               "--segment-length", T, "--seed", 1) == 0
    assert run("train", "--config", cfg, "--data", d / "d.eds", "--out", d / "m.brn", "--seed", 1) == 0
    return d


def read_f32(path, *shape):
    return np.fromfile(path, dtype="<f4").reshape(*shape)


# -- synth -------------------------------------------------------------------


def test_synth_output_and_counts(work, capsys, tmp_path):
    assert run("synth", "--out", tmp_path / "x.eds", "--n-clean", 3, "--n-eog", 3,
               "--segment-length", T, "--snr-grid", "-7..2") == 0
    pairs = read_dataset(tmp_path / "x.eds")
    assert len(pairs) == 30
    assert sorted({p.snr_db for p in pairs}) == list(range(-7, 3))
    out = capsys.readouterr().out
    assert "split train/val/test: 24/3/3" in out
    assert out.count(": 3") >= 10


def test_synth_mixed_kind(tmp_path):
    assert run("synth", "--out", tmp_path / "m.eds", "--kind", "mixed", "--n-clean", 2, "--n-eog", 3,
               "--n-emg", 5, "--segment-length", T, "--snr-grid", "0") == 0
    pairs = read_dataset(tmp_path / "m.eds")
    assert len(pairs) == 5 and all(p.artifact_kind is ArtifactKind.MIXED for p in pairs)


def test_seed_reproduces_bytes(work, tmp_path):
    for name in ("a", "b"):
        run("synth", "--out", tmp_path / f"{name}.eds", "--n-clean", 3, "--n-eog", 3, "--segment-length", T,
            "--seed", 9)
    assert (tmp_path / "a.eds").read_bytes() == (tmp_path / "b.eds").read_bytes()


# -- train -------------------------------------------------------------------


def test_train_writes_checkpoint_and_history(work):
    params, cfg, extra = load_checkpoint(work / "m.brn")
    assert cfg.channels == 8 and cfg.T == T and cfg.band_spec.names == ["low", "mid", "high"]
    assert extra["split_seed"] == 1 and extra["train"]["epochs"] == 2
    rows = list(csv.DictReader(open(work / "m.brn.history.csv")))
    assert len(rows) == 2
    assert list(rows[0]) == ["epoch", "train_mse", "val_rrmse_t", "val_rrmse_s", "val_cc", "val_snr_imp"]


def test_train_is_byte_reproducible(work, tmp_path):
    cfg = work / "toy.json"
    run("train", "--config", cfg, "--data", work / "d.eds", "--out", tmp_path / "again.brn", "--seed", 1)
    assert (tmp_path / "again.brn").read_bytes() == (work / "m.brn").read_bytes()


def test_train_prints_parameter_count(work, tmp_path, capsys):
    run("train", "--config", work / "toy.json", "--data", work / "d.eds", "--out", tmp_path / "e.brn",
        "--epochs", 1)
    out = capsys.readouterr().out
    assert out.startswith("parameters: ")
    assert "epoch   1" in out and "epoch   2" not in out


def test_flags_override_config(work):
    args = cli.build_parser().parse_args(["train", "--config", str(work / "toy.json"), "--data", "x",
                                          "--out", "y", "--lr", "0.5", "--seed", "4"])
    run_cfg = cli.build_run_config(args)
    assert run_cfg.train.lr == 0.5 and run_cfg.train.epochs == 2
    assert run_cfg.model.seed == run_cfg.train.seed == run_cfg.data.surrogate.seed == 4


# -- denoise -----------------------------------------------------------------


@pytest.fixture(scope="module")
def signals(work):
    x = np.stack([p.noisy for p in read_dataset(work / "d.eds")[:6]]).astype("<f4")
    x.tofile(work / "in.f32")
    return work / "in.f32"


def test_denoise_shapes_and_band_identity(work, signals):
    assert run("denoise", "--ckpt", work / "m.brn", "--in", signals, "--out", work / "y.f32",
               "--emit-bands", work / "parts") == 0
    y = read_f32(work / "y.f32", 6, T)
    bands = read_f32(work / "parts.bands.f32", 6, 3, T)
    full = read_f32(work / "parts.fullband.f32", 6, T)
    scale = np.abs(y).max()
    assert np.abs(bands.astype(np.float64).sum(axis=1) + full - y).max() <= 1e-6 * scale


def test_denoise_accepts_dataset_and_is_deterministic(work, signals):
    run("denoise", "--ckpt", work / "m.brn", "--in", signals, "--out", work / "y1.f32")
    run("denoise", "--ckpt", work / "m.brn", "--in", signals, "--out", work / "y2.f32")
    assert (work / "y1.f32").read_bytes() == (work / "y2.f32").read_bytes()
    assert run("denoise", "--ckpt", work / "m.brn", "--in", work / "d.eds", "--out", work / "y3.f32") == 0
    assert (work / "y3.f32").stat().st_size == 4 * T * 20


def test_denoise_length_mismatch_leaves_nothing(work, tmp_path):
    np.ones((2, T + 1), dtype="<f4").tofile(tmp_path / "odd.f32")
    assert run("denoise", "--ckpt", work / "m.brn", "--in", tmp_path / "odd.f32", "--out", tmp_path / "o.f32") == 3
    assert not (tmp_path / "o.f32").exists()


# -- eval --------------------------------------------------------------------


def test_eval_report(work, capsys):
    assert run("eval", "--ckpt", work / "m.brn", "--data", work / "d.eds", "--out", work / "r.csv") == 0
    rows = list(csv.DictReader(open(work / "r.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS
    samples = [r for r in rows if r["sample_id"].isdigit()]
    levels = [r for r in rows if r["sample_id"] == "level_mean"]
    assert len(samples) == 2
    assert len(levels) == len({r["snr_db"] for r in samples})
    assert rows[-1]["sample_id"] == "overall_mean"
    assert "snr_imp" in capsys.readouterr().out


def test_eval_all_subset_levels(work):
    run("eval", "--ckpt", work / "m.brn", "--data", work / "d.eds", "--out", work / "all.csv", "--subset", "all")
    rows = list(csv.DictReader(open(work / "all.csv")))
    assert sum(r["sample_id"] == "level_mean" for r in rows) == 5
    assert sum(r["sample_id"].isdigit() for r in rows) == 20


def test_eval_identity_model_has_zero_gain(work, monkeypatch):
    from bandroute.model import BandRouteNet

    monkeypatch.setattr(BandRouteNet, "predict", lambda self, x, batch_size=64: np.asarray(x, np.float64))
    run("eval", "--ckpt", work / "m.brn", "--data", work / "d.eds", "--out", work / "id.csv", "--subset", "all")
    rows = list(csv.DictReader(open(work / "id.csv")))
    assert abs(float(rows[-1]["snr_imp"])) <= 1e-6


# -- ablations and routing maps ----------------------------------------------


def _heatmap(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], [r[0] for r in rows[1:]], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def test_viz_route_csv(work):
    assert run("viz-route", "--ckpt", work / "m.brn", "--in", work / "d.eds", "--out", work / "h.csv",
               "--index", 2) == 0
    header, labels, heat = _heatmap(work / "h.csv")
    assert header == ["band"] + [str(t) for t in range(T)]
    assert labels == ["low", "mid", "high"]
    assert heat.shape == (3, T) and heat.min() >= 0 and heat.max() <= 1


def test_viz_route_plot(work):
    pytest.importorskip("matplotlib")
    assert run("viz-route", "--ckpt", work / "m.brn", "--in", work / "d.eds", "--out", work / "h2.csv",
               "--plot", work / "h.png") == 0
    assert (work / "h.png").read_bytes()[:4] == b"\x89PNG"


def test_route_all_one_heatmap(work, signals):
    ck = work / "ones.brn"
    assert run("train", "--config", work / "toy.json", "--data", work / "d.eds", "--out", ck, "--epochs", 1,
               "--ablate", "route_all_one") == 0
    run("viz-route", "--ckpt", ck, "--in", signals, "--out", work / "ones.csv")
    _, _, heat = _heatmap(work / "ones.csv")
    np.testing.assert_array_equal(heat, 1.0)


def test_no_fullband_output_is_band_sum(work, signals):
    ck = work / "nofb.brn"
    assert run("train", "--config", work / "toy.json", "--data", work / "d.eds", "--out", ck, "--epochs", 1,
               "--ablate", "no_fullband") == 0
    run("denoise", "--ckpt", ck, "--in", signals, "--out", work / "nofb.f32", "--emit-bands", work / "nofb")
    np.testing.assert_array_equal(read_f32(work / "nofb.fullband.f32", 6, T), 0.0)
    y = read_f32(work / "nofb.f32", 6, T).astype(np.float64)
    bands = read_f32(work / "nofb.bands.f32", 6, 3, T).astype(np.float64)
    assert np.abs(bands.sum(axis=1) - y).max() <= 1e-6 * np.abs(y).max()


# -- errors and exit codes ---------------------------------------------------


def test_help_lists_commands(capsys):
    assert run("--help") == 0
    out = capsys.readouterr().out
    for name in ("synth", "train", "denoise", "eval", "viz-route", "--config", "--seed", "--threads"):
        assert name in out


@pytest.mark.parametrize(
    "argv",
    [["frobnicate"], ["synth"], ["synth", "--out", "x", "--bogus"], ["synth", "--out", "x", "--snr-grid", "a..b"],
     ["synth", "--out", "x", "--split", "8:1"]],
)
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(*argv) == 2
    assert list(tmp_path.iterdir()) == []


def test_config_errors(work, tmp_path):
    assert run("train", "--data", work / "d.eds", "--out", tmp_path / "m.brn", "--channels", 12) == 2
    assert run("train", "--data", work / "d.eds", "--out", tmp_path / "m.brn", "--ablate", "no_router") == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"momentum": 0.9}}')
    assert run("train", "--config", bad, "--data", work / "d.eds", "--out", tmp_path / "m.brn") == 2
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path / "x.eds") == 2
    assert not (tmp_path / "m.brn").exists()


def test_data_errors(work, tmp_path):
    assert run("train", "--data", tmp_path / "missing.eds", "--out", tmp_path / "m.brn") == 3
    (tmp_path / "junk.brn").write_bytes(b"BRN1\x01\x00")
    assert run("eval", "--ckpt", tmp_path / "junk.brn", "--data", work / "d.eds", "--out", tmp_path / "r.csv") == 3
    blob = bytearray((work / "d.eds").read_bytes())
    blob[:4] = b"EDS9"
    (tmp_path / "bad.eds").write_bytes(bytes(blob))
    assert run("eval", "--ckpt", work / "m.brn", "--data", tmp_path / "bad.eds", "--out", tmp_path / "r.csv") == 3
    assert not (tmp_path / "r.csv").exists() and not (tmp_path / "m.brn").exists()


def test_numeric_fault_exit_code(work, tmp_path):
    code = run("train", "--config", work / "toy.json", "--data", work / "d.eds", "--out", tmp_path / "m.brn",
               "--lr", "1e30", "--epochs", 3)
    assert code == 4
    assert not (tmp_path / "m.brn").exists()


def test_threads_flag(work, tmp_path):
    assert run("--threads", 1, "synth", "--out", tmp_path / "t.eds", "--n-clean", 2, "--n-eog", 2,
               "--segment-length", T, "--snr-grid", "0") == 0
    assert run("synth", "--threads", 0, "--out", tmp_path / "u.eds") == 2
