"""``bandroute`` command line: synth, train, denoise, eval, viz-route.

Settings come from built-in defaults, then an optional ``--config`` JSON
file, then command-line flags (flags win). Exit codes: 0 success, 2 usage or
configuration error, 3 data error, 4 numeric fault.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from ._io import atomic_write
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DATASET_MAGIC,
    DEFAULT_SNR_GRID,
    ArtifactKind,
    SignalPair,
    SurrogateConfig,
    augment_snr_grid,
    read_dataset,
    read_f32_matrix,
    split,
    standardize,
    synth_surrogate,
    write_dataset,
)
from .exceptions import BandRouteError, ConfigError, DataError, NumericFault
from .model import Ablation, BandRouteNet, ModelConfig, count_params, routing_heatmap
from .spectral import BandSpec
from .tensor import no_grad
from .train import TrainConfig, evaluate, fit, write_history

log = logging.getLogger("bandroute")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATIONS = tuple(f.name for f in dataclasses.fields(Ablation))


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class DataSettings:
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    snr_grid: List[float] = field(default_factory=lambda: list(DEFAULT_SNR_GRID))
    kind: str = "eog"
    split_ratio: List[int] = field(default_factory=lambda: [8, 1, 1])

    def validate(self) -> None:
        ArtifactKind.parse(self.kind)
        if not self.snr_grid:
            raise ConfigError("SNR grid is empty")
        if len(self.split_ratio) != 3 or any(r < 0 for r in self.split_ratio) or self.split_ratio[0] <= 0:
            raise ConfigError(f"split ratio must be three non-negative integers, got {self.split_ratio}")
        s = self.surrogate
        if min(s.n_clean, s.n_eog, s.n_emg) < 1 or s.segment_length < 2 or s.sample_rate_hz <= 0:
            raise ConfigError("surrogate counts must be >= 1, segment_length >= 2, sample rate > 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSettings = field(default_factory=DataSettings)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": {
                "surrogate": dataclasses.asdict(self.data.surrogate),
                "snr_grid": list(self.data.snr_grid),
                "kind": self.data.kind,
                "split_ratio": list(self.data.split_ratio),
            },
        }


def parse_snr_grid(text: str) -> List[float]:
    """``"-7..2"`` (integer steps, inclusive) or a comma list ``"-5,0,5"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (float(v) for v in text.split(".."))
            if hi < lo:
                raise ConfigError(f"empty SNR range {text!r}")
            return [lo + i for i in range(int(np.floor(hi - lo)) + 1)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse SNR grid {text!r}; use e.g. -7..2 or -5,0,5") from None


def parse_ratio(text: str) -> List[int]:
    try:
        parts = [int(v) for v in text.replace(",", ":").split(":")]
    except ValueError:
        raise ConfigError(f"split ratio {text!r} must look like 8:1:1") from None
    if len(parts) != 3:
        raise ConfigError(f"split ratio {text!r} must have three parts")
    return parts


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(blob, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = set(blob) - {"model", "train", "data", "ablation"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return blob


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the JSON file, then flags."""
    blob = _read_json(args.config) if getattr(args, "config", None) else {}
    model_d = dict(blob.get("model", {}))
    train_d = dict(blob.get("train", {}))
    data_d = dict(blob.get("data", {}))

    abl = dict(model_d.pop("ablation", {}) or {})
    section = blob.get("ablation", {})
    if isinstance(section, list):
        section = {n: True for n in section}
    abl.update(section)
    for name in getattr(args, "ablate", None) or []:
        abl[name] = True
    try:
        ablation = Ablation(**abl)
    except TypeError:
        raise ConfigError(f"unknown ablation flag(s) in {sorted(abl)}; choose from {list(ABLATIONS)}") from None

    sur_d = dict(data_d.pop("surrogate", {}))
    for flag, key in (("n_clean", "n_clean"), ("n_eog", "n_eog"), ("n_emg", "n_emg"),
                      ("segment_length", "segment_length"), ("sample_rate", "sample_rate_hz")):
        if getattr(args, flag, None) is not None:
            sur_d[key] = getattr(args, flag)
    seed = getattr(args, "seed", None)
    if seed is not None:
        sur_d["seed"] = seed
        model_d["seed"] = seed
        train_d["seed"] = seed
    try:
        surrogate = SurrogateConfig(**sur_d)
    except TypeError as e:
        raise ConfigError(f"bad surrogate settings: {e}") from None
    data = DataSettings(
        surrogate=surrogate,
        snr_grid=[float(v) for v in data_d.get("snr_grid", DEFAULT_SNR_GRID)],
        kind=str(data_d.get("kind", "eog")),
        split_ratio=list(data_d.get("split_ratio", [8, 1, 1])),
    )
    if getattr(args, "snr_grid", None):
        data.snr_grid = parse_snr_grid(args.snr_grid)
    if getattr(args, "kind", None):
        data.kind = args.kind
    if getattr(args, "split", None):
        data.split_ratio = parse_ratio(args.split)
    unknown = set(data_d) - {"snr_grid", "kind", "split_ratio"}
    if unknown:
        raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
    data.validate()

    for flag in ("channels", "heads", "dtype"):
        if getattr(args, flag, None) is not None:
            model_d[flag] = getattr(args, flag)
    model_d["ablation"] = dataclasses.asdict(ablation)
    model = ModelConfig.from_dict(model_d)

    for flag in ("lr", "weight_decay", "epochs", "batch_size", "clip_grad", "lr_schedule"):
        if getattr(args, flag, None) is not None:
            train_d[flag] = getattr(args, flag)
    train = TrainConfig.from_dict(train_d)
    return RunConfig(model=model, train=train, data=data)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_pairs(path: str) -> List[SignalPair]:
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None


def _is_dataset(path: str) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == DATASET_MAGIC
    except FileNotFoundError:
        raise DataError(f"input not found: {path}") from None


def _load_signals(path: str, T: int) -> np.ndarray:
    """Noisy segments from an EDS1 dataset or a raw float32 (n x T) file."""
    if _is_dataset(path):
        pairs = _load_pairs(path)
        X = np.stack([p.noisy for p in pairs])
    else:
        X = read_f32_matrix(path, T)
    if X.shape[1] != T:
        raise DataError(f"{path}: segment length {X.shape[1]} does not match checkpoint T={T}")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: input contains non-finite samples")
    return X


def _noise_scale(X: np.ndarray) -> np.ndarray:
    sigma = X.std(axis=1, keepdims=True)
    if np.any(sigma == 0):
        raise DataError("input contains a constant segment; cannot standardize")
    return sigma


def _load_model(path: str):
    try:
        params, config, extra = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    model = BandRouteNet(config)
    model.load_state_dict(params)
    return model, extra


def _write_f32(path: str, arr: np.ndarray) -> None:
    with atomic_write(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _split_pairs(pairs, ratio, seed, which: str):
    sp = split(len(pairs), ratio=tuple(ratio), seed=seed)
    idx = sp.indices(which)
    return [pairs[i] for i in idx], idx, sp


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, run: RunConfig) -> int:
    clean, eog, emg = synth_surrogate(run.data.surrogate)
    pairs = augment_snr_grid(clean, eog, emg, grid=run.data.snr_grid, kind=run.data.kind,
                             seed=run.data.surrogate.seed)
    write_dataset(pairs, args.out)
    kind = ArtifactKind.parse(run.data.kind).name
    print(f"wrote {len(pairs)} {kind} pairs (T={run.data.surrogate.segment_length}) to {args.out}")
    if len(pairs) >= 10:
        sizes = split(len(pairs), tuple(run.data.split_ratio), seed=run.data.surrogate.seed).sizes()
        print("split train/val/test: {}/{}/{}".format(*sizes))
    for level, count in sorted(Counter(p.snr_db for p in pairs).items()):
        print(f"  snr {level:+g} dB: {count}")
    return EXIT_OK


def cmd_train(args, run: RunConfig) -> int:
    pairs = [standardize(p) for p in _load_pairs(args.data)]
    T = pairs[0].clean.size
    spec = run.model.band_spec
    model_cfg = run.model.replace(band_spec=BandSpec(spec.sample_rate_hz, spec.bands, T))
    model_cfg.band_spec.validate()
    split_seed = run.train.seed
    sp = split(len(pairs), tuple(run.data.split_ratio), seed=split_seed)
    train_set = [pairs[i] for i in sp.train]
    val_set = [pairs[i] for i in sp.val]
    model = BandRouteNet(model_cfg)
    print(f"parameters: {count_params(model)}")
    print("split train/val/test: {}/{}/{}".format(*sp.sizes()))
    if model_cfg.ablation.active():
        print("ablations: " + ", ".join(model_cfg.ablation.active()))

    def report(rec):
        print(f"epoch {rec.epoch:3d}  train_mse {rec.train_mse:.6f}  val_rrmse_t {rec.val_rrmse_t:.6f}"
              f"  ({rec.seconds:.1f}s)", flush=True)

    result = fit(model, train_set, val_set or None, run.train, callback=report)
    extra = {"split_seed": split_seed, "split_ratio": list(run.data.split_ratio),
             "best_epoch": result.best_epoch, "train": run.train.to_dict()}
    history_path = args.history or args.out + ".history.csv"
    save_checkpoint(model, model_cfg, args.out, extra=extra)
    with atomic_write(history_path, "w", newline="") as fh:
        write_history(result.history, fh)
    print(f"best epoch {result.best_epoch}; checkpoint {args.out}; history {history_path}")
    return EXIT_OK


def cmd_denoise(args, run: RunConfig) -> int:
    model, _ = _load_model(args.ckpt)
    cfg = model.config
    X = _load_signals(args.input, cfg.T)
    sigma = _noise_scale(X)
    Xs = (X / sigma)[:, None, :].astype(cfg.np_dtype)
    outs, bands, fulls = [], [], []
    with no_grad():
        for i in range(0, len(Xs), 64):
            y, diag = model(Xs[i : i + 64])
            s = sigma[i : i + 64]
            outs.append(y.data[:, 0, :] * s)
            bands.append(diag.band_outputs * s[:, :, None])
            fulls.append((diag.lambda_gate * diag.d_f)[:, 0, :] * s)
    Y = np.concatenate(outs)
    if not np.all(np.isfinite(Y)):
        raise NumericFault("denoised output contains non-finite values")
    if args.emit_bands:
        _write_f32(args.emit_bands + ".bands.f32", np.concatenate(bands))
        _write_f32(args.emit_bands + ".fullband.f32", np.concatenate(fulls))
    _write_f32(args.out, Y)
    print(f"denoised {len(Y)} segments (T={cfg.T}) -> {args.out}")
    if args.emit_bands:
        print(f"bands ({cfg.K} x T per segment): {', '.join(cfg.band_spec.names)}")
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    model, extra = _load_model(args.ckpt)
    pairs = [standardize(p) for p in _load_pairs(args.data)]
    if pairs[0].clean.size != model.config.T:
        raise DataError(f"dataset T={pairs[0].clean.size} does not match checkpoint T={model.config.T}")
    which = args.subset
    if which == "all":
        subset, idx = pairs, np.arange(len(pairs))
    else:
        seed = args.seed if args.seed is not None else extra.get("split_seed", 0)
        ratio = parse_ratio(args.split) if args.split else extra.get("split_ratio", run.data.split_ratio)
        subset, idx, _ = _split_pairs(pairs, ratio, seed, which)
    if not subset:
        raise DataError(f"the {which} subset is empty")
    report = evaluate(model, subset, sample_ids=[int(i) for i in idx])
    with atomic_write(args.out, "w", newline="") as fh:
        report.write_csv(fh)
    o = report.overall
    print(f"{len(subset)} segments ({which}); levels {len(report.per_level)}; flagged {report.n_flagged}")
    print(f"rrmse_t {o['rrmse_t']:.4f}  rrmse_s {o['rrmse_s']:.4f}  cc {o['cc']:.4f}  snr_imp {o['snr_imp']:.3f} dB")
    return EXIT_OK


def cmd_viz_route(args, run: RunConfig) -> int:
    model, _ = _load_model(args.ckpt)
    cfg = model.config
    X = _load_signals(args.input, cfg.T)
    if not 0 <= args.index < len(X):
        raise DataError(f"--index {args.index} out of range for {len(X)} segments")
    x = X[args.index : args.index + 1]
    x = (x / _noise_scale(x))[:, None, :].astype(cfg.np_dtype)
    with no_grad():
        _, diag = model(x)
    heat = routing_heatmap(diag, index=0)
    with atomic_write(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["band"] + [str(t) for t in range(cfg.T)])
        for name, row in zip(cfg.band_spec.names, heat):
            w.writerow([name] + [repr(float(v)) for v in row])
    print(f"routing heatmap {heat.shape[0]} x {heat.shape[1]} -> {args.out}")
    if args.plot:
        _plot_heatmap(heat, cfg, args.plot)
    return EXIT_OK


def _plot_heatmap(heat: np.ndarray, cfg: ModelConfig, path: str) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return
    fs = cfg.band_spec.sample_rate_hz
    fig, ax = plt.subplots(figsize=(8, 2.5))
    im = ax.imshow(heat, aspect="auto", vmin=0.0, vmax=1.0, cmap="viridis",
                   extent=(0, cfg.T / fs, cfg.K - 0.5, -0.5))
    ax.set_yticks(range(cfg.K), cfg.band_spec.names)
    ax.set_xlabel("time (s)")
    fig.colorbar(im, ax=ax, label="routing mask")
    fig.tight_layout()
    ext = os.path.splitext(path)[1] or ".png"
    with atomic_write(path, "wb") as fh:
        fig.savefig(fh, format=ext.lstrip("."))
    plt.close(fig)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _shared(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=d, help="JSON run configuration; flags override it")
    parser.add_argument("--seed", type=int, metavar="N", default=d, help="seed for data, init, shuffling and splits")
    parser.add_argument("--threads", type=int, metavar="N", default=d, help="cap BLAS/OpenMP threads")


def _model_flags(p):
    p.add_argument("--channels", type=int, metavar="C", help="hidden width (multiple of 8)")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--dtype", choices=("float32", "float64"), help="compute precision")
    p.add_argument("--ablate", action="append", choices=ABLATIONS, metavar="NAME",
                   help=f"disable a component; repeatable. One of: {', '.join(ABLATIONS)}")


def _data_flags(p):
    p.add_argument("--kind", choices=("eog", "emg", "mixed"), help="artifact type")
    p.add_argument("--snr-grid", metavar="GRID", help="SNR levels in dB, e.g. -7..2 or -5,0,5")
    p.add_argument("--split", metavar="A:B:C", help="train:val:test ratio (default 8:1:1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bandroute", description="Band-routed EEG artifact removal.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    _shared(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a surrogate contaminated dataset (EDS1)")
    _shared(p, suppress=True)
    p.add_argument("--out", required=True, metavar="PATH")
    _data_flags(p)
    p.add_argument("--n-clean", type=int, metavar="N")
    p.add_argument("--n-eog", type=int, metavar="N")
    p.add_argument("--n-emg", type=int, metavar="N")
    p.add_argument("--segment-length", type=int, metavar="T")
    p.add_argument("--sample-rate", type=float, metavar="HZ")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on an EDS1 dataset; writes a BRN1 checkpoint and history CSV")
    _shared(p, suppress=True)
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--history", metavar="CSV", help="default: CKPT.history.csv")
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"))
    p.add_argument("--clip-grad", type=float, metavar="NORM")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise segments from an EDS1 or raw float32 file")
    _shared(p, suppress=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="raw little-endian float32, n x T")
    p.add_argument("--emit-bands", metavar="PREFIX",
                   help="also write PREFIX.bands.f32 (n x K x T) and PREFIX.fullband.f32 (n x T)")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="per-sample and per-SNR-level metrics as CSV")
    _shared(p, suppress=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--subset", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--split", metavar="A:B:C", help="default: ratio stored in the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-route", help="export the K x T routing heatmap for one segment")
    _shared(p, suppress=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--index", type=int, default=0, help="segment index (default 0)")
    p.add_argument("--plot", metavar="IMAGE", help="optional raster image (needs matplotlib)")
    p.set_defaults(func=cmd_viz_route)
    return parser


def _thread_limit(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _join_negative_values(argv: Sequence[str]) -> List[str]:
    # "--snr-grid -7..2" would otherwise be read as an unknown option
    out, it = [], iter(argv)
    for tok in it:
        if tok == "--snr-grid":
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = _join_negative_values(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = build_run_config(args)
        with _thread_limit(args.threads):
            return args.func(args, run)
    except BandRouteError as e:
        code = e.exit_code
        print(f"bandroute {args.command}: error: {e}", file=sys.stderr)
        return code
    except OSError as e:
        print(f"bandroute {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
