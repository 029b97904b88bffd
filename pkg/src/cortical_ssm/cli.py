"""Command-line pipeline: synth | train | eval | explain | ablate.

Every command reads a JSON run config (``--config``), applies flag overrides,
writes the merged config to ``<out>/config.json`` and lays out artifacts as

    <out>/config.json
    <out>/checkpoints/fold<i>.ckpt
    <out>/history.csv
    <out>/metrics/...
    <out>/maps/...

Exit codes: 0 success, 2 configuration or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .explain import classwise_average, explain_batch, export_maps
from .metrics import PredictionSet, evaluate, write_metrics_csv
from .model import ModelConfig, count_parameters, predict_proba
from .s5 import NumericalError
from .signal_io import (ConfigurationError, FormatError, LabeledDataset, SignalTensor, SyntheticSpec,
                        compute_snr, degrade_snr, generate_synthetic, kfold_split, load_dataset, noise_floor_db,
                        save_dataset)
from .tape import GradientError
from .training import TrainHyper, load_checkpoint, save_checkpoint, train
from .wavelet_conv import FrontEndConfig, filter_freqs

log = logging.getLogger("cortical_ssm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
DERIVED_MODEL_KEYS = ("M", "T", "N", "fs")
METRIC_KEYS = ("accuracy", "macro_f1", "auroc_macro", "auprc_macro", "kappa")
# dB above the white-noise floor used when a requested degradation is unreachable
FLOOR_MARGIN_DB = 0.1


@dataclass
class RunConfig:
    dataset: str | None = None
    synthetic: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    k: int = 6
    split_seed: int = 0
    folds: list[int] | None = None
    resume: bool = False
    snr_sweep_db: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0])
    length_sweep: list[int] = field(default_factory=list)
    signal_band: list[float] = field(default_factory=lambda: [1.0, 100.0])
    explain: dict = field(default_factory=dict)
    ablate_variants: list[str] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.synthetic_spec()
        self.hyper()
        bad = set(self.model) - ({f.name for f in dataclasses.fields(ModelConfig)} - set(DERIVED_MODEL_KEYS))
        if bad:
            raise ConfigurationError(f"unknown or dataset-derived model keys: {sorted(bad)}")
        fe = set(self.model.get("front_end", {})) - {f.name for f in dataclasses.fields(FrontEndConfig)}
        if fe:
            raise ConfigurationError(f"unknown front_end keys: {sorted(fe)}")
        ex = set(self.explain) - {"sample", "post_softmax", "class_index"}
        if ex:
            raise ConfigurationError(f"unknown explain keys: {sorted(ex)}")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.ablate_variants is not None:
            missing = set(self.ablate_variants) - {v[0] for v in ABLATION_GRID}
            if missing:
                raise ConfigurationError(f"unknown ablation variants: {sorted(missing)}")

    def synthetic_spec(self) -> SyntheticSpec:
        d = dict(self.synthetic)
        if "band" in d:
            d["band"] = tuple(d["band"])
        try:
            spec = SyntheticSpec(**d)
        except TypeError as exc:
            raise ConfigurationError(f"synthetic: {exc}") from exc
        spec.validate()
        return spec

    def hyper(self) -> TrainHyper:
        try:
            h = TrainHyper(**self.train)
        except TypeError as exc:
            raise ConfigurationError(f"train: {exc}") from exc
        h.dtype  # validates precision
        if h.epochs < 1 or h.batch_size < 1 or h.lr <= 0:
            raise ConfigurationError("train: need epochs >= 1, batch_size >= 1, lr > 0")
        return h

    def model_config(self, dataset: LabeledDataset, overrides: dict | None = None) -> ModelConfig:
        m, t = dataset.shape
        d = json.loads(json.dumps(self.model))
        for k, v in (overrides or {}).items():
            if k == "front_end":
                d.setdefault("front_end", {}).update(v)
            else:
                d[k] = v
        cfg = ModelConfig.from_dict({**d, "M": m, "T": t, "N": dataset.n_classes, "fs": dataset.fs})
        cfg.validate()
        return cfg


# name, model-config overrides; the full model appears once and doubles as the "all modules" row
ABLATION_GRID: tuple[tuple[str, dict], ...] = (
    ("cwt+conv", {}),
    ("stft+conv", {"front_end": {"e_branch": "stft", "a_branch": "conv1d"}}),
    ("cwt_only", {"front_end": {"e_branch": "cwt", "a_branch": "none"}}),
    ("stft_only", {"front_end": {"e_branch": "stft", "a_branch": "none"}}),
    ("conv_only", {"front_end": {"e_branch": "none", "a_branch": "conv1d"}}),
    ("no_wavelet_conv", {"enable_wavelet_conv": False}),
    ("no_frequency_ssm", {"enable_frequency_ssm": False}),
    ("no_channel_ssm", {"enable_channel_ssm": False}),
)


def worker_count() -> int:
    raw = os.environ.get("CSSM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"CSSM_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigurationError("CSSM_THREADS must be >= 1")
    return n


def _map(fn, jobs: list[tuple]) -> list:
    """Run independent jobs, in worker processes when CSSM_THREADS > 1. Order is preserved."""
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _mean_std(rows: list[dict]) -> dict:
    out = {}
    for k in METRIC_KEYS:
        vals = np.array([r[k] for r in rows], dtype=float)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def score_split(cfg: ModelConfig, params, dataset: LabeledDataset, test_idx, dtype) -> dict:
    x = dataset.stacked()[test_idx]
    y = np.asarray(dataset.labels)[test_idx]
    probs = predict_proba(cfg, params, x.astype(dtype), dtype=dtype)
    return dataclasses.asdict(evaluate(PredictionSet(probs, y)))


def run_fold(cfg: ModelConfig, dataset_path: str, k: int, split_seed: int, fold: int,
             hyper: TrainHyper, ckpt_path: str | None, resume: bool) -> dict:
    """Train one fold and score its test split. Self-contained so it can run in a worker process."""
    dataset = load_dataset(dataset_path)
    split = kfold_split(dataset, k, split_seed)[fold]
    start = None
    if resume and ckpt_path and Path(ckpt_path).exists():
        start = load_checkpoint(ckpt_path)
        log.info("fold %d resuming after epoch %d", fold, start.epoch)
    on_epoch = (lambda ck: save_checkpoint(ck, ckpt_path)) if ckpt_path else None
    ck, history = train(cfg, dataset, split, hyper, resume=start, on_epoch=on_epoch)
    te = dataset.indices_for(split.test)
    metrics = score_split(cfg, ck.best_params, dataset, te, hyper.dtype)
    return {"fold": fold, "history": history, "best_epoch": ck.best_epoch,
            "best_val_acc": ck.best_val_acc, "metrics": metrics, "split": dataclasses.asdict(split)}


def _prepare_out(out: Path, cfg: RunConfig) -> None:
    for sub in ("checkpoints", "metrics", "maps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True))


def _load_dataset(cfg: RunConfig) -> LabeledDataset:
    if not cfg.dataset:
        raise ConfigurationError("no dataset given (set 'dataset' in the config)")
    if not Path(cfg.dataset).exists():
        raise ConfigurationError(f"dataset file not found: {cfg.dataset}")
    return load_dataset(cfg.dataset)


def _fold_list(cfg: RunConfig) -> list[int]:
    folds = list(range(cfg.k)) if cfg.folds is None else list(cfg.folds)
    for f in folds:
        if not 0 <= f < cfg.k:
            raise ConfigurationError(f"fold {f} outside [0, {cfg.k})")
    return folds


def _write_history(path: Path, results: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "epoch", "train_loss", "val_acc"])
        for r in results:
            for h in r["history"]:
                w.writerow([r["fold"], h["epoch"], repr(h["train_loss"]), repr(h["val_acc"])])


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    spec = cfg.synthetic_spec()
    target = Path(cfg.dataset) if cfg.dataset else out / "dataset.bin"
    dataset = generate_synthetic(spec)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    save_dataset(dataset, tmp)
    tmp.replace(target)
    return {"dataset": str(target), "n_samples": len(dataset)}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    dataset = _load_dataset(cfg)
    model = cfg.model_config(dataset)
    hyper = cfg.hyper()
    kfold_split(dataset, cfg.k, cfg.split_seed)  # validates k against the group count
    folds = _fold_list(cfg)
    jobs = [(model, cfg.dataset, cfg.k, cfg.split_seed, f, hyper,
             str(out / "checkpoints" / f"fold{f}.ckpt"), cfg.resume) for f in folds]
    results = _map(run_fold, jobs)
    _write_history(out / "history.csv", results)
    (out / "history.json").write_text(json.dumps({str(r["fold"]): r["history"] for r in results}, indent=2))
    rows = []
    for r in results:
        Path(out / "metrics" / f"fold{r['fold']}.json").write_text(json.dumps(r["metrics"], indent=2))
        rows.append([r["fold"]] + [r["metrics"][k] for k in METRIC_KEYS])
    write_metrics_csv(out / "metrics" / "metrics.csv", rows)
    summary = {
        "n_parameters": _count(model),
        "folds": [{k: r[k] for k in ("fold", "best_epoch", "best_val_acc", "metrics")} for r in results],
        "summary": _mean_std([r["metrics"] for r in results]),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _count(model: ModelConfig) -> int:
    from .model import init_params
    return count_parameters(init_params(model, 0))


def _checkpoint_for(out: Path, fold: int, dataset: LabeledDataset):
    path = out / "checkpoints" / f"fold{fold}.ckpt"
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    m, t = dataset.shape
    want = {"M": m, "T": t, "N": dataset.n_classes, "fs": dataset.fs}
    have = {k: getattr(ck.config, k) for k in want}
    diff = {k: (have[k], want[k]) for k in want if have[k] != want[k]}
    if diff:
        raise ConfigurationError(f"checkpoint/dataset mismatch (checkpoint, dataset): {diff}")
    return ck


def crop_center(x: np.ndarray, length: int) -> np.ndarray:
    t = x.shape[-1]
    if not 2 <= length <= t:
        raise ConfigurationError(f"crop length {length} outside [2, {t}]")
    s = (t - length) // 2
    return x[..., s:s + length]


def degrade_relative(x: np.ndarray, fs: float, drop_db: float, seed: int,
                     band: tuple[float, float]) -> tuple[np.ndarray, int]:
    """Lower every recording's SNR by ``drop_db``.

    Targets under the white-noise floor are raised to just above it; returns the
    degraded stack and how many recordings were clipped that way.
    """
    if drop_db <= 0:
        return x.copy(), 0
    out = np.empty_like(x)
    clipped = 0
    for i, sample in enumerate(x):
        st = SignalTensor(sample, fs)
        target = compute_snr(st, band) - drop_db
        floor = noise_floor_db(st, seed + i, band)
        if target < floor + FLOOR_MARGIN_DB:
            clipped += 1
            target = floor + FLOOR_MARGIN_DB
        # the signal/noise cross term can move the reachable bound slightly above the noise-only floor
        for bump in (0.0, 0.25, 0.5, 1.0, 2.0):
            try:
                out[i] = degrade_snr(st, target + bump, seed + i, band)[0].data
                break
            except ConfigurationError:
                continue
        else:
            raise ConfigurationError(f"recording {i}: cannot reach {target:.2f} dB with white noise")
    return out, clipped


def cmd_eval(cfg: RunConfig, out: Path, seed: int) -> dict:
    dataset = _load_dataset(cfg)
    hyper = cfg.hyper()
    splits = kfold_split(dataset, cfg.k, cfg.split_seed)
    x_all = dataset.stacked()
    y_all = np.asarray(dataset.labels)
    band = (float(cfg.signal_band[0]), float(cfg.signal_band[1]))
    result = {"folds": []}
    snr_rows, len_rows = [], []
    for f in _fold_list(cfg):
        ck = _checkpoint_for(out, f, dataset)
        te = dataset.indices_for(splits[f].test)
        x, y = x_all[te], y_all[te]
        dtype = hyper.dtype
        base = dataclasses.asdict(evaluate(PredictionSet(predict_proba(ck.config, ck.best_params, x.astype(dtype),
                                                                       dtype=dtype), y)))
        (out / "metrics" / f"eval_fold{f}.json").write_text(json.dumps(base, indent=2))
        entry = {"fold": f, "metrics": base, "snr": [], "length": []}
        for drop in cfg.snr_sweep_db:
            xd, clipped = degrade_relative(x, dataset.fs, float(drop), seed + 1000 * f, band)
            rep = dataclasses.asdict(evaluate(PredictionSet(
                predict_proba(ck.config, ck.best_params, xd.astype(dtype), dtype=dtype), y)))
            rep.update({"degradation_db": float(drop), "clipped_to_floor": clipped})
            (out / "metrics" / f"snr_fold{f}_minus{drop:g}db.json").write_text(json.dumps(rep, indent=2))
            entry["snr"].append(rep)
            snr_rows.append([f, drop, clipped] + [rep[k] for k in METRIC_KEYS])
        for length in cfg.length_sweep:
            xc = crop_center(x, int(length))
            rep = dataclasses.asdict(evaluate(PredictionSet(
                predict_proba(ck.config, ck.best_params, xc.astype(dtype), dtype=dtype), y)))
            rep["length"] = int(length)
            entry["length"].append(rep)
            len_rows.append([f, length] + [rep[k] for k in METRIC_KEYS])
        result["folds"].append(entry)
    _write_rows(out / "metrics" / "snr_sweep.csv", ["fold", "degradation_db", "clipped"] + list(METRIC_KEYS),
                snr_rows)
    _write_rows(out / "metrics" / "length_sweep.csv", ["fold", "length"] + list(METRIC_KEYS), len_rows)
    result["summary"] = _mean_std([e["metrics"] for e in result["folds"]])
    (out / "metrics" / "eval_summary.json").write_text(json.dumps(result, indent=2))
    return result


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_explain(cfg: RunConfig, out: Path) -> dict:
    dataset = _load_dataset(cfg)
    folds = _fold_list(cfg)
    fold = folds[0]
    ck = _checkpoint_for(out, fold, dataset)
    model = ck.config
    split = kfold_split(dataset, cfg.k, cfg.split_seed)[fold]
    te = dataset.indices_for(split.test)
    x = dataset.stacked()[te]
    y = np.asarray(dataset.labels)[te]
    post = bool(cfg.explain.get("post_softmax", False))
    labels = dataset.samples[0].electrode_labels or [f"E{i}" for i in range(model.M)]
    fe = model.front_end
    freqs = filter_freqs(fe.F, fe.f_min, fe.f_max)
    maps_dir = out / "maps"
    probs = predict_proba(model, ck.best_params, x)
    pred = probs.argmax(axis=1)
    sample = cfg.explain.get("sample")
    if sample is not None:
        if not 0 <= int(sample) < len(te):
            raise ConfigurationError(f"sample {sample} outside the {len(te)} test recordings of fold {fold}")
        i = int(sample)
        chosen = cfg.explain.get("class_index")
        n = int(pred[i] if chosen is None else chosen)
        m = explain_batch(model, ck.best_params, x[i:i + 1], n, post_softmax=post, sample_ids=[te[i]])[0]
        files = export_maps(m, labels, freqs, maps_dir, f"fold{fold}_sample{te[i]}_class{n}")
        return {"fold": fold, "files": [str(p) for p in files]}
    status = {}
    for n in range(model.N):
        maps = []
        for s in range(0, len(x), 16):
            maps += explain_batch(model, ck.best_params, x[s:s + 16], n, post_softmax=post,
                                  sample_ids=te[s:s + 16])
        avg = classwise_average(maps, pred, y, n)
        if avg is None:
            status[n] = "no correctly classified samples"
            continue
        export_maps(avg, labels, freqs, maps_dir, f"fold{fold}_class{n}_average")
        status[n] = int(np.sum((pred == n) & (y == n)))
    (maps_dir / f"fold{fold}_status.json").write_text(json.dumps(status, indent=2))
    return {"fold": fold, "status": status}


def _ablation_cell(name: str, model: ModelConfig, dataset_path: str, k: int, split_seed: int,
                   folds: list[int], hyper: TrainHyper) -> dict:
    rows = [run_fold(model, dataset_path, k, split_seed, f, hyper, None, False)["metrics"] for f in folds]
    return {"variant": name, "n_parameters": _count(model), "summary": _mean_std(rows)}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    dataset = _load_dataset(cfg)
    hyper = cfg.hyper()
    folds = _fold_list(cfg)
    kfold_split(dataset, cfg.k, cfg.split_seed)
    wanted = cfg.ablate_variants
    jobs = []
    for name, overrides in ABLATION_GRID:
        if wanted is not None and name not in wanted:
            continue
        jobs.append((name, cfg.model_config(dataset, overrides), cfg.dataset, cfg.k, cfg.split_seed, folds, hyper))
    cells = _map(_ablation_cell, jobs)
    header = ["variant", "n_parameters"] + [f"{k}_{s}" for k in METRIC_KEYS for s in ("mean", "std")]
    rows = [[c["variant"], c["n_parameters"]] + [c["summary"][k][s] for k in METRIC_KEYS for s in ("mean", "std")]
            for c in cells]
    _write_rows(out / "metrics" / "ablation.csv", header, rows)
    (out / "metrics" / "ablation.json").write_text(json.dumps(cells, indent=2))
    return {"rows": cells}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cortical-ssm", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=("synth", "train", "eval", "explain", "ablate"))
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--seed", type=int, help="overrides synthetic.seed and train.seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--folds", help="comma-separated fold indices")
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--dataset", help="dataset file (overrides the config)")
    p.add_argument("--sample", type=int, help="explain: one test recording index")
    p.add_argument("--resume", action="store_true", help="train: continue from existing checkpoints")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigurationError(f"config file not found: {args.config}")
        try:
            raw = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
    cfg = RunConfig.from_dict(raw)
    if args.seed is not None:
        cfg.synthetic["seed"] = args.seed
        cfg.train["seed"] = args.seed
    if args.precision is not None:
        cfg.train["precision"] = args.precision
    if args.folds is not None:
        try:
            cfg.folds = [int(v) for v in args.folds.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"--folds expects integers, got {args.folds!r}") from exc
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if args.sample is not None:
        cfg.explain["sample"] = args.sample
    if args.resume:
        cfg.resume = True
    if cfg.dataset is None and args.command != "synth":
        default = args.out / "dataset.bin"
        if default.exists():
            cfg.dataset = str(default)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        out = args.out
        _prepare_out(out, cfg)
        seed = int(cfg.train.get("seed", 0))
        handlers = {
            "synth": lambda: cmd_synth(cfg, out),
            "train": lambda: cmd_train(cfg, out),
            "eval": lambda: cmd_eval(cfg, out, seed),
            "explain": lambda: cmd_explain(cfg, out),
            "ablate": lambda: cmd_ablate(cfg, out),
        }
        result = handlers[args.command]()
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, GradientError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(_brief(result)))
    return EXIT_OK


def _brief(result: dict) -> dict:
    if "summary" in result and isinstance(result["summary"], dict):
        return {"summary": result["summary"]}
    if "rows" in result:
        return {"variants": [r["variant"] for r in result["rows"]]}
    return result


if __name__ == "__main__":
    sys.exit(main())
