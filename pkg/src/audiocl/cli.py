"""Command-line entry point: ``audiocl {train,evaluate,preview,report,selftest,presets}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import augment, selftest
from .nn import load_checkpoint
from .signal import FeatureConfig, WavError, log_mel, read_wav, write_wav
from .trainer import (
    ConfigError,
    Experiment,
    NonFiniteLossError,
    RunConfig,
    accuracy,
    cross_validate,
    read_metrics_csv,
    standard_error,
    write_run,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("audiocl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {"config", "folds", "summary"}


def preset_names() -> list[str]:
    root = resources.files("audiocl") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _load_json(ref: str) -> dict:
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    elif ref in preset_names():
        text = (resources.files("audiocl") / "presets" / f"{ref}.json").read_text()
    else:
        raise UsageError(f"config {ref!r} is neither a file nor a preset ({', '.join(preset_names())})")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {ref}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {ref}: top level must be an object")
    if isinstance(doc.get("config"), dict):
        extra = set(doc) - _MANIFEST_KEYS
        if extra:
            raise ConfigError(sorted(extra)[0], f"unknown manifest key {sorted(extra)[0]!r}")
        doc = doc["config"]
    return doc


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse override {key}={raw!r}") from None


def load_config(ref: str | None, overrides=(), seed: int | None = None) -> RunConfig:
    doc = _load_json(ref) if ref else {}
    defaults = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in defaults:
            raise ConfigError(key, f"unknown config key {key!r}")
        doc[key] = _coerce(key, raw.strip(), defaults[key])
    if seed is not None:
        doc["seed"] = seed
    try:
        return RunConfig.from_dict(doc)
    except TypeError as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _parse_folds(spec: str, n_folds: int):
    if spec == "all":
        return None
    try:
        fold = int(spec)
    except ValueError:
        raise UsageError(f"--fold expects an integer or 'all', got {spec!r}") from None
    if not 0 <= fold < n_folds:
        raise UsageError(f"--fold {fold} outside [0, {n_folds})")
    return [fold]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override, args.seed)
    folds = _parse_folds(args.fold, cfg.n_folds)
    exp = Experiment.from_config(cfg)
    result = cross_validate(exp, cfg, folds)
    manifest = write_run(args.out, cfg, result)
    label = cfg.name or f"{cfg.regime}/{cfg.policy}"
    for f in result.folds:
        print(f"{label} fold {f.fold}: accuracy {f.accuracy:.2f}% ({f.seconds:.1f} s)")
    se = result.se
    print(f"{label}: mean accuracy {result.mean:.2f}% +/- {se:.2f} (SE over {len(result.folds)} fold(s))"
          if se == se else f"{label}: accuracy {result.mean:.2f}% (single fold)")
    print(f"wrote {manifest}")
    return EXIT_OK


def _load_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"{run_dir}: no manifest.json")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt manifest ({exc})") from None


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = _load_manifest(run_dir)
    cfg = RunConfig.from_dict(manifest["config"])
    exp = Experiment.from_config(cfg)
    wanted = _parse_folds(args.fold, cfg.n_folds)
    accs = []
    for entry in manifest["folds"]:
        if wanted is not None and entry["fold"] not in wanted:
            continue
        model = load_checkpoint(run_dir / entry["checkpoint"])
        _, held = exp.dataset.split(entry["fold"])
        acc = accuracy(model.predict_proba(exp.base[held]), exp.labels[held])
        accs.append(acc)
        print(f"fold {entry['fold']}: accuracy {acc:.2f}%")
    if not accs:
        raise UsageError("no matching folds in run")
    print(f"mean accuracy {np.mean(accs):.2f}%")
    return EXIT_OK


def _parse_transform(spec: str):
    kind, _, value = spec.partition(":")
    try:
        if kind == "pitch":
            return "pitch", float(value)
        if kind == "reverb":
            return "reverb", float(value or 600)
        if kind == "tfmask":
            return "tfmask", int(value or 0)
    except ValueError:
        pass
    raise UsageError(f"bad transform spec {spec!r}; use pitch:SEMITONES, reverb:RT60_MS or tfmask[:SEED]")


def _write_grid(path: Path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in grid])


def cmd_preview(args) -> int:
    kind, value = _parse_transform(args.transform)
    out = Path(args.out)
    w = read_wav(args.input)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "pitch":
        write_wav(out / "transformed.wav", augment.pitch_shift(w, value))
    elif kind == "reverb":
        rir = augment.synth_rir(value, w.sample_rate, np.random.default_rng(args.seed))
        write_wav(out / "transformed.wav", augment.apply_reverb(w, rir))
    else:
        cfg = FeatureConfig(sample_rate=w.sample_rate, n_mels=args.n_mels)
        spec = log_mel(w, cfg)
        mask = augment.sample_mask(np.random.default_rng(value), spec.n_mels, spec.n_frames)
        _write_grid(out / "before.csv", spec.values)
        _write_grid(out / "after.csv", augment.tf_mask(spec, mask).values)
    print(f"wrote preview to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    runs = []
    for d in args.run_dirs:
        run_dir = Path(d)
        manifest = _load_manifest(run_dir)
        cfg = manifest["config"]
        label = cfg.get("name") or f"{cfg['regime']}/{cfg['policy']}"
        histories = [read_metrics_csv(run_dir / f["metrics"]) for f in manifest["folds"]]
        accs = [h[-1].val_acc for h in histories]
        runs.append((label, cfg["regime"], accs, histories))

    baseline = next((np.mean(a) for _, regime, a, _ in runs if regime == "none"), None)
    lines = [f"{'Model':<24} {'Accuracy':>9} {'SE':>6} {'Improvement':>12}"]
    for label, _, accs, _ in runs:
        se = standard_error(accs)
        imp = "" if baseline is None else f"{np.mean(accs) - baseline:+.2f}"
        se_txt = "-" if se != se else f"{se:.2f}"
        lines.append(f"{label:<24} {np.mean(accs):>9.2f} {se_txt:>6} {imp:>12}")
    table = "\n".join(lines)
    print(table)

    buf = [["run", "epoch", "train_jsd", "val_jsd"]]
    for label, _, _, histories in runs:
        n_epochs = min(len(h) for h in histories)
        for e in range(n_epochs):
            buf.append([label, e, repr(float(np.mean([h[e].train_jsd for h in histories]))),
                        repr(float(np.mean([h[e].val_jsd for h in histories])))])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table + "\n")
        with open(out / "jsd_series.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(buf)
        print(f"wrote {out / 'table.txt'} and {out / 'jsd_series.csv'}")
    else:
        print()
        csv.writer(sys.stdout, lineterminator="\n").writerows(buf)
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run_all(args.inject_fault)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("selftest passed" if ok else "selftest FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_presets(args) -> int:
    for name in preset_names():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="audiocl", description="Consistency learning for audio classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one fold or full cross-validation")
    t.add_argument("--config", help="JSON config file, run manifest, or preset name")
    t.add_argument("--override", action="append", default=[], metavar="K=V")
    t.add_argument("--out", default="run", help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--fold", default="all", help="fold index or 'all'")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="re-evaluate saved checkpoints of a run")
    e.add_argument("run_dir")
    e.add_argument("--fold", default="all")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("preview", help="write a transformed WAV or masked spectrogram grids")
    v.add_argument("--input", required=True)
    v.add_argument("--transform", required=True, help="pitch:SEMITONES | reverb:RT60_MS | tfmask[:SEED]")
    v.add_argument("--out", default="preview")
    v.add_argument("--seed", type=int, default=0, help="seed for the synthetic RIR")
    v.add_argument("--n-mels", type=int, default=128)
    v.set_defaults(func=cmd_preview)

    r = sub.add_parser("report", help="accuracy table and JSD series across runs")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run the embedded oracle suites")
    s.add_argument("--inject-fault", choices=selftest.FAULTS, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    ls = sub.add_parser("presets", help="list shipped preset configs")
    ls.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, WavError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
