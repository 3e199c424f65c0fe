"""Experiment driver: train, transfer, eval, compare, sweep, report.

Configs are YAML (JSON also parses). Every key is validated before any
compute starts and unknown keys are rejected. One top-level ``seed`` drives
all randomness (corpus generation, initialisation, shuffling, Gumbel noise).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .data import CorpusSpec, generate
from .model import CheckpointError, EncoderConfig, load_checkpoint, save_checkpoint
from .pruners import extract_layer_sparsities, mixed_sparsity_transfer
from .stats import mapsswe, read_error_counts, write_error_counts
from .training import (
    BASELINE_TRAIN,
    MODES,
    ONE_PASS_TRAIN,
    SparsityBudget,
    TrainConfig,
    TrainingDiverged,
    default_eta,
    evaluate,
    run_one_pass,
)

log = logging.getLogger("pinchgate")

EXIT_OK = 0
EXIT_SIGNIFICANT = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

OUTPUT_ROOT_ENV = "PINCHGATE_OUTPUT_ROOT"
SWEEP_MODES = ("self-pinch", "mixed", "ump", "nascp")
SUMMARY_COLUMNS = ["mode", "target", "achieved_sparsity", "dev_ter", "test_ter", "p_value", "lossless"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    mode: str = "self-pinch"
    out: str = "runs/default"
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    baseline_train: TrainConfig = BASELINE_TRAIN
    train: TrainConfig = ONE_PASS_TRAIN
    target: float = 0.5
    eta: float | None = None
    init_checkpoint: str | None = None
    profile_checkpoint: str | None = None
    sweep_modes: tuple = SWEEP_MODES
    alpha: float = 0.05

    @property
    def budget(self):
        eta = default_eta(self.mode, self.target) if self.eta is None else self.eta
        return SparsityBudget(self.target, eta, eta)


_SECTIONS = {"corpus": CorpusSpec, "model": EncoderConfig, "baseline_train": TrainConfig, "train": TrainConfig}


def _build_section(name, cls, base, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - {"seed"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return replace(base, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config(raw, seed=None, out=None):
    """Validate a config mapping into an ``ExperimentConfig``; ``seed`` and
    ``out`` override the file's values."""
    raw = dict(raw or {})
    defaults = ExperimentConfig()
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    values = {}
    for name, cls in _SECTIONS.items():
        values[name] = _build_section(name, cls, getattr(defaults, name), raw.pop(name, {}) or {})
    values.update(raw)
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out"] = out

    s = values.get("seed", defaults.seed)
    if isinstance(s, bool) or not isinstance(s, int) or s < 0:
        raise ConfigError("seed must be a nonnegative integer")
    mode = values.get("mode", defaults.mode)
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    target = values.get("target", defaults.target)
    if not isinstance(target, (int, float)) or not 0 <= target < 1:
        raise ConfigError("target must lie in [0, 1)")
    eta = values.get("eta")
    if eta is not None and (not isinstance(eta, (int, float)) or eta < 0):
        raise ConfigError("eta must be a nonnegative number or null")
    alpha = values.get("alpha", defaults.alpha)
    if not isinstance(alpha, float) or not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    modes = tuple(values.get("sweep_modes", defaults.sweep_modes))
    bad = [m for m in modes if m not in SWEEP_MODES]
    if bad:
        raise ConfigError(f"sweep_modes may only contain {SWEEP_MODES}, got {bad}")
    if "mixed" in modes and "self-pinch" not in modes:
        raise ConfigError("sweep mode 'mixed' needs 'self-pinch' for its layer profile")
    for key in ("out", "init_checkpoint", "profile_checkpoint"):
        if values.get(key) is not None and not isinstance(values[key], str):
            raise ConfigError(f"{key} must be a path string")
    if mode == "mixed" and values.get("profile_checkpoint") is None:
        raise ConfigError("mode 'mixed' needs profile_checkpoint (a trained self-pinch model)")
    if values["corpus"].feature_dim != values["model"].feature_dim:
        raise ConfigError("corpus.feature_dim and model.feature_dim differ")
    if values["corpus"].vocab_size != values["model"].vocab_size:
        raise ConfigError("corpus.vocab_size and model.vocab_size differ")

    values["corpus"] = replace(values["corpus"], seed=s)
    values["train"] = replace(values["train"], seed=s)
    values["baseline_train"] = replace(values["baseline_train"], seed=s)
    values["sweep_modes"] = modes
    values["target"] = float(target)
    return ExperimentConfig(**values)


def load_config(path, seed=None, out=None):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw, seed, out)


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    for key in ("corpus", "baseline_train", "train"):
        d[key].pop("seed")
    d["corpus"]["label_len"] = list(d["corpus"]["label_len"])
    d["corpus"]["frames_per_token"] = list(d["corpus"]["frames_per_token"])
    d["sweep_modes"] = list(d["sweep_modes"])
    return d


def resolve_out(path):
    """Relative output paths land under ``$PINCHGATE_OUTPUT_ROOT`` when set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


# commands -------------------------------------------------------------------


def _write_run(out, model, trace, corpus, cfg):
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    trace.write_csv(out / "metrics.csv")
    trace.write_csv(out / "steps.csv", trace.steps)
    results = {}
    for split in ("dev", "test"):
        ter, counts = evaluate(model, corpus[split])
        write_error_counts(out / f"{split}.errors", counts)
        results[split] = ter
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
    return results


def train_baseline(cfg, corpus, out):
    model, trace = run_one_pass(cfg.baseline_train, SparsityBudget(), "dense", corpus, encoder_config=cfg.model)
    _write_run(out, model, trace, corpus, replace(cfg, mode="dense"))
    return model


def cmd_train(cfg, corpus=None):
    """Run one training job; returns ``{"dev": TER, "test": TER, "out": path}``.

    One-pass modes start from ``init_checkpoint``; without one, a dense
    baseline is trained first into ``<out>/baseline``.
    """
    out = resolve_out(cfg.out)
    corpus = generate(cfg.corpus) if corpus is None else corpus
    if cfg.mode == "dense":
        model, trace = run_one_pass(cfg.baseline_train, SparsityBudget(), "dense", corpus, encoder_config=cfg.model)
        return dict(_write_run(out, model, trace, corpus, cfg), out=out)

    if cfg.init_checkpoint is not None:
        init = load_checkpoint(resolve_out(cfg.init_checkpoint))
    else:
        init = train_baseline(cfg, corpus, out / "baseline")
    profile = None
    if cfg.mode == "mixed":
        profile = extract_layer_sparsities(load_checkpoint(resolve_out(cfg.profile_checkpoint)))
    model, trace = run_one_pass(cfg.train, cfg.budget, cfg.mode, corpus, init_model=init,
                                layer_sparsity_profile=profile)
    return dict(_write_run(out, model, trace, corpus, cfg), out=out)


def _roster(model):
    return [(layer.name, layer.W.shape) for layer in model.prunable_layers()]


def cmd_transfer(baseline_ckpt, gated_ckpt, out):
    """Mixed-sparsity transfer of a gated model's layer profile onto a baseline."""
    baseline = load_checkpoint(baseline_ckpt)
    gated = load_checkpoint(gated_ckpt)
    if _roster(baseline) != _roster(gated):
        raise CheckpointError("baseline and gated checkpoints have different layer rosters")
    model = mixed_sparsity_transfer(baseline, extract_layer_sparsities(gated))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    return model


def cmd_eval(ckpt, split, corpus_spec, errors_out=None):
    if split not in ("train", "dev", "test"):
        raise ConfigError(f"unknown split {split!r}")
    model = load_checkpoint(ckpt)
    ter, counts = evaluate(model, generate(corpus_spec)[split])
    if errors_out is not None:
        write_error_counts(errors_out, counts)
    return ter, counts


def cmd_compare(errfile_a, errfile_b, alpha=0.05):
    return mapsswe(read_error_counts(errfile_a), read_error_counts(errfile_b), alpha)


def cmd_sweep(cfg, targets):
    """Train every (mode, target) cell from one shared dense baseline and
    write ``summary.csv``; returns the summary rows."""
    out = resolve_out(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if targets:
        corpus = generate(cfg.corpus)
        base_dir = out / "baseline"
        train_baseline(cfg, corpus, base_dir)
        base_errors = read_error_counts(base_dir / "test.errors")
        modes = sorted(cfg.sweep_modes, key=lambda m: m != "self-pinch")
        for target in targets:
            for mode in modes:
                cell = out / f"{mode}-{target:g}"
                cell_cfg = replace(cfg, mode=mode, target=float(target), out=str(cell),
                                   init_checkpoint=str(base_dir / "model.ckpt"),
                                   profile_checkpoint=str(out / f"self-pinch-{target:g}" / "model.ckpt"))
                res = cmd_train(cell_cfg, corpus)
                verdict = mapsswe(base_errors, read_error_counts(cell / "test.errors"), cfg.alpha)
                achieved = float(_last_row(cell / "metrics.csv")["overall_sparsity"])
                rows.append({"mode": mode, "target": float(target), "achieved_sparsity": achieved,
                             "dev_ter": res["dev"], "test_ter": res["test"], "p_value": verdict.p,
                             "lossless": not verdict.significant})
        order = {m: i for i, m in enumerate(cfg.sweep_modes)}
        rows.sort(key=lambda r: (r["target"], order[r["mode"]]))
    write_summary(out / "summary.csv", rows)
    return rows


def _last_row(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))[-1]


def write_summary(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in SUMMARY_COLUMNS])


def cmd_report(summary_path):
    """Plain-text table of test TER (and lossless verdict) by target and mode."""
    with open(summary_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return "no sweep cells\n"
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    targets = sorted({float(r["target"]) for r in rows})
    cell = {(r["mode"], float(r["target"])): r for r in rows}
    lines = ["target  " + "".join(f"{m:>16}" for m in modes)]
    for t in targets:
        parts = []
        for m in modes:
            r = cell.get((m, t))
            if r is None:
                parts.append(f"{'-':>16}")
            else:
                mark = "" if r["lossless"] == "True" else "*"
                parts.append(f"{float(r['test_ter']):>9.4f}{mark:1} ({float(r['achieved_sparsity']):.2f})")
        lines.append(f"{t:<8.2f}" + "".join(f"{p:>16}" for p in parts))
    lines.append("test TER (achieved sparsity); * = significantly worse than the dense baseline")
    return "\n".join(lines) + "\n"


# entry point --------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pinchgate", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")

    common(sub.add_parser("train", help="train one model"))
    sp = sub.add_parser("transfer", help="mixed-sparsity transfer")
    sp.add_argument("baseline")
    sp.add_argument("gated")
    sp.add_argument("--out", required=True)
    sp = sub.add_parser("eval", help="token error rate of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--split", default="test")
    sp.add_argument("--errors", help="write per-utterance error counts here")
    common(sp)
    sp = sub.add_parser("compare", help="MAPSSWE test of two error-count files")
    sp.add_argument("errors_a")
    sp.add_argument("errors_b")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp = sub.add_parser("sweep", help="mode x target grid")
    sp.add_argument("--targets", default="0.5,0.75", help="comma-separated target sparsities")
    common(sp)
    sp = sub.add_parser("report", help="text table from a sweep summary")
    sp.add_argument("summary")
    return p


def _config(args):
    if args.config is None:
        return parse_config({}, args.seed, args.out)
    return load_config(args.config, args.seed, args.out)


def _targets(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad target list {text!r}") from exc


def run(args):
    if args.command == "train":
        res = cmd_train(_config(args))
        print(f"dev TER {res['dev']:.4f}  test TER {res['test']:.4f}  -> {res['out']}")
    elif args.command == "transfer":
        cmd_transfer(args.baseline, args.gated, resolve_out(args.out))
    elif args.command == "eval":
        ter, _ = cmd_eval(args.checkpoint, args.split, _config(args).corpus, args.errors)
        print(f"{args.split} TER {ter:.4f}")
    elif args.command == "compare":
        if not 0 < args.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        r = cmd_compare(args.errors_a, args.errors_b, args.alpha)
        verdict = "significant" if r.significant else "not significant"
        print(f"n={r.n} mean diff={r.mean_diff:.4f} z={r.z:.4f} p={r.p:.4g}: {verdict} at alpha={args.alpha}")
        return EXIT_SIGNIFICANT if r.significant else EXIT_OK
    elif args.command == "sweep":
        targets = _targets(args.targets)
        if any(not 0 <= t < 1 for t in targets):
            raise ConfigError("targets must lie in [0, 1)")
        rows = cmd_sweep(_config(args), targets)
        print(f"{len(rows)} cells")
    elif args.command == "report":
        sys.stdout.write(cmd_report(args.summary))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except ValueError as exc:  # config, checkpoint and input-file errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
