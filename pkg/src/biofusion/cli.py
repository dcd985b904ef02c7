"""Command-line front end.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .core import (
    FUSION_CHANNELS,
    BiofusionError,
    ConfigError,
    dumps,
    read_score_table,
    save_score_table,
)
from .datagen import GenConfig, corpus_manifest, device_map, generate_corpus
from .fusion import FAMILIES, load_model, train
from .metrics import eer, evaluate, hter_variation
from .protocol import (
    MissingPlan,
    assign_devices,
    cost_curves_csv,
    inject_missing,
    run_cost_protocol,
    run_missing_protocol,
    run_quality_protocol,
    subset_results_csv,
)
from .sequential import CostModel, SequentialPolicy, calibrate_thresholds, run_sequential_table, traces_to_csv


@dataclass
class RunConfig:
    """Resolved settings for one run; file values are overridden by command-line flags."""

    command: str = ""
    seed: int = 42
    family: str = "gmm_bayes"
    family_config: dict = field(default_factory=dict)
    gen: dict = field(default_factory=dict)
    cost_model: dict = field(default_factory=dict)
    levels: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4)
    weights: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    rank: int = 1
    workers: int = 1
    confidence: float = 0.9
    threshold_policy: dict = field(default_factory=lambda: {
        "rule": "jr_benefit", "far_bound": 0.005, "frr_bound": 0.005, "lo_mode": "absolute",
    })
    inputs: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        data = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    """Collects outputs and writes the manifest."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, str] = {}

    def write(self, name: str, text: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="") as f:
            f.write(text)
        self.outputs[name] = _sha256(p)
        return p

    def record(self, name: str) -> None:
        self.outputs[name] = _sha256(self.out / name)

    def finish(self) -> None:
        inputs = {Path(p).name: _sha256(Path(p)) for p in self.cfg.inputs.values() if p}
        manifest = {
            "tool": "biofusion",
            "version": __version__,
            "config": {**self.cfg.to_dict(), "inputs": {k: Path(v).name for k, v in self.cfg.inputs.items() if v}},
            "input_sha256": inputs,
            "output_sha256": dict(sorted(self.outputs.items())),
        }
        (self.out / "manifest.json").write_text(dumps(manifest))


def _det_csv(points) -> str:
    return "far,frr\n" + "".join(f"{a!r},{b!r}\n" for a, b in points)


def _report_files(run: _Run, report, stem: str = "report") -> None:
    d = report.to_dict()
    det = d.pop("det")
    run.write(f"{stem}.json", dumps(d))
    run.write(f"{stem}_det.csv", _det_csv(det))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, out: Path) -> None:
    gen = GenConfig.from_dict({**cfg.gen, "seed": cfg.seed})
    dev, ev = generate_corpus(gen)
    run = _Run(cfg, out)
    for name, table in (("dev.csv", dev), ("eval.csv", ev)):
        save_score_table(table, out / name)
        run.record(name)
    run.write("corpus_manifest.json", dumps(corpus_manifest(gen)))
    run.write("device_oracle.json", dumps(device_map(gen.channels)))
    run.finish()


def _threshold(model, dev) -> tuple[float, float]:
    e, thr = eer(model.score(dev), dev.is_client)
    return e, thr


def cmd_train(cfg: RunConfig, out: Path) -> None:
    dev = read_score_table(cfg.inputs["dev"], "development")
    channels = [c for c in FUSION_CHANNELS if c in dev.channels] or list(dev.channels)
    model = train(cfg.family, dev, channels, **cfg.family_config)
    e, thr = _threshold(model, dev)
    run = _Run(cfg, out)
    run.write("model.json", dumps({"model": model.to_dict(), "threshold": thr, "dev_eer": e}))
    run.finish()


def cmd_eval_cost(cfg: RunConfig, out: Path) -> None:
    dev = read_score_table(cfg.inputs["dev"], "development")
    ev = read_score_table(cfg.inputs["eval"], "evaluation")
    cm = CostModel(**cfg.cost_model)
    results, curves = run_cost_protocol(dev, ev, cfg.family, cfg.family_config, cm, cfg.workers, cfg.rank)
    run = _Run(cfg, out)
    run.write("cost_curves.csv", cost_curves_csv(curves))
    run.write("subset_results.csv", subset_results_csv(results))
    run.finish()


def cmd_eval_quality(cfg: RunConfig, out: Path) -> None:
    dev = read_score_table(cfg.inputs["dev"], "development")
    ev = read_score_table(cfg.inputs["eval"], "evaluation")
    report = run_quality_protocol(dev, ev, cfg.family, cfg.family_config, cfg.weights, cfg.seed, cfg.confidence)
    run = _Run(cfg, out)
    _report_files(run, report)
    _, assignment = assign_devices(ev, cfg.weights, cfg.seed)
    run.write("device_oracle.json", dumps(assignment.to_dict()))
    run.finish()


def cmd_inject_missing(cfg: RunConfig, out: Path) -> None:
    ev = read_score_table(cfg.inputs["eval"], "evaluation")
    ev = ev.select_channels([c for c in FUSION_CHANNELS if c in ev.channels] or list(ev.channels))
    plan = MissingPlan(tuple(cfg.levels), cfg.seed)
    run = _Run(cfg, out)
    (out / "missing_levels").mkdir(exist_ok=True)
    for level, table in zip(plan.levels, inject_missing(ev, plan)):
        name = f"missing_levels/level_{level:.2f}.csv"
        save_score_table(table, out / name)
        run.record(name)
    run.finish()


def cmd_seq_run(cfg: RunConfig, out: Path) -> None:
    dev = read_score_table(cfg.inputs["dev"], "development")
    ev = read_score_table(cfg.inputs["eval"], "evaluation")
    channels = [c for c in FUSION_CHANNELS if c in dev.channels]
    model = train(cfg.family, dev, channels, **cfg.family_config)
    tp = dict(cfg.threshold_policy)
    rule = tp.get("rule", "jr_benefit")
    N = model.normalizer.apply_matrix(dev, channels) if model.normalizer else dev.score_matrix(channels)
    expected = {c: float(np.nanmean(N[dev.is_client, j])) for j, c in enumerate(channels)}
    cm = CostModel(**cfg.cost_model)
    gate = {}
    if rule == "quality_gated":
        face, iris = tp.get("face", "fnf1"), tp.get("iris", "ir1")
        q = dev.qualities[face]
        gate = {"face": face, "iris": iris, "median": float(np.nanmedian(np.nanmean(q, axis=1)))}
        channels = [face] + [c for c in channels if c != face]
    base = SequentialPolicy(order=tuple(channels), rule=rule, expected=expected, cost_model=cm, gate=gate,
                            skip_rules=tuple(tp.get("skip_rules", ())))
    lo_mode = tp.get("lo_mode", "absolute")
    lo, hi = calibrate_thresholds(dev, model, base, tp.get("far_bound", 0.005), tp.get("frr_bound", 0.005), lo_mode)
    policy = dataclasses.replace(base, theta_hi=hi, theta_lo=lo)
    traces = run_sequential_table(policy, model, ev)
    _, thr = _threshold(model, dev)
    decisions = np.array([t.decision(thr) for t in traces])
    far = float(decisions[~ev.is_client].mean())
    frr = float(1.0 - decisions[ev.is_client].mean())
    summary = {
        "theta_lo": lo,
        "theta_hi": hi,
        "decision_threshold": thr,
        "far": far,
        "frr": frr,
        "hter": 0.5 * (far + frr),
        "mean_cost": float(np.mean([t.cost for t in traces])),
        "mean_channels": float(np.mean([len(t.acquired) for t in traces])),
    }
    run = _Run(cfg, out)
    run.write("traces.csv", traces_to_csv(traces))
    run.write("sequential_report.json", dumps(summary))
    run.finish()


def _missing_csv(hters: dict, levels: Sequence[float]) -> str:
    names = list(hters)
    rows = ["level," + ",".join(names)]
    for k, level in enumerate((0.0,) + tuple(levels)):
        rows.append(f"{level!r}," + ",".join(repr(float(hters[n][k])) for n in names))
    return "\n".join(rows) + "\n"


def cmd_report(cfg: RunConfig, out: Path) -> None:
    ev = read_score_table(cfg.inputs["eval"], "evaluation")
    run = _Run(cfg, out)
    dev = read_score_table(cfg.inputs["dev"], "development") if cfg.inputs.get("dev") else None
    if cfg.inputs.get("model"):
        blob = json.loads(Path(cfg.inputs["model"]).read_text())
        model, thr = load_model(blob["model"]), float(blob["threshold"])
    elif dev is not None:
        channels = [c for c in FUSION_CHANNELS if c in dev.channels]
        model = train(cfg.family, dev, channels, **cfg.family_config)
        _, thr = _threshold(model, dev)
    else:
        raise ConfigError("report needs --model or --dev")
    _report_files(run, evaluate(model.score(ev), ev.is_client, thr, cfg.confidence))
    if cfg.levels and dev is not None:
        plan = MissingPlan(tuple(cfg.levels), cfg.seed)
        channels = [c for c in FUSION_CHANNELS if c in dev.channels]
        hters = run_missing_protocol(dev, ev, cfg.family, cfg.family_config, plan, channels, cfg.workers)
        run.write("missing_hter.csv", _missing_csv(hters, plan.levels))
        run.write("missing_variation.json", dumps({k: hter_variation(v) for k, v in hters.items()}))
    run.finish()


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval-cost": cmd_eval_cost,
    "eval-quality": cmd_eval_quality,
    "inject-missing": cmd_inject_missing,
    "seq-run": cmd_seq_run,
    "report": cmd_report,
}
INPUTS = {
    "gen": (),
    "train": ("dev",),
    "eval-cost": ("dev", "eval"),
    "eval-quality": ("dev", "eval"),
    "inject-missing": ("eval",),
    "seq-run": ("dev", "eval"),
    "report": ("eval",),
}


def _levels(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biofusion", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"biofusion {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="RunConfig JSON file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--family", choices=sorted(FAMILIES))
        s.add_argument("--levels", type=_levels, help="comma-separated missing ratios, e.g. 0.1,0.2")
        s.add_argument("--rank", type=int)
        s.add_argument("--workers", type=int)
        for inp in ("dev", "eval"):
            s.add_argument(f"--{inp}", required=inp in INPUTS[name])
        if name == "report":
            s.add_argument("--model")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    cfg.command = args.command
    for key in ("seed", "family", "levels", "rank", "workers"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if cfg.family not in FAMILIES:
        raise ConfigError(f"unknown family {cfg.family!r}")
    if cfg.rank < 1:
        raise ConfigError("--rank must be at least 1")
    cfg.levels = tuple(cfg.levels)
    cfg.weights = tuple(cfg.weights)
    cfg.inputs = {k: getattr(args, k, None) for k in ("dev", "eval", "model") if getattr(args, k, None)}
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
    except ConfigError as e:
        parser.error(str(e))
    try:
        COMMANDS[args.command](cfg, Path(args.out))
    except (BiofusionError, OSError, ValueError, KeyError) as e:
        print(f"biofusion {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
