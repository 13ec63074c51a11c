"""Command-line entry point.

Exit codes: 0 ok, 1 usage error, 2 configuration error (bad or missing input
files, infeasible constraints), 3 runtime failure. Every command that writes an
artifact also writes ``<artifact>.manifest.json`` (``manifest.json`` inside a
training directory) recording how to reproduce it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .conflict import good_vs_random, similarity_sweep
from .evosearch import (InfeasibleConstraint, ProfileError, SearchConfig, load_profile, pareto_sweep,
                        predict_latency, search)
from .flops import subnet_flops
from .ladder import SamplingExhausted
from .space import (SpaceError, cardinality, format_genome, load_space, max_subnet, min_subnet, parse_genome,
                    validate)
from .trainer import ConfigError, TrainConfig, make_dataset, run, weights_from_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
CONFIG_ERRORS = (ConfigError, SpaceError, CheckpointError, ProfileError, InfeasibleConstraint,
                 FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- #
# Manifests and output helpers
# --------------------------------------------------------------------------- #


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_manifest(path: Path, argv: Sequence[str], config: Any, space_digest: str | None, seed: int | None,
                   started: str, outputs: Sequence[Path]) -> None:
    manifest = {
        "tool": "casnas",
        "version": __version__,
        "argv": list(argv),
        "config_hash": _hash(config),
        "space_hash": space_digest,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": [str(p) for p in outputs],
    }
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _clean(obj):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class Context:
    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args, self.argv = args, list(argv)
        self.started = _now()

    def emit(self, payload: dict, text: str, config: Any = None, space_digest: str | None = None) -> None:
        """Print ``text`` (or JSON with ``--json``) and write ``--out`` plus its manifest."""
        payload = _clean(payload)
        print(json.dumps(payload, indent=2, sort_keys=True) if self.args.json else text)
        if self.args.out:
            out = Path(self.args.out)
            atomic_write(out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
            outputs = [out]
            csv_path = getattr(self.args, "csv", None)
            if csv_path:
                outputs.append(Path(csv_path))
            write_manifest(out.with_name(out.name + ".manifest.json"), self.argv,
                           config if config is not None else vars(self.args), space_digest, self.args.seed,
                           self.started, outputs)


def write_csv(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(_clean(rows))
    os.replace(tmp, path)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_space(ctx: Context) -> int:
    space = load_space(ctx.args.space)
    errors = validate(space)
    if errors:
        payload = {"space": space.name, "valid": False, "errors": errors}
        print(json.dumps(payload, indent=2) if ctx.args.json else "\n".join(["invalid space:"] + errors),
              file=sys.stdout if ctx.args.json else sys.stderr)
        return EXIT_CONFIG
    card = cardinality(space)
    lo, hi = subnet_flops(space, min_subnet(space)), subnet_flops(space, max_subnet(space))
    payload = {
        "space": space.name, "valid": True, "errors": [], "digest": space.digest(),
        "cardinality": str(card.exact), "log10_cardinality": card.log10,
        "min_mflops": lo.total, "max_mflops": hi.total,
        "stages": [{"kind": st.kind.value, "depth": list(st.depth_range), "channels": list(st.channel_range),
                    "kernels_or_vscale": list(st.kernel_or_vscale_choices),
                    "expansions": list(st.expansion_choices), "stride": st.stride} for st in space.stages],
    }
    text = (f"space {space.name}: valid\n"
            f"subnets: {card.exact} (log10 {card.log10:.3f})\n"
            f"MFLOPs: {lo.total:.2f} (min) to {hi.total:.2f} (max)")
    ctx.emit(payload, text, space.to_dict(), space.digest())
    return EXIT_OK


def cmd_flops(ctx: Context) -> int:
    a = ctx.args
    space = load_space(a.space)
    if a.genome:
        cfg = parse_genome(space, a.genome)
    elif a.max:
        cfg = max_subnet(space)
    else:
        cfg = min_subnet(space)
    bd = subnet_flops(space, cfg)
    payload = {"space": space.name, "genome": format_genome(space, cfg), **bd.as_dict()}
    text = f"{bd.total:.4f} MFLOPs  ({payload['genome']})"
    if a.device:
        ms = predict_latency(load_profile(a.device), space, cfg)
        payload["latency_ms"] = ms
        text += f"\n{ms:.4f} ms on {a.device}"
    ctx.emit(payload, text, payload, space.digest())
    return EXIT_OK


def _train_config(a) -> TrainConfig:
    overrides = {"mode": a.mode, "seed": a.seed, "total_steps": a.steps, "checkpoint_every": a.checkpoint_every}
    if a.config:
        return TrainConfig.from_toml(a.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_train(ctx: Context) -> int:
    a = ctx.args
    if not a.out:
        raise UsageError("train needs --out <dir>")
    config = _train_config(a)
    out = Path(a.out)
    result = run(config, out, resume=a.resume, stop_after=a.stop_after)
    recs = result.records
    payload = {"steps": result.trainer.step, "metrics": str(result.metrics_path),
               "checkpoint": str(result.checkpoint_path),
               "final_loss_mean": recs[-1].loss_mean if recs else None}
    write_manifest(out / "manifest.json", ctx.argv, config.to_json(), result.trainer.space.digest(), config.seed,
                   ctx.started, [result.metrics_path, result.checkpoint_path])
    print(json.dumps(_clean(payload), indent=2) if a.json else
          f"trained {payload['steps']} steps; metrics {payload['metrics']}; checkpoint {payload['checkpoint']}")
    return EXIT_OK


def _load_run(path: str):
    space, weights, meta = weights_from_checkpoint(path)
    config = TrainConfig(**meta["config"])
    data = make_dataset(config, space)
    return space, weights, config, data


def cmd_analyze(ctx: Context) -> int:
    a = ctx.args
    space, weights, config, data = _load_run(a.checkpoint)
    targets = _floats(a.targets)
    batch = data.batch(1 << 41, a.batch_size)
    seed = a.seed if a.seed is not None else 0
    report = similarity_sweep(weights, space, targets, a.n, batch, np.random.default_rng([seed, 10]))
    report.checkpoint = str(a.checkpoint)
    level = a.level if a.level is not None else targets[len(targets) // 2]
    gvr = good_vs_random(weights, space, level, a.pool, a.top, data.eval_batches(config.eval_batches,
                         config.eval_batch_size), batch, np.random.default_rng([seed, 11]))
    payload = {"similarity": report.to_json(), "good_vs_random": gvr.to_json()}
    if a.csv:
        rows = []
        n = len(report.subnets)
        for i in range(n):
            for j in range(i + 1, n):
                rows.append({"i": i, "j": j, "target_i": report.targets[i], "target_j": report.targets[j],
                             "mflops_i": report.mflops[i], "mflops_j": report.mflops[j],
                             "mflops_gap": abs(report.mflops[i] - report.mflops[j]),
                             "cosine": float(report.matrix[i, j])})
        write_csv(a.csv, rows)
    corr = report.correlation
    text = (f"{len(report.subnets)} subnets, pearson(gap, cosine) = {corr:.3f} "
            f"(advisory: {report.advisory()['observed']})\n"
            f"good-vs-random at {level:g} MFLOPs: top {gvr.top_mean:.3f} vs all {gvr.random_mean:.3f}")
    ctx.emit(payload, text, {"args": vars(a), "checkpoint_config": config.to_json()}, space.digest())
    return EXIT_OK


def cmd_search(ctx: Context) -> int:
    a = ctx.args
    if (a.latency_ms is None) == (a.mflops is None) and not a.sweep:
        raise UsageError("give exactly one of --latency-ms or --mflops")
    space, weights, config, data = _load_run(a.checkpoint)
    profile = load_profile(a.device) if a.device else None
    if a.latency_ms is not None and profile is None:
        raise UsageError("--latency-ms needs --device")
    eval_batches = data.eval_batches(config.eval_batches, config.eval_batch_size)
    seed = a.seed if a.seed is not None else 0
    first = a.latency_ms if a.latency_ms is not None else a.mflops
    if first is None:
        first = _floats(a.sweep)[0]
    kind = "mflops" if a.mflops is not None or (a.latency_ms is None and profile is None) else "latency_ms"
    scfg = SearchConfig(**{kind: first}, population=a.population, budget=a.budget, seed=seed,
                        mutation_rate=a.mutation_rate, parent_fraction=a.parent_fraction)
    if a.sweep:
        entries = pareto_sweep(weights, space, profile, _floats(a.sweep), scfg, eval_batches)
        rows = [e.row() for e in entries]
        payload = {"kind": kind, "device": profile.to_dict() if profile else None, "sweep": rows,
                   "results": [e.result.to_json(include_candidates=False) if e.result else None for e in entries]}
        if a.csv:
            write_csv(a.csv, rows)
        text = "\n".join(f"{r['constraint']:>10g}  " + (f"acc {r['accuracy']:.4f}  {r['mflops']:.3f} MFLOPs  {r['genome']}"
                                                    if r["feasible"] else f"infeasible: {r['error']}") for r in rows)
    else:
        res = search(weights, space, profile, scfg, eval_batches)
        payload = {"kind": kind, "device": profile.to_dict() if profile else None, **res.to_json()}
        if a.csv:
            write_csv(a.csv, [{"order": i, **c.to_json()} for i, c in enumerate(res.candidates)])
        b = res.best
        lat = "" if math.isnan(b.latency_ms) else f"  {b.latency_ms:.3f} ms"
        text = (f"best {b.genome}\naccuracy {b.accuracy:.4f}  loss {b.loss:.4f}  {b.mflops:.3f} MFLOPs{lat}\n"
                f"{res.evaluations} evaluations")
    ctx.emit(payload, text, {"args": vars(a), "search": scfg.__dict__}, space.digest())
    return EXIT_OK


def cmd_bank(ctx: Context) -> int:
    a = ctx.args
    ck = load_checkpoint(a.checkpoint)
    if "bank" not in ck.meta:
        raise ConfigError(f"{a.checkpoint} holds no memory bank (not an elastic run)")
    bank = ck.meta["bank"]
    levels = ck.meta["config"]["ladder"]
    payload = {"checkpoint": str(a.checkpoint), "step": ck.meta["step"], "capacity": bank["capacity"],
               "levels": [{"index": j, "mflops": levels[j], "entries": sorted(entries, key=lambda e: e["loss"])}
                          for j, entries in enumerate(bank["levels"])
                          if a.level is None or j == a.level]}
    lines = [f"bank at step {payload['step']} (capacity {payload['capacity']})"]
    for lv in payload["levels"]:
        lines.append(f"level {lv['index']} ({lv['mflops']:g} MFLOPs): {len(lv['entries'])} entries")
        lines += [f"  {e['loss']:.4f}  step {e['step_seen']}  {e['subnet']}" for e in lv["entries"]]
    ctx.emit(payload, "\n".join(lines), {"args": vars(a)}, ck.space_digest)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #


def _common(p: argparse.ArgumentParser, top: bool) -> None:
    default = None if top else argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=default, help="run seed")
    p.add_argument("--json", action="store_true", default=False if top else argparse.SUPPRESS,
                   help="machine-readable output")
    p.add_argument("--out", default=default, help="output file (directory for train)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="casnas", description="Complexity-aware supernet training and search.")
    p.add_argument("--version", action="version", version=f"casnas {__version__}")
    _common(p, True)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("space", help="validate a space file and summarise it")
    s.add_argument("space", help="space file or bundled name (elasticvit, micro, tiny)")
    _common(s, False)

    s = sub.add_parser("flops", help="FLOPs of one subnet")
    s.add_argument("space")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--min", action="store_true")
    g.add_argument("--max", action="store_true")
    g.add_argument("--genome", help='encoded subnet, e.g. "micro v1 0 1 ..."')
    s.add_argument("--device", help="device profile; also report predicted latency")
    _common(s, False)

    s = sub.add_parser("train", help="train a supernet")
    s.add_argument("--config", help="run config (TOML)")
    s.add_argument("--mode", choices=["sandwich", "elastic"])
    s.add_argument("--steps", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--stop-after", type=int, help="stop at this step (the run stays resumable)")
    _common(s, False)

    s = sub.add_parser("analyze", help="gradient-similarity analysis of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--targets", default="0.5,1.5,3.0", help="MFLOPs targets, comma separated")
    s.add_argument("--n", type=int, default=4, help="subnets per target")
    s.add_argument("--level", type=float, help="MFLOPs level for the good-vs-random comparison")
    s.add_argument("--pool", type=int, default=12, help="subnets sampled at that level")
    s.add_argument("--top", type=int, default=4, help="lowest-loss subnets compared against the pool")
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--csv", help="also write pairwise rows as CSV")
    _common(s, False)

    s = sub.add_parser("search", help="constrained evolutionary search")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--device", help="device profile file or bundled name (weak, neutral, strong)")
    s.add_argument("--latency-ms", type=float)
    s.add_argument("--mflops", type=float)
    s.add_argument("--sweep", help="comma-separated constraints; runs one search per value")
    s.add_argument("--budget", type=int, default=5000)
    s.add_argument("--population", type=int, default=64)
    s.add_argument("--mutation-rate", type=float, default=0.1)
    s.add_argument("--parent-fraction", type=float, default=0.25)
    s.add_argument("--csv", help="also write candidates (or the sweep table) as CSV")
    _common(s, False)

    s = sub.add_parser("bank", help="inspect the memory bank of an elastic checkpoint")
    bsub = s.add_subparsers(dest="bank_command", parser_class=_Parser)
    d = bsub.add_parser("dump")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--level", type=int)
    _common(d, False)
    return p


COMMANDS = {"space": cmd_space, "flops": cmd_flops, "train": cmd_train, "analyze": cmd_analyze,
            "search": cmd_search, "bank": cmd_bank}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None or (args.command == "bank" and args.bank_command is None):
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](Context(args, argv))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SamplingExhausted, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
