"""Command-line front end.

    rssloc validate [--config FILE] [--set key=value ...]
    rssloc sweep {sigma,sensors,sources,iterations} [options]
    rssloc locate OBSERVATION.csv [options]
    rssloc simulate --out OBSERVATION.csv [--scene SCENE.json] [options]

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .bench import (run_trials, summarize, summary_columns, summary_row, write_timing_csv,
                    write_trials_csv)
from .config import SWEEP_FIELD, SWEEP_KINDS, ConfigError, ExperimentConfig, load_config
from .scene import Roi, SceneError, generate_scene, read_observation, save_scene, simulate_rss, \
    write_observation

log = logging.getLogger("rssloc")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _common(p: argparse.ArgumentParser, sweep_flags=True):
    p.add_argument("--config", help="JSON config file (see `rssloc validate` for all keys)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--algorithm", choices=["sdu", "sr-ml"])
    if sweep_flags:
        p.add_argument("--trials", type=int, help="Monte-Carlo trials per sweep value")
        p.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    p.add_argument("--out", help="output directory (sweep) or report path (locate)")
    p.add_argument("--dump-intermediate", action="store_true",
                   help="save per-iteration s_hat vectors as .npz")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rssloc", description="Multi-source RSS localization")
    ap.add_argument("--version", action="version", version=f"rssloc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config and print the effective values")
    _common(p)
    p.add_argument("--sweep", choices=SWEEP_KINDS, help="apply this study's preset first")

    p = sub.add_parser("sweep", help="run one of the four Monte-Carlo studies")
    p.add_argument("kind", choices=SWEEP_KINDS)
    _common(p)
    p.add_argument("--values", help="comma-separated sweep values (overrides the config list)")
    p.add_argument("--ablation", action="store_true",
                   help="also report the single-iteration (SR-ML) result of the same trials")

    p = sub.add_parser("locate", help="localize the sources in one observation file")
    p.add_argument("observation")
    _common(p, sweep_flags=False)

    p = sub.add_parser("simulate", help="write a random observation file")
    _common(p, sweep_flags=False)
    p.add_argument("--scene", help="also save the ground-truth scene as JSON")
    return ap


def _resolve(args, sweep=None) -> ExperimentConfig:
    overrides = _parse_set(args.set)
    for flag, key in [("seed", "master_seed"), ("algorithm", "algorithm"), ("trials", "j_trials"),
                      ("workers", "workers")]:
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if args.dump_intermediate:
        overrides["dump_intermediate"] = True
    if sweep is not None and getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if sweep is not None and getattr(args, "values", None):
        key = {"sigma": "sigma_values", "sensors": "sensor_values", "sources": "source_values",
               "iterations": "iteration_values"}[sweep]
        overrides[key] = [float(v) if sweep == "sigma" else int(v) for v in args.values.split(",")]
    return load_config(args.config, overrides, sweep=sweep).validate()


def cmd_validate(args) -> int:
    cfg = _resolve(args, args.sweep)
    print(cfg.to_json())
    return EXIT_OK


def _atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cmd_sweep(args) -> int:
    kind = args.kind
    cfg = _resolve(args, kind)
    if kind == "iterations" and cfg.algorithm != "sdu":
        raise ConfigError(["the iterations sweep needs algorithm 'sdu'"])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config_{kind}.json").write_text(cfg.to_json() + "\n")
    roi = Roi(cfg.roi_l, cfg.roi_w)
    values = cfg.sweep_values(kind)

    if kind == "iterations":
        # one run to max(I) reports every shorter run as well
        batches = [(cfg, sorted(set(values)))]
    else:
        batches = [(cfg.with_sweep_value(kind, v), None) for v in values]

    summary_path = out / f"summary_{kind}.csv"
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(summary_columns(cfg.rmef_d))
        fh.flush()
        for exp, checkpoints in batches:
            main_i = exp.effective_iterations
            cps = checkpoints or ([1, main_i] if args.ablation else [main_i])
            cps = sorted(set(cps))
            tag = kind if checkpoints else f"{kind}_{exp.to_dict()[_field(kind)]:g}"
            dump = out / "intermediate" / tag if cfg.dump_intermediate else None
            log.info("running %s (%d trials)", tag, exp.j_trials)
            by_iter = run_trials(exp, cps, dump_dir=dump)
            for i, recs in by_iter.items():
                suffix = f"_I{i}" if len(by_iter) > 1 else ""
                write_trials_csv(out / f"trials_{tag}{suffix}.csv", recs)
                write_timing_csv(out / f"timing_{tag}{suffix}.csv", recs)
                alg = "sr-ml" if i == 1 and kind != "iterations" else "sdu"
                value = i if kind == "iterations" else exp.to_dict()[_field(kind)]
                s = summarize(recs, roi, cfg.rmef_d)
                w.writerow(summary_row(kind, value, alg, i, s))
                fh.flush()
                print(f"{kind}={value:g} {alg} I={i}: rrmse={s.rrmse:.4f} "
                      + " ".join(f"P(delta>{d:g})={p:.3f}" for d, p in s.rmef_curve)
                      + (f" failed={s.n_failed}" if s.n_failed else ""))
    print(f"summary written to {summary_path}")
    return EXIT_OK


def _field(kind):
    return SWEEP_FIELD[kind]


def cmd_locate(args) -> int:
    cfg = _resolve(args)
    try:
        obs = read_observation(args.observation)
    except (OSError, SceneError) as exc:
        raise ConfigError([f"cannot read observation: {exc}"]) from None
    from .sdu import run_sdu
    result = run_sdu(obs, cfg.sdu_config(), cfg.master_seed, keep_s_hat=cfg.dump_intermediate)
    report = {
        "observation": str(args.observation),
        "algorithm": cfg.algorithm,
        "sources": [{"u": float(u), "v": float(v), "p_mw": float(p)}
                    for (u, v), p in zip(result.locations, result.powers)],
        "sigma_db": float(result.sigma_hat),
        "objective": float(result.objective),
        "trace": [rec.as_dict() for rec in result.trace],
        "config": cfg.to_dict(),
    }
    for k, ((u, v), p) in enumerate(zip(result.locations, result.powers)):
        print(f"source {k}: u={u:.2f} m  v={v:.2f} m  P={p:.1f} mW")
    print(f"sigma_hat = {result.sigma_hat:.3f} dB")
    report_path = Path(args.out or Path(args.observation).with_suffix(".report.json"))
    _atomic_write_text(report_path, json.dumps(report, indent=1) + "\n")
    if cfg.dump_intermediate:
        from .bench import dump_trace
        dump_trace(report_path.with_suffix(".npz"), result)
    print(f"report written to {report_path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    if not args.out:
        raise ConfigError(["simulate needs --out"])
    scene = generate_scene(cfg, [cfg.master_seed, 1])
    obs = simulate_rss(scene, [cfg.master_seed, 2])
    write_observation(args.out, obs)
    if args.scene:
        save_scene(args.scene, scene, obs)
    for k, ((u, v), p) in enumerate(zip(scene.source_xy, scene.source_p)):
        print(f"source {k}: u={u:.2f} m  v={v:.2f} m  P={p:.1f} mW")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "sweep": cmd_sweep, "locate": cmd_locate,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:     # anything past validation is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
