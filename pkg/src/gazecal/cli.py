"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 integrity error (bad input
data, calibration/test overlap, report cells that disagree with frames).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .calibrator import REPLAY_MODES
from .errors import ConfigError, IntegrityError, SchemaError
from .harness import (
    METHOD_KINDS,
    MethodSpec,
    ProtocolConfig,
    default_methods,
    har_f1,
    run_ablations,
    run_oneoff_matrix,
    run_protocol,
    sweep_replay,
    synth_session,
    train_har_model,
    verify_cells,
)
from .motionnet import HarModel
from .session import load_session, save_session

log = logging.getLogger("gazecal")

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY = 0, 2, 3


def _load(path):
    from .synth import load_config

    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        data = load_config(p)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"cannot parse {p}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p} must contain a table/object at top level")
    return data


def _methods(raw, cli_method):
    if cli_method:
        out = []
        for name in cli_method.split(","):
            name = name.strip()
            if name == "all":
                out += default_methods()
            elif name == "time_based":
                out.append(MethodSpec("time_based", interval=30.0))
            else:
                out.append(MethodSpec(name))
        return out
    if not raw:
        return default_methods()
    out = []
    for m in raw:
        if isinstance(m, str):
            m = {"kind": m}
        if not isinstance(m, dict):
            raise ConfigError(f"method entry {m!r} must be a name or a table")
        try:
            out.append(MethodSpec(**m))
        except TypeError as e:
            raise ConfigError(f"bad method entry {m}: {e}") from None
    return out


def _protocol(args):
    raw = _load(args.config)
    methods = raw.pop("methods", None)
    files = raw.pop("session_files", None)
    har_path = raw.pop("har_checkpoint", None)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if getattr(args, "threads", None):
        raw["threads"] = args.threads
    if files:
        base = Path(args.config).parent
        missing = [f for f in files if not (base / f).exists()]
        if missing:
            raise ConfigError(f"session files not found: {', '.join(map(str, missing))}")
        raw["sessions"] = [load_session(base / f) for f in files]
    cfg = ProtocolConfig.from_dict(raw)
    har_path = getattr(args, "har", None) or har_path
    return cfg, methods, har_path


def _har(cfg, methods, har_path, seed):
    if not any(m.uses_har for m in methods):
        return None
    if har_path:
        return HarModel.load(har_path)
    log.info("training activity model")
    har, _ = train_har_model(cfg, seed=seed)
    return har


def cmd_synth(args):
    cfg, _, _ = _protocol(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in cfg.seeds:
        for order in cfg.orders():
            s = synth_session(cfg, seed, order)
            p = out / f"session_{seed}_{'-'.join(order)}.{args.format}"
            save_session(s, p)
            written.append(str(p))
    print("\n".join(written))


def cmd_train_har(args):
    cfg, _, _ = _protocol(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    har, hist = train_har_model(cfg, seed=seed, log=log.info)
    har.save(out / "har.npz")
    held_out = [synth_session(cfg, s) for s in cfg.seeds] if cfg.sessions is None else []
    summary = {"val_loss": hist.val_loss, "train_loss": hist.train_loss, "best_epoch": hist.best_epoch}
    if held_out:
        summary["held_out_macro_f1"] = har_f1(har, held_out)
    (out / "har_history.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(out / "har.npz")


def cmd_run(args):
    cfg, raw_methods, har_path = _protocol(args)
    methods = _methods(raw_methods, args.method)
    har = _har(cfg, methods, har_path, args.seed or 0)
    rep = run_protocol(methods, cfg, har)
    print(rep.write(args.out, frames=cfg.write_frames))


def cmd_oneoff(args):
    cfg, _, _ = _protocol(args)
    print(run_oneoff_matrix(cfg).write(args.out))


def cmd_ablate(args):
    cfg, raw_methods, har_path = _protocol(args)
    base = MethodSpec("macgaze_hybrid", replay_mode=args.replay_mode)
    har = _har(cfg, [base], har_path, args.seed or 0)
    print(run_ablations(cfg, har, base).write(args.out, frames=cfg.write_frames))


def cmd_sweep(args):
    cfg, raw_methods, har_path = _protocol(args)
    base = MethodSpec("macgaze_hybrid", replay_mode=args.replay_mode)
    har = _har(cfg, [base], har_path, args.seed or 0)
    try:
        ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else None
    except ValueError:
        raise ConfigError(f"--ratios must be comma-separated numbers, got {args.ratios!r}") from None
    print(sweep_replay(cfg, ratios, har, base).write(args.out, frames=cfg.write_frames))


def cmd_report(args):
    out = Path(args.out)
    if not (out / "cells.csv").exists():
        raise ConfigError(f"{out} holds no report (cells.csv missing)")
    n = verify_cells(out) if (out / "frames.csv").exists() else 0
    print((out / "cells.csv").read_text(), end="")
    if (out / "triggers.csv").exists():
        print((out / "triggers.csv").read_text(), end="")
    print(f"verified {n} cells against per-frame log" if n else "no per-frame log; cells not re-verified")


def build_parser():
    p = argparse.ArgumentParser(prog="gazecal", description="Motion-aware continual gaze calibration experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, out_required=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON or TOML protocol file")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        sp.add_argument("--out", required=out_required, default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="worker processes for independent runs")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "write synthetic sessions")
    sp.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    add("train-har", cmd_train_har, "train the activity model and save a checkpoint")
    sp = add("run", cmd_run, "run calibration methods and write a report")
    sp.add_argument("--method", help=f"comma-separated kinds ({', '.join(METHOD_KINDS)}) or 'all'")
    sp.add_argument("--har", help="activity model checkpoint (skips training)")
    add("oneoff-matrix", cmd_oneoff, "one-off calibration train x test matrix")
    sp = add("ablate", cmd_ablate, "trigger and replay ablations")
    sp.add_argument("--har", help="activity model checkpoint")
    sp.add_argument("--replay-mode", choices=REPLAY_MODES, default="batch", help="what the replay ratio controls")
    sp = add("sweep-replay", cmd_sweep, "sweep replay ratios")
    sp.add_argument("--har", help="activity model checkpoint")
    sp.add_argument("--ratios", help="comma-separated replay ratios (default 0.1..0.9)")
    sp.add_argument("--replay-mode", choices=REPLAY_MODES, default="batch", help="what the replay ratio controls")
    add("report", cmd_report, "verify and print a written report")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except (IntegrityError, SchemaError) as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
