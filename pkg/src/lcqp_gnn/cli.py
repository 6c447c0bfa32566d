"""Command line entry point: gen, solve, train, infer, eval, verify-sim.

Results go to stdout as JSON, logs to stderr. ``--config FILE`` supplies a JSON
object whose keys set any flag of the chosen subcommand; flags given explicitly
on the command line take precedence. Exit codes: 0 success, 1 validation or
tolerance failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__

log = logging.getLogger("lcqp_gnn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ValidationFailure(RuntimeError):
    """A run finished but its result breaches a tolerance."""


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default)


def _emit(payload: Any) -> None:
    print(_dumps(payload))


def _versions() -> dict:
    return {"lcqp_gnn": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(path: Path, args: argparse.Namespace, outputs: list, wall_time: float) -> Path:
    """One manifest per run: command, config echo, seed, versions, wall time, outputs."""
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func", "config")}
    payload = {"command": args.command, "config": config, "seed": config.get("seed"),
               "versions": _versions(), "wall_time": wall_time,
               "outputs": [str(p) for p in outputs]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dumps(payload) + "\n", encoding="utf-8")
    return path


def _instance_files(data: Path) -> list[Path]:
    data = Path(data)
    if data.is_file():
        return [data]
    files = sorted(p for p in data.iterdir()
                   if p.name.endswith((".json", ".json.gz")) and not p.name.startswith("manifest"))
    if not files:
        raise ValueError(f"no instance files in {data}")
    return files


def _load_all(data: Path):
    from .core import load_instance

    return [load_instance(p) for p in _instance_files(data)]


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    from .core import dump_instance
    from .datasets import GenConfig, default_workers, generate_batch
    from .pipelines import attach_solution

    t0 = time.perf_counter()
    cfg = GenConfig(args.family, n=args.n, m=args.m, density_a=args.density_a,
                    density_q=args.density_q, svm_lambda=args.svm_lambda, seed=args.seed)
    insts = generate_batch(cfg, args.count, workers=default_workers())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = ".json.gz" if args.gzip else ".json"
    paths = []
    for k, inst in enumerate(insts):
        if args.solve:
            attach_solution(inst, T=args.T)
        p = out / f"instance_{k:05d}{suffix}"
        dump_instance(inst, p)
        paths.append(p)
    write_manifest(out / "manifest.json", args, paths, time.perf_counter() - t0)
    log.info("wrote %d instances to %s", len(paths), out)
    _emit({"count": len(paths), "out": str(out)})
    return EXIT_OK


def cmd_solve(args) -> int:
    from .core import dump_instance, load_instance
    from .ipm import IpmConfig, ipm_solve

    t0 = time.perf_counter()
    inst = load_instance(args.instance)
    inner = args.inner
    cfg = IpmConfig(sigma=args.sigma, max_outer=args.max_outer, tol_kkt=args.tol, inner=inner)
    report, traj, _ = ipm_solve(inst, cfg)
    _emit(report.to_dict())
    outputs = []
    if args.emit_trajectory:
        inst.x_star = report.x.copy()
        inst.trajectory = traj
        dump_instance(inst, args.emit_trajectory)
        outputs.append(Path(args.emit_trajectory))
    if args.manifest or outputs:
        mpath = args.manifest or Path(str(args.emit_trajectory) + ".manifest.json")
        write_manifest(mpath, args, outputs, time.perf_counter() - t0)
    if not report.extra["converged"]:
        raise ValidationFailure(f"IPM did not converge: {report.extra['status']}")
    return EXIT_OK


def _prepare_training_data(insts, mode: str, T: int):
    from .pipelines import attach_solution

    for inst in insts:
        if inst.x_star is None or (mode == "ipm" and (inst.trajectory is None
                                                     or len(inst.trajectory) < T + 1)):
            attach_solution(inst, T=T)
    return insts


def cmd_train(args) -> int:
    from .mpnn import init_model
    from .pipelines import SearchConfig, TrainConfig, train_feasibility, train_ipm_guided

    t0 = time.perf_counter()
    insts = _prepare_training_data(_load_all(args.data), args.mode, args.T)
    val = _prepare_training_data(_load_all(args.val), args.mode, args.T) if args.val else None
    model = init_model(args.mode, L=args.L, d=args.d, seed=args.seed, sync_mode=args.sync,
                       aggr=args.aggr)
    cfg = SearchConfig(T_train=args.T, tau0=args.tau0, delta=args.delta, loss_on=args.loss_on)
    opt = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                      eval_every=args.eval_every)

    def progress(epoch, tlog):
        log.info("epoch %d loss %.6g", epoch + 1, tlog.epoch_loss[-1])

    train = train_feasibility if args.mode == "feas" else train_ipm_guided
    tlog = train(model, insts, cfg, opt, val=val, callback=progress)
    out = Path(args.model_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    log_path = out.with_name(out.stem + ".log.json")
    summary = tlog.to_dict()
    summary.pop("wall_time")
    log_path.write_text(_dumps(summary) + "\n", encoding="utf-8")
    write_manifest(out.with_name(out.stem + ".manifest.json"), args, [out, log_path],
                   time.perf_counter() - t0)
    _emit({"model": str(out), "final_loss": tlog.epoch_loss[-1] if tlog.epoch_loss else None,
           "max_feas_violation": tlog.max_feas_violation})
    return EXIT_OK


def cmd_infer(args) -> int:
    from .core import load_instance
    from .mpnn import MpnnModel
    from .pipelines import SearchConfig, infer_feasibility, infer_ipm_guided

    t0 = time.perf_counter()
    model = MpnnModel.load(args.model)
    if args.mode and args.mode != model.mode:
        raise ValueError(f"model was trained for mode {model.mode!r}, not {args.mode!r}")
    inst = load_instance(args.instance)
    cfg = SearchConfig(T_infer=args.T, tau0=args.tau0, delta=args.delta)
    if model.mode == "feas":
        report = infer_feasibility(model, inst, cfg)
    else:
        report = infer_ipm_guided(model, inst, cfg)
    _emit(report.to_dict())
    if args.manifest:
        write_manifest(args.manifest, args, [], time.perf_counter() - t0)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .mpnn import MpnnModel
    from .pipelines import SearchConfig, evaluate_feasibility, evaluate_ipm_guided

    t0 = time.perf_counter()
    model = MpnnModel.load(args.model)
    insts = _load_all(args.data)
    for inst in insts:
        if inst.x_star is None:
            from .pipelines import attach_solution
            attach_solution(inst)
    cfg = SearchConfig(T_infer=args.T, tau0=args.tau0, delta=args.delta)
    if model.mode == "feas":
        metrics = evaluate_feasibility(model, insts, cfg)
    else:
        metrics = evaluate_ipm_guided(model, insts, cfg)
    _emit(metrics)
    outputs = []
    if args.out:
        Path(args.out).write_text(_dumps(metrics) + "\n", encoding="utf-8")
        outputs.append(Path(args.out))
    if args.csv:
        rows = metrics["per_instance"]
        cols = sorted({k for r in rows for k in r})
        lines = [",".join(cols)] + [",".join("" if r.get(c) is None else str(r.get(c)) for c in cols)
                                    for r in rows]
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
        outputs.append(Path(args.csv))
    if args.manifest or outputs:
        mpath = args.manifest or Path(str(outputs[0]) + ".manifest.json")
        write_manifest(mpath, args, outputs, time.perf_counter() - t0)
    return EXIT_OK


def cmd_verify_sim(args) -> int:
    from .simproof import verify_lockstep

    t0 = time.perf_counter()
    rep = verify_lockstep(n=args.n, m=args.m, trials=args.trials, seed=args.seed,
                          outer=args.outer, sigma=args.sigma, eps=args.eps, tol=args.tol)
    payload = rep.to_dict()
    payload["wall_time"] = time.perf_counter() - t0
    for phase, chans in rep.deviations.items():
        for ch, v in chans.items():
            log.info("%-10s %-6s max deviation %.3e", phase, ch, v)
    c = rep.counts
    log.info("compared %d CG iterations (%d diverged), %d outer steps (%d diverged)",
             c.get("cg_compared", 0), c.get("cg_diverged", 0),
             c.get("outer_compared", 0), c.get("outer_diverged", 0))
    _emit(payload)
    if args.manifest:
        write_manifest(args.manifest, args, [], payload["wall_time"])
    if not rep.ok:
        raise ValidationFailure(
            f"lockstep breach: max deviation {rep.max_deviation:.3e}, step counts ok={rep.step_counts_ok}, "
            f"outer steps compared={rep.counts.get('outer_compared', 0)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcqp-gnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON object setting any flag of this command")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate random instances")
    p.add_argument("--family", choices=["generic", "svm", "portfolio"], default="generic")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--density-a", type=float, default=0.5)
    p.add_argument("--density-q", type=float, default=0.5)
    p.add_argument("--svm-lambda", type=float, default=1.0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--solve", action="store_true", help="attach IPM optimum and trajectory")
    p.add_argument("--T", type=int, default=8, help="trajectory length kept with --solve")
    p.add_argument("--gzip", action="store_true")

    p = add("solve", cmd_solve, "solve one instance with the IPM")
    p.add_argument("--instance", type=Path, required=True)
    p.add_argument("--inner", choices=["direct", "cg"], default="direct")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-outer", type=int, default=200)
    p.add_argument("--emit-trajectory", type=Path, default=None,
                   help="write the instance with optimum and full trajectory here")
    p.add_argument("--manifest", type=Path, default=None)

    p = add("train", cmd_train, "train an MPNN")
    p.add_argument("--mode", choices=["feas", "ipm"], required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--val", type=Path, default=None)
    p.add_argument("--model-out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--T", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--sync", choices=["async", "sync"], default="async")
    p.add_argument("--aggr", choices=["sum", "mean"], default="sum")
    p.add_argument("--tau0", type=float, default=1e-2)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--loss-on", choices=["corrected", "raw"], default="corrected")
    p.add_argument("--eval-every", type=int, default=0)

    for name, func, help_ in (("infer", cmd_infer, "run a trained model on one instance"),
                              ("eval", cmd_eval, "evaluate a trained model on a directory")):
        p = add(name, func, help_)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--T", type=int, default=32)
        p.add_argument("--tau0", type=float, default=1e-2)
        p.add_argument("--delta", type=float, default=1e-3)
        p.add_argument("--manifest", type=Path, default=None)
        if name == "infer":
            p.add_argument("--mode", choices=["feas", "ipm"], default=None)
            p.add_argument("--instance", type=Path, required=True)
        else:
            p.add_argument("--data", type=Path, required=True)
            p.add_argument("--out", type=Path, default=None, help="metrics JSON file")
            p.add_argument("--csv", type=Path, default=None, help="per-instance CSV file")

    p = add("verify-sim", cmd_verify_sim, "lockstep check of the message-passing IPM simulation")
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outer", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--manifest", type=Path, default=None)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv`` with the config file's values installed as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if known.config is not None and command is not None:
        try:
            payload = json.loads(Path(known.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        if not isinstance(payload, dict):
            parser.error("config must be a JSON object")
        sub = subparsers[command]
        actions = {a.dest: a for a in sub._actions}
        overrides = {}
        for key, value in payload.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in actions or dest in ("help", "config"):
                parser.error(f"unknown config key {key!r} for {command}")
            overrides[dest] = value
            # a required flag supplied by the config is no longer demanded on the command line
            actions[dest].required = False
        sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    for key, value in vars(args).items():
        if isinstance(value, str) and key in ("out", "data", "val", "model", "model_out",
                                              "instance", "emit_trajectory", "manifest", "csv"):
            setattr(args, key, Path(value))
    try:
        return args.func(args)
    except ValidationFailure as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAIL


if __name__ == "__main__":
    raise SystemExit(main())
