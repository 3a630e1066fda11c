"""Command-line pipeline driver.

One binary, five subcommands: gen-bank, fit-lgf, sweep, train, eval.
Every run is deterministic under a fixed --seed, and every run writes a
JSON manifest next to its output (command line, resolved settings, seed,
git revision, output paths, wall time) whether it succeeds or fails.

Exit codes are a stable contract for scripts: 0 success, 2 usage error,
3 data/IO error, 4 numerical failure.

Settings resolve as flags > config file (--config, JSON) > built-in
defaults.  OCN_DATA_DIR provides the default data directory for the
train/eval subcommands.
"""

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import gabor
from .data import IdxFormatError, load_dataset, rotate_dataset, subset
from .gabor import BankFormatError, GaborBankSpec
from .linalg import NumericalError
from .network import (
    CheckpointError,
    NetworkConfig,
    TrainConfig,
    build_network,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from . import solver
from .solver import SolverConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=10,
        )
    except OSError:
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _write_manifest(
    out_path,
    argv: List[str],
    resolved: dict,
    seed: Optional[int],
    outputs: List[str],
    wall_time_s: float,
    error: Optional[str],
) -> None:
    manifest = {
        "command_line": list(argv),
        "config": {k: v for k, v in sorted(resolved.items())},
        "seed": seed,
        "git_describe": _git_describe(),
        "outputs": outputs,
        "wall_time_s": wall_time_s,
        "status": "error" if error else "success",
        "error": error,
    }
    path = Path(str(out_path) + ".manifest.json")
    try:
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:  # manifest trouble must not mask the real outcome
        print(f"warning: could not write manifest {path}: {exc}", file=sys.stderr)


# ---------------------------------------------------------------------------
# settings resolution


def _load_config_file(path) -> dict:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return cfg


class Settings:
    """flags > config file > defaults, looked up by flag name."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self._args = args
        self._config = config

    def get(self, key: str, default=None):
        flag = getattr(self._args, key, None)
        if flag is not None:
            return flag
        if key in self._config:
            return self._config[key]
        return default


def _parse_widths(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(w) for w in text)
    try:
        widths = tuple(int(part) for part in str(text).split("-"))
    except ValueError:
        raise ValueError(f"widths must look like 10-20-40-80, got {text!r}") from None
    return widths


def _parse_grid_file(path) -> List[tuple]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(
                    f"{path}:{lineno}: need rho,mu,gamma,lambda — got {line!r}"
                )
            try:
                rows.append(tuple(float(p) for p in parts))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric entry in {line!r}") from None
    if not rows:
        raise ValueError(f"grid file {path} holds no parameter rows")
    return rows


def _data_dir(settings: Settings):
    data_dir = settings.get("data") or os.environ.get("OCN_DATA_DIR")
    if not data_dir:
        raise ValueError("no data directory: pass --data or set OCN_DATA_DIR")
    return data_dir


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_bank(settings: Settings, outputs: List[str]) -> dict:
    size = int(settings.get("size", 25))
    step = float(settings.get("angles_step", 5.0))
    scale = int(settings.get("scale", 1))
    n_scale = int(settings.get("n_scale", 5))
    out = settings.get("out")
    if step <= 0 or 180.0 % step != 0.0:
        raise ValueError(f"angle step must divide 180 evenly, got {step}")
    spec = GaborBankSpec(
        n_orient=int(180.0 / step),
        n_scale=n_scale,
        kernel_size=size,
        orientation_step=step,
    )
    fm = gabor.build_filter_matrix(spec, scale, gabor.default_angles(spec))
    gabor.serialize_bank(fm, out)
    outputs.append(str(out))
    print(f"wrote {out}: {size}x{size} kernels, {fm.x.shape[1]} orientations")
    return {
        "size": size,
        "angles_step": step,
        "scale": scale,
        "n_scale": n_scale,
        "out": str(out),
    }


def _solver_config(settings: Settings) -> SolverConfig:
    p = settings.get("p")
    return SolverConfig(
        q=int(settings.get("q", 5)),
        p=None if p is None else int(p),
        lam=float(settings.get("lam", 0.01)),
        mu=float(settings.get("mu", 0.005)),
        gamma=float(settings.get("gamma", 0.005)),
        rho=float(settings.get("rho", 0.005)),
        max_iters=int(settings.get("max_iters", 500)),
        rel_tol=float(settings.get("rel_tol", 1e-6)),
        seed=int(settings.get("seed", 0)),
    )


def cmd_fit_lgf(settings: Settings, outputs: List[str]) -> dict:
    bank_path = settings.get("bank")
    out = settings.get("out")
    history_path = settings.get("history") or str(out) + ".history.csv"
    if bank_path is None:
        raise ValueError("fit-lgf needs --bank")
    cfg = _solver_config(settings)
    fm = gabor.deserialize_bank(bank_path)
    state = solver.fit(fm, cfg)
    landmark_bank = solver.make_landmark_bank(fm, state)
    solver.write_landmark_bank(landmark_bank, out)
    with open(history_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective"])
        for i, f in enumerate(state.objective_history):
            writer.writerow([i, repr(f)])
    outputs.extend([str(out), str(history_path)])
    d = solver.approximation_degree(fm.x, state)
    print(f"D = {d:.6f} after {state.iters_run} iterations; wrote {out}")
    return {
        "bank": str(bank_path),
        "out": str(out),
        "history": str(history_path),
        **{k: getattr(cfg, k) for k in ("q", "p", "lam", "mu", "gamma", "rho", "max_iters", "rel_tol", "seed")},
    }


def cmd_sweep(settings: Settings, outputs: List[str]) -> dict:
    grid_arg = settings.get("grid", "builtin")
    out = settings.get("out")
    jobs = int(settings.get("jobs", 1))
    size = int(settings.get("size", 25))
    step = float(settings.get("angles_step", 5.0))
    scale = int(settings.get("scale", 1))
    if jobs < 1:
        raise ValueError(f"jobs must be positive, got {jobs}")
    if step <= 0 or 180.0 % step != 0.0:
        raise ValueError(f"angle step must divide 180 evenly, got {step}")
    grid = solver.default_grid() if grid_arg == "builtin" else _parse_grid_file(grid_arg)
    cfg = _solver_config(settings)
    spec = GaborBankSpec(
        n_orient=int(180.0 / step),
        n_scale=5,
        kernel_size=size,
        orientation_step=step,
    )
    fm = gabor.build_filter_matrix(spec, scale, gabor.default_angles(spec))
    rows = solver.parameter_sweep(fm, grid, cfg, jobs=jobs)
    solver.sweep_to_csv(rows, out)
    outputs.append(str(out))
    best = rows[0]
    print(
        f"wrote {out}: {len(rows)} rows; best D = {best.d} at "
        f"rho={best.rho} mu={best.mu} gamma={best.gamma} lambda={best.lam}"
    )
    return {
        "grid": str(grid_arg),
        "rows": len(grid),
        "out": str(out),
        "jobs": jobs,
        "size": size,
        "angles_step": step,
        "scale": scale,
        "q": cfg.q,
        "seed": cfg.seed,
    }


def _network_config(settings: Settings) -> NetworkConfig:
    return NetworkConfig(
        stage_widths=_parse_widths(settings.get("widths", "10-20-40-80")),
        kernel_size=int(settings.get("kernel", 3)),
        n_orient=int(settings.get("orientations", 4)),
        n_scale=1,
        use_ocn=settings.get("arch", "ocn") == "ocn",
    )


def cmd_train(settings: Settings, outputs: List[str]) -> dict:
    arch = settings.get("arch", "ocn")
    if arch not in ("ocn", "cnn"):
        raise ValueError(f"arch must be ocn or cnn, got {arch!r}")
    out = settings.get("out")
    metrics_path = settings.get("metrics") or str(out) + ".metrics.csv"
    seed = int(settings.get("seed", 0))
    nc = _network_config(settings)
    tc = TrainConfig(
        batch_size=int(settings.get("batch_size", 128)),
        weight_decay=float(settings.get("weight_decay", 0.00005)),
        lr=float(settings.get("lr", 0.001)),
        lr_halving_period_epochs=int(settings.get("lr_period", 10)),
        epochs=int(settings.get("epochs", 10)),
        seed=seed,
    )
    bank = None
    if nc.use_ocn:
        landmarks_path = settings.get("landmarks")
        if landmarks_path is None:
            raise ValueError("--arch ocn needs --landmarks")
        bank = solver.read_landmark_bank(landmarks_path)
    data = load_dataset(_data_dir(settings), train=True)
    n_train = int(settings.get("train_count", 2000))
    if n_train:
        data = subset(data, min(n_train, len(data)), seed=seed)
    if settings.get("rotated"):
        data = rotate_dataset(data, None, seed=seed)
    network = build_network(nc, bank, seed=seed)
    records = train(network, data, tc)
    save_checkpoint(network, out)
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "test_error", "lr", "seconds"])
        for r in records:
            writer.writerow(
                [r.epoch, repr(r.train_loss), "", repr(r.lr), f"{r.seconds:.3f}"]
            )
    outputs.extend([str(out), str(metrics_path)])
    for r in records:
        print(f"epoch {r.epoch}: loss {r.train_loss:.4f} lr {r.lr:g} ({r.seconds:.1f}s)")
    print(f"wrote {out} ({network.n_params} learnable parameters)")
    return {
        "arch": arch,
        "widths": "-".join(str(w) for w in nc.stage_widths),
        "kernel": nc.kernel_size,
        "orientations": nc.n_orient,
        "landmarks": settings.get("landmarks"),
        "train_count": n_train,
        "rotated": bool(settings.get("rotated")),
        "epochs": tc.epochs,
        "batch_size": tc.batch_size,
        "lr": tc.lr,
        "weight_decay": tc.weight_decay,
        "lr_period": tc.lr_halving_period_epochs,
        "seed": seed,
        "out": str(out),
        "metrics": str(metrics_path),
    }


def cmd_eval(settings: Settings, outputs: List[str]) -> dict:
    checkpoint = settings.get("checkpoint")
    out = settings.get("out")
    seed = int(settings.get("seed", 0))
    if checkpoint is None:
        raise ValueError("eval needs --checkpoint")
    network = load_checkpoint(checkpoint)
    data = load_dataset(_data_dir(settings), train=False)
    n_test = int(settings.get("test_count", 1000))
    if n_test:
        data = subset(data, min(n_test, len(data)), seed=seed)
    if settings.get("rotated"):
        data = rotate_dataset(data, None, seed=seed)
    report = evaluate(network, data)
    payload = {
        "error_rate": report.error_rate,
        "per_class_errors": report.per_class_errors,
        "param_count": report.param_count,
        "test_count": len(data),
        "rotated": bool(settings.get("rotated")),
        "seed": seed,
    }
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(str(out))
    print(f"error rate: {report.error_rate:.2f}% on {len(data)} images; wrote {out}")
    return {
        "checkpoint": str(checkpoint),
        "test_count": n_test,
        "rotated": bool(settings.get("rotated")),
        "seed": seed,
        "out": str(out),
    }


# ---------------------------------------------------------------------------
# parser / driver


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocn",
        description="Landmark Gabor filter factorization and orientation networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON settings file (flags take precedence)")
        p.add_argument("--out", required=True, help="primary output path")
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")

    p = sub.add_parser("gen-bank", help="write a Gabor filter bank file")
    add_common(p)
    p.add_argument("--size", type=int, help="odd kernel size W (default 25)")
    p.add_argument("--angles-step", type=float, dest="angles_step",
                   help="orientation step in degrees (default 5)")
    p.add_argument("--scale", type=int, help="scale index v (default 1)")
    p.add_argument("--n-scale", type=int, dest="n_scale",
                   help="scale count V of the family (default 5)")
    p.set_defaults(func=cmd_gen_bank)

    p = sub.add_parser("fit-lgf", help="factorize a bank into landmark filters")
    add_common(p)
    p.add_argument("--bank", help="input bank file from gen-bank")
    p.add_argument("--q", type=int, help="landmark count (default 5)")
    p.add_argument("--p", type=int, help="inner rank (default 2q)")
    p.add_argument("--lambda", type=float, dest="lam", help="U nuclear-norm weight")
    p.add_argument("--mu", type=float, help="V nuclear-norm weight")
    p.add_argument("--gamma", type=float, help="Z l1 weight")
    p.add_argument("--rho", type=float, help="coupling weight")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--rel-tol", type=float, dest="rel_tol")
    p.add_argument("--history", help="convergence CSV path (default <out>.history.csv)")
    p.set_defaults(func=cmd_fit_lgf)

    p = sub.add_parser("sweep", help="grid-sweep the penalty parameters")
    add_common(p)
    p.add_argument("--grid", help="'builtin' (36 rows) or a rho,mu,gamma,lambda CSV file")
    p.add_argument("--jobs", type=int, help="parallel fits (default 1)")
    p.add_argument("--size", type=int, help="bank kernel size (default 25)")
    p.add_argument("--angles-step", type=float, dest="angles_step")
    p.add_argument("--scale", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--rel-tol", type=float, dest="rel_tol")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="train an orientation network or plain CNN")
    add_common(p)
    p.add_argument("--arch", choices=["ocn", "cnn"])
    p.add_argument("--widths", help="stage widths, e.g. 10-20-40-80")
    p.add_argument("--kernel", type=int, help="conv kernel size 3|5|7")
    p.add_argument("--orientations", type=int, help="orientation count U (default 4)")
    p.add_argument("--landmarks", help="landmark file (required for --arch ocn)")
    p.add_argument("--data", help="IDX data directory (default $OCN_DATA_DIR)")
    p.add_argument("--train-count", type=int, dest="train_count",
                   help="training subset size, 0 = all (default 2000)")
    p.add_argument("--rotated", action="store_true", default=None,
                   help="train on randomly rotated images")
    p.add_argument("--epochs", type=int, help="epochs (default 10)")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--lr-period", type=int, dest="lr_period",
                   help="epochs between learning-rate halvings")
    p.add_argument("--metrics", help="per-epoch CSV path (default <out>.metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    add_common(p)
    p.add_argument("--checkpoint", help="model file written by train")
    p.add_argument("--data", help="IDX data directory (default $OCN_DATA_DIR)")
    p.add_argument("--test-count", type=int, dest="test_count",
                   help="test subset size, 0 = all (default 1000)")
    p.add_argument("--rotated", action="store_true", default=None,
                   help="rotate each test image by a seeded random angle")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    t0 = time.perf_counter()
    outputs: List[str] = []
    resolved: dict = {}
    error: Optional[str] = None
    code = EXIT_OK
    try:
        config = {} if args.config is None else _load_config_file(args.config)
        settings = Settings(args, config)
        resolved = args.func(settings, outputs)
        seed = int(settings.get("seed", 0))
    except NumericalError as exc:
        error, code = str(exc), EXIT_NUMERICAL
        seed = getattr(args, "seed", None)
    except (IdxFormatError, BankFormatError, CheckpointError, OSError) as exc:
        error, code = str(exc), EXIT_DATA
        seed = getattr(args, "seed", None)
    except ValueError as exc:
        error, code = str(exc), EXIT_USAGE
        seed = getattr(args, "seed", None)
    if error:
        print(f"error: {error}", file=sys.stderr)
    _write_manifest(
        args.out, argv, resolved, seed, outputs, time.perf_counter() - t0, error
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
