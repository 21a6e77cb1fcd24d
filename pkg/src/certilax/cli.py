"""Command-line interface.

Exit codes: 0 robust (or success), 1 not robust, 2 usage error, 3 unknown,
4 numerical failure, 5 selftest failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import relaxation as rx
from .attack import AttackSpec, PgdConfig, pgd_upper_bound
from .exceptions import CertilaxError, NumericalFailure, SizeError
from .model import (
    baseline_margin_bound,
    forward,
    interval_bounds,
    load_network,
    margin_objective,
    random_network,
    save_network,
)
from .oracle import OracleConfig, exact_margin
from .solver import SolveConfig
from .staircase import CertificateResult, ClassCertificate, StaircaseConfig, certify_class, certify_input

EXIT_OK = 0
EXIT_NOT_ROBUST = 1
EXIT_USAGE = 2
EXIT_UNKNOWN = 3
EXIT_NUMERICAL = 4
EXIT_SELFTEST = 5

_STATUS_EXIT = {"robust": EXIT_OK, "not_robust": EXIT_NOT_ROBUST, "unknown": EXIT_UNKNOWN}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- records


def _num(v):
    """JSON-safe number: non-finite floats become string sentinels."""
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, dict):
        return {k: _num(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_num(x) for x in v]
    if isinstance(v, np.ndarray):
        return _num(v.tolist())
    return v


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _run_id(echo: dict) -> str:
    # deterministic in the command and its configuration
    return _digest(json.dumps(echo, sort_keys=True).encode())[:16]


class Appender:
    """Serialized writer of line-delimited JSON records."""

    def __init__(self, path: str | None):
        self.path = path
        self.lines: list[str] = []

    def write(self, record: dict) -> None:
        line = json.dumps(_num(record), sort_keys=True)
        self.lines.append(line)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        else:
            print(line)


def _base_record(command: str, args, echo: dict, model_path: str | None, x: np.ndarray | None) -> dict:
    rec = {
        "run_id": _run_id({"command": command, **echo}),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "command": command,
        "version": __version__,
        "config": echo,
        "seed": getattr(args, "seed", 0),
    }
    if model_path is not None:
        rec["model"] = {"path": str(model_path), "digest": _digest(Path(model_path).read_bytes())}
    if x is not None:
        rec["x_digest"] = _digest(np.asarray(x, dtype=float).tobytes())
    return rec


def _load_input(path: str) -> np.ndarray:
    try:
        doc = json.loads(Path(path).read_text())
        return np.asarray(doc["x"], dtype=float).reshape(-1)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot read input document {path}: {exc}") from exc


def _load_model(path: str):
    try:
        return load_network(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from exc


def _class_output(cert: ClassCertificate, dump_slack: bool) -> dict:
    out = {
        "target_class": cert.target_class,
        "phi_lb": cert.phi_lb,
        "phi_ub": cert.phi_ub,
        "r_final": cert.r_final,
        "eps_feas": cert.eps_feas,
        "kkt": cert.kkt.as_dict() if cert.kkt is not None else None,
        "npcq_ok": cert.npcq_ok,
        "rounds": [r.as_dict() for r in cert.rounds],
        "error": cert.error,
    }
    if dump_slack and cert.slack is not None:
        out["slack"] = {
            "z0": cert.slack.z0,
            "lambda_min": cert.slack.lambda_min,
            "cushion": cert.slack.cushion,
            "S": cert.slack.S,
        }
    return out


# ---------------------------------------------------------------- commands


def _parse_dims(text: str) -> list[int]:
    try:
        dims = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --dims {text!r}") from exc
    if len(dims) < 2 or min(dims) < 1:
        raise UsageError("--dims needs at least two positive widths")
    return dims


def cmd_gen_model(args) -> int:
    dims = _parse_dims(args.dims)
    net = random_network(dims, args.seed)
    save_network(net, args.out)
    return EXIT_OK


def _staircase_config(args) -> StaircaseConfig:
    try:
        return StaircaseConfig(
            r_init=args.rank_init,
            r_max=args.rank_max,
            solver=SolveConfig(seed=args.seed),
            pgd=PgdConfig(seed=args.seed),
            strict_alg1=args.strict_alg1,
            seed=args.seed,
        )
    except CertilaxError as exc:
        raise UsageError(str(exc)) from exc


def _echo(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys}


_CERT_KEYS = ("input", "true_class", "target_class", "radius", "norm", "variant", "rank_init", "rank_max", "seed", "strict_alg1")


def cmd_certify(args) -> int:
    net = _load_model(args.model)
    x = _load_input(args.input)
    cfg = _staircase_config(args)
    echo = _echo(args, _CERT_KEYS)
    out = Appender(args.out)
    t0 = time.perf_counter()
    if args.target_class is not None:
        spec = AttackSpec(x, args.true_class, args.target_class, args.radius, args.norm)
        cert = certify_class(net, spec, cfg, args.variant)
        certs = [cert]
        if cert.phi_ub < 0:
            status = "not_robust"
        elif cert.phi_lb > 0:
            status = "robust"
        else:
            status = "unknown"
        result = CertificateResult(args.true_class, certs, cert.phi_lb, cert.phi_ub, status)
    else:
        result = certify_input(net, x, args.true_class, args.radius, args.norm, args.variant, cfg)
    wall = time.perf_counter() - t0
    base = _base_record("certify", args, echo, args.model, x)
    base["spec"] = {
        "true_class": args.true_class,
        "target_class": "all" if args.target_class is None else args.target_class,
        "radius": args.radius,
        "norm": args.norm,
        "variant": args.variant,
    }
    for cert in result.certificates:
        out.write({**base, "kind": "class", "outputs": _class_output(cert, args.dump_slack)})
    out.write(
        {
            **base,
            "kind": "summary",
            "outputs": {
                "status": result.status,
                "misclassified": result.misclassified,
                "phi_star_lb": result.phi_star_lb,
                "phi_star_ub": result.phi_star_ub,
                "phi_lb": {str(c.target_class): c.phi_lb for c in result.certificates},
                "phi_ub": {str(c.target_class): c.phi_ub for c in result.certificates},
            },
            "timing": {"wall_seconds": wall},
        }
    )
    if result.numerical_failure:
        return EXIT_NUMERICAL
    return _STATUS_EXIT[result.status]


def _targets(net, args) -> list[int]:
    if args.target_class is not None:
        return [args.target_class]
    return [c for c in range(net.num_classes) if c != args.true_class]


def cmd_attack(args) -> int:
    net = _load_model(args.model)
    x = _load_input(args.input)
    out = Appender(args.out)
    echo = _echo(args, ("input", "true_class", "target_class", "radius", "norm", "seed", "iterations", "restarts"))
    base = _base_record("attack", args, echo, args.model, x)
    worst = np.inf
    for c in _targets(net, args):
        spec = AttackSpec(x, args.true_class, c, args.radius, args.norm)
        mobj = margin_objective(net, args.true_class, c)
        res = pgd_upper_bound(net, spec, mobj, PgdConfig(iterations=args.iterations, restarts=args.restarts, seed=args.seed))
        worst = min(worst, res.phi_ub)
        out.write({**base, "kind": "class", "outputs": {"target_class": c, "phi_ub": res.phi_ub, "x_adv": res.x_adv}})
    return EXIT_NOT_ROBUST if worst < 0 else EXIT_OK


def cmd_oracle(args) -> int:
    net = _load_model(args.model)
    x = _load_input(args.input)
    out = Appender(args.out)
    echo = _echo(args, ("input", "true_class", "target_class", "radius", "norm", "max_hidden"))
    base = _base_record("oracle", args, echo, args.model, x)
    cfg = OracleConfig(max_hidden_neurons=args.max_hidden)
    worst = np.inf
    for c in _targets(net, args):
        spec = AttackSpec(x, args.true_class, c, args.radius, args.norm)
        try:
            phi, xa = exact_margin(net, spec, margin_objective(net, args.true_class, c), cfg)
        except SizeError as exc:
            raise UsageError(str(exc)) from exc
        worst = min(worst, phi)
        out.write({**base, "kind": "class", "outputs": {"target_class": c, "phi_exact": phi, "x_argmin": xa}})
    return EXIT_NOT_ROBUST if worst <= 0 else EXIT_OK


def _parse_radii(args) -> list[float]:
    if args.radii:
        try:
            return [float(t) for t in args.radii.split(",") if t.strip()]
        except ValueError as exc:
            raise UsageError(f"bad --radii {args.radii!r}") from exc
    if args.radius_range:
        try:
            a, b, k = args.radius_range.split(":")
            return [float(v) for v in np.linspace(float(a), float(b), int(k))]
        except ValueError as exc:
            raise UsageError("--radius-range must be start:stop:count") from exc
    raise UsageError("sweep needs --radii or --radius-range")


SWEEP_COLUMNS = (
    "rho",
    "pairs",
    "phi_ub_mean",
    "phi_lb_bm_mean",
    "phi_lb_bmfull_mean",
    "phi_lb_baseline_mean",
    "phi_exact_mean",
    "frac_bmfull_ge_baseline",
    "gap_bmfull_minus_baseline_min",
    "gap_bmfull_minus_baseline_median",
    "gap_bmfull_minus_baseline_max",
)


def _sweep_pairs(net, args) -> list[tuple[np.ndarray, int, int]]:
    """(input, true class, target class) pairs from files or seeded samples."""
    inputs: list[tuple[np.ndarray, int]] = []
    for i, path in enumerate(args.input or []):
        x = _load_input(path)
        tc = args.true_class[i] if args.true_class and i < len(args.true_class) else int(np.argmax(forward(net, x)[1]))
        inputs.append((x, tc))
    if args.random_inputs:
        rng = np.random.default_rng(args.seed)
        for _ in range(args.random_inputs):
            x = rng.uniform(0.0, 1.0, net.input_dim)
            inputs.append((x, int(np.argmax(forward(net, x)[1]))))
    if not inputs:
        raise UsageError("sweep needs --input or --random-inputs")
    pairs = []
    for x, tc in inputs:
        targets = [c for c in range(net.num_classes) if c != tc]
        if args.target_class is not None:
            targets = [args.target_class] if args.target_class != tc else []
        pairs += [(x, tc, c) for c in targets]
    if not pairs:
        raise UsageError("no valid (input, target) pairs")
    return pairs


def sweep_rows(net, pairs, radii, norm, cfg: StaircaseConfig, oracle: bool) -> list[dict]:
    rows = []
    for rho in radii:
        acc = {k: [] for k in ("ub", "bm", "full", "base", "exact")}
        for x, tc, c in pairs:
            spec = AttackSpec(x, tc, c, rho, norm)
            bounds = interval_bounds(net, spec)
            mobj = margin_objective(net, tc, c)
            pgd = pgd_upper_bound(net, spec, mobj, cfg.pgd)
            plain = certify_class(net, spec, cfg, "plain", bounds, pgd)
            full = certify_class(net, spec, cfg, "full", bounds, pgd)
            acc["ub"].append(pgd.phi_ub)
            acc["bm"].append(plain.phi_lb)
            acc["full"].append(full.phi_lb)
            acc["base"].append(baseline_margin_bound(net, spec, bounds))
            if oracle:
                acc["exact"].append(exact_margin(net, spec, mobj)[0])
        full_a, base_a = np.array(acc["full"]), np.array(acc["base"])
        gap = full_a - base_a
        rows.append(
            {
                "rho": rho,
                "pairs": len(pairs),
                "phi_ub_mean": float(np.mean(acc["ub"])),
                "phi_lb_bm_mean": float(np.mean(acc["bm"])),
                "phi_lb_bmfull_mean": float(np.mean(full_a)),
                "phi_lb_baseline_mean": float(np.mean(base_a)),
                "phi_exact_mean": float(np.mean(acc["exact"])) if oracle else "",
                "frac_bmfull_ge_baseline": float(np.mean(full_a >= base_a - 1e-9)),
                "gap_bmfull_minus_baseline_min": float(np.min(gap)),
                "gap_bmfull_minus_baseline_median": float(np.median(gap)),
                "gap_bmfull_minus_baseline_max": float(np.max(gap)),
            }
        )
    return rows


def cmd_sweep(args) -> int:
    net = _load_model(args.model)
    radii = _parse_radii(args)
    if any(r < 0 for r in radii):
        raise UsageError("radii must be non-negative")
    pairs = _sweep_pairs(net, args)
    cfg = _staircase_config(args)
    oracle = args.oracle == "on" or (args.oracle == "auto" and net.num_hidden <= OracleConfig().max_hidden_neurons)
    rows = sweep_rows(net, pairs, radii, args.norm, cfg, oracle)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(seeds=args.seeds)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.ok}/{r.total}")
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    if failed:
        print("failing properties: " + ", ".join(r.name for r in failed))
        return EXIT_SELFTEST
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _spec_args(p, with_variant=True):
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--true-class", type=int, required=True)
    p.add_argument("--target-class", type=int, default=None)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--norm", choices=("l2", "linf"), default="l2")
    if with_variant:
        p.add_argument("--variant", choices=rx.VARIANTS, default="plain")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="append records to this file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="certilax", description="Low-rank SDP robustness certificates for ReLU networks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-model", help="write a seeded random network")
    p.add_argument("--dims", required=True, help="comma-separated widths, input first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("certify", help="certify one input")
    _spec_args(p)
    p.add_argument("--rank-init", type=int, default=2)
    p.add_argument("--rank-max", type=int, default=10)
    p.add_argument("--strict-alg1", action="store_true", help="treat solver non-convergence as failure")
    p.add_argument("--dump-slack", action="store_true", help="include the slack matrix in class records")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("attack", help="PGD upper bounds")
    _spec_args(p, with_variant=False)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--restarts", type=int, default=5)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("oracle", help="exact margins by pattern enumeration")
    _spec_args(p, with_variant=False)
    p.add_argument("--max-hidden", type=int, default=16)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="radius sweep table")
    p.add_argument("--model", required=True)
    p.add_argument("--input", action="append", help="input document; repeatable")
    p.add_argument("--true-class", type=int, action="append", help="true class per --input (default: predicted)")
    p.add_argument("--random-inputs", type=int, default=0, help="also sample this many inputs uniformly")
    p.add_argument("--target-class", type=int, default=None)
    p.add_argument("--radii", default=None, help="comma-separated radii")
    p.add_argument("--radius-range", default=None, help="start:stop:count")
    p.add_argument("--norm", choices=("l2", "linf"), default="l2")
    p.add_argument("--oracle", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--rank-init", type=int, default=2)
    p.add_argument("--rank-max", type=int, default=10)
    p.add_argument("--strict-alg1", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="run the built-in invariant suites")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CertilaxError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
