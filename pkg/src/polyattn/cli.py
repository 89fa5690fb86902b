"""Command-line driver.

    polyattn attn   --algo {exact,round1d,poly1d,polyd,lowrank} --q Q --k K --v V --eps E --out O [--check]
    polyattn bench  --algo A --n-list 1024,2048 --d D --B B --eps E --trials T --seed S --json OUT
    polyattn grad   --a1 .. --a2 .. --a3 .. --e .. --y .. --x .. --eps E --oracle {exact,polyd} --out O [--check]
    polyattn reduce --task {maxip,ov-large,ov-parity,rowsums} --a A [--b B] --oracle {exact,polyd} [--check]
    polyattn gen    --kind {attn,grad,ov,maxip} --n N --d D [--B B] --seed S --out-dir DIR

Exit codes: 0 success, 1 usage error, 2 --check failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attn1d import rounding_attention_1d, vector_attention
from .attnd import approx_attention, approx_oracle, low_rank_attention
from .core import (
    AttnParams,
    CountingOracle,
    entry_bound,
    exact_attention,
    exact_oracle,
    load_matrix,
    max_abs_diff,
    store_matrix,
)
from .gradient import GradInstance, approx_gradient, exact_gradient, scores_softmax
from .reductions import (
    brute_force_max_ip,
    brute_force_ov,
    estimate_row_sums,
    max_ip,
    ov_large_entries,
    ov_parity,
)

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3
ALGOS = ("exact", "round1d", "poly1d", "polyd", "lowrank")
ORACLES = {"exact": exact_oracle, "polyd": approx_oracle}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _flag_echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, default=_json_default)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------- attention


def run_algo(algo, Q, K, V, eps, B=None, profile=None):
    params = AttnParams.for_instance(Q, K, V, eps, B)
    if algo == "exact":
        t = time.perf_counter()
        out = exact_attention(Q, K, V)
        if profile is not None:
            profile.update(build_s=0.0, query_s=time.perf_counter() - t)
        return out
    if algo in ("round1d", "poly1d"):
        if Q.shape[1] != 1:
            raise UsageError(f"--algo {algo} needs d = 1 inputs, got d = {Q.shape[1]}")
        fn = rounding_attention_1d if algo == "round1d" else vector_attention
        t = time.perf_counter()
        out = fn(Q[:, 0], K[:, 0], V, params)
        if profile is not None:
            profile.update(build_s=0.0, query_s=time.perf_counter() - t)
        return out
    if algo == "polyd":
        return approx_attention(Q, K, V, params, profile=profile)
    if algo == "lowrank":
        return low_rank_attention(Q, K, V, params, profile=profile)
    raise UsageError(f"unknown algo {algo}")


def cmd_attn(args) -> int:
    Q, K, V = (load_matrix(p) for p in (args.q, args.k, args.v))
    out = run_algo(args.algo, Q, K, V, args.eps, args.B)
    store_matrix(out, args.out)
    if args.check:
        if Q.shape[0] > args.check_max_n:
            raise UsageError(f"--check is limited to n <= {args.check_max_n}")
        err = max_abs_diff(out, exact_attention(Q, K, V))
        _emit({"max_abs_err": err, "eps": args.eps, "pass": err <= args.eps,
               "version": version_string(), "flags": _flag_echo(args)})
        return EXIT_OK if err <= args.eps else EXIT_CHECK
    return EXIT_OK


def fit_exponent(ns, times) -> float:
    ns = np.asarray(ns, dtype=float)
    times = np.asarray(times, dtype=float)
    if ns.size < 2:
        return float("nan")
    return float(np.polyfit(np.log(ns), np.log(times), 1)[0])


def cmd_bench(args) -> int:
    ns = [int(x) for x in args.n_list.split(",") if x.strip()]
    if not ns:
        raise UsageError("--n-list is empty")
    d = args.d
    if args.algo in ("round1d", "poly1d") and d != 1:
        raise UsageError(f"--algo {args.algo} needs --d 1")
    records = []
    medians = []
    for n in ns:
        times = []
        for trial in range(args.trials):
            seed = args.seed + 1000 * trial + n
            rng = np.random.default_rng(seed)
            Q, K, V = (rng.uniform(-args.B, args.B, (n, d)) for _ in range(3))
            prof = {}
            t = time.perf_counter()
            out = run_algo(args.algo, Q, K, V, args.eps, args.B, profile=prof)
            wall = time.perf_counter() - t
            rec = {"algo": args.algo, "n": n, "d": d, "B": args.B, "eps": args.eps,
                   "wall_time_s": wall, "build_time_s": prof.get("build_s", 0.0),
                   "query_time_s": prof.get("query_s", wall), "seed": seed}
            if n <= args.err_max_n:
                rec["max_abs_err"] = max_abs_diff(out, exact_attention(Q, K, V))
            records.append(rec)
            times.append(wall)
        medians.append(float(np.median(times)))
    summary = {"algo": args.algo, "exponent": fit_exponent(ns, medians),
               "n_list": ns, "median_wall_time_s": medians,
               "version": version_string(), "flags": _flag_echo(args)}
    _emit({"records": records, "summary": summary}, args.json)
    bad = [r for r in records if r.get("max_abs_err", 0.0) > args.eps]
    return EXIT_CHECK if bad else EXIT_OK


# ---------------------------------------------------------------- gradient


def cmd_grad(args) -> int:
    mats = {k: load_matrix(getattr(args, k)) for k in ("a1", "a2", "a3", "e", "y", "x")}
    B = args.B if args.B is not None else entry_bound(
        mats["a1"], mats["a2"], mats["a3"], mats["e"], mats["y"])
    inst = GradInstance(mats["a1"], mats["a2"], mats["a3"], mats["e"], mats["y"],
                        mats["x"], B, args.eps)
    oracle = CountingOracle(ORACLES[args.oracle])
    g = approx_gradient(inst, oracle)
    store_matrix(g, args.out)
    report = {"oracle_calls": oracle.calls, "n": inst.n, "d": inst.d, "eps": args.eps,
              "version": version_string(), "flags": _flag_echo(args)}
    code = EXIT_OK
    if args.check:
        if inst.n > args.check_max_n:
            raise UsageError(f"--check is limited to n <= {args.check_max_n}")
        err = max_abs_diff(g, exact_gradient(inst))
        report.update(max_abs_err=err, **{"pass": err <= args.eps})
        code = EXIT_OK if err <= args.eps else EXIT_CHECK
    _emit(report)
    return code


# ---------------------------------------------------------------- reductions


def cmd_reduce(args) -> int:
    A = load_matrix(args.a)
    Bm = load_matrix(args.b) if args.b else None
    oracle = CountingOracle(ORACLES[args.oracle])
    report = {"task": args.task, "version": version_string(), "flags": _flag_echo(args)}
    ok = True
    if args.task == "rowsums":
        K = Bm if Bm is not None else A
        eps = args.eps if args.eps is not None else 0.1
        est = estimate_row_sums(A, K, eps, oracle)
        report.update(estimates=est.estimates, rounds=est.rounds_used)
        if args.check:
            S = np.exp(A @ K.T).sum(axis=1)
            ok = bool(np.all(np.abs(est.estimates - S) <= 4 * eps * S))
    else:
        if Bm is None:
            raise UsageError(f"--task {args.task} needs --b")
        if args.task == "maxip":
            M, top = max_ip(A, Bm, oracle)
            report.update(row_maxima=M, global_max=top)
            if args.check:
                Mb, _ = brute_force_max_ip(A, Bm)
                ok = bool(np.array_equal(M, Mb))
        else:
            if args.task == "ov-large":
                ans = ov_large_entries(A, Bm, oracle)
            else:
                ans = ov_parity(A, Bm, oracle, seed=args.seed, rounds=args.rounds)
            report.update(orthogonal_pair=ans)
            if args.check:
                ok = ans == brute_force_ov(A, Bm)
    report["oracle_calls"] = oracle.calls
    if args.check:
        report["pass"] = ok
    _emit(report)
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------- fixtures


def cmd_gen(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, d, B = args.n, args.d, args.B
    u = lambda *s: rng.uniform(-B, B, s)
    if args.kind == "attn":
        files = {"q": u(n, d), "k": u(n, d), "v": u(n, d)}
    elif args.kind == "grad":
        files = {"a1": u(n, d), "a2": u(n, d), "a3": u(n, d), "y": u(d, d), "x": u(d, d)}
        if args.zero_grad:
            inst = GradInstance(files["a1"], files["a2"], files["a3"], np.zeros((n, d)),
                                files["y"], files["x"], max(B, 1.0), 1.0)
            files["e"] = scores_softmax(inst) @ (files["a3"] @ files["y"])
        else:
            files["e"] = u(n, d)
    elif args.kind == "ov":
        a = (rng.random((n, d)) < args.density).astype(float)
        b = (rng.random((n, d)) < args.density).astype(float)
        if args.planted:
            i, j = rng.integers(n), rng.integers(n)
            a[i] = a[i] * (1 - b[j])
            if not a[i].any():
                a[i, np.flatnonzero(b[j] == 0)[:1]] = 1.0
        files = {"a": a, "b": b}
    else:  # maxip
        Bi = int(B)
        files = {"a": rng.integers(-Bi, Bi + 1, (n, d)).astype(float),
                 "b": rng.integers(-Bi, Bi + 1, (n, d)).astype(float)}
    for name, M in files.items():
        store_matrix(M, out / f"{name}.csv")
    _emit({"kind": args.kind, "files": sorted(f"{k}.csv" for k in files),
           "seed": args.seed, "version": version_string()})
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polyattn", description="Subquadratic approximate attention toolkit.")
    p.add_argument("--threads", type=int, default=0, help="BLAS threads (0 = library default)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("attn", help="compute attention for CSV inputs")
    a.add_argument("--algo", choices=ALGOS, required=True)
    for f in ("q", "k", "v", "out"):
        a.add_argument(f"--{f}", required=True)
    a.add_argument("--eps", type=float, default=1e-2)
    a.add_argument("--B", type=float, default=None, help="entry bound (default: actual)")
    a.add_argument("--check", action="store_true")
    a.add_argument("--check-max-n", type=int, default=4096)
    a.set_defaults(func=cmd_attn)

    b = sub.add_parser("bench", help="runtime scaling over random instances")
    b.add_argument("--algo", choices=ALGOS, required=True)
    b.add_argument("--n-list", required=True)
    b.add_argument("--d", type=int, default=1)
    b.add_argument("--B", type=float, default=10.0)
    b.add_argument("--eps", type=float, default=1e-2)
    b.add_argument("--trials", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", default=None, help="output path (default: stdout)")
    b.add_argument("--err-max-n", type=int, default=4096,
                   help="compare against exact attention up to this n")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("grad", help="attention-loss gradient via oracle calls")
    for f in ("a1", "a2", "a3", "e", "y", "x", "out"):
        g.add_argument(f"--{f}", required=True)
    g.add_argument("--eps", type=float, default=1e-3)
    g.add_argument("--B", type=float, default=None)
    g.add_argument("--oracle", choices=sorted(ORACLES), default="exact")
    g.add_argument("--check", action="store_true")
    g.add_argument("--check-max-n", type=int, default=512)
    g.set_defaults(func=cmd_grad)

    r = sub.add_parser("reduce", help="Max-IP / OV / row sums through an attention oracle")
    r.add_argument("--task", choices=("maxip", "ov-large", "ov-parity", "rowsums"), required=True)
    r.add_argument("--a", required=True)
    r.add_argument("--b", default=None)
    r.add_argument("--oracle", choices=sorted(ORACLES), default="exact")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--eps", type=float, default=None)
    r.add_argument("--rounds", type=int, default=None)
    r.add_argument("--check", action="store_true")
    r.set_defaults(func=cmd_reduce)

    f = sub.add_parser("gen", help="write random fixtures as CSV")
    f.add_argument("--kind", choices=("attn", "grad", "ov", "maxip"), required=True)
    f.add_argument("--n", type=int, required=True)
    f.add_argument("--d", type=int, required=True)
    f.add_argument("--B", type=float, default=1.0)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out-dir", required=True)
    f.add_argument("--zero-grad", action="store_true", help="grad: set E = f h")
    f.add_argument("--planted", action="store_true", help="ov: plant an orthogonal pair")
    f.add_argument("--density", type=float, default=0.5, help="ov: Bernoulli density")
    f.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        if args.threads > 0:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        print(f"polyattn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, MemoryError, OSError, RuntimeError) as exc:
        print(f"polyattn: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
