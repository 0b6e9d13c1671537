"""Command-line driver: run protocols, audit privacy, tabulate rates.

Composition orders on the command line use the display convention: the
string "4,3,2,1" lists the order right to left, so the rightmost entry
is the function applied first.  Exit codes: 0 success, 1 a protocol or
audit check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

from .audit import (
    GuardExceeded,
    attack_campaign,
    converse_counts,
    fingerprint_invariance,
    rank_decay_experiment,
    rate_report,
    uniformity_test,
)
from .client import outputs_to_bytes, run_protocol
from .field import DEFAULT_MODULUS
from .protocol import InvalidPermutation, Permutation, RunConfig, compose_reference, random_permutation
from .rand import Rng
from .runtime import (
    Server,
    SimTransport,
    TcpServerHost,
    TcpTransport,
    generate_functions,
    generate_inputs,
    marginal_to_json,
)
from .scheduler import build_plan, query_count

__all__ = ["main"]

USAGE_ERROR = 2
CHECK_ERROR = 1

# TV threshold calibrated for 1e6 trials; scale by 1/sqrt(trials) otherwise.
TV_BASELINE = 0.02
TV_BASELINE_TRIALS = 1_000_000


def _default_seed() -> int:
    return int(os.environ.get("PSFC_SEED", "0"))


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--k", type=int, default=3, help="number of basic functions")
    sub.add_argument("--n", type=int, default=2, help="number of servers")
    sub.add_argument("--m", type=int, default=1, help="number of input vectors")
    sub.add_argument("--l", type=int, default=1, help="vector dimension")
    sub.add_argument("--p", type=int, default=DEFAULT_MODULUS, help="prime modulus")
    sub.add_argument("--seed", type=int, default=None,
                     help="root seed (default: PSFC_SEED env var, else 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psfc",
        description="Order-private sequential evaluation of public linear functions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one protocol run and verify it")
    _add_common(run)
    run.add_argument("--sigma", default="random",
                     help='composition order, display order, e.g. "3,2,1"; or "random"')
    run.add_argument("--transport", choices=("sim", "tcp"), default="sim")
    run.add_argument("--addresses", default=None,
                     help="comma-separated host:port list for tcp (default: spawn local servers)")
    run.add_argument("--emit-report", default=None, help="write the run report JSON here")
    run.add_argument("--outputs", default=None, help="write outputs as a binary matrix here")
    run.add_argument("--capture-dir", default=None,
                     help="dump each local server's marginal list JSON into this directory")

    audit = sub.add_parser("audit", help="run the privacy and rate audit suite")
    _add_common(audit)
    audit.set_defaults(p=3)
    audit.add_argument("--trials", type=int, default=100_000,
                       help="Monte-Carlo trials per composition order")
    audit.add_argument("--attack-trials", type=int, default=2_000)
    audit.add_argument("--alpha", type=float, default=0.01, help="chi-square significance")
    audit.add_argument("--tv-threshold", type=float, default=None,
                       help=f"TV limit (default {TV_BASELINE} at {TV_BASELINE_TRIALS} trials, scaled)")
    audit.add_argument("--negative-control", action="store_true",
                       help="also attack the deliberately broken interleaved schedule")
    audit.add_argument("--fixed-f", action="store_true",
                       help="hold the function matrices fixed across uniformity trials")
    audit.add_argument("--emit", default=None, help="write audit verdicts JSON here")

    table = sub.add_parser("rate-table", help="emit a CSV rate sweep")
    table.add_argument("--k-values", default="2,3,4,5")
    table.add_argument("--n-values", default="1,2,3,4,5")
    table.add_argument("--m-values", default="6,60,600,6000")
    table.add_argument("--output", default=None, help="CSV path (default: stdout)")

    demo = sub.add_parser("demo", help="replay a worked example with per-server tables")
    demo.add_argument("name", help="example1 or example3")
    demo.add_argument("--seed", type=int, default=None)

    return parser


# -- run -------------------------------------------------------------------------


def cmd_run(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        config = RunConfig(k=args.k, n=args.n, m=args.m, l=args.l, p=args.p, seed=seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    if args.sigma == "random":
        sigma = random_permutation(config.k, Rng(seed).child("sigma"))
    else:
        try:
            sigma = Permutation.parse(args.sigma)
        except InvalidPermutation as exc:
            print(f"error: {exc}", file=sys.stderr)
            return USAGE_ERROR
        if sigma.size != config.k:
            print(f"error: order has {sigma.size} entries, expected K={config.k}", file=sys.stderr)
            return USAGE_ERROR

    functions = generate_functions(config.k, config.l, config.p, Rng(seed).child("functions"))
    w = generate_inputs(config.m, config.l, config.p, Rng(seed).child("inputs"))
    servers = [Server(i + 1, functions, config.p) for i in range(config.n)]

    host = None
    if args.transport == "tcp":
        if args.addresses:
            addresses = []
            for part in args.addresses.split(","):
                hostname, _, port = part.strip().rpartition(":")
                addresses.append((hostname, int(port)))
            if len(addresses) != config.n:
                print(f"error: need {config.n} addresses, got {len(addresses)}", file=sys.stderr)
                return USAGE_ERROR
        else:
            host = TcpServerHost(servers)
            addresses = host.addresses
        transport = TcpTransport(addresses)
    else:
        transport = SimTransport(servers)

    try:
        outputs, report = run_protocol(config, sigma, w, transport)
    finally:
        transport.close()
        if host is not None:
            host.close()

    expected = [compose_reference(functions, sigma, vec, config.p) for vec in w]
    ok = outputs == expected
    verdict = rate_report(report)
    print(f"order {sigma}  D={report.d}  rate={report.rate[0]}/{report.rate[1]}"
          f" ({report.rate_float:.6f})  outputs {'MATCH' if ok else 'MISMATCH'}")
    print(f"rate window: lower={float(verdict.lower_bound):.6f} <= C <= 1;"
          f" scheme limit={float(verdict.asymptotic_limit):.6f}")

    if args.emit_report:
        with open(args.emit_report, "w") as fh:
            fh.write(report.to_json())
    if args.outputs:
        with open(args.outputs, "wb") as fh:
            fh.write(outputs_to_bytes(outputs))
    if args.capture_dir:
        os.makedirs(args.capture_dir, exist_ok=True)
        for server in servers:
            path = os.path.join(args.capture_dir, f"marginal_server_{server.id}.json")
            with open(path, "w") as fh:
                fh.write(marginal_to_json(server))
    if not ok or not verdict.ok:
        return CHECK_ERROR
    return 0


# -- audit -----------------------------------------------------------------------


def cmd_audit(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        config = RunConfig(k=args.k, n=args.n, m=args.m, l=args.l, p=args.p, seed=seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    if args.trials < 2 or args.attack_trials < 1:
        print("error: trial counts must be positive", file=sys.stderr)
        return USAGE_ERROR
    tv_threshold = args.tv_threshold
    if tv_threshold is None:
        tv_threshold = TV_BASELINE * math.sqrt(TV_BASELINE_TRIALS / args.trials)

    rows: list[dict] = []

    def row(check: str, statistic, threshold, passed: bool) -> None:
        rows.append({"check": check, "statistic": statistic,
                     "threshold": threshold, "pass": bool(passed)})

    fp = fingerprint_invariance(config.k, config.n, config.m, p=config.p, l=config.l, seed=seed)
    scope = "exhaustive" if fp.exhaustive else f"sampled {fp.n_sigmas}"
    row(f"fingerprint invariance ({scope})", int(fp.ok), "== 1", fp.ok)

    try:
        uni = uniformity_test(config.k, config.n, config.m, config.p, config.l,
                              trials=args.trials, seed=seed, resample_f=not args.fixed_f)
    except GuardExceeded as exc:
        print(f"warning: uniformity test skipped: {exc}", file=sys.stderr)
        row("input-tuple uniformity", "skipped (guard)", "n/a", True)
        uni = None
    if uni is not None:
        scope = f"sampled {uni.n_sigmas} orders" if uni.sigmas_sampled else "all orders"
        if uni.sigmas_sampled:
            print(f"warning: {config.k}! orders exceed the enumeration budget; "
                  f"comparing a seeded sample of {uni.n_sigmas}", file=sys.stderr)
        row(f"input-tuple TV across orders ({scope})", round(uni.max_tv_cross, 6),
            f"<= {tv_threshold:.6f}", uni.max_tv_cross <= tv_threshold)
        row("input-tuple TV split-half floor", round(uni.max_tv_self, 6),
            f"<= {tv_threshold * math.sqrt(2):.6f}",
            uni.max_tv_self <= tv_threshold * math.sqrt(2))
        n_slots = len(uni.chi2_pvalues)
        row(f"per-slot uniformity chi-square ({n_slots} slots)",
            round(uni.chi2_min_p, 6), f">= alpha/{n_slots}", uni.chi2_all_pass(args.alpha))

    real = attack_campaign(config.k, config.n, trials=args.attack_trials,
                           p=DEFAULT_MODULUS, l=1, seed=seed, scheme="real")
    row("attacker vs real scheme", [round(r, 4) for r in real.per_server_rate],
        f"within {real.uniform_rate:.4f} +- {real.three_sigma_band:.4f}",
        real.within_uniform_band())

    if args.negative_control:
        naive = attack_campaign(config.k, config.n, trials=args.attack_trials,
                                p=DEFAULT_MODULUS, l=1, seed=seed, scheme="naive")
        row("attacker vs broken control", round(naive.best_rate, 4), "> 0.9",
            naive.best_rate > 0.9)

    functions = generate_functions(config.k, config.l, config.p, Rng(seed).child("functions"))
    w = generate_inputs(config.m, config.l, config.p, Rng(seed).child("inputs"))
    sigma = random_permutation(config.k, Rng(seed).child("sigma"))
    servers = [Server(i + 1, functions, config.p) for i in range(config.n)]
    outputs, report = run_protocol(config, sigma, w, SimTransport(servers))
    expected = [compose_reference(functions, sigma, vec, config.p) for vec in w]
    row("zero-error correctness (seeded run)", int(outputs == expected), "== 1",
        outputs == expected)
    conv = converse_counts(report)
    row("per-function counts D_k >= M", min(d for _, d, _ in conv.counts),
        f">= {report.m}", conv.ok)
    verdict = rate_report(report)
    row("measured rate <= 1", f"{verdict.measured}", "<= 1", verdict.measured <= 1)

    for rl, rm, rp in ((10, 3, 2), (8, 2, 5)):
        decay = rank_decay_experiment(rl, rm, rp, trials=min(args.trials, 100_000), seed=seed)
        row(f"rank-decay bound (p={rp}, L={rl}, M={rm})",
            round(decay.empirical, 6),
            f"<= {decay.bound + 3 * decay.stderr:.6f}", decay.ok)

    width = max(len(r["check"]) for r in rows)
    for r in rows:
        status = "PASS" if r["pass"] else "FAIL"
        print(f"{r['check']:<{width}}  {status}  statistic={r['statistic']}  "
              f"threshold: {r['threshold']}")
    if args.emit:
        with open(args.emit, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["pass"] for r in rows) else CHECK_ERROR


# -- rate table --------------------------------------------------------------------


def cmd_rate_table(args) -> int:
    try:
        k_values = [int(x) for x in args.k_values.split(",")]
        n_values = [int(x) for x in args.n_values.split(",")]
        m_values = [int(x) for x in args.m_values.split(",")]
    except ValueError:
        print("error: value lists must be comma-separated integers", file=sys.stderr)
        return USAGE_ERROR
    if any(v < 1 for v in k_values + n_values + m_values):
        print("error: K, N, M must be >= 1", file=sys.stderr)
        return USAGE_ERROR

    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["K", "N", "M", "D", "R", "lower_bound", "gap", "limit"])
    for k in k_values:
        for n in n_values:
            for m in m_values:
                d = query_count(k, n, m)
                r = k * m / d
                biggest = max(k, n)
                lower = 1.0 if biggest == 1 else (1 - 1 / n) / (1 - 1 / biggest)
                if k <= n:
                    limit = 1.0
                elif n == 1:
                    limit = 1.0 / math.factorial(k)
                else:
                    limit = k * (n - 1) / (n * (k - 1))
                writer.writerow([k, n, m, d, f"{r:.9f}", f"{lower:.9f}",
                                 f"{1 - r:.9f}", f"{limit:.9f}"])
    text = buffer.getvalue()
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# -- demo ----------------------------------------------------------------------------


def _symbolic_rows(plan, n: int):
    """Mirror the client symbolically: rows of (block, server, function, text)."""
    souts: dict = {}
    sprev: dict = {}
    mask_names = {mid: f"Z[{m},{i}]" for (m, i), mid in plan.ledger.mask_ids.items()}
    batched = plan.n_blocks > 0 and n >= 2

    def sym(expr) -> str:
        tag = expr[0]
        if tag == "w":
            flat = expr[1]
            return f"W[{flat // (n - 1) + 1},{flat % (n - 1) + 1}]" if batched else f"W[{flat + 1}]"
        if tag == "out":
            return souts[(expr[1], expr[2], expr[3])]
        if tag == "mask":
            return mask_names[expr[1]]
        if tag == "ph":
            return "Z*"
        if tag == "xor":
            return f"{sym(expr[1])} + {mask_names[expr[2]]}"
        return sprev[expr[1]]  # "prev"

    rows = []
    for q in plan.queries:
        text = sym(q.expr)
        rows.append((q.block, q.server, q.function, text))
        eff = q.effect[0]
        if eff == "out":
            souts[(q.effect[1], q.effect[2], q.effect[3])] = f"F{q.function}({text})"
        elif eff == "masked":
            souts[(q.effect[1], q.effect[2], q.effect[3])] = f"F{q.function}({sym(q.expr[1])})"
        elif eff == "prev":
            sprev[q.effect[1]] = f"F{q.function}({text})"
    return rows


def _demo_run(k: int, n: int, m: int, l: int, p: int, seed: int, sigma: Permutation) -> bool:
    config = RunConfig(k=k, n=n, m=m, l=l, p=p, seed=seed)
    functions = generate_functions(k, l, p, Rng(seed).child("functions"))
    w = generate_inputs(m, l, p, Rng(seed).child("inputs"))
    servers = [Server(i + 1, functions, p) for i in range(n)]
    outputs, report = run_protocol(config, sigma, w, SimTransport(servers))
    expected = [compose_reference(functions, sigma, vec, p) for vec in w]
    ok = outputs == expected
    plan = build_plan(k, n, m, sigma)

    print(f"\ncomposition order {sigma}")
    rows = _symbolic_rows(plan, n)
    blocks = sorted({b for b, _, _, _ in rows})
    for block in blocks:
        label = f"block {block}" if block else "chain"
        print(f"  {label}:")
        for srv in range(1, n + 1):
            cells = [f"F{f} {t}" for b, s, f, t in rows if b == block and s == srv]
            if cells:
                print(f"    server {srv}:  " + "  |  ".join(cells))
    expected_d = query_count(k, n, m)
    print(f"  queries: {report.d} (expected {expected_d}); "
          f"outputs {'MATCH' if ok else 'MISMATCH'}")
    return ok and report.d == expected_d


def cmd_demo(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.name == "example1":
        print("Two functions, two servers: one server per function, rate 1.")
        ok = all(
            _demo_run(2, 2, 1, 2, 5, seed, Permutation.from_paper_order(order))
            for order in ((2, 1), (1, 2))
        )
    elif args.name == "example3":
        print("Four functions, three servers: fixed per-server column (Fn, Fn, F4).")
        ok = all(
            _demo_run(4, 3, 2, 2, 5, seed, Permutation.from_paper_order(order))
            for order in ((1, 3, 4, 2), (4, 3, 2, 1))
        )
    else:
        print(f"error: unknown demo {args.name!r} (try example1, example3)", file=sys.stderr)
        return USAGE_ERROR
    return 0 if ok else CHECK_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "audit":
        return cmd_audit(args)
    if args.command == "rate-table":
        return cmd_rate_table(args)
    return cmd_demo(args)


if __name__ == "__main__":
    sys.exit(main())
