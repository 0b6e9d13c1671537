"""Executable privacy and rate audits.

The privacy guarantee is an exact distributional identity, which a
simulator can only probe.  The audit therefore layers three kinds of
evidence, all computed from the servers' marginal views only:

1. structural: per-server function-order fingerprints must be identical
   across every composition order (exact check, exhaustive);
2. statistical: on tiny fields, the order-conditioned distribution of a
   server's full input tuple is compared across orders by total
   variation distance, and every individual input slot is chi-square
   tested against the uniform law;
3. adversarial: a reverse-computation attacker that links query inputs
   to function images of earlier outputs.  It must recover the order
   from a deliberately broken interleaved schedule (the negative
   control) and must do no better than a uniform guess against the real
   scheme.

Rate and query-count checks compare measured values against the exact
formulas and the capacity bounds, and a sampling experiment checks the
rank-deficiency probability of uniform input matrices against its
analytic union bound.

Monte-Carlo trials are independent seeded instances, so every campaign
here is embarrassingly parallel; the aggregations (histogram sums, hit
counts) are commutative folds.  The implementations run single-threaded
for determinism and lean on vectorization instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import factorial

import numpy as np

from .client import RunReport, run_protocol
from .field import (
    DEFAULT_MODULUS,
    FieldMatrix,
    FieldVector,
    mat_vec_mul,
    rank,
    sample_uniform_vector,
)
from .protocol import (
    MarginalQueryList,
    Permutation,
    RunConfig,
    enumerate_permutations,
    random_permutation,
)
from .rand import Rng
from .runtime import Server, SimTransport, generate_functions, generate_inputs, marginal_fingerprint
from .scheduler import QueryPlan, build_plan

__all__ = [
    "GuardExceeded",
    "FingerprintResult",
    "fingerprint_invariance",
    "UniformityResult",
    "uniformity_test",
    "sigma_attack",
    "naive_chain_run",
    "AttackCampaignResult",
    "attack_campaign",
    "RateVerdict",
    "rate_report",
    "ConverseResult",
    "converse_counts",
    "RankDecayResult",
    "rank_decay_experiment",
    "PrivacyVerdict",
]

MAX_EXHAUSTIVE_K = 6
SAMPLED_SIGMA_COUNT = 24
JOINT_CELL_CAP = 1 << 22


class GuardExceeded(ValueError):
    """Requested audit would enumerate an impractically large space."""


# -- structural check: fingerprint invariance ----------------------------------


@dataclass
class FingerprintResult:
    k: int
    n: int
    m: int
    ok: bool
    exhaustive: bool
    n_sigmas: int
    fingerprints: dict[int, tuple[int, ...]]  # server -> common fingerprint
    mismatches: list[str] = field(default_factory=list)


def fingerprint_invariance(
    k: int, n: int, m: int, p: int = 3, l: int = 1, seed: int = 0
) -> FingerprintResult:
    """Run the protocol for every order and compare per-server fingerprints.

    Exhausts all K! orders up to K = 6; beyond that a seeded sample of
    orders is used and the result is flagged as non-exhaustive.
    """
    if k <= MAX_EXHAUSTIVE_K:
        sigmas = enumerate_permutations(k)
        exhaustive = True
    else:
        rng = Rng(seed).child("fingerprint-sigmas")
        sigmas = [random_permutation(k, rng) for _ in range(SAMPLED_SIGMA_COUNT)]
        exhaustive = False

    config = RunConfig(k=k, n=n, m=m, l=l, p=p, seed=seed)
    functions = generate_functions(k, l, p, Rng(seed).child("functions"))
    w = generate_inputs(m, l, p, Rng(seed).child("inputs"))

    baseline: dict[int, tuple[int, ...]] | None = None
    mismatches: list[str] = []
    for sigma in sigmas:
        servers = [Server(i + 1, functions, p) for i in range(n)]
        run_protocol(config, sigma, w, SimTransport(servers))
        fps = {s.id: marginal_fingerprint(s) for s in servers}
        if baseline is None:
            baseline = fps
        elif fps != baseline:
            mismatches.append(f"order {sigma} changes a server fingerprint")
    return FingerprintResult(
        k=k, n=n, m=m, ok=not mismatches, exhaustive=exhaustive,
        n_sigmas=len(sigmas), fingerprints=baseline or {}, mismatches=mismatches,
    )


# -- statistical check: input-tuple uniformity ---------------------------------


@dataclass
class UniformityResult:
    k: int
    n: int
    m: int
    p: int
    l: int
    trials: int
    resample_f: bool
    sigmas_sampled: bool  # True when K! exceeded the enumeration budget
    n_sigmas: int
    slot_cells: int  # p^l
    slots_per_server: list[int]
    tv_cross: dict[tuple[str, str, int], float]  # (order_a, order_b, server) -> TV
    tv_self: dict[tuple[str, int], float]  # (order, server) -> split-half TV
    chi2_pvalues: dict[tuple[str, int, int], float]  # (order, server, slot) -> p-value

    @property
    def max_tv_cross(self) -> float:
        return max(self.tv_cross.values()) if self.tv_cross else 0.0

    @property
    def max_tv_self(self) -> float:
        return max(self.tv_self.values()) if self.tv_self else 0.0

    @property
    def chi2_min_p(self) -> float:
        return min(self.chi2_pvalues.values()) if self.chi2_pvalues else 1.0

    def chi2_all_pass(self, alpha: float) -> bool:
        """Bonferroni-corrected goodness-of-fit verdict over all slots."""
        if not self.chi2_pvalues:
            return True
        return self.chi2_min_p >= alpha / len(self.chi2_pvalues)


def _det_batch(mats: np.ndarray, p: int) -> np.ndarray:
    """Determinants mod p of a (..., L, L) stack, closed-form for L <= 3."""
    l = mats.shape[-1]
    if l == 1:
        return mats[..., 0, 0] % p
    if l == 2:
        return (mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]) % p
    if l == 3:
        a, b, c = mats[..., 0, 0], mats[..., 0, 1], mats[..., 0, 2]
        d, e, f = mats[..., 1, 0], mats[..., 1, 1], mats[..., 1, 2]
        g, h, i = mats[..., 2, 0], mats[..., 2, 1], mats[..., 2, 2]
        return (a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)) % p
    raise GuardExceeded(f"batched invertible sampling supports L <= 3, got L={l}")


def _sample_invertible_batch(k: int, l: int, p: int, t: int, nprng) -> np.ndarray:
    """(K, T, L, L) int64 stack of per-trial uniform invertible matrices."""
    mats = nprng.integers(0, p, size=(k, t, l, l), dtype=np.int64)
    while True:
        bad = _det_batch(mats, p) == 0
        count = int(bad.sum())
        if not count:
            return mats
        mats[bad] = nprng.integers(0, p, size=(count, l, l), dtype=np.int64)


def _batch_eval(
    plan: QueryPlan,
    f_batch,
    w_batch,
    mask_source,
    ph_source,
    p: int,
    per_trial_f: bool,
) -> list[list[np.ndarray]]:
    """Vectorized mirror of the client/server loop over a stack of trials.

    Returns, per server, the list of input arrays (trials x L) in
    arrival order.  A dedicated test pins this evaluator to the real
    runtime by replaying one trial's draws through both paths.
    """
    outs: dict = {}
    prev: dict = {}
    masks: dict = {}
    images: dict = {}
    pending: dict = {}
    per_server: list[list[np.ndarray]] = [[] for _ in range(plan.n)]

    for server, function, expr, effect, _block in plan.queries:
        tag = expr[0]
        if tag == "w":
            w = w_batch[expr[1]]
        elif tag == "out":
            w = outs[(expr[1], expr[2], expr[3])]
        elif tag == "prev":
            w = prev[expr[1]]
        elif tag == "xor":
            base = expr[1]
            if base[0] == "out":
                inner = outs[(base[1], base[2], base[3])]
            elif base[0] == "w":
                inner = w_batch[base[1]]
            else:
                inner = ph_source(base[1])
            mid = expr[2]
            z = masks.get(mid)
            if z is None:
                z = mask_source(mid)
                masks[mid] = z
            w = (inner + z) % p
        elif tag == "mask":
            mid = expr[1]
            z = masks.get(mid)
            if z is None:
                z = mask_source(mid)
                masks[mid] = z
            w = z
        else:
            w = ph_source(expr[1])

        per_server[server - 1].append(w)
        fk = f_batch[function - 1]
        if per_trial_f:
            ans = np.einsum("tij,tj->ti", fk, w) % p
        else:
            ans = (w @ fk.T) % p

        eff = effect[0]
        if eff == "out":
            outs[(effect[1], effect[2], effect[3])] = ans
        elif eff == "prev":
            prev[effect[1]] = ans
        elif eff == "masked":
            key = (effect[1], effect[2], effect[3])
            img = images.get(effect[4])
            if img is None:
                pending.setdefault(effect[4], []).append((key, ans))
            else:
                outs[key] = (ans - img) % p
        elif eff == "img":
            images[effect[1]] = ans
            for key, masked in pending.pop(effect[1], ()):
                outs[key] = (masked - ans) % p
        # "final" / "drop": nothing the view statistics need
    return per_server


def uniformity_test(
    k: int,
    n: int,
    m: int,
    p: int,
    l: int,
    trials: int,
    seed: int = 0,
    resample_f: bool = True,
    chunk: int = 200_000,
    max_sigmas: int = 24,
) -> UniformityResult:
    """Monte-Carlo comparison of server views across composition orders.

    Per order, `trials` independent protocol instances (fresh functions
    unless resample_f is False, fresh inputs, fresh pads) are evaluated
    and each server's full input tuple is histogrammed.  Total variation
    distances are computed between every pair of order-conditioned
    joint distributions, plus a split-half self distance per order as a
    noise floor, plus a per-slot chi-square against uniform.

    Orders are exhausted while K! <= max_sigmas; beyond that a seeded
    sample of max_sigmas orders is used and the result says so.
    """
    slot_cells = p**l
    if slot_cells > 32:
        raise GuardExceeded(f"p^L = {slot_cells} > 32: cells are not enumerable")
    if trials < 2:
        raise ValueError("need at least 2 trials")

    if factorial(k) <= max_sigmas:
        sigmas = enumerate_permutations(k)
        sampled = False
    else:
        rng = Rng(seed).child("uniformity-sigmas")
        seen: dict[tuple[int, ...], Permutation] = {}
        while len(seen) < max_sigmas:
            sigma = random_permutation(k, rng)
            seen.setdefault(sigma.mapping, sigma)
        sigmas = list(seen.values())
        sampled = True
    plan0 = build_plan(k, n, m, sigmas[0])
    slots_per_server = [0] * n
    for q in plan0.queries:
        slots_per_server[q.server - 1] += 1
    joint_cells = [slot_cells**s for s in slots_per_server]
    if max(joint_cells) > JOINT_CELL_CAP:
        raise GuardExceeded(
            f"joint input-tuple space has {max(joint_cells)} cells (> {JOINT_CELL_CAP})"
        )

    fixed_f = None
    if not resample_f:
        fixed_mats = generate_functions(k, l, p, Rng(seed).child("functions"))
        fixed_f = [np.array(mat, dtype=np.int64) for mat in fixed_mats]

    powers = np.array([p**i for i in range(l)], dtype=np.int64)
    labels = [str(s) for s in sigmas]
    half_hists: dict[tuple[int, int, int], np.ndarray] = {}  # (sigma, server, half)
    slot_hists: dict[tuple[int, int], np.ndarray] = {}  # (sigma, server) -> (slots, cells)

    for si, sigma in enumerate(sigmas):
        plan = build_plan(k, n, m, sigma)
        nprng = np.random.default_rng(Rng(seed).child(f"uniformity:{sigma}").seed)
        for srv in range(n):
            half_hists[(si, srv, 0)] = np.zeros(joint_cells[srv], dtype=np.int64)
            half_hists[(si, srv, 1)] = np.zeros(joint_cells[srv], dtype=np.int64)
            slot_hists[(si, srv)] = np.zeros((slots_per_server[srv], slot_cells), dtype=np.int64)
        done = 0
        while done < trials:
            t = min(chunk, trials - done)
            if resample_f:
                f_batch = _sample_invertible_batch(k, l, p, t, nprng)
            else:
                f_batch = fixed_f
            w_batch = nprng.integers(0, p, size=(max(m, 1), t, l), dtype=np.int64)
            draw = lambda _mid: nprng.integers(0, p, size=(t, l), dtype=np.int64)
            per_server = _batch_eval(plan, f_batch, w_batch, draw, draw, p, resample_f)
            for srv in range(n):
                slot_values = [vals @ powers for vals in per_server[srv]]
                joint = np.zeros(t, dtype=np.int64)
                for s, vals in enumerate(slot_values):
                    joint += vals * (slot_cells**s)
                    slot_hists[(si, srv)][s] += np.bincount(vals, minlength=slot_cells)
                half = t // 2
                half_hists[(si, srv, 0)] += np.bincount(joint[:half], minlength=joint_cells[srv])
                half_hists[(si, srv, 1)] += np.bincount(joint[half:], minlength=joint_cells[srv])
            done += t

    from scipy.stats import chi2 as chi2_dist

    tv_cross: dict[tuple[str, str, int], float] = {}
    tv_self: dict[tuple[str, int], float] = {}
    chi2_pvalues: dict[tuple[str, int, int], float] = {}
    totals = {
        (si, srv): half_hists[(si, srv, 0)] + half_hists[(si, srv, 1)]
        for si in range(len(sigmas))
        for srv in range(n)
    }
    for si in range(len(sigmas)):
        for srv in range(n):
            a = half_hists[(si, srv, 0)]
            b = half_hists[(si, srv, 1)]
            tv_self[(labels[si], srv + 1)] = float(
                0.5 * np.abs(a / a.sum() - b / b.sum()).sum()
            )
            hist = slot_hists[(si, srv)]
            expected = hist.sum(axis=1, keepdims=True) / slot_cells
            stats = ((hist - expected) ** 2 / expected).sum(axis=1)
            for s, stat in enumerate(stats):
                chi2_pvalues[(labels[si], srv + 1, s)] = float(
                    chi2_dist.sf(stat, slot_cells - 1)
                )
        for sj in range(si + 1, len(sigmas)):
            for srv in range(n):
                ha = totals[(si, srv)]
                hb = totals[(sj, srv)]
                tv_cross[(labels[si], labels[sj], srv + 1)] = float(
                    0.5 * np.abs(ha / ha.sum() - hb / hb.sum()).sum()
                )

    return UniformityResult(
        k=k, n=n, m=m, p=p, l=l, trials=trials, resample_f=resample_f,
        sigmas_sampled=sampled, n_sigmas=len(sigmas),
        slot_cells=slot_cells, slots_per_server=slots_per_server,
        tv_cross=tv_cross, tv_self=tv_self, chi2_pvalues=chi2_pvalues,
    )


# -- adversarial check: reverse-computation attacker ---------------------------


def sigma_attack(
    marginal: MarginalQueryList, functions: list[FieldMatrix], p: int, rng: Rng
) -> Permutation:
    """One curious server's best guess at the composition order.

    Builds a consistency graph: for queries a < b in its own view, if
    input_b equals the output of a (consecutive steps) or F_k applied
    to the output of a (one hidden step between), the attacker learns
    that those function indices are adjacent in the order.  It then
    guesses uniformly among the orders consistent with every observed
    constraint; with no usable constraints that is a uniform guess.
    """
    k = len(functions)
    entries = marginal.entries
    outputs = [mat_vec_mul(functions[f - 1], w, p) for f, w in entries]
    pairs: set[tuple[int, int]] = set()
    triples: set[tuple[int, int, int]] = set()
    for a in range(len(entries)):
        f_a = entries[a][0]
        out_a = outputs[a]
        for b in range(a + 1, len(entries)):
            f_b, w_b = entries[b]
            if f_a != f_b and w_b == out_a:
                pairs.add((f_a, f_b))
                continue
            for mid in range(1, k + 1):
                if mid in (f_a, f_b):
                    continue
                if w_b == mat_vec_mul(functions[mid - 1], out_a, p):
                    triples.add((f_a, mid, f_b))
                    break

    candidates = []
    for perm in enumerate_permutations(k):
        pos = {v: i for i, v in enumerate(perm.mapping)}
        if all(pos[y] == pos[x] + 1 for x, y in pairs) and all(
            pos[y] == pos[x] + 1 and pos[z] == pos[x] + 2 for x, y, z in triples
        ):
            candidates.append(perm)
    if not candidates:
        candidates = enumerate_permutations(k)
    if len(candidates) == 1:
        return candidates[0]
    return rng.choice(candidates)


def naive_chain_run(
    sigma: Permutation, servers: list[Server], w: FieldVector, p: int
) -> FieldVector:
    """Negative control: the obvious interleaved chain, which leaks.

    Query j goes to server ((j-1) mod N) + 1 with function s_j and the
    previous answer as input, so a server holding two consecutive-ish
    steps can reverse-compute the order.  Audit-only; never used by the
    real client.
    """
    prev = w
    n = len(servers)
    for j, func in enumerate(sigma.mapping, start=1):
        prev = servers[(j - 1) % n].serve(func, prev)
    return prev


@dataclass
class AttackCampaignResult:
    scheme: str
    k: int
    n: int
    trials: int
    per_server_rate: list[float]
    uniform_rate: float  # 1/K!
    three_sigma_band: float

    def within_uniform_band(self) -> bool:
        lo = self.uniform_rate - self.three_sigma_band
        hi = self.uniform_rate + self.three_sigma_band
        return all(lo <= r <= hi for r in self.per_server_rate)

    @property
    def best_rate(self) -> float:
        return max(self.per_server_rate)


def attack_campaign(
    k: int,
    n: int,
    trials: int,
    p: int = DEFAULT_MODULUS,
    l: int = 1,
    seed: int = 0,
    scheme: str = "real",
) -> AttackCampaignResult:
    """Run the attacker against fresh instances and count exact recoveries.

    scheme="real" executes the actual protocol; scheme="naive" executes
    the broken interleaved chain as a negative control.  Each trial
    draws a fresh order, fresh functions, and fresh inputs.
    """
    if scheme not in ("real", "naive"):
        raise ValueError(f"unknown scheme {scheme!r}")
    root = Rng(seed).child(f"attack:{scheme}:{k}:{n}")
    hits = [0] * n
    for t in range(trials):
        trng = root.child(str(t))
        sigma = random_permutation(k, trng)
        functions = generate_functions(k, l, p, trng)
        servers = [Server(i + 1, functions, p) for i in range(n)]
        if scheme == "real":
            m = n - 1 if (k > n and n >= 2) else 1
            config = RunConfig(k=k, n=n, m=m, l=l, p=p, seed=trng.seed)
            w = generate_inputs(m, l, p, trng)
            run_protocol(config, sigma, w, SimTransport(servers))
        else:
            w = sample_uniform_vector(l, p, trng)
            naive_chain_run(sigma, servers, w, p)
        guess_rng = trng.child("guess")
        for i, server in enumerate(servers):
            guess = sigma_attack(server.marginal, functions, p, guess_rng)
            if guess.mapping == sigma.mapping:
                hits[i] += 1
    uniform = 1.0 / factorial(k)
    band = 3.0 * math.sqrt(uniform * (1.0 - uniform) / trials)
    return AttackCampaignResult(
        scheme=scheme, k=k, n=n, trials=trials,
        per_server_rate=[h / trials for h in hits],
        uniform_rate=uniform, three_sigma_band=band,
    )


# -- rate and converse quantities ----------------------------------------------


@dataclass
class RateVerdict:
    measured: Fraction
    lower_bound: Fraction
    upper_bound: Fraction
    asymptotic_limit: Fraction
    gap: Fraction
    ok: bool


def rate_report(report: RunReport) -> RateVerdict:
    """Exact rate bookkeeping for one run.

    measured = KM/D as a fraction; the capacity window is
    (1 - 1/N)/(1 - 1/max(K, N)) <= C <= 1.  The verdict fails if the
    measured rate exceeds 1 or the scheme's own asymptotic limit.
    """
    k, n = report.k, report.n
    measured = Fraction(report.rate[0], report.rate[1])
    biggest = max(k, n)
    if biggest == 1:
        lower = Fraction(1)  # K = N = 1: a single chain query achieves rate 1
    else:
        lower = Fraction(1 - Fraction(1, n), 1 - Fraction(1, biggest))
    if k <= n:
        limit = Fraction(1)
    elif n == 1:
        limit = Fraction(1, factorial(k))  # all-chains fallback
    else:
        limit = Fraction(k * (n - 1), n * (k - 1))
    upper = Fraction(1)
    ok = measured <= upper and measured <= limit and lower <= upper
    return RateVerdict(
        measured=measured, lower_bound=lower, upper_bound=upper,
        asymptotic_limit=limit, gap=upper - measured, ok=ok,
    )


@dataclass
class ConverseResult:
    m: int
    counts: list[tuple[int, int, int]]  # (function, d_k, slack)
    ok: bool


def converse_counts(report: RunReport) -> ConverseResult:
    """Check the per-function workload floor: D_k >= M for every k."""
    counts = [(idx + 1, d, d - report.m) for idx, d in enumerate(report.d_k)]
    return ConverseResult(m=report.m, counts=counts, ok=all(d >= report.m for _, d, _ in counts))


@dataclass
class RankDecayResult:
    l: int
    m: int
    p: int
    trials: int
    empirical: float
    bound: float
    stderr: float
    certain: bool  # M > L: deficiency is certain, probability is exactly 1
    ok: bool


def rank_decay_experiment(
    l: int, m: int, p: int, trials: int, seed: int = 0
) -> RankDecayResult:
    """Estimate P(rank of M uniform vectors in GF(p)^L < M) vs its bound.

    The analytic union bound is (p^M - 1) / (p^L (p - 1)); the check
    allows three binomial standard errors of slack at the bound.
    """
    if m > l:
        return RankDecayResult(
            l=l, m=m, p=p, trials=trials, empirical=1.0,
            bound=1.0, stderr=0.0, certain=True, ok=True,
        )
    rng = Rng(seed).child(f"rank-decay:{p}:{l}:{m}")
    hits = 0
    for _ in range(trials):
        vectors = [sample_uniform_vector(l, p, rng) for _ in range(m)]
        if rank(vectors, p) < m:
            hits += 1
    empirical = hits / trials
    bound = (p**m - 1) / (p**l * (p - 1))
    stderr = math.sqrt(bound * (1.0 - bound) / trials)
    return RankDecayResult(
        l=l, m=m, p=p, trials=trials, empirical=empirical,
        bound=bound, stderr=stderr, certain=False,
        ok=empirical <= bound + 3.0 * stderr,
    )


# -- aggregate verdict -----------------------------------------------------------


@dataclass
class PrivacyVerdict:
    """Combined view of the three privacy layers for one configuration."""

    fingerprint: FingerprintResult
    uniformity: UniformityResult
    attack_real: AttackCampaignResult
    attack_naive: AttackCampaignResult | None
    tv_threshold: float
    alpha: float

    @property
    def all_pass(self) -> bool:
        checks = [
            self.fingerprint.ok,
            self.uniformity.max_tv_cross <= self.tv_threshold,
            self.uniformity.max_tv_self <= self.tv_threshold * math.sqrt(2.0),
            self.uniformity.chi2_all_pass(self.alpha),
            self.attack_real.within_uniform_band(),
        ]
        if self.attack_naive is not None:
            checks.append(self.attack_naive.best_rate > 0.9)
        return all(checks)
