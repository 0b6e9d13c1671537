"""Query planning: who computes what, on which vector, in which order.

The planner splits into a composition-order-independent *function
assignment* and an order-dependent *vector assignment*:

* K <= N: one server per function.  Request m becomes a K-query chain;
  query j goes to server s_j, asks for function s_j, and feeds it the
  previous answer.  Each server only ever computes its own function, so
  its view carries no order information.

* K > N, N >= 2: requests are grouped into batches of N-1 inputs and
  served by M' + K - 1 identical two-phase *blocks*.  In phase 1 server
  n computes F_n on N-1 vectors; in phase 2 every server computes
  F_{N+1}..F_K once each.  A block therefore always issues N(K-1)
  queries with a fixed per-server function column, whatever the order.
  With pi the inverse of the composition order, block m advances step
  pi_n of batch m - pi_n + 1 at server n (phase 1) and step pi_{N+i} of
  batch m - pi_{N+i} + 1 across servers (phase 2, function N+i).  Phase-2
  inputs at servers 1..N-1 are one-time-padded with a per-block mask
  Z[m,i]; server N receives the bare mask so the client can cancel the
  pad image from the other answers.  Any batch index outside [1..M']
  turns into a fresh placeholder vector: the query is still issued, so
  the servers' view stays byte-identical for every order.

* leftover requests (N-1 does not divide M) and the N = 1 degenerate
  case fall back to asking server 1 to evaluate all K! composition
  chains for the request, K*K! queries per request, enumerated in a
  fixed lexicographic order.  Only the chain matching the secret order
  is decoded; the rest are camouflage.

A plan is symbolic: inputs are expressions over raw inputs, stored task
outputs, masks, placeholders, and previous chain answers.  The client
materializes them at run time; nothing order-dependent ever reaches a
server except the input values themselves, which are distributed
identically for every order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from math import factorial
from typing import NamedTuple

from .protocol import Permutation, TaskRef, enumerate_permutations

__all__ = [
    "InvalidRegime",
    "BlockPlan",
    "MaskLedger",
    "PlannedQuery",
    "QueryPlan",
    "build_blocks",
    "plan_vectors",
    "schedule_chain",
    "schedule_fallback",
    "build_plan",
    "query_count",
    "check_feasibility",
    "render_expr",
    "expr_to_doc",
    "plan_to_json",
]


class InvalidRegime(ValueError):
    """Scheduler called outside its (K, N) regime."""


# Input expressions (what the client sends):
#   ("w", flat)            raw input vector, 0-based flat index
#   ("out", m, k, i)       stored output i of task (batch m, step k)
#   ("mask", mid)          the raw mask vector Z[mid]
#   ("ph", pid)            a fresh uniform placeholder, drawn once
#   ("xor", base, mid)     base expression padded with Z[mid]
#   ("prev", cid)          previous answer of chain cid
#
# Effects (what the client does with the answer):
#   ("out", m, k, i)             store as output i of task (m, k)
#   ("masked", m, k, i, mid)     padded image; store after cancelling Z[mid]
#   ("img", mid)                 answer is the pad image of Z[mid]
#   ("prev", cid)                remember as chain cid's latest answer
#   ("final", out, tau)          chain result; keep iff tau is None or tau == order
#   ("drop",)                    camouflage answer, discarded


class PlannedQuery(NamedTuple):
    server: int
    function: int
    expr: tuple
    effect: tuple
    block: int  # 1-based block index; 0 for chain / fallback queries


@dataclass(frozen=True)
class BlockPlan:
    """One two-phase block; `columns[n-1]` is server n's function column."""

    index: int
    columns: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class MaskLedger:
    """Mask ids by (block, slot) plus the number of placeholders drawn."""

    mask_ids: dict[tuple[int, int], int]
    placeholder_count: int


@dataclass(frozen=True)
class QueryPlan:
    k: int
    n: int
    m: int
    m_prime: int
    r: int
    n_blocks: int
    queries: list[PlannedQuery]
    ledger: MaskLedger

    def __len__(self) -> int:
        return len(self.queries)


def _function_column(k: int, n: int, server: int) -> tuple[int, ...]:
    return (server,) * (n - 1) + tuple(range(n + 1, k + 1))


def build_blocks(k: int, n: int, m_prime: int) -> list[BlockPlan]:
    """The M' + K - 1 identical blocks of the K > N regime.

    The result depends only on (K, N, M'): the function assignment is
    deterministic and identical for every composition order.
    """
    if k <= n:
        raise InvalidRegime(f"blocks need K > N (got K={k}, N={n}); use the chain scheme")
    if n < 2:
        raise InvalidRegime("blocks need N >= 2; route everything through the fallback")
    if m_prime < 1:
        raise InvalidRegime(f"need at least one batch, got M'={m_prime}")
    columns = tuple(_function_column(k, n, srv) for srv in range(1, n + 1))
    return [BlockPlan(index=m, columns=columns) for m in range(1, m_prime + k)]


def plan_vectors(
    sigma: Permutation, k: int, n: int, m_prime: int, blocks: list[BlockPlan]
) -> QueryPlan:
    """Attach input expressions to the block schedule for one order.

    Canonical in-block order: phase-1 rows server by server, then
    phase-2 rows server by server.  Each server therefore always sees
    its fixed column (N-1 copies of F_n, then F_{N+1}..F_K) per block.
    """
    if sigma.size != k:
        raise InvalidRegime(f"order has size {sigma.size}, expected K={k}")
    pi = sigma.inverse().mapping
    queries: list[PlannedQuery] = []
    mask_ids: dict[tuple[int, int], int] = {}
    ph = 0

    def in_expr(batch: int, step: int, comp: int) -> tuple:
        # Input of task (batch, step), component comp: the raw input for
        # step 1, otherwise the stored output of the previous step.
        if step == 1:
            return ("w", (batch - 1) * (n - 1) + (comp - 1))
        return ("out", batch, step - 1, comp)

    for block in blocks:
        m = block.index
        # Phase 1: server n advances step pi_n of batch m - pi_n + 1.
        for srv in range(1, n + 1):
            step = pi[srv - 1]
            batch = m - step + 1
            live = 1 <= batch <= m_prime
            for comp in range(1, n):
                if live:
                    expr = in_expr(batch, step, comp)
                    effect = ("out", batch, step, comp)
                else:
                    expr = ("ph", ph)
                    ph += 1
                    effect = ("drop",)
                queries.append(PlannedQuery(srv, srv, expr, effect, m))
        # Phase 2: function N+i everywhere; servers below N get padded
        # inputs, server N gets the bare mask.
        for srv in range(1, n + 1):
            for i in range(1, k - n + 1):
                func = n + i
                mid = mask_ids.setdefault((m, i), len(mask_ids))
                if srv < n:
                    step = pi[func - 1]
                    batch = m - step + 1
                    if 1 <= batch <= m_prime:
                        base = in_expr(batch, step, srv)
                        effect = ("masked", batch, step, srv, mid)
                    else:
                        base = ("ph", ph)
                        ph += 1
                        effect = ("drop",)
                    expr = ("xor", base, mid)
                else:
                    expr = ("mask", mid)
                    effect = ("img", mid)
                queries.append(PlannedQuery(srv, func, expr, effect, m))

    return QueryPlan(
        k=k,
        n=n,
        m=m_prime * (n - 1),
        m_prime=m_prime,
        r=0,
        n_blocks=len(blocks),
        queries=queries,
        ledger=MaskLedger(mask_ids=mask_ids, placeholder_count=ph),
    )


def schedule_chain(sigma: Permutation, k: int, n: int, request: int = 1) -> list[PlannedQuery]:
    """The K <= N chain for one request: server s_j computes F_{s_j}."""
    if k > n:
        raise InvalidRegime(f"chain scheme needs K <= N (got K={k}, N={n})")
    if sigma.size != k:
        raise InvalidRegime(f"order has size {sigma.size}, expected K={k}")
    w = request - 1
    cid = w
    queries = []
    for j, func in enumerate(sigma.mapping, start=1):
        expr = ("w", w) if j == 1 else ("prev", cid)
        effect = ("final", w, None) if j == k else ("prev", cid)
        queries.append(PlannedQuery(func, func, expr, effect, 0))
    return queries


def schedule_fallback(r: int, k: int, first_request: int = 1) -> list[PlannedQuery]:
    """All K! chains per leftover request, every query to server 1.

    The chain enumeration is lexicographic and fixed, so the server's
    view is independent of which chain the client actually wants.  The
    effect tag carries each chain's order; the client keeps only the
    final answer of the chain matching its secret order.
    """
    if r < 0:
        raise InvalidRegime(f"leftover request count must be >= 0, got {r}")
    if r == 0:
        return []
    taus = enumerate_permutations(k)  # applies the K <= 8 factorial guard
    queries = []
    for t in range(r):
        w = first_request - 1 + t
        for ti, tau in enumerate(taus):
            cid = (w, ti)
            for j, func in enumerate(tau.mapping, start=1):
                expr = ("w", w) if j == 1 else ("prev", cid)
                effect = ("final", w, tau.mapping) if j == k else ("prev", cid)
                queries.append(PlannedQuery(1, func, expr, effect, 0))
    return queries


@lru_cache(maxsize=32)
def _fallback_section(r: int, k: int, first_request: int) -> list[PlannedQuery]:
    return schedule_fallback(r, k, first_request)


@lru_cache(maxsize=128)
def _build_plan_cached(k: int, n: int, m: int, mapping: tuple[int, ...]) -> QueryPlan:
    sigma = Permutation(mapping)
    if k <= n:
        queries = []
        for request in range(1, m + 1):
            queries.extend(schedule_chain(sigma, k, n, request))
        return QueryPlan(
            k=k, n=n, m=m, m_prime=0, r=0, n_blocks=0, queries=queries,
            ledger=MaskLedger(mask_ids={}, placeholder_count=0),
        )
    if n == 1:
        queries = _fallback_section(m, k, 1)
        return QueryPlan(
            k=k, n=n, m=m, m_prime=0, r=m, n_blocks=0, queries=queries,
            ledger=MaskLedger(mask_ids={}, placeholder_count=0),
        )
    m_prime, r = divmod(m, n - 1)
    if m_prime == 0:
        # Too few requests to fill a batch: everything goes through the
        # fallback rather than running blocks of pure placeholders.
        queries = _fallback_section(r, k, 1)
        return QueryPlan(
            k=k, n=n, m=m, m_prime=0, r=r, n_blocks=0, queries=queries,
            ledger=MaskLedger(mask_ids={}, placeholder_count=0),
        )
    block_plan = plan_vectors(sigma, k, n, m_prime, build_blocks(k, n, m_prime))
    queries = block_plan.queries
    if r:
        queries = queries + _fallback_section(r, k, m_prime * (n - 1) + 1)
    return QueryPlan(
        k=k, n=n, m=m, m_prime=m_prime, r=r, n_blocks=block_plan.n_blocks,
        queries=queries, ledger=block_plan.ledger,
    )


def build_plan(k: int, n: int, m: int, sigma: Permutation) -> QueryPlan:
    """Full ordered plan for M requests under composition order sigma."""
    return _build_plan_cached(k, n, m, sigma.mapping)


def query_count(k: int, n: int, m: int) -> int:
    """Total queries D the plan will issue for (K, N, M).

    K <= N: KM.  N = 1 (or fewer than N-1 requests): M * K * K! via the
    fallback.  Otherwise, with M = M'(N-1) + r: (M'+K-1) N(K-1) blocks
    plus r * K * K! fallback queries.
    """
    if k <= n:
        return k * m
    if n == 1:
        return m * k * factorial(k)
    m_prime, r = divmod(m, n - 1)
    block_queries = (m_prime + k - 1) * n * (k - 1) if m_prime else 0
    return block_queries + r * k * factorial(k)


# -- mechanical feasibility check ---------------------------------------------


def check_feasibility(plan: QueryPlan) -> None:
    """Verify every input is computable from strictly earlier answers.

    Walks the plan block by block, maintaining the set of resolved task
    outputs, and demands that each block's expressions reference only
    raw inputs, masks, placeholders, chain predecessors, or outputs
    resolved by previous blocks.  Raises AssertionError on violation.
    """
    resolved: set[tuple[int, int, int]] = set()
    pending_block: list[tuple[int, int, int]] = []
    current_block = None
    chain_len: dict = {}
    for idx, q in enumerate(plan.queries):
        if q.block != current_block:
            resolved.update(pending_block)
            pending_block = []
            current_block = q.block
        tag = q.expr[0]
        if tag == "out":
            key = (q.expr[1], q.expr[2], q.expr[3])
            assert key in resolved, f"query {idx} needs unresolved task output {key}"
        elif tag == "xor" and q.expr[1][0] == "out":
            key = (q.expr[1][1], q.expr[1][2], q.expr[1][3])
            assert key in resolved, f"query {idx} needs unresolved task output {key}"
        elif tag == "prev":
            assert chain_len.get(q.expr[1], 0) > 0, f"query {idx} has no chain predecessor"
        elif tag == "w":
            assert 0 <= q.expr[1] < plan.m, f"query {idx} references input {q.expr[1]}"
        eff = q.effect[0]
        if eff == "out":
            pending_block.append((q.effect[1], q.effect[2], q.effect[3]))
        elif eff == "masked":
            pending_block.append((q.effect[1], q.effect[2], q.effect[3]))
        elif eff == "prev":
            chain_len[q.effect[1]] = chain_len.get(q.effect[1], 0) + 1


# -- symbolic export -----------------------------------------------------------


def render_expr(expr: tuple, n: int, flat_inputs: bool = False) -> str:
    """Human-readable form of an input expression, for JSON export."""
    tag = expr[0]
    if tag == "w":
        flat = expr[1]
        if n >= 2 and not flat_inputs:
            return f"W[{flat // (n - 1) + 1},{flat % (n - 1) + 1}]"
        return f"W[{flat + 1}]"
    if tag == "out":
        return f"out{expr[3]}(R[{expr[1]},{expr[2]}])"
    if tag == "mask":
        return f"Z[{expr[1]}]"
    if tag == "ph":
        return f"Z*[{expr[1]}]"
    if tag == "xor":
        return f"{render_expr(expr[1], n, flat_inputs)} (+) Z[{expr[2]}]"
    if tag == "prev":
        return f"prev[{expr[1]}]"
    raise ValueError(f"unknown expression tag {tag!r}")


def expr_to_doc(expr: tuple) -> dict:
    """Structured (replayable) form of an input expression."""
    tag = expr[0]
    if tag == "w":
        return {"kind": "raw_input", "index": expr[1]}
    if tag == "out":
        # The stored value out_i(task); it feeds the next step's input.
        task = TaskRef(batch=expr[1], step=expr[2])
        return {"kind": "task_output", "task": task._asdict(), "component": expr[3]}
    if tag == "mask":
        return {"kind": "raw_mask", "mask": expr[1]}
    if tag == "ph":
        return {"kind": "placeholder", "id": expr[1]}
    if tag == "xor":
        return {"kind": "masked", "base": expr_to_doc(expr[1]), "mask": expr[2]}
    if tag == "prev":
        return {"kind": "chain_previous", "chain": list(expr[1]) if isinstance(expr[1], tuple) else expr[1]}
    raise ValueError(f"unknown expression tag {tag!r}")


def plan_to_json(plan: QueryPlan) -> str:
    """Symbolic plan dump for debugging and replay."""
    flat = plan.n_blocks == 0
    doc = [
        {
            "seq": seq,
            "server": q.server,
            "function": q.function,
            "input_expr": render_expr(q.expr, plan.n, flat),
            "expr": expr_to_doc(q.expr),
        }
        for seq, q in enumerate(plan.queries)
    ]
    return json.dumps(doc, separators=(",", ":"))
