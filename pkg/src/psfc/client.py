"""Client orchestration: execute a plan, cancel pads, decode outputs.

The client is deliberately blind: it never holds the function matrices
and never multiplies by them.  Everything it does with answers is
storage, coordinatewise addition (padding) and subtraction (pad
cancellation).  This module must not import any matrix operation; a
test enforces that structurally.

Execution is a single logical thread with blocking per-query RPC: every
answer a block needs is joined before the next block's inputs are
materialized, which is exactly the ordering the scheduler's feasibility
argument requires.  Queries to distinct servers could be issued
concurrently within a block without changing any server's view.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction

from .field import FieldVector, vec_add, vec_sub
from .protocol import Permutation, Query, RunConfig
from .rand import Rng
from .scheduler import build_plan

__all__ = [
    "DependencyViolation",
    "MissingValue",
    "ValueStore",
    "RunReport",
    "unmask",
    "run_protocol",
    "decode_outputs",
    "outputs_to_bytes",
]


class DependencyViolation(RuntimeError):
    """The plan referenced a value the client has not resolved (a bug)."""


class MissingValue(RuntimeError):
    """Decoding found an unresolved output (a bug)."""


def unmask(masked_answer: FieldVector, mask_image: FieldVector, p: int) -> FieldVector:
    """Cancel a pad image: returns masked_answer - mask_image mod p.

    For a linear F this recovers F(x) from F(x + z) and F(z).
    """
    return vec_sub(masked_answer, mask_image, p)


@dataclass
class ValueStore:
    """Resolved values accumulated during a run.

    `outs[(batch, step, component)]` is written exactly once, during the
    block that performs that task; `masks` holds the raw pads the client
    drew, `images` the returned pad images used for cancellation.
    """

    outs: dict[tuple[int, int, int], FieldVector] = field(default_factory=dict)
    masks: dict[int, FieldVector] = field(default_factory=dict)
    images: dict[int, FieldVector] = field(default_factory=dict)


@dataclass
class RunReport:
    """Everything observable about one run, for audits and replay.

    `sigma` is the internal step map (position k holds the function
    applied at step k); JSON renders it in display order.  The rate is
    kept exact as a reduced fraction (numerator, denominator).
    """

    k: int
    n: int
    m: int
    l: int
    p: int
    seed: int
    sigma: tuple[int, ...]
    d: int
    d_k: list[int]
    rate: tuple[int, int]
    outputs: list[FieldVector]
    transcript: list[tuple[int, int, int]]  # (seq, server, function)
    inputs_sent: list[FieldVector]  # parallel to transcript

    def queries(self) -> list[Query]:
        """The full issued query triples, reconstructed from the transcript."""
        return [
            Query(server=server, input=sent, function=function, seq=seq)
            for (seq, server, function), sent in zip(self.transcript, self.inputs_sent)
        ]

    def marginals(self) -> dict[int, list[tuple[int, FieldVector]]]:
        """Client-side projection of each server's view, in arrival order."""
        per_server: dict[int, list[tuple[int, FieldVector]]] = {s: [] for s in range(1, self.n + 1)}
        for q in self.queries():
            per_server[q.server].append((q.function, q.input))
        return per_server

    @property
    def rate_float(self) -> float:
        return self.rate[0] / self.rate[1]

    def to_json(self) -> str:
        """Canonical JSON: key-sorted, no whitespace, ints only.

        Two runs are considered identical iff these bytes match.
        """
        doc = {
            "config": {"k": self.k, "n": self.n, "m": self.m, "l": self.l,
                       "p": self.p, "seed": self.seed},
            "sigma_display": list(reversed(self.sigma)),
            "d": self.d,
            "d_k": self.d_k,
            "rate": {"num": self.rate[0], "den": self.rate[1]},
            "outputs": [list(v) for v in self.outputs],
            "transcript": [list(t) for t in self.transcript],
            "marginals": {
                str(server): [[function, list(vec)] for function, vec in entries]
                for server, entries in self.marginals().items()
            },
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def run_protocol(
    config: RunConfig, sigma: Permutation, w_vectors, transport
) -> tuple[list[FieldVector], RunReport]:
    """Run the full protocol for M inputs and return (outputs, report).

    Deterministic given (config, sigma, w_vectors) and the transport's
    servers: the client's own randomness (pads and placeholders) comes
    from the seed's "client" child stream, drawn in plan order.
    """
    k, n, m, l, p = config.k, config.n, config.m, config.l, config.p
    if sigma.size != k:
        raise ValueError(f"order size {sigma.size} != K={k}")
    if len(w_vectors) != m:
        raise ValueError(f"expected {m} input vectors, got {len(w_vectors)}")
    plan = build_plan(k, n, m, sigma)
    randrange = Rng(config.seed).child("client").randrange
    l_range = range(l)

    store = ValueStore()
    masks = store.masks
    images = store.images
    outs = store.outs
    pending: dict[int, list] = {}
    chain_prev: dict = {}
    outputs: list = [None] * m
    transcript: list[tuple[int, int, int]] = []
    inputs_sent: list[FieldVector] = []
    d_k = [0] * k
    sigma_map = sigma.mapping
    query = transport.query

    for seq, (server, function, expr, effect, _block) in enumerate(plan.queries):
        tag = expr[0]
        if tag == "w":
            w = w_vectors[expr[1]]
        elif tag == "out":
            w = outs.get((expr[1], expr[2], expr[3]))
            if w is None:
                raise DependencyViolation(f"unresolved task output {expr[1:]}")
        elif tag == "prev":
            w = chain_prev.get(expr[1])
            if w is None:
                raise DependencyViolation(f"chain {expr[1]} has no previous answer")
        elif tag == "xor":
            base = expr[1]
            if base[0] == "out":
                inner = outs.get((base[1], base[2], base[3]))
                if inner is None:
                    raise DependencyViolation(f"unresolved task output {base[1:]}")
            elif base[0] == "w":
                inner = w_vectors[base[1]]
            else:  # placeholder
                inner = tuple(randrange(p) for _ in l_range)
            mid = expr[2]
            z = masks.get(mid)
            if z is None:
                z = tuple(randrange(p) for _ in l_range)
                masks[mid] = z
            w = vec_add(inner, z, p)
        elif tag == "mask":
            mid = expr[1]
            w = masks.get(mid)
            if w is None:
                w = tuple(randrange(p) for _ in l_range)
                masks[mid] = w
        else:  # "ph": fresh placeholder, never referenced again
            w = tuple(randrange(p) for _ in l_range)

        ans = query(server, function, w)

        eff = effect[0]
        if eff == "out":
            outs[(effect[1], effect[2], effect[3])] = ans
        elif eff == "prev":
            chain_prev[effect[1]] = ans
        elif eff == "masked":
            key = (effect[1], effect[2], effect[3])
            img = images.get(effect[4])
            if img is None:
                pending.setdefault(effect[4], []).append((key, ans))
            else:
                outs[key] = unmask(ans, img, p)
        elif eff == "img":
            mid = effect[1]
            images[mid] = ans
            for key, masked in pending.pop(mid, ()):
                outs[key] = unmask(masked, ans, p)
        elif eff == "final":
            tau = effect[2]
            if tau is None or tau == sigma_map:
                outputs[effect[1]] = ans
        # "drop": camouflage answer, nothing to do

        transcript.append((seq, server, function))
        inputs_sent.append(w)
        d_k[function - 1] += 1

    decode_outputs(store, outputs, plan.m_prime, k, n)
    if any(v is None for v in outputs):
        raise MissingValue("some outputs were never resolved")

    d = len(transcript)
    ratio = Fraction(k * m, d)
    report = RunReport(
        k=k, n=n, m=m, l=l, p=p, seed=config.seed, sigma=sigma_map,
        d=d, d_k=d_k, rate=(ratio.numerator, ratio.denominator),
        outputs=outputs, transcript=transcript, inputs_sent=inputs_sent,
    )
    return outputs, report


def decode_outputs(store: ValueStore, outputs, m_prime: int, k: int, n: int) -> None:
    """Map final task outputs to the original input order.

    Batch m component j lands at flat position (m-1)(N-1) + j - 1.
    Chain and fallback outputs were already placed by their effects.
    """
    for batch in range(1, m_prime + 1):
        for comp in range(1, n):
            value = store.outs.get((batch, k, comp))
            if value is None:
                raise MissingValue(f"final output of batch {batch}, component {comp} missing")
            outputs[(batch - 1) * (n - 1) + comp - 1] = value


def outputs_to_bytes(outputs: list[FieldVector]) -> bytes:
    """Binary output matrix: header (M u32, L u32 LE), then u64 LE row-major."""
    m = len(outputs)
    l = len(outputs[0]) if m else 0
    parts = [struct.pack("<II", m, l)]
    for vec in outputs:
        parts.append(struct.pack(f"<{l}Q", *vec))
    return b"".join(parts)
