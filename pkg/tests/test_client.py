"""Client orchestration: zero-error correctness, accounting, determinism.

Every correctness expectation is checked against the brute-force
composition oracle, never against the protocol's own data flow.
"""

import ast
import inspect
import json

import pytest

from psfc import client as client_module
from psfc.client import outputs_to_bytes, run_protocol, unmask
from psfc.field import DEFAULT_MODULUS, DimensionMismatch, mat_vec_mul, sample_invertible_matrix, sample_uniform_vector, vec_add
from psfc.protocol import Permutation, RunConfig, compose_reference, enumerate_permutations
from psfc.rand import Rng
from psfc.runtime import Server, SimTransport, generate_functions, generate_inputs
from psfc.scheduler import query_count


def _instance(k, n, m, l, p, seed):
    config = RunConfig(k=k, n=n, m=m, l=l, p=p, seed=seed)
    functions = generate_functions(k, l, p, Rng(seed).child("functions"))
    w = generate_inputs(m, l, p, Rng(seed).child("inputs"))
    return config, functions, w


def _run(config, functions, w, sigma):
    servers = [Server(i + 1, functions, config.p) for i in range(config.n)]
    return run_protocol(config, sigma, w, SimTransport(servers))


# -- unmask ------------------------------------------------------------------------


def test_unmask_zero_image_is_identity():
    assert unmask((2, 3), (0, 0), 5) == (2, 3)


def test_unmask_scalar_example():
    assert unmask((4,), (3,), 5) == (1,)


def test_unmask_cancels_linear_pad():
    rng = Rng(6)
    p = 11
    f = sample_invertible_matrix(3, p, rng)
    x = sample_uniform_vector(3, p, rng)
    z = sample_uniform_vector(3, p, rng)
    masked = mat_vec_mul(f, vec_add(x, z, p), p)
    image = mat_vec_mul(f, z, p)
    assert unmask(masked, image, p) == mat_vec_mul(f, x, p)


def test_unmask_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        unmask((1, 2), (1,), 5)


# -- correctness against the oracle ---------------------------------------------------


def test_chain_k2_single_request():
    config, functions, w = _instance(2, 2, 1, 2, 5, seed=3)
    sigma = Permutation.from_paper_order((2, 1))
    outputs, report = _run(config, functions, w, sigma)
    assert outputs == [compose_reference(functions, sigma, w[0], 5)]
    assert report.d == 2


def test_block_regime_k4_n3_all_orders():
    config, functions, w = _instance(4, 3, 2, 2, 5, seed=42)
    for sigma in enumerate_permutations(4):
        outputs, report = _run(config, functions, w, sigma)
        expected = [compose_reference(functions, sigma, vec, 5) for vec in w]
        assert outputs == expected
        assert report.d == 36


def test_k3_n2_exhaustive_orders_l3_p7():
    config, functions, w = _instance(3, 2, 3, 3, 7, seed=9)
    for sigma in enumerate_permutations(3):
        outputs, _ = _run(config, functions, w, sigma)
        assert outputs == [compose_reference(functions, sigma, vec, 7) for vec in w]


def test_fallback_only_n1():
    config, functions, w = _instance(3, 1, 2, 1, 5, seed=10)
    for sigma in enumerate_permutations(3):
        outputs, report = _run(config, functions, w, sigma)
        assert outputs == [compose_reference(functions, sigma, vec, 5) for vec in w]
        assert report.d == 2 * 3 * 6


def test_mixed_regime_with_leftovers():
    # K=5, N=4: M=7 gives M'=2 batches (6 requests) plus one fallback request.
    config, functions, w = _instance(5, 4, 7, 1, 7, seed=11)
    sigma = Permutation.from_paper_order((2, 5, 1, 4, 3))
    outputs, report = _run(config, functions, w, sigma)
    assert outputs == [compose_reference(functions, sigma, vec, 7) for vec in w]
    assert report.d == query_count(5, 4, 7)


def test_large_modulus_run():
    p = DEFAULT_MODULUS
    config, functions, w = _instance(4, 3, 2, 3, p, seed=12)
    sigma = Permutation.from_paper_order((1, 3, 4, 2))
    outputs, _ = _run(config, functions, w, sigma)
    assert outputs == [compose_reference(functions, sigma, vec, p) for vec in w]


def test_output_index_layout():
    # Outputs must land at (batch-1)(N-1) + component - 1, i.e. the
    # original input order.
    config, functions, w = _instance(4, 3, 6, 1, 5, seed=13)
    sigma = Permutation.from_paper_order((4, 3, 2, 1))
    outputs, _ = _run(config, functions, w, sigma)
    for idx, vec in enumerate(w):
        assert outputs[idx] == compose_reference(functions, sigma, vec, 5)


# -- accounting -----------------------------------------------------------------------


def test_report_d_k_block_structure():
    config, functions, w = _instance(4, 3, 4, 1, 5, seed=14)  # M'=2, blocks=5
    _, report = _run(config, functions, w, Permutation.identity(4))
    assert report.d_k == [2 * 5, 2 * 5, 2 * 5, 3 * 5]
    assert sum(report.d_k) == report.d == query_count(4, 3, 4)


def test_report_rate_exact_fraction():
    config, functions, w = _instance(4, 3, 2, 1, 5, seed=15)
    _, report = _run(config, functions, w, Permutation.identity(4))
    assert report.rate == (2, 9)  # 8/36 reduced


def test_chain_d_k_is_m():
    config, functions, w = _instance(3, 4, 5, 1, 5, seed=16)
    _, report = _run(config, functions, w, Permutation.identity(3))
    assert report.d_k == [5, 5, 5]


def test_determinism_byte_identical_reports():
    config, functions, w = _instance(4, 3, 3, 2, 7, seed=17)
    sigma = Permutation.from_paper_order((3, 1, 4, 2))
    _, rep1 = _run(config, functions, w, sigma)
    _, rep2 = _run(config, functions, w, sigma)
    assert rep1.to_json() == rep2.to_json()


def test_report_json_fields():
    config, functions, w = _instance(2, 2, 1, 1, 5, seed=18)
    sigma = Permutation.from_paper_order((2, 1))
    _, report = _run(config, functions, w, sigma)
    doc = json.loads(report.to_json())
    assert doc["config"] == {"k": 2, "n": 2, "m": 1, "l": 1, "p": 5, "seed": 18}
    assert doc["sigma_display"] == [2, 1]
    assert doc["d"] == 2
    assert len(doc["transcript"]) == 2
    assert set(doc["marginals"]) == {"1", "2"}


def test_report_queries_reconstruct_triples():
    config, functions, w = _instance(2, 2, 1, 1, 5, seed=23)
    sigma = Permutation.from_paper_order((2, 1))
    _, report = _run(config, functions, w, sigma)
    queries = report.queries()
    assert [q.seq for q in queries] == [0, 1]
    assert queries[0].server == 1 and queries[0].function == 1
    assert queries[0].input == w[0]
    assert queries[1].server == 2 and queries[1].function == 2


def test_report_marginals_match_server_view():
    config, functions, w = _instance(3, 2, 2, 1, 5, seed=19)
    sigma = Permutation.from_paper_order((1, 3, 2))
    servers = [Server(i + 1, functions, 5) for i in range(2)]
    _, report = run_protocol(config, sigma, w, SimTransport(servers))
    marginals = report.marginals()
    for server in servers:
        assert marginals[server.id] == server.marginal.entries


def test_outputs_binary_format():
    blob = outputs_to_bytes([(1, 2), (3, 4)])
    assert blob[:8] == (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert len(blob) == 8 + 4 * 8
    assert blob[8:16] == (1).to_bytes(8, "little")


def test_input_validation():
    config, functions, w = _instance(3, 2, 2, 1, 5, seed=20)
    with pytest.raises(ValueError):
        _run(config, functions, w[:1], Permutation.identity(3))
    with pytest.raises(ValueError):
        _run(config, functions, w, Permutation.identity(4))


# -- structural: the client never touches the function matrices -----------------------


def test_client_module_is_matrix_blind():
    source = inspect.getsource(client_module)
    tree = ast.parse(source)
    names = {
        node.names[0].name.split(".")[-1] if isinstance(node, ast.Import) else alias.name
        for node in ast.walk(tree)
        if isinstance(node, (ast.Import, ast.ImportFrom))
        for alias in node.names
    }
    forbidden = {"mat_vec_mul", "mat_mul", "mat_inv", "sample_invertible_matrix",
                 "generate_functions", "compose_reference"}
    assert not names & forbidden, f"client imports matrix machinery: {names & forbidden}"
