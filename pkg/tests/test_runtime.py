"""Server behavior, wire codec byte layout, and both transports."""

import socket

import pytest

from psfc.field import DimensionMismatch, identity_matrix
from psfc.protocol import Permutation, RunConfig
from psfc.rand import Rng
from psfc.runtime import (
    ChannelClosed,
    MalformedFrame,
    Server,
    SimTransport,
    TcpServerHost,
    TcpTransport,
    UnknownFunction,
    WireMessage,
    decode_message,
    encode_message,
    generate_functions,
    generate_inputs,
    make_servers,
    marginal_fingerprint,
    marginal_to_json,
)
from psfc.client import run_protocol


def _servers(k=3, n=2, l=1, p=5, seed=0):
    functions = generate_functions(k, l, p, Rng(seed).child("functions"))
    return [Server(i + 1, functions, p) for i in range(n)], functions


# -- serve_query ----------------------------------------------------------------


def test_serve_identity_function():
    server = Server(1, [identity_matrix(2)], 5)
    assert server.serve(1, (3, 4)) == (3, 4)


def test_serve_scalar_example():
    server = Server(1, [((2,),), ((3,),)], 5)
    assert server.serve(2, (4,)) == (2,)  # 3*4 mod 5


def test_serve_appends_one_marginal_entry():
    server = Server(1, [identity_matrix(1)], 5)
    assert len(server.marginal) == 0
    server.serve(1, (2,))
    assert len(server.marginal) == 1
    assert server.marginal.entries[0] == (1, (2,))


def test_serve_unknown_function():
    server = Server(1, [identity_matrix(1)], 5)
    with pytest.raises(UnknownFunction):
        server.serve(2, (1,))
    with pytest.raises(UnknownFunction):
        server.serve(0, (1,))


def test_serve_dimension_check():
    server = Server(1, [identity_matrix(2)], 5)
    with pytest.raises(DimensionMismatch):
        server.serve(1, (1,))


def test_make_servers_share_functions():
    config = RunConfig(k=2, n=3, m=1, l=2, p=7, seed=4)
    servers = make_servers(config)
    assert len(servers) == 3
    assert servers[0].functions is servers[1].functions


# -- fingerprints ------------------------------------------------------------------


def test_fingerprint_projection():
    server = Server(1, [identity_matrix(1), identity_matrix(1)], 5)
    assert marginal_fingerprint(server) == ()
    server.serve(2, (1,))
    server.serve(1, (0,))
    assert marginal_fingerprint(server) == (2, 1)


def test_fingerprint_k3_n2_pattern():
    # Server 1 computes (1, 3) per block, server 2 computes (2, 3).
    servers, _ = _servers(k=3, n=2, l=1, p=5, seed=1)
    config = RunConfig(k=3, n=2, m=2, l=1, p=5, seed=1)
    w = generate_inputs(2, 1, 5, Rng(1).child("inputs"))
    run_protocol(config, Permutation.from_paper_order((3, 2, 1)), w, SimTransport(servers))
    blocks = 2 + 3 - 1
    assert marginal_fingerprint(servers[0]) == (1, 3) * blocks
    assert marginal_fingerprint(servers[1]) == (2, 3) * blocks


def test_fingerprint_k4_n3_pattern():
    config = RunConfig(k=4, n=3, m=4, l=1, p=5, seed=2)
    functions = generate_functions(4, 1, 5, Rng(2).child("functions"))
    servers = [Server(i + 1, functions, 5) for i in range(3)]
    w = generate_inputs(4, 1, 5, Rng(2).child("inputs"))
    run_protocol(config, Permutation.from_paper_order((1, 3, 4, 2)), w, SimTransport(servers))
    blocks = 2 + 4 - 1
    assert marginal_fingerprint(servers[1]) == (2, 2, 4) * blocks


def test_marginal_to_json():
    server = Server(2, [identity_matrix(1)], 5)
    server.serve(1, (3,))
    assert marginal_to_json(server) == '{"entries":[{"function":1,"input":[3]}],"server":2}'


# -- sim transport FIFO ---------------------------------------------------------------


def test_sim_transport_fifo_per_server():
    servers, _ = _servers(k=2, n=2, l=1, p=5)
    transport = SimTransport(servers)
    transport.query(1, 1, (1,))
    transport.query(2, 2, (2,))
    transport.query(1, 2, (3,))
    assert [f for f, _ in servers[0].marginal.entries] == [1, 2]
    assert [w for _, w in servers[0].marginal.entries] == [(1,), (3,)]
    assert [f for f, _ in servers[1].marginal.entries] == [2]


def test_sim_transport_closed():
    servers, _ = _servers()
    transport = SimTransport(servers)
    transport.close()
    with pytest.raises(ChannelClosed):
        transport.query(1, 1, (0,))


# -- wire codec -------------------------------------------------------------------------


def test_query_frame_exact_bytes():
    frame = encode_message(WireMessage("query", 7, 2, (3,)))
    expected = (
        b"PSFQ"
        + (7).to_bytes(4, "little")
        + (2).to_bytes(2, "little")
        + (1).to_bytes(4, "little")
        + (3).to_bytes(8, "little")
    )
    assert frame == expected


def test_answer_frame_layout():
    frame = encode_message(WireMessage("answer", 1, None, (4, 5)))
    assert frame[:4] == b"PSFA"
    assert len(frame) == 4 + 4 + 4 + 16


def test_codec_roundtrip_random():
    rng = Rng(3)
    for _ in range(100):
        kind = rng.choice(["query", "answer"])
        dim = rng.randrange(1, 5)
        payload = tuple(rng.randrange(2**31 - 1) for _ in range(dim))
        function = rng.randrange(1, 10) if kind == "query" else None
        msg = WireMessage(kind, rng.randrange(2**32), function, payload)
        assert decode_message(encode_message(msg)) == msg


def test_decode_rejects_bad_magic():
    with pytest.raises(MalformedFrame):
        decode_message(b"XXXX" + bytes(14))


def test_decode_rejects_truncation():
    frame = encode_message(WireMessage("query", 0, 1, (1, 2)))
    with pytest.raises(MalformedFrame):
        decode_message(frame[:-1])
    with pytest.raises(MalformedFrame):
        decode_message(frame + b"\x00")


def test_codec_does_not_check_canonicality():
    # Values >= p pass the codec; the server ingress rejects them.
    msg = WireMessage("query", 0, 1, (2**40,))
    assert decode_message(encode_message(msg)) == msg


# -- tcp transport ---------------------------------------------------------------------


def test_tcp_transport_round_trip():
    servers, functions = _servers(k=2, n=2, l=2, p=7, seed=5)
    host = TcpServerHost(servers)
    transport = TcpTransport(host.addresses)
    try:
        answer = transport.query(1, 1, (1, 0))
        assert answer == tuple(col[0] for col in functions[0])
        answer2 = transport.query(1, 2, (0, 1))
        assert answer2 == tuple(col[1] for col in functions[1])
    finally:
        transport.close()
        host.close()
    assert [f for f, _ in servers[0].marginal.entries] == [1, 2]


def test_tcp_transport_closed_raises():
    servers, _ = _servers()
    host = TcpServerHost(servers)
    transport = TcpTransport(host.addresses)
    transport.close()
    with pytest.raises(ChannelClosed):
        transport.query(1, 1, (0,))
    host.close()


def test_tcp_ingress_rejects_noncanonical():
    servers, _ = _servers(k=1, n=1, l=1, p=5)
    host = TcpServerHost(servers)
    raw = socket.create_connection(host.addresses[0], timeout=5)
    try:
        raw.sendall(encode_message(WireMessage("query", 0, 1, (7,))))  # 7 >= p
        assert raw.recv(64) == b""  # server drops the connection
    finally:
        raw.close()
        host.close()
    assert len(servers[0].marginal) == 0


def test_tcp_host_rejects_garbage_frame():
    servers, _ = _servers(k=1, n=1, l=1, p=5)
    host = TcpServerHost(servers)
    raw = socket.create_connection(host.addresses[0], timeout=5)
    try:
        raw.sendall(b"GARBAGEGARBAGEGARBAGE")
        # The host drops the connection: clean EOF or a reset, depending
        # on whether its receive buffer still held bytes.
        try:
            assert raw.recv(64) == b""
        except ConnectionResetError:
            pass
    finally:
        raw.close()
        host.close()
