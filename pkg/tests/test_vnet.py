import threading
import time

import pytest

from sras.errors import BoardTimeout, Missing
from sras.vnet import Board, BoardServer, Frame, RecordKind, TcpBoardClient, parse_address

K = RecordKind.RPE_EVIDENCE


@pytest.fixture
def tcp_board():
    server = BoardServer().start()
    client = TcpBoardClient(server.address)
    yield client, server
    client.close()
    server.stop()


@pytest.fixture(params=["inmem", "tcp"])
def board(request):
    if request.param == "inmem":
        yield Board()
    else:
        server = BoardServer().start()
        with TcpBoardClient(server.address) as client:
            yield client
        server.stop()


@pytest.fixture(params=["inmem", "tcp"])
def pair(request):
    """(reader, writer); over TCP each is its own connection, as with two parties."""
    if request.param == "inmem":
        b = Board()
        yield b, b
    else:
        server = BoardServer().start()
        with TcpBoardClient(server.address) as r, TcpBoardClient(server.address) as w:
            yield r, w
        server.stop()


def test_publish_fetch_latest(board):
    s1 = board.publish("a", K, b"one")
    s2 = board.publish("a", K, b"two")
    assert s2 > s1
    rec = board.fetch("a", K)
    assert (rec.entity, rec.kind, rec.payload, rec.sequence) == ("a", K, b"two", s2)


def test_missing(board):
    with pytest.raises(Missing):
        board.fetch("nobody", K)


def test_kinds_are_separate(board):
    board.publish("a", RecordKind.ANNOUNCEMENT, b"ann")
    with pytest.raises(Missing):
        board.fetch("a", K)


def test_fetch_all_in_sequence_order(board):
    board.publish("b", K, b"1")
    board.publish("a", K, b"2")
    board.publish("b", K, b"3")
    assert [(r.entity, r.payload) for r in board.fetch_all(K)] == [("a", b"2"), ("b", b"3")]


def test_wait_for_times_out(board):
    t0 = time.monotonic()
    with pytest.raises(BoardTimeout):
        board.wait_for("x", K, 0.1)
    assert time.monotonic() - t0 >= 0.09


def test_wait_for_wakes_on_publish(pair):
    reader, writer = pair

    def later():
        time.sleep(0.05)
        writer.publish("x", K, b"hello")

    threading.Thread(target=later).start()
    t0 = time.monotonic()
    assert reader.wait_for("x", K, 5.0).payload == b"hello"
    assert time.monotonic() - t0 < 2.0


def test_wait_for_newer_than(board):
    seq = board.publish("x", K, b"old")
    with pytest.raises(BoardTimeout):
        board.wait_for("x", K, 0.05, newer_than=seq)
    board.publish("x", K, b"new")
    assert board.wait_for("x", K, 1.0, newer_than=seq).payload == b"new"


def test_binary_payloads_survive(board):
    payload = bytes(range(256)) * 3
    board.publish("bin", K, payload)
    assert board.fetch("bin", K).payload == payload


def test_inmem_and_tcp_agree(tcp_board):
    client, server = tcp_board
    local = Board()
    ops = [("a", K, b"x"), ("b", RecordKind.PE_EVIDENCE, b"y"), ("a", K, b"z")]
    for entity, kind, payload in ops:
        assert local.publish(entity, kind, payload) == client.publish(entity, kind, payload)
    assert local.contents() == server.board.contents()
    for entity, kind, _ in ops:
        assert local.fetch(entity, kind) == client.fetch(entity, kind)


def test_tamper_latest_keeps_sequence():
    b = Board()
    seq = b.publish("a", K, b"abc")
    b.tamper("a", K, lambda p: p.upper())
    rec = b.fetch("a", K)
    assert rec.payload == b"ABC" and rec.sequence == seq


def test_tamper_on_publish_applies_before_readers():
    b = Board()
    b.tamper_on_publish("a", K, lambda p: p[::-1])
    b.publish("a", K, b"abc")
    assert b.fetch("a", K).payload == b"cba"
    b.publish("b", K, b"abc")
    assert b.fetch("b", K).payload == b"abc"


def test_tamper_visible_over_tcp(tcp_board):
    client, server = tcp_board
    server.board.tamper_on_publish("a", K, lambda p: b"evil")
    client.publish("a", K, b"good")
    assert client.fetch("a", K).payload == b"evil"


def test_delete():
    b = Board()
    b.publish("a", K, b"x")
    b.delete("a", K)
    with pytest.raises(Missing):
        b.fetch("a", K)
    with pytest.raises(Missing):
        b.delete("a", K)


def test_log_records_traffic():
    b = Board()
    b.publish("a", K, b"x")
    b.fetch("a", K)
    lines = b.log_lines()
    assert any("publish" in line for line in lines) and any("fetch" in line for line in lines)


def test_concurrent_publishers_get_unique_sequences():
    b = Board()
    seqs = []
    lock = threading.Lock()

    def work(i):
        for j in range(50):
            s = b.publish(f"e{i}", K, bytes([j]))
            with lock:
                seqs.append(s)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(seqs) == list(range(1, 401))


def test_frame_round_trip():
    f = Frame(1, "a", "RpeEvidence", b"\x00\x01")
    assert Frame.decode(f.encode()[4:]) == f


@pytest.mark.parametrize("cut", [1, 3, 8])
def test_truncated_frame_rejected(cut):
    from sras.errors import TransportFailure

    body = Frame(1, "a", "RpeEvidence", b"payload").encode()[4:]
    with pytest.raises(TransportFailure):
        Frame.decode(body[:-cut])


@pytest.mark.parametrize("text, expected", [("127.0.0.1:7400", ("127.0.0.1", 7400)), ("localhost:1", ("localhost", 1))])
def test_parse_address(text, expected):
    assert parse_address(text) == expected


@pytest.mark.parametrize("text", ["nohost", "host:port", ":"])
def test_parse_address_rejects(text):
    with pytest.raises(ValueError):
        parse_address(text)
