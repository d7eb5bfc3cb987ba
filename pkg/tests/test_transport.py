import socket

import pytest

from styx_mini.transport import (CorruptRecordError, Envelope, FaultEvent, FaultInjector,
                                 MsgType, Network, OffsetOutOfRange, ReplayableLog,
                                 SocketChannel, TransportError)


class TestLog:
    def test_repeatable_reads(self):
        log = ReplayableLog(2)
        for i in range(5):
            assert log.append(1, bytes([i])) == i
        assert list(log.read_from(1, 3)) == [(3, b"\x03"), (4, b"\x04")]
        assert list(log.read_from(1, 3)) == list(log.read_from(1, 3))
        assert list(log.read_from(0, 0)) == []

    def test_offset_out_of_range(self):
        log = ReplayableLog(1)
        with pytest.raises(OffsetOutOfRange):
            list(log.read_from(0, 1))
        with pytest.raises(OffsetOutOfRange):
            log.get(0, 0)

    def test_bad_partition(self):
        with pytest.raises(TransportError):
            ReplayableLog(1).append(3, b"")

    def test_file_backed_with_torn_tail(self, tmp_path):
        log = ReplayableLog(1, tmp_path)
        log.append(0, b"one")
        log.append(0, b"two")
        with open(tmp_path / "p0.log", "ab") as fh:
            fh.write(ReplayableLog.encode_record(b"three")[:-2])
        again = ReplayableLog(1, tmp_path)
        assert [r for _, r in again.read_from(0, 0)] == [b"one", b"two"]
        assert again.append(0, b"x") == 2


class TestEnvelope:
    def test_round_trip(self):
        e = Envelope(MsgType.FN_CALL, 3, 77, b"payload")
        assert Envelope.decode(e.encode()) == e

    def test_crc_mismatch(self):
        data = bytearray(Envelope(MsgType.CTRL, 0, 0, b"abc").encode())
        data[-5] ^= 0xFF
        with pytest.raises(CorruptRecordError):
            Envelope.decode(bytes(data))

    def test_length_mismatch(self):
        with pytest.raises(CorruptRecordError):
            Envelope.decode(Envelope(MsgType.CTRL, 0, 0, b"abc").encode() + b"x")


class TestNetwork:
    def _fill(self, net):
        for i in range(20):
            net.send(i % 3, 9, Envelope(MsgType.FN_CALL, 0, i, b""))

    def test_fifo_per_channel_and_seeded(self):
        orders = []
        for _ in range(2):
            net = Network(7)
            self._fill(net)
            got = []
            while (item := net.deliver_one()) is not None:
                got.append((item[0], item[2].txn))
            orders.append(got)
            for src in range(3):
                txns = [t for s, t in got if s == src]
                assert txns == sorted(txns)
        assert orders[0] == orders[1]
        net = Network(8)
        self._fill(net)
        other = []
        while (item := net.deliver_one()) is not None:
            other.append((item[0], item[2].txn))
        assert other != orders[0]

    def test_dead_and_broken(self):
        net = Network()
        net.dead.add(1)
        net.send(1, 2, Envelope(MsgType.CTRL, 0, 0, b""))
        net.send(2, 1, Envelope(MsgType.CTRL, 0, 0, b""))
        assert net.pending() == 1 and net.deliver_one() is None
        net.broken.add(3)
        net.send(2, 3, Envelope(MsgType.CTRL, 0, 0, b""))
        assert net.pending() == 1
        assert net.drop_node(1) == 1 and net.pending() == 0

    def test_stats(self):
        net = Network()
        net.label = "e0:x"
        net.send(1, 1, Envelope(MsgType.ACK_SHARE, 0, 0, b""))
        net.send(1, 2, Envelope(MsgType.ACK_SHARE, 0, 0, b""))
        assert net.count("ACK_SHARE", "e0:x", "remote") == 1
        assert net.count("ACK_SHARE") == 2


class TestFaults:
    def test_event_validation(self):
        with pytest.raises(ValueError):
            FaultEvent("explode", 1, step=1)
        with pytest.raises(ValueError):
            FaultEvent("crash_worker", 1)
        with pytest.raises(ValueError):
            FaultEvent("crash_worker", 1, step=1, at="e0:p3_done")

    def test_step_and_point(self):
        inj = FaultInjector([FaultEvent("crash_worker", 1, step=5),
                             FaultEvent("crash_worker", 2, at="e1:p3_done", offset=3)])
        assert inj.due_at_step(4) == []
        assert [e.worker for e in inj.due_at_step(5)] == [1]
        assert inj.due_at_step(6) == []
        assert inj.hit_point("e1:p3_done", 10) == []
        assert [e.worker for e in inj.due_at_step(13)] == [2]

    def test_from_toml(self, tmp_path):
        p = tmp_path / "f.toml"
        p.write_text('[[fault]]\naction = "crash_worker"\nworker = 2\nat = "e3:roots_done"\n')
        (ev,) = FaultInjector.from_toml(p).events
        assert (ev.action, ev.worker, ev.at) == ("crash_worker", 2, "e3:roots_done")

    def test_socket_mode_rejects_faults(self):
        with pytest.raises(TransportError):
            FaultInjector(socket_mode=True).inject_fault(FaultEvent("crash_worker", 1, step=0))


def test_socket_channel_round_trip():
    a, b = socket.socketpair()
    ca, cb = SocketChannel(a), SocketChannel(b)
    try:
        env = Envelope(MsgType.FN_RESP, 1, 2, b"x" * 100_000)
        ca.send(env)
        assert cb.recv() == env
        with pytest.raises(TransportError):
            cb.inject_fault(FaultEvent("crash_worker", 1, step=0))
        ca.close()
        with pytest.raises(TransportError):
            cb.recv()
    finally:
        cb.close()
