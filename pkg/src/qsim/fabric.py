"""Rank-to-rank message passing with interchangeable transports.

Three endpoint flavors share one contract:
  - loopback: every rank is a worker thread in one process, channels are
    in-memory queues
  - tcp: one OS process per rank, full mesh of localhost sockets with
    little-endian 8-byte length-prefix framing
  - instrumented: wraps either of the above and records per-message
    exchange traffic for the performance model

Collectives (barrier, broadcast, allreduce, allgather) are built on the
pairwise primitive with recursive doubling, so a world of P = 2^k ranks
finishes every collective in k rounds and all transports produce
bit-identical results.
"""

from __future__ import annotations

import json
import queue
import socket
import struct
import threading
import time

import numpy as np

DEFAULT_TIMEOUT = 30.0
_MAX_FRAME = 1 << 40  # anything larger is a corrupt length prefix


class FabricError(RuntimeError):
    pass


class FabricTimeoutError(FabricError):
    pass


class FramingError(FabricError):
    pass


def _check_world_size(world_size: int) -> int:
    if world_size < 1 or world_size & (world_size - 1):
        raise ValueError("world size must be a power of two")
    return int(world_size).bit_length() - 1


class FabricEndpoint:
    """One rank's handle into a world of P = 2^k connected ranks.

    Subclasses provide `_sendrecv`; everything else is shared. An endpoint
    is confined to a single worker at a time.
    """

    kind = "abstract"

    def __init__(self, rank: int, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        self.hypercube_bits = _check_world_size(world_size)
        if not 0 <= rank < world_size:
            raise ValueError("rank out of range")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout

    # --- transport primitive -------------------------------------------

    def _sendrecv(self, peer: int, payload: bytes) -> bytes:
        raise NotImplementedError

    def close(self):
        pass

    # --- point-to-point -------------------------------------------------

    def exchange(self, peer: int, payload: bytes) -> bytes:
        """Symmetric swap: returns the peer's buffer. Both sides must send
        buffers of equal length."""
        if peer == self.rank:
            raise FabricError("exchange with self")
        if not 0 <= peer < self.world_size:
            raise FabricError(f"peer {peer} out of range")
        payload = bytes(payload)
        got = self._sendrecv(peer, payload)
        if len(got) != len(payload):
            raise FramingError(
                f"exchange length mismatch: sent {len(payload)} bytes, "
                f"received {len(got)}"
            )
        self._record_exchange(peer, len(payload))
        return got

    def _record_exchange(self, peer: int, nbytes: int):
        pass

    # --- collectives ------------------------------------------------------

    def barrier(self):
        """No rank returns before every rank has entered."""
        self._on_barrier()
        for j in range(self.hypercube_bits):
            peer = self.rank ^ (1 << j)
            try:
                self._sendrecv(peer, b"\x00")
            except FabricTimeoutError as e:
                raise FabricTimeoutError(
                    f"barrier timed out on rank {self.rank} waiting for rank {peer}"
                ) from e

    def _on_barrier(self):
        pass

    def broadcast(self, root: int, data: bytes) -> bytes:
        """Every rank returns root's buffer bit-exactly."""
        if not 0 <= root < self.world_size:
            raise FabricError(f"broadcast root {root} out of range")
        have = self.rank == root
        payload = bytes(data) if have else b""
        for j in range(self.hypercube_bits):
            peer = self.rank ^ (1 << j)
            got = self._sendrecv(peer, b"\x01" + payload if have else b"\x00")
            if not have and got[:1] == b"\x01":
                have, payload = True, got[1:]
        if not have:  # unreachable in a healthy hypercube
            raise FabricError("broadcast diffusion incomplete")
        return payload

    def allreduce_sum(self, values) -> np.ndarray:
        """Elementwise float64 sum across ranks; the combine order is fixed
        by rank index so every rank computes bit-identical results."""
        acc = np.array(values, dtype=np.float64).reshape(-1)
        for j in range(self.hypercube_bits):
            peer = self.rank ^ (1 << j)
            got = self._sendrecv(peer, acc.tobytes())
            if len(got) != acc.nbytes:
                raise FabricError("allreduce vector length mismatch")
            other = np.frombuffer(got, dtype=np.float64)
            acc = other + acc if peer < self.rank else acc + other
        return acc

    def allgather_bytes(self, blob: bytes) -> list[bytes]:
        """Every rank receives all ranks' blobs, ordered by rank."""
        items: dict[int, bytes] = {self.rank: bytes(blob)}
        for j in range(self.hypercube_bits):
            peer = self.rank ^ (1 << j)
            got = self._sendrecv(peer, _pack_items(items))
            items.update(_unpack_items(got))
        return [items[r] for r in range(self.world_size)]


def _pack_items(items: dict[int, bytes]) -> bytes:
    parts = [struct.pack("<I", len(items))]
    for r in sorted(items):
        blob = items[r]
        parts.append(struct.pack("<IQ", r, len(blob)))
        parts.append(blob)
    return b"".join(parts)


def _unpack_items(payload: bytes) -> dict[int, bytes]:
    (count,) = struct.unpack_from("<I", payload, 0)
    off = 4
    items = {}
    for _ in range(count):
        r, n = struct.unpack_from("<IQ", payload, off)
        off += 12
        items[r] = payload[off : off + n]
        off += n
    return items


# --------------------------------------------------------------------------
# loopback transport: worker threads + queues
# --------------------------------------------------------------------------


class LoopbackEndpoint(FabricEndpoint):
    kind = "loopback"

    def __init__(self, rank, world_size, channels, timeout=DEFAULT_TIMEOUT):
        super().__init__(rank, world_size, timeout)
        self._channels = channels

    def _sendrecv(self, peer: int, payload: bytes) -> bytes:
        self._channels[(self.rank, peer)].put(payload)
        try:
            return self._channels[(peer, self.rank)].get(timeout=self.timeout)
        except queue.Empty:
            raise FabricTimeoutError(
                f"rank {self.rank}: no message from rank {peer} "
                f"within {self.timeout}s"
            ) from None


# --------------------------------------------------------------------------
# tcp transport: one process per rank, full mesh on localhost
# --------------------------------------------------------------------------


def _send_frame(sock: socket.socket, payload: bytes):
    sock.sendall(struct.pack("<Q", len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(min(remaining, 1 << 20))
        except socket.timeout:
            raise FabricTimeoutError("socket receive timed out") from None
        if not chunk:
            raise FabricError("peer disconnected")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _recv_frame(sock: socket.socket) -> bytes:
    (length,) = struct.unpack("<Q", _recv_exact(sock, 8))
    if length > _MAX_FRAME:
        raise FramingError(f"implausible frame length {length}; corrupt prefix?")
    return _recv_exact(sock, int(length))


def _parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        raise ValueError(f"rendezvous address {address!r} is not host:port")
    return host, int(port)


class TcpEndpoint(FabricEndpoint):
    kind = "tcp"

    def __init__(self, rank, world_size, socks, timeout=DEFAULT_TIMEOUT):
        super().__init__(rank, world_size, timeout)
        self._socks = socks  # peer rank -> connected socket

    def _sendrecv(self, peer: int, payload: bytes) -> bytes:
        sock = self._socks[peer]
        # lower rank sends first; keeps large symmetric swaps deadlock-free
        if self.rank < peer:
            _send_frame(sock, payload)
            return _recv_frame(sock)
        got = _recv_frame(sock)
        _send_frame(sock, payload)
        return got

    def close(self):
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass


def _configure(sock: socket.socket, timeout: float) -> socket.socket:
    sock.settimeout(timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def _connect_with_retry(addr, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            return _configure(socket.create_connection(addr, timeout=timeout), timeout)
        except ConnectionRefusedError:
            if time.monotonic() >= deadline:
                raise FabricTimeoutError(
                    f"rendezvous at {addr[0]}:{addr[1]} timed out"
                ) from None
            time.sleep(0.02)


def _create_tcp_endpoint(rank, world_size, rendezvous, timeout) -> TcpEndpoint:
    host, port = _parse_address(rendezvous)
    socks: dict[int, socket.socket] = {}
    if world_size == 1:
        return TcpEndpoint(0, 1, socks, timeout)

    if rank == 0:
        server = socket.create_server((host, port))
        server.settimeout(timeout)
        try:
            pending = {}
            for _ in range(world_size - 1):
                try:
                    conn, _ = server.accept()
                except socket.timeout:
                    raise FabricTimeoutError(
                        "rendezvous timed out waiting for peers"
                    ) from None
                _configure(conn, timeout)
                (peer_rank,) = struct.unpack("<Q", _recv_exact(conn, 8))
                pending[int(peer_rank)] = (conn, _recv_frame(conn).decode())
            table = {str(r): addr for r, (_, addr) in pending.items()}
            blob = json.dumps(table, sort_keys=True).encode()
            for r, (conn, _) in pending.items():
                _send_frame(conn, blob)
                socks[r] = conn  # the rendezvous socket doubles as pair (0, r)
        finally:
            server.close()
        return TcpEndpoint(0, world_size, socks, timeout)

    listener = socket.create_server((host, 0))
    listener.settimeout(timeout)
    my_addr = f"{host}:{listener.getsockname()[1]}"
    conn0 = _connect_with_retry((host, port), timeout)
    conn0.sendall(struct.pack("<Q", rank))
    _send_frame(conn0, my_addr.encode())
    table = json.loads(_recv_frame(conn0).decode())
    socks[0] = conn0
    # deterministic mesh: connect to every lower nonzero rank, accept the rest
    for peer in range(1, rank):
        peer_host, peer_port = _parse_address(table[str(peer)])
        sock = _connect_with_retry((peer_host, peer_port), timeout)
        sock.sendall(struct.pack("<Q", rank))
        socks[peer] = sock
    try:
        for _ in range(world_size - 1 - rank):
            conn, _ = listener.accept()
            _configure(conn, timeout)
            (peer_rank,) = struct.unpack("<Q", _recv_exact(conn, 8))
            socks[int(peer_rank)] = conn
    except socket.timeout:
        raise FabricTimeoutError("mesh construction timed out") from None
    finally:
        listener.close()
    return TcpEndpoint(rank, world_size, socks, timeout)


# --------------------------------------------------------------------------
# traffic instrumentation
# --------------------------------------------------------------------------


class TrafficLog:
    """Byte counters for exchange() traffic. Collectives are not counted;
    only the state-exchange primitive feeds the performance model."""

    def __init__(self):
        self._lock = threading.Lock()
        self.pair_bytes: dict[tuple[int, int], int] = {}
        self.pair_messages: dict[tuple[int, int], int] = {}

    def record(self, src: int, dst: int, nbytes: int):
        with self._lock:
            self.pair_bytes[(src, dst)] = self.pair_bytes.get((src, dst), 0) + nbytes
            self.pair_messages[(src, dst)] = self.pair_messages.get((src, dst), 0) + 1

    @property
    def message_count(self) -> int:
        return sum(self.pair_messages.values())

    def bytes_sent(self, src: int | None = None, dst: int | None = None) -> int:
        return sum(
            n
            for (s, d), n in self.pair_bytes.items()
            if (src is None or s == src) and (dst is None or d == dst)
        )

    def bit_bytes(self, rank: int | None = None) -> dict[int, int]:
        """Bytes sent keyed by the hypercube bit the message crossed
        (bit = log2(src XOR dst)); one rank's view or the aggregate."""
        out: dict[int, int] = {}
        for (s, d), n in self.pair_bytes.items():
            if rank is not None and s != rank:
                continue
            bit = (s ^ d).bit_length() - 1
            out[bit] = out.get(bit, 0) + n
        return out

    def bit_messages(self, rank: int | None = None) -> dict[int, int]:
        out: dict[int, int] = {}
        for (s, d), n in self.pair_messages.items():
            if rank is not None and s != rank:
                continue
            bit = (s ^ d).bit_length() - 1
            out[bit] = out.get(bit, 0) + n
        return out


class InstrumentedEndpoint(FabricEndpoint):
    """Wrapper that records exchange traffic and (optionally) barrier
    events while delegating all transport work to the inner endpoint."""

    def __init__(self, inner: FabricEndpoint, log: TrafficLog | None = None,
                 events: list | None = None):
        super().__init__(inner.rank, inner.world_size, inner.timeout)
        self.inner = inner
        self.traffic = log if log is not None else TrafficLog()
        self.events = events
        self.kind = f"instrumented-{inner.kind}"

    def _sendrecv(self, peer: int, payload: bytes) -> bytes:
        return self.inner._sendrecv(peer, payload)

    def _record_exchange(self, peer: int, nbytes: int):
        self.traffic.record(self.rank, peer, nbytes)

    def _on_barrier(self):
        if self.events is not None:
            self.events.append(("barrier", self.rank))

    def close(self):
        self.inner.close()


def instrument_world(endpoints, log: TrafficLog | None = None,
                     events: list | None = None):
    """Wrap a list of endpoints with one shared TrafficLog."""
    log = log if log is not None else TrafficLog()
    return [InstrumentedEndpoint(ep, log, events) for ep in endpoints], log


# --------------------------------------------------------------------------
# world construction and SPMD driving
# --------------------------------------------------------------------------


def create_world(
    kind: str,
    world_size: int,
    rendezvous: str | None = None,
    rank: int | None = None,
    timeout: float = DEFAULT_TIMEOUT,
):
    """loopback -> list of P endpoints (run them on P workers);
    tcp -> this process's single endpoint (requires rendezvous and rank)."""
    _check_world_size(world_size)
    if kind == "loopback":
        channels = {
            (i, j): queue.Queue()
            for i in range(world_size)
            for j in range(world_size)
            if i != j
        }
        return [
            LoopbackEndpoint(r, world_size, channels, timeout)
            for r in range(world_size)
        ]
    if kind == "tcp":
        if rendezvous is None or rank is None:
            raise ValueError("tcp worlds need a rendezvous address and a rank")
        return _create_tcp_endpoint(rank, world_size, rendezvous, timeout)
    raise ValueError(f"unknown fabric kind {kind!r}")


def run_spmd(endpoints, fn) -> list:
    """Run fn(ep) on one thread per rank; join all; re-raise the first
    failure. The standard driver for loopback worlds."""
    results = [None] * len(endpoints)
    failures: list[tuple[int, BaseException]] = []
    lock = threading.Lock()

    def worker(i, ep):
        try:
            results[i] = fn(ep)
        except BaseException as e:  # surfaced after join
            with lock:
                failures.append((i, e))

    threads = [
        threading.Thread(target=worker, args=(i, ep), name=f"rank-{ep.rank}")
        for i, ep in enumerate(endpoints)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        failures.sort(key=lambda f: f[0])
        raise failures[0][1]
    return results
