"""Distributed mode: the runtime state machines over TCP.

The server runs one reader thread per connection; readers only decode frames
and hand ``(connection, message)`` pairs to a queue drained by the single
event loop that owns the :class:`~fedtune.runtime.Server`.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
from collections.abc import Callable

from fedtune.config import CourseConfig
from fedtune.data import ClientDataset, Corpus
from fedtune.errors import FedTuneError, ProtocolError, TransportError
from fedtune.runtime import Client, CourseHistory, CourseInputs, Server, prepare
from fedtune.wire import SERVER_ID, Kind, Message, read_frame, write_frame

log = logging.getLogger(__name__)

_CLOSED = object()


def _reader(conn: socket.socket, inbox: queue.Queue) -> None:
    try:
        while True:
            inbox.put((conn, read_frame(conn)))
    except (FedTuneError, OSError) as exc:
        inbox.put((conn, exc))


def serve_distributed(cfg: CourseConfig, inputs: CourseInputs, listener: socket.socket,
                      on_frame: Callable[[int, Message], None] | None = None) -> CourseHistory:
    """Serve one course on an already-bound, listening socket.

    ``on_frame(dest, msg)`` sees every frame the server receives (``dest`` 0)
    or sends, for wire-capture tests.
    """
    cfg.validate()
    expected = {s.client_id for s in inputs.shards}
    server = Server(cfg, inputs.model, inputs.test, expected)
    inbox: queue.Queue = queue.Queue()
    conns: dict[int, socket.socket] = {}
    stop = threading.Event()

    def accept_loop():
        listener.settimeout(0.2)
        while not stop.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            threading.Thread(target=_reader, args=(conn, inbox), daemon=True).start()

    acceptor = threading.Thread(target=accept_loop, daemon=True)
    acceptor.start()

    def send(k: int, msg: Message) -> None:
        if on_frame is not None:
            on_frame(k, msg)
        write_frame(conns[k], msg)

    try:
        while not server.done:
            try:
                conn, item = inbox.get(timeout=cfg.timeout)
            except queue.Empty:
                missing = sorted(expected - set(conns)) or sorted(expected - set(server.received))
                raise TransportError(f"timed out after {cfg.timeout}s in round {server.round} "
                                     f"waiting for clients {missing}") from None
            if isinstance(item, Exception):
                if conn in conns.values():
                    raise TransportError(f"client connection failed: {item}")
                conn.close()
                continue
            msg = item
            if on_frame is not None:
                on_frame(SERVER_ID, msg)
            k = msg.sender
            if conns.get(k) is not conn:
                # handshake: unknown connections must join with a fresh, non-zero id
                reason = None
                if k == SERVER_ID:
                    reason = "client id 0 is reserved for the server"
                elif k in conns:
                    reason = f"duplicate client id {k}"
                elif k not in expected:
                    reason = f"unexpected client id {k}"
                elif msg.kind != Kind.EVAL_REPORT or msg.record().get("event") != "join":
                    reason = "first message must be a join report"
                if reason is not None:
                    log.warning("rejecting connection: %s", reason)
                    try:
                        write_frame(conn, server.reject(k, reason))
                    except TransportError:
                        pass
                    conn.close()
                    continue
                conns[k] = conn
            for dest, out in server.handle(msg):
                send(dest, out)
    except FedTuneError as exc:
        server._record(server.round)
        server.history.failed = True
        server.history.failure = f"{type(exc).__name__}: {exc}"
        exc.history = server.history
        raise
    finally:
        stop.set()
        for c in conns.values():
            try:
                c.close()
            except OSError:
                pass
        acceptor.join(timeout=1.0)
    return server.history


def client_connect(address, cid: int, shard: ClientDataset, cfg: CourseConfig, test: Corpus | None = None,
                   on_frame: Callable[[int, Message], None] | None = None) -> Client:
    """Run one client to completion against a server at ``address``; returns the final client state."""
    client = Client(cid, shard, cfg, test)
    try:
        sock = socket.create_connection(address, timeout=cfg.timeout)
    except OSError as exc:
        raise TransportError(f"cannot reach server at {address}: {exc}") from exc
    # training between frames can take a while; only the server enforces the round timeout
    sock.settimeout(None)
    with sock:
        write_frame(sock, client.join_message())
        while not client.done:
            try:
                msg = read_frame(sock)
            except OSError as exc:
                raise TransportError(f"client {cid}: {exc}") from exc
            if msg.kind == Kind.FINISH and "error" in msg.record():
                raise ProtocolError(f"server rejected client {cid}: {msg.record()['error']}")
            for out in client.handle(msg):
                if on_frame is not None:
                    on_frame(SERVER_ID, out)
                write_frame(sock, out)
    return client


def run_loopback(cfg: CourseConfig, inputs: CourseInputs | None = None, *, host: str = "127.0.0.1",
                 on_frame=None, skip_clients=()) -> CourseHistory:
    """Server plus one thread per client over loopback TCP.

    ``skip_clients`` lists ids that never connect (timeout tests).
    """
    inputs = inputs or prepare(cfg)
    listener = socket.create_server((host, 0))
    address = listener.getsockname()[:2]
    errors: dict[int, BaseException] = {}

    def run_client(shard):
        try:
            client_connect(address, shard.client_id, shard, cfg, inputs.test)
        except BaseException as exc:  # reported via the server outcome
            errors[shard.client_id] = exc

    threads = [threading.Thread(target=run_client, args=(s,), daemon=True)
               for s in inputs.shards if s.client_id not in set(skip_clients)]
    for t in threads:
        t.start()
    try:
        hist = serve_distributed(cfg, inputs, listener, on_frame=on_frame)
    finally:
        listener.close()
    for t in threads:
        t.join(timeout=cfg.timeout)
    if errors:
        k = min(errors)
        raise TransportError(f"client {k} failed: {errors[k]}")
    return hist
