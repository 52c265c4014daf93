"""Networked rounds over the framed protocol in :mod:`fedsim.wire`.

The server pushes each global model to every joined client, waits for all C
updates (no partial aggregation), aggregates in client_id order and repeats.
Any protocol violation or timeout aborts the whole run.
"""

from __future__ import annotations

import logging
import socket
import time
from dataclasses import dataclass
from typing import Callable

from .fedavg import (Client, ClientFailure, ClientUpdate, FedRun, GlobalModel, RoundReport,
                     check_target, client_update, finish_round)
from .model import LabeledDataset, ParamVector, evaluate_accuracy
from .wire import (DTYPE_F64, GlobalModelMsg, LocalUpdateMsg, MsgType, WireError,
                   decode_client_id, encode_client_id, frame, read_frame)

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class SessionError(RuntimeError):
    pass


class SessionTimeout(SessionError):
    pass


class SessionAborted(SessionError):
    """The peer sent an Abort frame."""


class ProtocolViolation(SessionError):
    pass


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.stream = sock.makefile("rb")
        self.client_id: int | None = None

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        self.sock.sendall(frame(msg_type, payload))

    def recv(self, deadline: float) -> tuple[MsgType, bytes]:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise SessionTimeout("deadline passed")
        self.sock.settimeout(remaining)
        try:
            return read_frame(self.stream)
        except (socket.timeout, TimeoutError) as exc:
            raise SessionTimeout(f"no frame from client {self.client_id} in time") from exc

    def abort(self, reason: str) -> None:
        try:
            self.send(MsgType.ABORT, reason.encode("utf-8"))
        except OSError:
            pass

    def close(self) -> None:
        for closer in (self.stream.close, self.sock.close):
            try:
                closer()
            except OSError:
                pass


def parse_address(text: str, default_port: int = 7070) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    return host or "127.0.0.1", int(port)


@dataclass
class ServerConfig:
    num_clients: int
    target_metric: float = 0.80
    max_rounds: int = 200
    timeout: float = DEFAULT_TIMEOUT
    dtype: int = DTYPE_F64


def _join_phase(listener: socket.socket, cfg: ServerConfig) -> dict[int, _Conn]:
    joined: dict[int, _Conn] = {}
    deadline = time.monotonic() + cfg.timeout
    while len(joined) < cfg.num_clients:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise SessionTimeout(f"only {len(joined)} of {cfg.num_clients} clients joined "
                                 f"within {cfg.timeout:g}s")
        listener.settimeout(remaining)
        try:
            sock, addr = listener.accept()
        except (socket.timeout, TimeoutError):
            continue
        conn = _Conn(sock)
        try:
            msg_type, payload = conn.recv(deadline)
            if msg_type != MsgType.JOIN_REQUEST:
                raise ProtocolViolation(f"expected JoinRequest, got {msg_type.name}")
            cid = decode_client_id(payload)
        except (WireError, SessionError, OSError) as exc:
            log.warning("rejecting connection from %s: %s", addr, exc)
            conn.abort(str(exc))
            conn.close()
            continue
        if cid in joined:
            log.warning("duplicate client_id %d from %s", cid, addr)
            conn.abort(f"duplicate client_id {cid}")
            conn.close()
            continue
        conn.client_id = cid
        conn.send(MsgType.JOIN_ACCEPT, encode_client_id(cid))
        joined[cid] = conn
        log.info("client %d joined (%d/%d)", cid, len(joined), cfg.num_clients)
    return joined


def server_session(listener: socket.socket, cfg: ServerConfig, eval_set: LabeledDataset,
                   initial: ParamVector,
                   on_report: Callable[[RoundReport], None] | None = None) -> FedRun:
    """Run the server side of a full experiment on an already-bound listener."""
    check_target(cfg.target_metric)
    joined: dict[int, _Conn] = {}
    try:
        joined = _join_phase(listener, cfg)
        order = sorted(joined)
        g = GlobalModel(0, initial, evaluate_accuracy(initial, eval_set))
        start = g
        reports: list[RoundReport] = []
        while g.metric < cfg.target_metric and g.round < cfg.max_rounds:
            msg = GlobalModelMsg(g.round, g.metric, g.params).encode(cfg.dtype)
            for cid in order:
                joined[cid].send(MsgType.GLOBAL_MODEL, msg)
            deadline = time.monotonic() + cfg.timeout
            updates = []
            for cid in order:
                updates.append(_collect(joined[cid], g.round, deadline))
            g, report = finish_round(g, updates, eval_set, cfg.target_metric)
            reports.append(report)
            if on_report:
                on_report(report)
        final = GlobalModelMsg(g.round, g.metric, g.params).encode(cfg.dtype)
        for cid in order:
            joined[cid].send(MsgType.TARGET_REACHED, final)
        return FedRun(start, g, reports, cfg.target_metric)
    except (SessionError, WireError, OSError) as exc:
        for conn in joined.values():
            conn.abort(str(exc))
        if isinstance(exc, SessionError):
            raise
        raise SessionError(f"session failed: {exc}") from exc
    finally:
        for conn in joined.values():
            conn.close()


def _collect(conn: _Conn, round_index: int, deadline: float) -> ClientUpdate:
    msg_type, payload = conn.recv(deadline)
    if msg_type == MsgType.ABORT:
        raise SessionAborted(f"client {conn.client_id} aborted: "
                             f"{payload.decode('utf-8', 'replace')}")
    if msg_type != MsgType.LOCAL_UPDATE:
        raise ProtocolViolation(f"client {conn.client_id} sent {msg_type.name}, "
                                "expected LocalUpdate")
    msg = LocalUpdateMsg.decode(payload)
    if msg.round != round_index:
        raise ProtocolViolation(f"stale update from client {conn.client_id}: "
                                f"round {msg.round}, expected {round_index}")
    if msg.client_id != conn.client_id:
        raise ProtocolViolation(f"connection of client {conn.client_id} sent an update "
                                f"for client {msg.client_id}")
    if msg.n_k < 1:
        raise ProtocolViolation(f"client {conn.client_id} reported n_k = 0")
    return ClientUpdate(msg.client_id, msg.n_k, msg.params, msg.local_metric)


def _connect(address: tuple[str, int], timeout: float) -> socket.socket:
    # the server may still be starting; keep retrying a refused connection until the deadline
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection(address, timeout=max(deadline - time.monotonic(), 0.01))
        except ConnectionRefusedError:
            if time.monotonic() + 0.05 >= deadline:
                raise
            time.sleep(0.05)


def client_session(address: tuple[str, int], client: Client, timeout: float = DEFAULT_TIMEOUT,
                   dtype: int = DTYPE_F64) -> GlobalModel:
    """Join a server, train every round it broadcasts, return the final model.

    ``client.best`` holds the locally best candidate afterwards.
    """
    conn = _Conn(_connect(address, timeout))
    conn.client_id = client.client_id
    try:
        conn.send(MsgType.JOIN_REQUEST, encode_client_id(client.client_id))
        msg_type, payload = conn.recv(time.monotonic() + timeout)
        if msg_type == MsgType.ABORT:
            raise SessionAborted(payload.decode("utf-8", "replace"))
        if msg_type != MsgType.JOIN_ACCEPT or decode_client_id(payload) != client.client_id:
            raise ProtocolViolation(f"expected JoinAccept, got {msg_type.name}")
        while True:
            msg_type, payload = conn.recv(time.monotonic() + timeout)
            if msg_type == MsgType.ABORT:
                raise SessionAborted(payload.decode("utf-8", "replace"))
            if msg_type == MsgType.TARGET_REACHED:
                m = GlobalModelMsg.decode(payload)
                client.consider(m.params, evaluate_accuracy(m.params, client.data))
                return GlobalModel(m.round, m.params, m.metric)
            if msg_type != MsgType.GLOBAL_MODEL:
                raise ProtocolViolation(f"unexpected {msg_type.name} from server")
            m = GlobalModelMsg.decode(payload)
            try:
                up = client_update(client, GlobalModel(m.round, m.params, m.metric))
            except ClientFailure as exc:
                conn.abort(str(exc))
                raise
            conn.send(MsgType.LOCAL_UPDATE,
                      LocalUpdateMsg(m.round, up.client_id, up.n_k, up.local_metric,
                                     up.params).encode(dtype))
    finally:
        conn.close()
