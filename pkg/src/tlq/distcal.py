"""Memory-decoupled distributed calibration.

The layer-wise search is split across workers by role: the infer worker
(worker 0, also the coordinator) owns the stack and the activation streams
and produces every layer output; a scale worker receives the per-layer
activation statistic, recomputes the winning scale, and fixes the ratio; a
loss worker holds the full-precision reference output and scores each grid
point's quantized output as it arrives. Scale and loss tasks go to the
capable worker with the lowest ledgered memory at dispatch time.

Memory is tracked by an explicit byte ledger rather than the host
allocator: the quantities under test are tensor footprints per worker, and
a ledger makes the per-role peak decomposition exactly checkable at desk
scale. Tensors are ledgered where the protocol holds them; transfers free
the sender account when a send completes and charge the receiver when the
message is consumed. Every worker frees its per-layer state before its
final send for the layer, so all accounts are settled whenever the
coordinator makes a scheduling decision, which keeps runs deterministic.

The numeric kernels are the same functions the single-context calibrator
uses, on bit-identical tensors (float64 survives the wire exactly), so the
distributed result equals the single-context result bit for bit.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .calibration import (
    CalibrationResult,
    CalibrationWalk,
    LayerCalibration,
    RatioGrid,
    WalkObserver,
    _batch_fp,
    _batch_quant,
    compute_token_selections,
    layer_loss,
    layer_stat,
    scale_for,
    select_ratio,
)
from .errors import ConfigError, LedgerError, ProtocolError
from .layers import LayerStack
from .model import ProxyLossSpec
from .quantizer import QuantConfig
from .smoothing import power_scale

ROLES = ("infer", "scale", "loss")
TRANSPORTS = ("in_process", "sockets")


@dataclass(frozen=True)
class WorkerId:
    id: int
    roles: frozenset

    def __post_init__(self):
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise ConfigError(f"unknown worker roles {sorted(bad)}")


def default_workers(count: int) -> tuple[WorkerId, ...]:
    """Worker 0 infers; every other worker can compute scales and losses."""
    if count < 2:
        raise ConfigError(f"distributed calibration needs >= 2 workers, got {count}")
    out = [WorkerId(0, frozenset({"infer"}))]
    out += [WorkerId(i, frozenset({"scale", "loss"})) for i in range(1, count)]
    return tuple(out)


# --- memory ledger -------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEvent:
    tick: int  # per-worker logical timestamp
    delta: int  # signed bytes
    tag: str


@dataclass
class _Account:
    current: int = 0
    peak: int = 0
    tick: int = 0
    events: list = field(default_factory=list)


class MemoryLedger:
    """Per-worker byte accounting with peak tracking.

    Thread safe; event timestamps are per-worker logical counters so event
    logs are deterministic regardless of thread interleaving.
    """

    def __init__(self, worker_ids: Iterable[int]):
        self._lock = threading.Lock()
        self._accounts = {int(w): _Account() for w in worker_ids}
        if not self._accounts:
            raise ConfigError("ledger needs at least one worker")

    def _account(self, worker) -> _Account:
        wid = worker.id if isinstance(worker, WorkerId) else int(worker)
        try:
            return self._accounts[wid]
        except KeyError:
            raise LedgerError(f"unknown worker {wid}") from None

    def alloc(self, worker, nbytes: int, tag: str) -> None:
        if nbytes <= 0:
            raise LedgerError(f"allocation must be > 0 bytes, got {nbytes} ({tag})")
        with self._lock:
            acc = self._account(worker)
            acc.current += int(nbytes)
            acc.peak = max(acc.peak, acc.current)
            acc.tick += 1
            acc.events.append(LedgerEvent(acc.tick, int(nbytes), tag))

    def free(self, worker, nbytes: int, tag: str) -> None:
        if nbytes <= 0:
            raise LedgerError(f"free must be > 0 bytes, got {nbytes} ({tag})")
        with self._lock:
            acc = self._account(worker)
            if nbytes > acc.current:
                raise LedgerError(
                    f"over-free of {nbytes} bytes ({tag}): worker holds {acc.current}"
                )
            acc.current -= int(nbytes)
            acc.tick += 1
            acc.events.append(LedgerEvent(acc.tick, -int(nbytes), tag))

    def current(self, worker) -> int:
        with self._lock:
            return self._account(worker).current

    def peak(self, worker) -> int:
        with self._lock:
            return self._account(worker).peak

    def events(self, worker) -> tuple[LedgerEvent, ...]:
        with self._lock:
            return tuple(self._account(worker).events)

    def workers(self) -> tuple[int, ...]:
        return tuple(sorted(self._accounts))


def ledger_alloc(ledger: MemoryLedger, worker, nbytes: int, tag: str) -> None:
    ledger.alloc(worker, nbytes, tag)


def ledger_free(ledger: MemoryLedger, worker, nbytes: int, tag: str) -> None:
    ledger.free(worker, nbytes, tag)


def schedule_to_least_loaded(ledger: MemoryLedger, candidates: Sequence[WorkerId]) -> WorkerId:
    """Candidate with the smallest current footprint; ties go to the lowest id."""
    pool = list(candidates)
    if not pool:
        raise ConfigError("no candidate workers to schedule")
    return min(pool, key=lambda w: (ledger.current(w), w.id))


def baseline_peak(
    model_dims: tuple[int, int],
    batch_dims: tuple[int, int],
    precision_bytes: int = 8,
    overhead_coeff: float = 1.0,
) -> int:
    """Single-context peak for one layer's calibration step.

    input + FP output + quantized output + weight matrix + workspace
    proportional to the input (coefficient configurable).
    """
    c_in, c_out = model_dims
    b, n = batch_dims
    if min(c_in, c_out, b, n, precision_bytes) <= 0:
        raise ConfigError("baseline_peak dims must be positive")
    x = b * n * c_in * precision_bytes
    y = b * n * c_out * precision_bytes
    layer = c_in * c_out * precision_bytes
    return int(round(x + 2 * y + layer + overhead_coeff * x))


# --- messages and wire format ---------------------------------------------------

MSG_KINDS = ("layer_output", "stat_request", "loss_report", "ratio_fixed", "done", "abort")

_KIND_CODES = {k: i + 1 for i, k in enumerate(MSG_KINDS)}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class CalMessage:
    kind: str
    sender: int
    receiver: int
    seq: int = -1  # assigned by the transport when sent
    layer: int | None = None
    stream: str | None = None  # "fp" | "q" for layer_output
    ratio: float | None = None
    tensor: np.ndarray | None = None
    loss: float | None = None
    curve: tuple | None = None  # ratio_fixed carries the full loss curve
    peer: int | None = None  # stat_request: loss worker; layer_output fp: scale worker
    count: int | None = None  # grid length, so receivers know how much to expect
    reason: str | None = None  # abort


def _encode_tensor(t: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(t, dtype="<f8").tobytes()
    head = struct.pack("<B", t.ndim) + b"".join(struct.pack("<I", d) for d in t.shape)
    return head + struct.pack("<I", zlib.crc32(payload)) + payload


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError(f"frame truncated at byte {self.pos + n}/{len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_tensor(c: _Cursor) -> np.ndarray:
    (ndim,) = c.unpack("<B")
    shape = tuple(c.unpack("<I")[0] for _ in range(ndim))
    (crc,) = c.unpack("<I")
    n = int(np.prod(shape)) if shape else 1
    payload = c.take(8 * n)
    if zlib.crc32(payload) != crc:
        raise ProtocolError("tensor checksum mismatch")
    return np.frombuffer(payload, dtype="<f8").copy().reshape(shape)


def encode_message(msg: CalMessage) -> bytes:
    body = [struct.pack("<BHHQ", _KIND_CODES[msg.kind], msg.sender, msg.receiver, msg.seq)]
    if msg.kind == "layer_output":
        stream_code = 0 if msg.stream == "fp" else 1
        ratio = float("nan") if msg.ratio is None else msg.ratio
        body.append(
            struct.pack("<IBHId", msg.layer, stream_code, msg.peer or 0, msg.count or 0, ratio)
        )
        body.append(_encode_tensor(msg.tensor))
    elif msg.kind == "stat_request":
        body.append(struct.pack("<IHI", msg.layer, msg.peer, msg.count))
        body.append(_encode_tensor(msg.tensor))
    elif msg.kind == "loss_report":
        body.append(struct.pack("<Idd", msg.layer, msg.ratio, msg.loss))
    elif msg.kind == "ratio_fixed":
        body.append(struct.pack("<Id", msg.layer, msg.ratio))
        body.append(_encode_tensor(msg.tensor))
        body.append(struct.pack("<I", len(msg.curve)))
        for r, loss in msg.curve:
            body.append(struct.pack("<dd", r, loss))
    elif msg.kind == "done":
        pass
    elif msg.kind == "abort":
        raw = (msg.reason or "").encode("utf-8")
        body.append(struct.pack("<H", len(raw)) + raw)
    else:
        raise ProtocolError(f"cannot encode message kind {msg.kind!r}")
    blob = b"".join(body)
    return struct.pack("<I", len(blob)) + blob


def decode_message(blob: bytes) -> CalMessage:
    c = _Cursor(blob)
    code, sender, receiver, seq = c.unpack("<BHHQ")
    if code not in _KIND_NAMES:
        raise ProtocolError(f"unknown message kind code {code}")
    kind = _KIND_NAMES[code]
    msg = CalMessage(kind, sender, receiver, seq)
    if kind == "layer_output":
        layer, stream_code, peer, count, ratio = c.unpack("<IBHId")
        tensor = _decode_tensor(c)
        msg = replace(
            msg,
            layer=layer,
            stream="fp" if stream_code == 0 else "q",
            peer=peer,
            count=count,
            ratio=None if np.isnan(ratio) else ratio,
            tensor=tensor,
        )
    elif kind == "stat_request":
        layer, peer, count = c.unpack("<IHI")
        msg = replace(msg, layer=layer, peer=peer, count=count, tensor=_decode_tensor(c))
    elif kind == "loss_report":
        layer, ratio, loss = c.unpack("<Idd")
        msg = replace(msg, layer=layer, ratio=ratio, loss=loss)
    elif kind == "ratio_fixed":
        layer, ratio = c.unpack("<Id")
        tensor = _decode_tensor(c)
        (n,) = c.unpack("<I")
        curve = tuple(c.unpack("<dd") for _ in range(n))
        msg = replace(msg, layer=layer, ratio=ratio, tensor=tensor, curve=curve)
    elif kind == "abort":
        (n,) = c.unpack("<H")
        msg = replace(msg, reason=c.take(n).decode("utf-8"))
    if c.pos != len(blob):
        raise ProtocolError(f"frame has {len(blob) - c.pos} trailing bytes")
    return msg


def message_envelope_bytes(msg: CalMessage) -> int:
    """Serialized size of a message, the slack unit for peak-memory bounds."""
    return len(encode_message(msg))


# --- transports -----------------------------------------------------------------


class _BaseTransport:
    """Point-to-point ordered channels with per-channel sequence numbers."""

    def __init__(self, worker_ids: Sequence[int]):
        self.worker_ids = tuple(worker_ids)
        self._send_seq: dict[tuple[int, int], int] = {}
        self._recv_seq: dict[tuple[int, int], int] = {}

    def _next_seq(self, src: int, dst: int) -> int:
        seq = self._send_seq.get((src, dst), -1) + 1
        self._send_seq[(src, dst)] = seq
        return seq

    def _check_seq(self, msg: CalMessage) -> None:
        key = (msg.sender, msg.receiver)
        last = self._recv_seq.get(key, -1)
        if msg.seq <= last:
            raise ProtocolError(
                f"out-of-order message on channel {key}: seq {msg.seq} after {last}"
            )
        self._recv_seq[key] = msg.seq

    def send(self, msg: CalMessage) -> None:
        raise NotImplementedError

    def recv(self, receiver: int, sender: int, timeout: float) -> CalMessage:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InProcessTransport(_BaseTransport):
    """Queue-backed channels; messages cross as objects, without serialization."""

    def __init__(self, worker_ids: Sequence[int]):
        super().__init__(worker_ids)
        self._queues = {
            (a, b): queue.SimpleQueue() for a in worker_ids for b in worker_ids if a != b
        }

    def send(self, msg: CalMessage) -> None:
        seq = self._next_seq(msg.sender, msg.receiver)
        self._queues[(msg.sender, msg.receiver)].put(replace(msg, seq=seq))

    def recv(self, receiver: int, sender: int, timeout: float) -> CalMessage:
        try:
            msg = self._queues[(sender, receiver)].get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError(
                f"timeout waiting for worker {sender} (receiver {receiver})"
            ) from None
        self._check_seq(msg)
        if msg.kind == "abort":
            raise ProtocolError(f"worker {msg.sender} aborted: {msg.reason}")
        return msg


class SocketTransport(_BaseTransport):
    """Local stream sockets carrying length-prefixed frames.

    Every worker pair gets one full-duplex socketpair, so tensors really
    cross a byte stream with checksums, mirroring a multi-process setup.
    """

    def __init__(self, worker_ids: Sequence[int]):
        super().__init__(worker_ids)
        self._ends: dict[tuple[int, int], socket.socket] = {}
        for i, a in enumerate(worker_ids):
            for b in worker_ids[i + 1 :]:
                end_a, end_b = socket.socketpair()
                self._ends[(a, b)] = end_a  # a's endpoint for peer b
                self._ends[(b, a)] = end_b

    def send(self, msg: CalMessage) -> None:
        seq = self._next_seq(msg.sender, msg.receiver)
        frame = encode_message(replace(msg, seq=seq))
        self._ends[(msg.sender, msg.receiver)].sendall(frame)

    def _read_exact(self, sock: socket.socket, n: int, who: str) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = sock.recv(remaining)
            except TimeoutError:
                raise ProtocolError(f"timeout waiting for {who}") from None
            if not chunk:
                raise ProtocolError(f"connection closed while waiting for {who}")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self, receiver: int, sender: int, timeout: float) -> CalMessage:
        sock = self._ends[(receiver, sender)]
        sock.settimeout(timeout)
        who = f"worker {sender} (receiver {receiver})"
        (length,) = struct.unpack("<I", self._read_exact(sock, 4, who))
        msg = decode_message(self._read_exact(sock, length, who))
        if (msg.sender, msg.receiver) != (sender, receiver):
            raise ProtocolError(
                f"misrouted frame: {msg.sender}->{msg.receiver} on channel {sender}->{receiver}"
            )
        self._check_seq(msg)
        if msg.kind == "abort":
            raise ProtocolError(f"worker {msg.sender} aborted: {msg.reason}")
        return msg

    def close(self) -> None:
        for sock in self._ends.values():
            try:
                sock.close()
            except OSError:
                pass


def make_transport(name: str, worker_ids: Sequence[int]) -> _BaseTransport:
    if name == "in_process":
        return InProcessTransport(worker_ids)
    if name == "sockets":
        return SocketTransport(worker_ids)
    raise ConfigError(f"transport must be one of {TRANSPORTS}, got {name!r}")


# --- memory report ---------------------------------------------------------------


@dataclass(frozen=True)
class WorkerMemory:
    worker: int
    roles: tuple[str, ...]
    peak_bytes: int
    current_bytes: int
    events: int


@dataclass(frozen=True)
class MemoryReport:
    baseline_bytes: int
    workers: tuple[WorkerMemory, ...]

    def peak_by_worker(self) -> dict[int, int]:
        return {w.worker: w.peak_bytes for w in self.workers}

    def max_peak(self) -> int:
        return max(w.peak_bytes for w in self.workers)

    def to_text(self) -> str:
        lines = ["tlq-memory-report v1", f"baseline_bytes {self.baseline_bytes}", f"workers {len(self.workers)}"]
        for w in self.workers:
            lines.append(
                f"worker {w.worker} roles {','.join(w.roles)} peak {w.peak_bytes} "
                f"current {w.current_bytes} events {w.events}"
            )
        lines.append("end")
        return "\n".join(lines) + "\n"


# --- worker logic -----------------------------------------------------------------


class _InjectedCrash(Exception):
    """Raised by the fault-injection hook; the worker dies without an abort."""


@dataclass
class _WorkerCtx:
    me: WorkerId
    infer: int
    transport: _BaseTransport
    ledger: MemoryLedger
    timeout: float
    crash_after: int | None = None  # fault injection: die after N processed messages
    processed: int = 0

    def tick(self) -> None:
        self.processed += 1
        if self.crash_after is not None and self.processed >= self.crash_after:
            raise _InjectedCrash()


def _loss_phase(ctx: _WorkerCtx, first: CalMessage) -> list[tuple[float, float]]:
    """Score every grid point against the reference output; returns the curve.

    The reference (fp) output stays resident for the whole grid; quantized
    outputs are charged when consumed and freed right after scoring, so the
    ledgered footprint is y_fp + one y_q + the loss curve.
    """
    wid = ctx.me.id
    layer, count = first.layer, first.count
    y_fp = first.tensor
    ctx.ledger.alloc(wid, y_fp.nbytes, f"y_fp[L{layer}]")
    curve: list[tuple[float, float]] = []
    curve_bytes = 0
    for _ in range(count):
        msg = ctx.transport.recv(wid, ctx.infer, ctx.timeout)
        ctx.tick()
        if msg.kind != "layer_output" or msg.stream != "q" or msg.layer != layer:
            raise ProtocolError(
                f"worker {wid} expected quantized output for layer {layer}, got "
                f"{msg.kind} (layer {msg.layer}, stream {msg.stream})"
            )
        ctx.ledger.alloc(wid, msg.tensor.nbytes, f"y_q[L{layer}]")
        loss = layer_loss(y_fp, msg.tensor)
        ctx.ledger.free(wid, msg.tensor.nbytes, f"y_q[L{layer}]")
        ctx.ledger.alloc(wid, 16, f"curve[L{layer}]")
        curve_bytes += 16
        curve.append((msg.ratio, loss))
    ctx.ledger.free(wid, y_fp.nbytes, f"y_fp[L{layer}]")
    ctx.ledger.free(wid, curve_bytes, f"curve[L{layer}]")
    return curve


def _scale_phase(ctx: _WorkerCtx, req: CalMessage, curve: list[tuple[float, float]]) -> None:
    """Fix the ratio from a complete loss curve and report it to the coordinator."""
    wid = ctx.me.id
    layer = req.layer
    x_stat = req.tensor
    r_star = select_ratio(curve)
    scale_values = power_scale(x_stat, r_star).values
    ctx.ledger.alloc(wid, scale_values.nbytes, f"scale[L{layer}]")
    # settle the account before the final send so the coordinator's next
    # scheduling decision sees a quiesced worker
    ctx.ledger.free(wid, scale_values.nbytes, f"scale[L{layer}]")
    ctx.ledger.free(wid, x_stat.nbytes, f"x_stat[L{layer}]")
    ctx.transport.send(
        CalMessage(
            "ratio_fixed",
            sender=wid,
            receiver=ctx.infer,
            layer=layer,
            ratio=r_star,
            tensor=scale_values,
            curve=tuple(curve),
        )
    )


def _cal_worker_loop(ctx: _WorkerCtx) -> None:
    """Event loop for a scale/loss-capable worker.

    All dispatches arrive from the coordinator: a stat_request makes this
    worker the scale owner for one layer, a full-precision layer_output
    makes it the loss owner. When one worker holds both roles for a layer it
    runs the loss phase inline and skips the self-addressed loss reports.
    """
    wid = ctx.me.id
    while True:
        msg = ctx.transport.recv(wid, ctx.infer, ctx.timeout)
        ctx.tick()
        if msg.kind == "done":
            return
        if msg.kind == "stat_request":
            # the coordinator already charged the statistic to this worker at
            # dispatch time; only the frees happen here
            layer, loss_worker, count = msg.layer, msg.peer, msg.count
            if loss_worker == wid:
                first = ctx.transport.recv(wid, ctx.infer, ctx.timeout)
                ctx.tick()
                if first.kind != "layer_output" or first.stream != "fp":
                    raise ProtocolError(
                        f"worker {wid} expected fp output for layer {layer}, got {first.kind}"
                    )
                curve = _loss_phase(ctx, first)
            else:
                curve = []
                curve_bytes = 0
                for _ in range(count):
                    rep = ctx.transport.recv(wid, loss_worker, ctx.timeout)
                    ctx.tick()
                    if rep.kind != "loss_report" or rep.layer != layer:
                        raise ProtocolError(
                            f"worker {wid} expected loss_report for layer {layer}, got "
                            f"{rep.kind} (layer {rep.layer})"
                        )
                    ctx.ledger.alloc(wid, 16, f"curve[L{layer}]")
                    curve_bytes += 16
                    curve.append((rep.ratio, rep.loss))
                ctx.ledger.free(wid, curve_bytes, f"curve[L{layer}]")
            _scale_phase(ctx, msg, curve)
        elif msg.kind == "layer_output" and msg.stream == "fp":
            scale_worker = msg.peer
            curve = _loss_phase(ctx, msg)
            for r, loss in curve:
                ctx.transport.send(
                    CalMessage(
                        "loss_report",
                        sender=wid,
                        receiver=scale_worker,
                        layer=msg.layer,
                        ratio=r,
                        loss=loss,
                    )
                )
        else:
            raise ProtocolError(f"worker {wid} got unexpected {msg.kind} from coordinator")


class _LedgerObserver(WalkObserver):
    """Routes calibration-walk stream and parameter lifetimes into the ledger."""

    def __init__(self, ledger: MemoryLedger, worker: int):
        self.ledger = ledger
        self.worker = worker

    def layer_begin(self, index: int, param_bytes: int) -> None:
        if param_bytes:
            self.ledger.alloc(self.worker, param_bytes, f"params[L{index}]")

    def layer_end(self, index: int, param_bytes: int) -> None:
        if param_bytes:
            self.ledger.free(self.worker, param_bytes, f"params[L{index}]")

    def stream_new(self, nbytes: int, tag: str) -> None:
        self.ledger.alloc(self.worker, nbytes, tag)

    def stream_drop(self, nbytes: int, tag: str) -> None:
        self.ledger.free(self.worker, nbytes, tag)


def run_distributed_calibration(
    stack: LayerStack,
    activations: np.ndarray,
    *,
    workers: int | Sequence[WorkerId] = 3,
    transport: str = "in_process",
    strategy: str = "passact2",
    stat_mode: str = "topk",
    grid: RatioGrid = RatioGrid(),
    cfg_w: QuantConfig,
    cfg_a: QuantConfig,
    fraction: float = 0.5,
    loss: ProxyLossSpec = ProxyLossSpec(),
    timeout: float = 30.0,
    overhead_coeff: float = 1.0,
    fault_injection: dict[int, int] | None = None,
) -> tuple[CalibrationResult, MemoryReport]:
    """Distribute the layer-wise search across role-separated workers.

    Returns the calibration result (bit-identical to the single-context
    calibrator for the same inputs) and the per-worker memory report. The
    caller's thread acts as the infer worker and coordinator; the other
    workers run as threads and exchange CalMessages only.
    """
    if isinstance(workers, int):
        team = default_workers(workers)
    else:
        team = tuple(workers)
    ids = [w.id for w in team]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate worker ids: {ids}")
    infer = next((w for w in team if "infer" in w.roles), None)
    scale_cap = [w for w in team if "scale" in w.roles and w is not infer]
    loss_cap = [w for w in team if "loss" in w.roles and w is not infer]
    if infer is None or not scale_cap or not loss_cap:
        raise ConfigError(
            "need one infer worker plus at least one scale-capable and one "
            "loss-capable worker"
        )

    chans = make_transport(transport, ids)
    ledger = MemoryLedger(ids)
    fault_injection = fault_injection or {}
    errors: list[BaseException] = []

    def _run_worker(worker: WorkerId) -> None:
        ctx = _WorkerCtx(
            worker, infer.id, chans, ledger, timeout, fault_injection.get(worker.id)
        )
        try:
            _cal_worker_loop(ctx)
        except _InjectedCrash:
            pass  # simulated hard crash: no abort message, the peer times out
        except BaseException as exc:  # noqa: BLE001 - propagated to the coordinator
            errors.append(exc)
            for peer in ids:
                if peer != worker.id:
                    try:
                        chans.send(
                            CalMessage("abort", worker.id, peer, reason=f"{type(exc).__name__}: {exc}")
                        )
                    except Exception:
                        pass

    threads = [
        threading.Thread(target=_run_worker, args=(w,), daemon=True, name=f"calworker-{w.id}")
        for w in team
        if w is not infer
    ]
    for t in threads:
        t.start()

    try:
        result = _coordinate(
            stack,
            activations,
            strategy=strategy,
            stat_mode=stat_mode,
            grid=grid,
            cfg_w=cfg_w,
            cfg_a=cfg_a,
            fraction=fraction,
            loss=loss,
            chans=chans,
            ledger=ledger,
            infer=infer,
            scale_cap=scale_cap,
            loss_cap=loss_cap,
            timeout=timeout,
        )
    except BaseException:
        for peer in ids:
            if peer != infer.id:
                try:
                    chans.send(CalMessage("abort", infer.id, peer, reason="coordinator failed"))
                except Exception:
                    pass
        for t in threads:
            t.join(timeout=timeout)
        chans.close()
        raise
    for t in threads:
        t.join(timeout=timeout)
    chans.close()
    if errors:
        raise ProtocolError(f"worker failed: {errors[0]}") from errors[0]

    b, n = activations.shape[0], activations.shape[1]
    base = max(
        baseline_peak(
            (lin.weight.shape[1], lin.weight.shape[0]),
            (b, n),
            activations.itemsize,
            overhead_coeff,
        )
        for _, lin in stack.linears()
    )
    by_id = {w.id: w for w in team}
    report = MemoryReport(
        base,
        tuple(
            WorkerMemory(
                wid,
                tuple(sorted(by_id[wid].roles)),
                ledger.peak(wid),
                ledger.current(wid),
                len(ledger.events(wid)),
            )
            for wid in ledger.workers()
        ),
    )
    return result, report


def _coordinate(
    stack: LayerStack,
    activations: np.ndarray,
    *,
    strategy: str,
    stat_mode: str,
    grid: RatioGrid,
    cfg_w: QuantConfig,
    cfg_a: QuantConfig,
    fraction: float,
    loss: ProxyLossSpec,
    chans: _BaseTransport,
    ledger: MemoryLedger,
    infer: WorkerId,
    scale_cap: list[WorkerId],
    loss_cap: list[WorkerId],
    timeout: float,
) -> CalibrationResult:
    me = infer.id
    points = grid.points()

    selections = None
    if stat_mode == "topk":

        def _sample_hook(nbytes: int, alive: bool) -> None:
            if alive:
                ledger.alloc(me, nbytes, "grad-pass")
            else:
                ledger.free(me, nbytes, "grad-pass")

        selections = compute_token_selections(stack, activations, fraction, loss, _sample_hook)

    walk = CalibrationWalk(
        stack, activations, strategy, cfg_w, cfg_a, observer=_LedgerObserver(ledger, me)
    )
    rows: list[LayerCalibration] = []
    while (task := walk.next_linear()) is not None:
        layer_idx, lin = task.index, task.layer
        sel = selections[layer_idx] if selections is not None else None
        stat = layer_stat(task.stat_inputs, stat_mode, lin, sel)

        s_w = schedule_to_least_loaded(ledger, scale_cap)
        # charge the statistic to the scale worker at dispatch; the follow-up
        # loss dispatch then sees it and lands elsewhere when possible
        ledger.alloc(s_w.id, stat.nbytes, f"x_stat[L{layer_idx}]")
        l_w = schedule_to_least_loaded(ledger, loss_cap)
        chans.send(
            CalMessage(
                "stat_request",
                sender=me,
                receiver=s_w.id,
                layer=layer_idx,
                tensor=stat,
                peer=l_w.id,
                count=len(points),
            )
        )

        y_fp = _batch_fp(lin, task.fp_inputs)
        ledger.alloc(me, y_fp.nbytes, f"y_fp[L{layer_idx}]")
        chans.send(
            CalMessage(
                "layer_output",
                sender=me,
                receiver=l_w.id,
                layer=layer_idx,
                stream="fp",
                tensor=y_fp,
                peer=s_w.id,
                count=len(points),
            )
        )
        ledger.free(me, y_fp.nbytes, f"y_fp[L{layer_idx}]")
        del y_fp

        for r in points:
            y_q = _batch_quant(lin, task.q_inputs, power_scale(stat, r), cfg_w, cfg_a)
            ledger.alloc(me, y_q.nbytes, f"y_q[L{layer_idx}]")
            chans.send(
                CalMessage(
                    "layer_output",
                    sender=me,
                    receiver=l_w.id,
                    layer=layer_idx,
                    stream="q",
                    ratio=r,
                    tensor=y_q,
                    count=len(points),
                )
            )
            ledger.free(me, y_q.nbytes, f"y_q[L{layer_idx}]")
            del y_q

        fixed = chans.recv(me, s_w.id, timeout)
        if fixed.kind != "ratio_fixed" or fixed.layer != layer_idx:
            raise ProtocolError(
                f"coordinator expected ratio_fixed for layer {layer_idx}, got "
                f"{fixed.kind} (layer {fixed.layer})"
            )
        scale = scale_for(stat_mode, stat, fixed.ratio)
        if not np.array_equal(scale.values, fixed.tensor):
            raise ProtocolError(
                f"layer {lin.name!r}: scale from worker {s_w.id} does not match "
                "the coordinator's statistic"
            )
        rows.append(LayerCalibration(lin.name, scale, fixed.ratio, tuple(fixed.curve)))
        walk.fix_scale(scale)

    for wid in sorted({w.id for w in scale_cap + loss_cap}):
        chans.send(CalMessage("done", sender=me, receiver=wid))
    return CalibrationResult(
        tuple(rows), strategy, stat_mode, cfg_w.bits, cfg_a.bits, fraction, grid
    )
