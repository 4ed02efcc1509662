"""Headless replay client: streams a blendshape trace at a fixed rate and
measures the round trip to each GAUSS_UPDATE."""
from __future__ import annotations

import asyncio
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import protocol as P
from .server import read_message

QUAT_TOL = 1e-3


@dataclass
class LatencyReport:
    latency_us: dict = field(default_factory=dict)   # frame_id -> µs
    sent: int = 0
    received: int = 0
    dropped: int = 0            # as reported by the server mailbox
    timeouts: list = field(default_factory=list)
    validation_failures: list = field(default_factory=list)
    received_ids: list = field(default_factory=list)
    n_gaussians: int = 0
    server: dict = field(default_factory=dict)

    def summary(self) -> dict:
        lat = np.array(list(self.latency_us.values()), dtype=np.float64)
        if lat.size == 0:
            return {"median_us": 0.0, "p95_us": 0.0, "max_us": 0.0}
        return {"median_us": float(np.median(lat)), "p95_us": float(np.percentile(lat, 95)),
                "max_us": float(lat.max())}

    def to_dict(self):
        d = asdict(self)
        d["latency_us"] = {str(k): v for k, v in self.latency_us.items()}
        d["summary"] = self.summary()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def validate_update(msg: P.GaussUpdate, n_expected: int):
    """Returns a list of problems (empty when the update is well formed)."""
    problems = []
    if msg.n_gaussians != n_expected:
        problems.append(f"count {msg.n_gaussians} != {n_expected}")
    norms = np.linalg.norm(msg.rotations.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > QUAT_TOL):
        problems.append("non-unit quaternion")
    if np.any(~(msg.scales > 0)):
        problems.append("non-positive scale")
    if not (np.all(np.isfinite(msg.positions))):
        problems.append("non-finite position")
    return problems


def _parse_endpoint(endpoint):
    if isinstance(endpoint, tuple):
        return endpoint
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)


async def replay_async(trace, endpoint, rate_hz: float = 60.0, timeout_s: float = 1.0,
                       keep_updates: bool = False):
    """``trace`` is a list of BlendshapeFrame (or raw 51-vectors). Frames are
    numbered 0..n-1 on the wire. With ``keep_updates`` the raw GAUSS_UPDATE
    payloads are returned as well."""
    report = LatencyReport()
    payloads = {}
    if not trace:
        return (report, payloads) if keep_updates else report
    host, port = _parse_endpoint(endpoint)
    reader, writer = await asyncio.open_connection(host, port)
    writer.write(P.encode_message(P.Hello()))
    await writer.drain()
    hello = await read_message(reader)
    if not isinstance(hello, P.Hello):
        raise ConnectionError(f"handshake failed: {hello!r}")
    init = await read_message(reader)
    if not isinstance(init, P.InitStatic):
        raise ConnectionError(f"expected INIT_STATIC, got {type(init).__name__}")
    report.n_gaussians = init.n_gaussians

    sent_at = {}
    stats_box = asyncio.get_running_loop().create_future()
    done_sending = asyncio.Event()

    async def receive():
        last = -1
        while True:
            try:
                msg = await read_message(reader)
            except (asyncio.IncompleteReadError, ConnectionError):
                return
            t = time.perf_counter()
            if isinstance(msg, P.GaussUpdate):
                fid = msg.frame_id
                report.latency_us[fid] = (t - sent_at[fid]) * 1e6
                report.received += 1
                report.received_ids.append(fid)
                problems = validate_update(msg, init.n_gaussians)
                if fid <= last:
                    problems.append(f"frame id {fid} not increasing")
                last = fid
                if problems:
                    report.validation_failures.append({"frame_id": fid, "problems": problems})
                if keep_updates:
                    payloads[fid] = P.encode_message(msg)
            elif isinstance(msg, P.Stats):
                if not stats_box.done():
                    stats_box.set_result(msg.payload)
                return
            elif isinstance(msg, P.Error):
                raise ConnectionError(f"server error {msg.error}: {msg.detail}")

    recv_task = asyncio.create_task(receive())
    period = 1.0 / rate_hz if rate_hz > 0 else 0.0
    start = time.perf_counter()
    for i, fr in enumerate(trace):
        target = start + i * period
        delay = target - time.perf_counter()
        if delay > 0:
            await asyncio.sleep(delay)
        coeffs = getattr(fr, "coeffs", fr)
        ts = int(getattr(fr, "timestamp_us", i * 16_667))
        sent_at[i] = time.perf_counter()
        writer.write(P.encode_message(P.BsFrame(i, ts, coeffs)))
        await writer.drain()
        report.sent += 1
    done_sending.set()

    # wait for stragglers: stop once nothing arrives within timeout_s
    last_count = -1
    while report.received < report.sent and last_count != report.received and not recv_task.done():
        last_count = report.received
        await asyncio.sleep(timeout_s)
    writer.write(P.encode_message(P.StatsReq()))
    await writer.drain()
    try:
        report.server = await asyncio.wait_for(asyncio.shield(stats_box), timeout=5.0)
    except asyncio.TimeoutError:
        report.server = {}
    writer.close()
    try:
        await writer.wait_closed()
    except (ConnectionError, OSError):
        pass
    if not recv_task.done():
        recv_task.cancel()
    try:
        await recv_task
    except asyncio.CancelledError:
        pass
    report.dropped = int(report.server.get("dropped", 0))
    got = set(report.latency_us)
    report.timeouts = [i for i in range(report.sent) if i not in got]
    return (report, payloads) if keep_updates else report


def replay(trace, endpoint, rate_hz: float = 60.0, timeout_s: float = 1.0) -> LatencyReport:
    return asyncio.run(replay_async(trace, endpoint, rate_hz, timeout_s))
