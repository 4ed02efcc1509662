"""Streaming server: BS_FRAME in, GAUSS_UPDATE out.

Per connection there is one reader task, one pipeline task and one writer
task. Reader and pipeline meet at a latest-wins mailbox of capacity 1 (the
only place frames are dropped); pipeline and writer meet at a bounded queue.
"""
from __future__ import annotations

import asyncio
import logging
import signal
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..bda import AffineAlignment, load_alignment
from ..dataset import EYE_L, EYE_R, IDENTITY_6D, JAW, N_EXPR, N_PARAMS
from ..flame import FlameLiteModel, deform_batch, load_model
from ..mappers.epm import EpmModel, load_epm
from ..mia import AvatarOffsets, load_offsets
from ..rig import GaussianCloud, RigError, face_frames, load_cloud, update_gaussians
from ..rotations import rot6d_to_matrix
from . import protocol as P
from .config import PipelineConfig

logger = logging.getLogger(__name__)

STAGES = ("bda", "epm", "deform", "rig", "encode")


class StartupError(RuntimeError):
    pass


class Pipeline:
    """The pure per-frame computation, independent of any transport."""

    def __init__(self, epm: EpmModel, model: FlameLiteModel, cloud: GaussianCloud,
                 alignment: Optional[AffineAlignment] = None, offsets: Optional[AvatarOffsets] = None):
        self.alignment = alignment or AffineAlignment.identity()
        self.epm = epm.copy().eval() if epm.mode != "eval" else epm
        if model.n_expr < N_EXPR:
            raise StartupError(f"model has {model.n_expr} expression components, mapper emits {N_EXPR}")
        self.model = model.with_expr_dim(N_EXPR)
        self.cloud = cloud
        if cloud.n and cloud.face_ids.max() >= model.faces.shape[0]:
            raise StartupError("cloud references faces the model does not have (topology mismatch)")
        self.offsets = offsets
        if offsets is not None and offsets.d_e.size != N_EXPR:
            raise StartupError(f"offsets carry {offsets.d_e.size} expression entries, expected {N_EXPR}")
        self._d_e = offsets.d_e if offsets is not None else None
        self._d_p = offsets.d_p if offsets is not None else None
        # alignment as (W^T, b) for a row-vector product
        self._Wt = np.ascontiguousarray(self.alignment.W.T)
        self._b = self.alignment.b
        self.rest = self._pose_rest()
        self.previous = self.rest
        self.reset_stats()

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Pipeline":
        try:
            alignment = load_alignment(cfg.alignment) if cfg.alignment else None
            offsets = load_offsets(cfg.offsets) if cfg.offsets else None
            return cls(load_epm(cfg.epm), load_model(cfg.model), load_cloud(cfg.cloud), alignment, offsets)
        except (OSError, ValueError) as exc:
            raise StartupError(f"{type(exc).__name__}: {exc}") from exc

    def _pose_rest(self):
        q = np.zeros(N_PARAMS)
        for s in (JAW, EYE_L, EYE_R):
            q[s] = IDENTITY_6D
        verts = self._deform(q)
        try:
            return update_gaussians(self.cloud, verts, self.model.faces)
        except RigError as exc:
            raise StartupError(f"rest pose: {exc}") from exc

    def _deform(self, q):
        rots = np.stack([rot6d_to_matrix(q[s]) for s in (JAW, EYE_L, EYE_R)])[None]
        return deform_batch(self.model, q[None, :N_EXPR], rots, self._d_e, self._d_p)[0]

    def reset_stats(self):
        self.stage_us = {s: [] for s in STAGES}
        self.frames = 0

    def init_static(self) -> P.InitStatic:
        r = self.rest
        return P.InitStatic(self.cloud.sh_degree, r.positions, r.rotations, r.scales,
                            self.cloud.opacity, self.cloud.sh)

    def process(self, frame: P.BsFrame) -> bytes:
        """One frame through BDA -> EPM -> deform -> rig -> encode; returns the
        full GAUSS_UPDATE message."""
        t0 = time.perf_counter()
        x = frame.coeffs.astype(np.float64) @ self._Wt + self._b
        np.clip(x, 0.0, 1.0, out=x)
        t1 = time.perf_counter()
        q = self.epm.predict(x[None])[0]
        t2 = time.perf_counter()
        verts = self._deform(q)
        t3 = time.perf_counter()
        dyn = update_gaussians(self.cloud, verts, self.model.faces, self.previous,
                               frames=face_frames(verts, self.model.faces))
        self.previous = dyn
        t4 = time.perf_counter()
        payload = P.encode_update_payload(frame.frame_id, dyn.positions, dyn.rotations, dyn.scales)
        msg = P.HEADER.pack(P.MAGIC, P.VERSION, P.MsgType.GAUSS_UPDATE, len(payload)) + payload
        t5 = time.perf_counter()
        for name, a, b in zip(STAGES, (t0, t1, t2, t3, t4), (t1, t2, t3, t4, t5)):
            self.stage_us[name].append((b - a) * 1e6)
        self.frames += 1
        return msg

    def stats(self, dropped=0) -> dict:
        stage = {s: (float(np.mean(v)) if v else 0.0) for s, v in self.stage_us.items()}
        total = np.sum([self.stage_us[s] for s in STAGES], axis=0) if self.frames else np.zeros(0)
        summary = {k: (float(f(total)) if total.size else 0.0)
                   for k, f in (("median", np.median), ("p95", lambda a: np.percentile(a, 95)), ("max", np.max))}
        return {"frames": self.frames, "dropped": dropped, "stage_us": stage, "pipeline_us": summary}


class Mailbox:
    """Capacity-1 hand-off; a put over an unread item replaces it."""

    def __init__(self):
        self._item = None
        self._event = asyncio.Event()
        self.dropped = 0
        self.closed = False

    def put(self, item):
        if self._item is not None:
            self.dropped += 1
        self._item = item
        self._event.set()

    def close(self):
        self.closed = True
        self._event.set()

    async def get(self):
        """Next item, or None once closed and drained."""
        while True:
            if self._item is not None:
                item, self._item = self._item, None
                if not self.closed:
                    self._event.clear()
                return item
            if self.closed:
                return None
            self._event.clear()
            await self._event.wait()


async def read_message(reader: asyncio.StreamReader):
    """Read one framed message; raises ``asyncio.IncompleteReadError`` at EOF."""
    head = await reader.readexactly(P.HEADER_SIZE)
    _, length = P.decode_header(head)
    body = await reader.readexactly(length) if length else b""
    msg, _ = P.decode_message(head + body)
    return msg


@dataclass
class _Session:
    pipeline: Pipeline
    writer: asyncio.StreamWriter
    queue_size: int
    mailbox: Mailbox = field(default_factory=Mailbox)
    delay_s: float = 0.0


class Server:
    """Asyncio TCP server around a :class:`Pipeline`. One session at a time
    is served, matching the single-user topology."""

    def __init__(self, pipeline: Pipeline, host="127.0.0.1", port=0, writer_queue=4, delay_s=0.0):
        self.pipeline = pipeline
        self.host, self.port = host, port
        self.writer_queue = writer_queue
        self.delay_s = delay_s  # artificial per-frame delay, for backpressure tests
        self._server = None
        self._lock = asyncio.Lock()
        self.last_session_stats = None

    async def start(self):
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info("listening on %s:%d", self.host, self.port)
        return self.port

    async def stop(self):
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def serve_forever(self):
        async with self._server:
            await self._server.serve_forever()

    async def _handle(self, reader, writer):
        async with self._lock:
            try:
                await self._session(reader, writer)
            finally:
                writer.close()
                try:
                    await writer.wait_closed()
                except (ConnectionError, OSError):
                    pass

    async def _send_error(self, writer, exc_kind, detail):
        try:
            writer.write(P.encode_message(P.Error(exc_kind, detail)))
            await writer.drain()
        except (ConnectionError, OSError):
            pass

    async def _session(self, reader, writer):
        pipe = self.pipeline
        try:
            hello = await read_message(reader)
        except (asyncio.IncompleteReadError, ConnectionError):
            return
        except P.ProtocolError as exc:
            await self._send_error(writer, exc.kind, str(exc))
            return
        if not isinstance(hello, P.Hello) or hello.protocol_version != P.VERSION:
            await self._send_error(writer, "handshake", f"expected HELLO v{P.VERSION}, got {hello!r}"[:200])
            return
        writer.write(P.encode_message(P.Hello()))
        writer.write(P.encode_message(pipe.init_static()))
        await writer.drain()

        pipe.reset_stats()
        pipe.previous = pipe.rest
        s = _Session(pipe, writer, self.writer_queue, delay_s=self.delay_s)
        out: asyncio.Queue = asyncio.Queue(maxsize=self.writer_queue)
        tasks = [asyncio.create_task(self._pipeline_task(s, out)),
                 asyncio.create_task(self._writer_task(s, out))]
        try:
            await self._reader_task(s, reader, out)
        finally:
            s.mailbox.close()
            await tasks[0]
            await out.put(None)
            await tasks[1]
            self.last_session_stats = pipe.stats(s.mailbox.dropped)

    async def _reader_task(self, s: _Session, reader, out):
        while True:
            try:
                msg = await read_message(reader)
            except (asyncio.IncompleteReadError, ConnectionError):
                return
            except P.ProtocolError as exc:
                await out.put(P.encode_message(P.Error(exc.kind, str(exc))))
                return
            if isinstance(msg, P.BsFrame):
                s.mailbox.put(msg)
            elif isinstance(msg, P.StatsReq):
                await out.put(P.encode_message(P.Stats(s.pipeline.stats(s.mailbox.dropped))))
            else:
                await out.put(P.encode_message(P.Error("unexpected-message", type(msg).__name__)))
                return

    async def _pipeline_task(self, s: _Session, out):
        while True:
            frame = await s.mailbox.get()
            if frame is None:
                return
            if s.delay_s:
                await asyncio.sleep(s.delay_s)
            msg = await asyncio.to_thread(s.pipeline.process, frame)
            await out.put(msg)

    async def _writer_task(self, s: _Session, out):
        while True:
            data = await out.get()
            if data is None:
                return
            try:
                s.writer.write(data)
                await s.writer.drain()
            except (ConnectionError, OSError):
                return


def serve(config: PipelineConfig):
    """Run until SIGINT / SIGTERM."""
    pipeline = Pipeline.from_config(config)

    async def main():
        server = Server(pipeline, config.host, config.port, config.writer_queue)
        await server.start()
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        print(f"listening {config.host}:{server.port}", flush=True)
        await stop.wait()
        await server.stop()

    asyncio.run(main())
