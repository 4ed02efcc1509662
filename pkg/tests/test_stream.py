import asyncio
import json

import numpy as np
import pytest

from exprmap.bda import AffineAlignment, save_alignment
from exprmap.flame import save_model, synth_model
from exprmap.mappers.epm import EpmModel, save_epm
from exprmap.mia import AvatarOffsets, save_offsets
from exprmap.rig import save_cloud, synth_cloud
from exprmap.stream import protocol as P
from exprmap.stream.client import replay, replay_async, validate_update
from exprmap.stream.config import ConfigError, PipelineConfig, load_config
from exprmap.stream.server import Mailbox, Pipeline, Server, StartupError, read_message


@pytest.fixture(scope="module")
def pipeline():
    model = synth_model(1, V=200, K_e=50)
    cloud = synth_cloud(model.template, model.faces, 300, 1)
    return Pipeline(EpmModel.initialize(seed=1), model, cloud)


def trace(n, seed=0):
    return list(np.random.default_rng(seed).uniform(0, 1, (n, 51)))


def run(coro):
    return asyncio.run(coro)


async def with_server(pipe, fn, **kw):
    srv = Server(pipe, "127.0.0.1", 0, **kw)
    port = await srv.start()
    try:
        return await fn(port, srv)
    finally:
        await srv.stop()


async def handshake(port):
    reader, writer = await asyncio.open_connection("127.0.0.1", port)
    writer.write(P.encode_message(P.Hello()))
    await writer.drain()
    hello = await read_message(reader)
    init = await read_message(reader)
    return reader, writer, hello, init


def test_mailbox_latest_wins():
    async def main():
        box = Mailbox()
        box.put("a")
        box.put("b")
        assert box.dropped == 1
        assert await box.get() == "b"
        box.put("c")
        box.close()
        assert await box.get() == "c"
        assert await box.get() is None
    run(main())


def test_process_echoes_frame_id(pipeline):
    buf = pipeline.process(P.BsFrame(42, 0, np.full(51, 0.2)))
    msg, used = P.decode_message(buf)
    assert used == len(buf) and msg.frame_id == 42
    assert validate_update(msg, 300) == []


def test_startup_mismatches():
    model = synth_model(1, V=200, K_e=50)
    other = synth_model(1, V=60, K_e=50)
    cloud = synth_cloud(model.template, model.faces, 50, 1)
    with pytest.raises(StartupError):
        Pipeline(EpmModel.initialize(), other, cloud)
    with pytest.raises(StartupError):
        Pipeline(EpmModel.initialize(), synth_model(1, V=200, K_e=20), cloud)
    with pytest.raises(StartupError):
        Pipeline(EpmModel.initialize(), model, cloud, offsets=AvatarOffsets.zeros(40))


def test_handshake_and_idle(pipeline):
    async def body(port, srv):
        reader, writer, hello, init = await handshake(port)
        assert isinstance(hello, P.Hello) and isinstance(init, P.InitStatic)
        assert init.n_gaussians == 300
        np.testing.assert_allclose(init.opacity, pipeline.cloud.opacity, rtol=1e-6)
        # idle: nothing arrives without a BS_FRAME
        with pytest.raises(asyncio.TimeoutError):
            await asyncio.wait_for(reader.readexactly(1), 0.3)
        writer.close()
        await writer.wait_closed()
    run(with_server(pipeline, body))


def test_malformed_message_gets_error(pipeline):
    async def body(port, srv):
        reader, writer, _, _ = await handshake(port)
        writer.write(b"NOPE" + bytes(20))
        await writer.drain()
        msg = await read_message(reader)
        assert isinstance(msg, P.Error) and msg.error == "bad-magic"
        assert await reader.read() == b""   # closed
    run(with_server(pipeline, body))


def test_bad_handshake(pipeline):
    async def body(port, srv):
        reader, writer = await asyncio.open_connection("127.0.0.1", port)
        writer.write(P.encode_message(P.StatsReq()))
        await writer.drain()
        msg = await read_message(reader)
        assert isinstance(msg, P.Error) and msg.error == "handshake"
    run(with_server(pipeline, body))


def test_busy_pipeline_drops_older(pipeline):
    async def body(port, srv):
        reader, writer, _, _ = await handshake(port)
        for fid in range(3):
            writer.write(P.encode_message(P.BsFrame(fid, 0, np.full(51, 0.1))))
            await writer.drain()
            await asyncio.sleep(0.05)   # frame 0 is being processed while 1 and 2 arrive
        got = []
        while len(got) < 2:
            got.append((await read_message(reader)).frame_id)
        writer.write(P.encode_message(P.StatsReq()))
        await writer.drain()
        stats = await read_message(reader)
        assert got == [0, 2]
        assert stats.payload["dropped"] == 1 and stats.payload["frames"] == 2
        assert set(stats.payload["stage_us"]) == {"bda", "epm", "deform", "rig", "encode"}
    run(with_server(pipeline, body, delay_s=0.3))


def test_replay_report(pipeline):
    async def body(port, srv):
        return await replay_async(trace(30), ("127.0.0.1", port), rate_hz=100, timeout_s=0.5)
    rep = run(with_server(pipeline, body))
    assert rep.sent == 30 and rep.received == 30 and rep.timeouts == []
    assert rep.validation_failures == []
    assert rep.received_ids == list(range(30))
    assert all(v > 0 for v in rep.latency_us.values())
    assert rep.server["frames"] == 30
    json.loads(rep.to_json())


def test_overload_drops_and_order(pipeline):
    async def body(port, srv):
        return await replay_async(trace(40), ("127.0.0.1", port), rate_hz=5000, timeout_s=0.5)
    rep = run(with_server(pipeline, body, delay_s=0.02))
    assert rep.dropped > 0
    assert rep.received + rep.dropped == rep.sent
    assert all(b > a for a, b in zip(rep.received_ids, rep.received_ids[1:]))
    assert set(rep.received_ids) <= set(range(40))


def test_empty_trace():
    rep = replay([], "127.0.0.1:1")
    assert rep.sent == 0 and rep.received == 0


def test_deterministic_payloads(pipeline):
    async def body(port, srv):
        return (await replay_async(trace(15, 3), ("127.0.0.1", port), rate_hz=50, keep_updates=True))[1]
    a = run(with_server(pipeline, body))
    b = run(with_server(pipeline, body))
    assert len(a) == 15 and a == b


def test_config_file(tmp_path):
    model = synth_model(1, V=100)
    cloud = synth_cloud(model.template, model.faces, 20, 1)
    save_model(model, tmp_path / "m.bin")
    save_cloud(cloud, tmp_path / "c.bin")
    save_epm(EpmModel.initialize(), tmp_path / "e.bin")
    save_alignment(AffineAlignment.identity(), tmp_path / "a.bin")
    save_offsets(AvatarOffsets.zeros(), tmp_path / "o.bin")
    cfg_path = tmp_path / "server.ini"
    cfg_path.write_text("[server]\nport = 0\nepm = e.bin\nmodel = m.bin\ncloud = c.bin\n"
                        "alignment = a.bin ; optional\noffsets = o.bin\n")
    cfg = load_config(cfg_path)
    assert cfg.port == 0 and cfg.epm == str(tmp_path / "e.bin")
    pipe = Pipeline.from_config(cfg)
    assert pipe.cloud.n == 20
    cfg_path.write_text("[server]\nepm = e.bin\nmodel = m.bin\ncloud = c.bin\nbogus = 1\n")
    with pytest.raises(ConfigError):
        load_config(cfg_path)
    cfg_path.write_text("[server]\nepm = e.bin\n")
    with pytest.raises(ConfigError):
        load_config(cfg_path)
    with pytest.raises(StartupError):
        Pipeline.from_config(PipelineConfig(str(tmp_path / "missing"), str(tmp_path / "m.bin"),
                                             str(tmp_path / "c.bin")))
