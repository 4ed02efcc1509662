"""Stream blendshape frames to the avatar server and time the round trip.

The server runs BDA -> EPM -> deform -> rig -> encode for every BS_FRAME
and answers with a GAUSS_UPDATE carrying the dynamic Gaussian attributes.
Here server and client share one process over loopback; the mapper is
freshly initialized since timing does not depend on its weights.

Run: python demos/03_streaming.py [n_frames]
"""
import asyncio
import sys

import numpy as np

from exprmap.flame import synth_model
from exprmap.mappers.epm import EpmModel
from exprmap.rig import synth_cloud
from exprmap.stream.client import replay_async
from exprmap.stream.server import Pipeline, Server

n_frames = int(sys.argv[1]) if len(sys.argv) > 1 else 300

model = synth_model(0, V=5000, K_e=50)
cloud = synth_cloud(model.template, model.faces, 10_000, 0)
pipe = Pipeline(EpmModel.initialize(seed=0), model, cloud)
trace = list(np.random.default_rng(0).uniform(0, 0.6, (n_frames, 51)))


async def main():
    server = Server(pipe, "127.0.0.1", 0)
    port = await server.start()
    print(f"server on port {port}: {model.n_vertices} vertices, {cloud.n} Gaussians")
    try:
        return await replay_async(trace, ("127.0.0.1", port), rate_hz=60.0)
    finally:
        await server.stop()


report = asyncio.run(main())
s = report.summary()
print(f"delivered {report.received}/{report.sent}, dropped by server {report.dropped}")
print(f"round trip median {s['median_us'] / 1e3:.2f} ms, p95 {s['p95_us'] / 1e3:.2f} ms")
print("server stage means (us):", {k: round(v) for k, v in report.server["stage_us"].items()})
