"""Benchmark harnesses for the message bus and the urban environment."""

from __future__ import annotations

import math
import random
import statistics
import threading
import time

from .bus import Envelope, InProcessBus, topic_for
from .urban import kernels
from .urban.network import generate_grid_city
from .urban.world import UrbanSpace


def bus_throughput(seconds: float = 10.0, payload_size: int = 100, fanout: int = 10,
                   publishers: int = 1, agents: int = 1000, seed: int = 1) -> dict:
    """Sustained delivered-message rate: each sender addresses `fanout`
    random agents per batch, every agent subscribes to its own topic.

    Like the reference methodology, callers scan publisher counts and report
    the peak configuration; under the GIL a single producer is usually it.
    """
    bus = InProcessBus()
    delivered = [0] * agents
    exp = "bench"
    topics = []
    for k in range(agents):
        agent = f"a{k}"
        topics.append(topic_for(exp, agent, "agent-chat"))

        def counter(env, k=k):
            delivered[k] += 1

        bus.subscribe(topics[-1], consumer_id=agent, callback=counter)

    payload = bytes(payload_size)
    stop = threading.Event()
    sent = [0] * publishers

    def publish_loop(p: int):
        rng = random.Random(seed + p)
        # Pre-drawn target cycle keeps RNG cost out of the hot loop.
        plan = [rng.randrange(agents) for _ in range(8192)]
        i = 0
        count = 0
        sender = f"pub{p}"
        while not stop.is_set():
            for _ in range(fanout):
                bus.publish(Envelope(topic=topics[plan[i & 8191]], payload=payload,
                                     sender_id=sender))
                i += 1
                count += 1
        sent[p] = count

    threads = [threading.Thread(target=publish_loop, args=(p,)) for p in range(publishers)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    time.sleep(seconds)
    stop.set()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    total = sum(delivered)
    return {"seconds": elapsed, "published": sum(sent), "delivered": total,
            "throughput_msg_s": total / elapsed, "payload_bytes": payload_size,
            "fanout": fanout, "publishers": publishers}


def _grid_for(agents: int) -> dict:
    side = max(3, int(math.sqrt(agents / 120)) + 3)
    return {"nx": side, "ny": side, "block": 400.0, "lanes_per_road": 2,
            "pois_per_road": 2}


def env_tick_benchmark(agents: int = 1000, ticks: int = 100, dt: float = 1.0,
                       backend: str | None = None, warmup: int = 20,
                       seed: int = 1) -> dict:
    """Mean wall time per tick with `agents` kept moving on a synthetic grid."""
    if backend is not None:
        kernels.select_backend(backend)
    kernels.warmup()
    net = generate_grid_city(seed=seed, **_grid_for(agents))
    world = UrbanSpace(network=net)
    rng = random.Random(seed)
    pois = list(net.pois.values())
    ids = [f"v{k}" for k in range(agents)]
    for aid in ids:
        world.register_agent(aid)
        world.set_agent_plan(aid, rng.choice(pois).id, "drive")

    def replan_idle():
        for aid in ids:
            if aid not in world._plans:
                world.set_agent_plan(aid, rng.choice(pois).id, "drive")

    for _ in range(warmup):
        world.tick(dt)
    samples = []
    for i in range(ticks):
        if i % 10 == 0:
            replan_idle()
        t0 = time.perf_counter()
        world.tick(dt)
        samples.append((time.perf_counter() - t0) * 1000)
    return {"agents": agents, "ticks": ticks, "dt": dt,
            "backend": kernels.backend_name(),
            "mean_ms": statistics.fmean(samples),
            "sd_ms": statistics.pstdev(samples),
            "max_ms": max(samples),
            "moving": world.traveling_now()}
