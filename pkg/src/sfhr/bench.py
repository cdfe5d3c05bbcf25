"""Instrumentation: per-phase timings, communication volumes, projections.

Absolute numbers are machine-dependent; the reproducible artifacts are the
directional shapes (packing time falls with the extraction level, upload
volume rises with it) and the modeled end-to-end latency, computed as
compute time plus total bytes divided by a hypothetical bandwidth.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import model as model_mod
from .params import preset_for_bits
from .protocol import Client, ServerEngine, run_inference

BANDWIDTHS_MB_S = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0)

CSV_FIELDS = ("model", "b", "gamma", "beta", "phase", "seconds", "bytes_up",
              "bytes_down", "threads")


@dataclass
class BenchRow:
    model: str
    b: int
    gamma: int
    beta: int
    phase: str
    seconds: float
    bytes_up: int
    bytes_down: int
    threads: int


def bench_inference(model: model_mod.QuantModel, model_name: str, b: int, gamma: int,
                    n_inputs: int = 3, threads: int = 1, seed: int = 0,
                    ks_mode: str = "fft") -> list[BenchRow]:
    """Run full sessions and aggregate per-phase server seconds and volumes."""
    scheme = preset_for_bits(b, gamma)
    m = model_mod.with_acc_bits(model, b)
    server = ServerEngine(m, scheme, master_seed=bytes(32), threads=threads,
                          ks_mode=ks_mode)
    client = Client(scheme, seed=seed + 1)
    key_id = server.register_client(client.make_ksk())
    rng = np.random.default_rng(seed)
    lo, hi = m.input_clip
    phase_s = {"extract": 0.0, "linear": 0.0, "pack": 0.0, "client": 0.0}
    up = down = 0
    for _ in range(n_inputs):
        x = rng.integers(lo, hi + 1, m.input_shape)
        t0 = time.perf_counter()
        res = run_inference(client, server, x, key_id=key_id)
        total = time.perf_counter() - t0
        server_s = 0.0
        for st in res.stats:
            phase_s["extract"] += st.extract_s
            phase_s["linear"] += st.linear_s
            phase_s["pack"] += st.pack_s
            server_s += st.extract_s + st.linear_s + st.pack_s
            up += st.bytes_up
            down += st.bytes_down
        phase_s["client"] += total - server_s
    rows = []
    for phase, secs in phase_s.items():
        rows.append(BenchRow(model=model_name, b=b, gamma=gamma, beta=scheme.beta_eff,
                             phase=phase, seconds=secs / n_inputs,
                             bytes_up=up // n_inputs, bytes_down=down // n_inputs,
                             threads=threads))
    return rows


def synthetic_conv_model(b: int, side: int, channels: int = 3) -> model_mod.QuantModel:
    """One stride-1 conv round sized to produce side*side*channels outputs."""
    rng = np.random.default_rng(7)
    k = rng.integers(-1, 2, (3, 3, channels, channels))
    layer = model_mod.LayerSpec(kind="conv2d", weight=k,
                                bias=np.zeros(channels, dtype=np.int64),
                                stride=1, padding=1, in_shape=(side, side, channels),
                                weight_bits=2, act_bits=2, eta=1,
                                clip=(-(1 << (b - 1)), (1 << (b - 1)) - 1))
    return model_mod.QuantModel(layers=[layer], input_shape=(side, side, channels),
                                num_classes=1, acc_bits=b, input_clip=(0, 3))


def bench_synthetic_round(b: int, gamma: int, side: int, threads: int,
                          seed: int = 0, ks_mode: str = "fft",
                          repeats: int = 1) -> float:
    """Best-of-repeats seconds for one conv server round at the given width."""
    scheme = preset_for_bits(b, gamma)
    model = synthetic_conv_model(b, side)
    server = ServerEngine(model, scheme, master_seed=bytes(32), threads=threads,
                          ks_mode=ks_mode)
    client = Client(scheme, seed=seed + 1)
    key_id = server.register_client(client.make_ksk())
    rng = np.random.default_rng(seed)
    best = float("inf")
    for _ in range(repeats):
        x = rng.integers(0, 4, model.input_shape)
        session_id = client.new_session_id()
        server.open_session(session_id, key_id)
        bundles = client.prepare_round(x.reshape(-1), model.rounds[0].input_len)
        t0 = time.perf_counter()
        with _pinned_blas(threads):
            server.server_round(session_id, 1, bundles)
        best = min(best, time.perf_counter() - t0)
    return best


def _pinned_blas(threads: int):
    """Pin BLAS pools to one thread: the worker pool owns all parallelism.

    Without this, nested BLAS threading oversubscribes the cores and the
    multi-worker measurement degrades instead of scaling.
    """
    del threads
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # measurement still valid, just less isolated
        import contextlib
        return contextlib.nullcontext()


def e2e_projection(compute_seconds: float, total_bytes: int,
                   bandwidths_mb_s=BANDWIDTHS_MB_S) -> list[tuple[float, float]]:
    """Modeled end-to-end latency: compute time + bytes / bandwidth."""
    return [(bw, compute_seconds + total_bytes / (bw * 1e6)) for bw in bandwidths_mb_s]


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS)
    writer.writeheader()
    for row in rows:
        writer.writerow(asdict(row))
    return buf.getvalue()
