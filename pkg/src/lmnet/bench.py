"""Wall-clock benchmark of the single-frame pipeline.

Measures the whole frame path — point-cloud preprocessing/projection,
network forward, and post-processing — over N repetitions on a monotonic
clock, excluding a configurable number of warm-up runs. Optionally also
times a forward pass with the direct (tap-by-tap) convolution path to
quantify the im2col fast-path speedup at verified-equal outputs.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .geometry import ProjectionConfig
from .network import LMNetParams, forward
from .pipeline import run_frame
from .postprocess import NmsConfig
from .tensorops import conv_method

STAGES = ("preprocess", "forward", "postprocess")


@dataclass
class StageStats:
    mean: float
    median: float
    p95: float

    @classmethod
    def from_samples(cls, samples: list[float]) -> "StageStats":
        arr = np.asarray(samples)
        return cls(
            mean=float(arr.mean()),
            median=float(np.median(arr)),
            p95=float(np.percentile(arr, 95)),
        )


@dataclass
class TimingReport:
    frames: int
    warmup: int
    threads: int | None
    machine: str
    stages: dict[str, StageStats]
    total: StageStats
    frames_per_second: float
    fast_path: dict | None = None
    detections: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [f"{'stage':<12} {'mean ms':>10} {'median ms':>10} {'p95 ms':>10}"]
        for name in (*STAGES, "total"):
            s = self.total if name == "total" else self.stages[name]
            rows.append(
                f"{name:<12} {s.mean * 1e3:>10.2f} {s.median * 1e3:>10.2f} "
                f"{s.p95 * 1e3:>10.2f}"
            )
        rows.append(f"throughput: {self.frames_per_second:.2f} frames/s")
        if self.fast_path:
            rows.append(
                "im2col vs direct forward: "
                f"{self.fast_path['speedup']:.2f}x speedup, "
                f"max |diff| {self.fast_path['max_abs_diff']:.2e}"
            )
        return "\n".join(rows)


def _machine_descriptor() -> str:
    return (
        f"{platform.platform()} | {platform.machine()} | "
        f"python {platform.python_version()} | numpy {np.__version__}"
    )


def compare_conv_paths(params: LMNetParams, channels: np.ndarray) -> dict:
    """Outputs and wall time of the direct vs im2col forward paths."""
    results = {}
    outputs = {}
    for method in ("im2col", "direct"):
        with conv_method(method):
            t0 = time.perf_counter()
            obj, corners, _ = forward(params, channels, training=False)
            results[method] = time.perf_counter() - t0
            outputs[method] = (obj, corners)
    diff = max(
        float(np.abs(outputs["im2col"][0] - outputs["direct"][0]).max()),
        float(np.abs(outputs["im2col"][1] - outputs["direct"][1]).max()),
    )
    return {
        "direct_seconds": results["direct"],
        "im2col_seconds": results["im2col"],
        "speedup": results["direct"] / results["im2col"],
        "max_abs_diff": diff,
    }


def run_benchmark(
    points: np.ndarray,
    params: LMNetParams,
    proj_cfg: ProjectionConfig,
    nms_cfg: NmsConfig,
    repetitions: int = 10,
    warmup: int = 3,
    threads: int | None = None,
    compare_naive: bool = False,
) -> TimingReport:
    if repetitions < 1:
        raise InvalidArgumentError("repetitions must be >= 1")
    if warmup < 0:
        raise InvalidArgumentError("warmup must be >= 0")

    from threadpoolctl import threadpool_limits

    stage_samples: dict[str, list[float]] = {name: [] for name in STAGES}
    totals: list[float] = []
    detections = 0
    with threadpool_limits(limits=threads):
        for rep in range(warmup + repetitions):
            result = run_frame(points, params, proj_cfg, nms_cfg)
            if rep < warmup:
                continue
            for name in STAGES:
                stage_samples[name].append(result.stage_seconds[name])
            totals.append(result.total_seconds)
            detections = len(result.detections)
        fast_path = None
        if compare_naive:
            fast_path = compare_conv_paths(params, result.fvmap.channels)

    total_stats = StageStats.from_samples(totals)
    return TimingReport(
        frames=repetitions,
        warmup=warmup,
        threads=threads,
        machine=_machine_descriptor(),
        stages={name: StageStats.from_samples(stage_samples[name]) for name in STAGES},
        total=total_stats,
        frames_per_second=1.0 / total_stats.mean if total_stats.mean > 0 else 0.0,
        fast_path=fast_path,
        detections=detections,
    )
