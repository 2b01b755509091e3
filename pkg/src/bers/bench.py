"""Per-clip latency of RGB-only inference against the flow pipeline.

Three pipelines run on the same clips, one after another, never interleaved:

* ``rgb_only``: student forward on RGB frames.
* ``flow_teacher``: TV-L1 on every consecutive frame pair, then the teacher.
* ``combined``: both of the above, fused by averaging softmax outputs.

Each pipeline first processes 2 untimed warm-up clips.  Timing uses the
monotonic performance counter around the per-clip work only; model loading
and process start-up are excluded.
"""

from __future__ import annotations

import csv
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import instrument
from .flow import Tvl1Params, clip_flow_stack, stack_to_array
from .net import StudentNet, TeacherNet
from .synthvid import LabeledClip
from .tensor import Tensor, softmax

PIPELINES = ("rgb_only", "flow_teacher", "combined")
WARMUP = 2


@dataclass
class PipelineStats:
    name: str
    times_ms: np.ndarray
    """``[R, clips]`` per-clip wall time."""
    accuracy: float
    counters: dict[str, int]
    """Instrumentation deltas over the timed clips of one repetition."""

    @property
    def mean_ms(self) -> float:
        return float(self.times_ms.mean())

    @property
    def median_ms(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.times_ms, 95))

    @property
    def rep_means(self) -> np.ndarray:
        return self.times_ms.mean(axis=1)


@dataclass
class BenchReport:
    pipelines: dict[str, PipelineStats]
    hardware: str = ""
    clips: int = 0
    repeats: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.pipelines["combined"].mean_ms / self.pipelines["rgb_only"].mean_ms

    @property
    def ordered_every_rep(self) -> bool:
        """rgb_only mean below combined mean in every repetition."""
        return bool(np.all(self.pipelines["rgb_only"].rep_means < self.pipelines["combined"].rep_means))

    def rows(self) -> list[dict]:
        out = []
        for name in PIPELINES:
            s = self.pipelines[name]
            out.append(
                {
                    "pipeline": name,
                    "mean_ms": s.mean_ms,
                    "median_ms": s.median_ms,
                    "p95_ms": s.p95_ms,
                    "accuracy": s.accuracy,
                    "tvl1_calls": s.counters[instrument.TVL1_CALLS],
                    "teacher_forwards": s.counters[instrument.TEACHER_FORWARDS],
                    "student_forwards": s.counters[instrument.STUDENT_FORWARDS],
                    "rep_means_ms": ";".join(repr(float(v)) for v in s.rep_means),
                }
            )
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) + ["ratio", "hardware"])
            w.writeheader()
            for r in rows:
                w.writerow({**{k: _fmt(v) for k, v in r.items()}, "ratio": repr(self.ratio), "hardware": self.hardware})

    def summary(self) -> str:
        lines = [f"{self.clips} clips x {self.repeats} repetitions on {self.hardware}"]
        for r in self.rows():
            lines.append(
                f"  {r['pipeline']:<13} mean {r['mean_ms']:8.2f} ms  median {r['median_ms']:8.2f} ms  "
                f"p95 {r['p95_ms']:8.2f} ms  acc {r['accuracy']:.3f}  "
                f"tvl1={r['tvl1_calls']} teacher={r['teacher_forwards']} student={r['student_forwards']}"
            )
        lines.append(f"  combined / rgb_only mean latency ratio: {self.ratio:.2f}")
        lines.append(f"  rgb_only faster on every repetition: {self.ordered_every_rep}")
        return "\n".join(lines)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def hardware_note() -> str:
    threads = os.environ.get("BERS_THREADS", "1")
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {cpu}, {os.cpu_count()} cpu(s), BERS_THREADS={threads}, numpy {np.__version__}"


def _student_probs(student: StudentNet, clip: LabeledClip) -> np.ndarray:
    x = clip.frames.transpose(3, 0, 1, 2)[None] / 255.0
    return softmax(student.forward(Tensor(x), train=False).logits.data)[0]


def _teacher_probs(teacher: TeacherNet, clip: LabeledClip, params: Tvl1Params) -> np.ndarray:
    flow = stack_to_array(clip_flow_stack(clip.clip, params))[None]
    logits, _ = teacher.forward(Tensor(flow), train=False)
    return softmax(logits.data)[0]


def make_pipelines(student: StudentNet, teacher: TeacherNet, params: Tvl1Params | None = None):
    params = params or Tvl1Params()
    return {
        "rgb_only": lambda c: _student_probs(student, c),
        "flow_teacher": lambda c: _teacher_probs(teacher, c, params),
        "combined": lambda c: 0.5 * (_student_probs(student, c) + _teacher_probs(teacher, c, params)),
    }


def _time_pipeline(fn: Callable[[LabeledClip], np.ndarray], clips: Sequence[LabeledClip], warmup: Sequence[LabeledClip]):
    for c in warmup:
        fn(c)
    times = np.empty(len(clips))
    preds = np.empty(len(clips), dtype=np.int64)
    with instrument.counting() as delta:
        for i, c in enumerate(clips):
            start = time.perf_counter()
            probs = fn(c)
            times[i] = (time.perf_counter() - start) * 1e3
            preds[i] = int(np.argmax(probs))
    return times, preds, delta


def run_bench(
    student: StudentNet,
    teacher: TeacherNet,
    clips: Sequence[LabeledClip],
    repeat: int = 3,
    params: Tvl1Params | None = None,
    warmup_clips: Sequence[LabeledClip] | None = None,
) -> BenchReport:
    if repeat < 3:
        raise ValueError("bench needs repeat >= 3")
    clips = list(clips)
    warm = list(warmup_clips) if warmup_clips is not None else clips[:WARMUP]
    labels = np.array([c.label for c in clips])
    fns = make_pipelines(student, teacher, params)
    times = {name: [] for name in PIPELINES}
    stats: dict[str, PipelineStats] = {}
    for _ in range(repeat):
        for name in PIPELINES:
            t, preds, delta = _time_pipeline(fns[name], clips, warm[:WARMUP])
            times[name].append(t)
            if name not in stats:
                stats[name] = PipelineStats(name, np.empty(0), float(np.mean(preds == labels)), dict(delta))
    for name in PIPELINES:
        stats[name].times_ms = np.stack(times[name])
    return BenchReport(stats, hardware_note(), len(clips), repeat)
