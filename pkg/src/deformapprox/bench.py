"""Wall-clock benchmarks for the deformer pipelines.

Measurements use a monotonic clock with warmup iterations discarded, and
medians are reported alongside means because timings at this scale are
noisy.  Every report carries the thread-environment note and the emitters
repeat the non-reproducibility caveat: numbers measured here describe this
machine and this toy rig only.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .deformer import infer, infer_batch
from .synthrig import evaluate_ground_truth, evaluate_linear

logger = logging.getLogger(__name__)

NONREPRO_NOTE = (
    "Timings are specific to this machine, thread count, and rig scale. "
    "Published deformer timings and fps figures come from production rigs "
    "inside a DCC host on different hardware; those values are not "
    "reproducible here and are not targets. Only the table structure and "
    "the comparison methodology carry over."
)

CSV_HEADER = "label,frames,inputs,vertices,mean_ms,median_ms,p95_ms,fps,note"


class BenchError(ValueError):
    pass


@dataclass
class TimingReport:
    label: str
    frames: int
    inputs: int
    vertices: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    note: str = ""

    def __post_init__(self):
        if self.frames < 1:
            raise BenchError("a timing report needs at least one sample")
        if self.p95_ms < self.median_ms - 1e-9:
            raise BenchError("p95 below median, samples corrupted")


def thread_note() -> str:
    parts = []
    for var in ("DEFORMAPPROX_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        value = os.environ.get(var)
        if value:
            parts.append(f"{var}={value}")
    return " ".join(parts) if parts else "threads=default"


def _report(label: str, samples_s, inputs: int, vertices: int) -> TimingReport:
    ms = np.asarray(samples_s, dtype=np.float64) * 1000.0
    mean = float(ms.mean())
    return TimingReport(
        label=label,
        frames=len(ms),
        inputs=inputs,
        vertices=vertices,
        mean_ms=mean,
        median_ms=float(np.median(ms)),
        p95_ms=float(np.percentile(ms, 95)),
        fps=(1000.0 / mean if mean > 0 else float("inf")),
        note=thread_note(),
    )


def _time_calls(fn, args_per_call, reps: int, warmup: int):
    """One sample per call; warmup calls run first and are discarded."""
    n = len(args_per_call)
    for i in range(warmup):
        fn(*args_per_call[i % n])
    samples = []
    for _ in range(reps):
        for args in args_per_call:
            t0 = time.perf_counter()
            fn(*args)
            samples.append(time.perf_counter() - t0)
    return samples


def time_inference(model, dataset, reps: int = 1, warmup: int = 10,
                   label: str = "deformer", frames=None) -> TimingReport:
    """Per-call wall clock of infer over the dataset's frames."""
    if reps < 1:
        raise BenchError(f"reps must be >= 1, got {reps}")
    idx = np.arange(dataset.frame_count) if frames is None else np.asarray(frames)
    calls = [(dataset.inputs[i], dataset.linear[i]) for i in idx]
    samples = _time_calls(lambda x, lin: infer(model, x, lin), calls, reps, warmup)
    return _report(label, samples, dataset.input_width, dataset.vertex_count)


@dataclass
class ComparisonReport:
    truth: TimingReport
    approx: TimingReport
    speedup: float
    caveat: str = NONREPRO_NOTE


def compare_pipelines(rig, model, sequence, reps: int = 1, warmup: int = 3,
                      truth_cost_multiplier: int = 1) -> ComparisonReport:
    """Ground-truth evaluator vs linear baseline plus model inference.

    truth_cost_multiplier re-evaluates the ground truth that many times per
    frame, standing in for rigs whose true evaluation dwarfs this toy one.
    The speedup is observational; see the attached caveat.
    """
    if truth_cost_multiplier < 1:
        raise BenchError("truth_cost_multiplier must be >= 1")
    from .dataset import default_input_fields, frame_inputs

    fields = default_input_fields(rig)
    n = rig.rest_mesh.vertex_count

    def run_truth(controls):
        for _ in range(truth_cost_multiplier):
            out = evaluate_ground_truth(rig, controls)
        return out

    def run_approx(controls):
        linear = evaluate_linear(rig, controls)
        return infer(model, frame_inputs(rig, controls, fields), linear)

    calls = [(c,) for c in sequence.frames]
    width = model.input_width
    truth = _report("ground-truth rig",
                    _time_calls(run_truth, calls, reps, warmup), width, n)
    approx = _report("linear + deformer",
                     _time_calls(run_approx, calls, reps, warmup), width, n)
    speedup = truth.mean_ms / approx.mean_ms if approx.mean_ms > 0 else float("inf")
    logger.info("pipeline comparison: truth %.3f ms, approx %.3f ms, x%.2f",
                truth.mean_ms, approx.mean_ms, speedup)
    return ComparisonReport(truth, approx, speedup)


@dataclass
class BatchReport:
    c: int
    sequential: TimingReport
    batched: TimingReport
    speedup: float
    caveat: str = NONREPRO_NOTE


def bench_batch(model, dataset, c: int = 64, reps: int = 3,
                warmup: int = 2) -> BatchReport:
    """C characters per frame: C sequential infer calls vs one batched call.
    Each timing sample covers all C characters."""
    if c < 1:
        raise BenchError(f"character count must be >= 1, got {c}")
    idx = np.arange(c) % dataset.frame_count
    inputs = dataset.inputs[idx]
    linear = dataset.linear[idx]

    def run_sequential():
        return [infer(model, inputs[i], linear[i]) for i in range(c)]

    def run_batched():
        return infer_batch(model, inputs, linear)

    calls = [()]
    seq = _report(f"sequential x{c}",
                  _time_calls(lambda: run_sequential(), calls, reps, warmup),
                  dataset.input_width, dataset.vertex_count)
    bat = _report(f"batched C={c}",
                  _time_calls(lambda: run_batched(), calls, reps, warmup),
                  dataset.input_width, dataset.vertex_count)
    speedup = seq.mean_ms / bat.mean_ms if bat.mean_ms > 0 else float("inf")
    logger.info("batch C=%d: sequential %.3f ms, batched %.3f ms, x%.2f",
                c, seq.mean_ms, bat.mean_ms, speedup)
    return BatchReport(c, seq, bat, speedup)


# --- emitters --------------------------------------------------------------


def reports_to_csv(reports, path) -> None:
    from pathlib import Path

    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in reports:
            fh.write(f"{r.label},{r.frames},{r.inputs},{r.vertices},"
                     f"{r.mean_ms:.4f},{r.median_ms:.4f},{r.p95_ms:.4f},"
                     f"{r.fps:.2f},{r.note}\n")


def reports_to_markdown(reports, caveat: str = NONREPRO_NOTE) -> str:
    lines = [
        "| label | frames | inputs | vertices | mean ms | median ms | p95 ms | fps |",
        "| --- | --- | --- | --- | --- | --- | --- | --- |",
    ]
    for r in reports:
        lines.append(
            f"| {r.label} | {r.frames} | {r.inputs} | {r.vertices} "
            f"| {r.mean_ms:.4f} | {r.median_ms:.4f} | {r.p95_ms:.4f} "
            f"| {r.fps:.2f} |")
    lines.append("")
    lines.append(f"note: {reports[0].note if reports else 'threads=default'}")
    lines.append("")
    lines.append(caveat)
    return "\n".join(lines) + "\n"
