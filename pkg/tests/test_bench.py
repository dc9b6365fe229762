"""Timing harness: report invariants, comparisons, emitters."""

import numpy as np
import pytest

from deformapprox.bench import (
    CSV_HEADER,
    NONREPRO_NOTE,
    BenchError,
    TimingReport,
    bench_batch,
    compare_pipelines,
    reports_to_csv,
    reports_to_markdown,
    thread_note,
    time_inference,
)
from deformapprox.dataset import default_input_fields, extract_dataset
from deformapprox.deformer import DeformerConfig, infer, train_deformer
from deformapprox.synthrig import generate_arm_rig, sample_animation


@pytest.fixture(scope="module")
def small_rig():
    return generate_arm_rig(segments=8, radial=8)


@pytest.fixture(scope="module")
def small_sequence(small_rig):
    return sample_animation(small_rig, 6, "clip")


@pytest.fixture(scope="module")
def small_dataset(small_rig, small_sequence):
    return extract_dataset(small_rig, small_sequence, default_input_fields(small_rig))


@pytest.fixture(scope="module")
def small_model(small_rig, small_dataset):
    config = DeformerConfig(
        mesh=small_rig.rest_mesh, fields=default_input_fields(small_rig),
        hidden=(8,), subspace_hidden=(4,), epochs=5, group_size=2, n_groups=2)
    return train_deformer(config, small_dataset)


def make_report(**overrides):
    kwargs = dict(label="x", frames=4, inputs=2, vertices=10,
                  mean_ms=1.0, median_ms=0.9, p95_ms=1.4, fps=1000.0)
    kwargs.update(overrides)
    return TimingReport(**kwargs)


# --- report invariants -----------------------------------------------------


def test_report_requires_samples():
    with pytest.raises(BenchError, match="at least one sample"):
        make_report(frames=0)


def test_report_rejects_p95_below_median():
    with pytest.raises(BenchError, match="p95"):
        make_report(median_ms=2.0, p95_ms=1.0)
    make_report(median_ms=1.0, p95_ms=1.0)  # equal is fine


def test_thread_note_env(monkeypatch):
    for var in ("DEFORMAPPROX_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    assert thread_note() == "threads=default"
    monkeypatch.setenv("OMP_NUM_THREADS", "4")
    assert thread_note() == "OMP_NUM_THREADS=4"
    monkeypatch.setenv("DEFORMAPPROX_THREADS", "2")
    assert thread_note() == "DEFORMAPPROX_THREADS=2 OMP_NUM_THREADS=4"


# --- timing ----------------------------------------------------------------


def test_time_inference_counts_samples(small_dataset, small_model):
    report = time_inference(small_model, small_dataset, reps=2, warmup=1)
    assert report.frames == 2 * small_dataset.frame_count
    assert report.inputs == small_dataset.input_width
    assert report.vertices == small_dataset.vertex_count
    assert report.label == "deformer"
    assert report.mean_ms > 0 and report.fps > 0
    assert report.p95_ms >= report.median_ms - 1e-9


def test_time_inference_single_sample(small_dataset, small_model):
    report = time_inference(small_model, small_dataset, reps=1, warmup=0, frames=[0])
    assert report.frames == 1
    assert report.mean_ms == report.median_ms == report.p95_ms


def test_time_inference_validates_reps(small_dataset, small_model):
    with pytest.raises(BenchError, match="reps"):
        time_inference(small_model, small_dataset, reps=0)


def test_timing_leaves_outputs_unchanged(small_dataset, small_model):
    x, lin = small_dataset.inputs[0], small_dataset.linear[0]
    before = infer(small_model, x, lin)
    time_inference(small_model, small_dataset, reps=1, warmup=1)
    np.testing.assert_array_equal(infer(small_model, x, lin), before)


def test_compare_pipelines(small_rig, small_model, small_sequence):
    report = compare_pipelines(small_rig, small_model, small_sequence,
                               reps=1, warmup=1)
    assert report.truth.label == "ground-truth rig"
    assert report.approx.label == "linear + deformer"
    assert report.truth.frames == report.approx.frames == 6
    assert report.speedup == pytest.approx(
        report.truth.mean_ms / report.approx.mean_ms)
    assert report.caveat == NONREPRO_NOTE


def test_compare_validates_multiplier(small_rig, small_model, small_sequence):
    with pytest.raises(BenchError, match="multiplier"):
        compare_pipelines(small_rig, small_model, small_sequence,
                          truth_cost_multiplier=0)


def test_bench_batch_labels_and_speedup(small_dataset, small_model):
    report = bench_batch(small_model, small_dataset, c=4, reps=2, warmup=1)
    assert report.c == 4
    assert report.sequential.label == "sequential x4"
    assert report.batched.label == "batched C=4"
    assert report.sequential.frames == report.batched.frames == 2
    assert report.speedup == pytest.approx(
        report.sequential.mean_ms / report.batched.mean_ms)


def test_bench_batch_single_character(small_dataset, small_model):
    report = bench_batch(small_model, small_dataset, c=1, reps=1, warmup=0)
    assert report.batched.label == "batched C=1"


def test_bench_batch_validates_count(small_dataset, small_model):
    with pytest.raises(BenchError, match="character count"):
        bench_batch(small_model, small_dataset, c=0)


# --- emitters --------------------------------------------------------------


def test_csv_layout(tmp_path):
    reports = [make_report(label="a"), make_report(label="b", fps=12.345)]
    path = tmp_path / "bench.csv"
    reports_to_csv(reports, path)
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 3
    cells = lines[1].split(",")
    assert len(cells) == len(CSV_HEADER.split(","))
    assert cells[0] == "a" and cells[1] == "4"
    assert lines[2].split(",")[7] == "12.35"


def test_markdown_table_and_caveat():
    text = reports_to_markdown([make_report(label="demo")])
    lines = text.splitlines()
    assert lines[0].startswith("| label |")
    assert "| demo | 4 | 2 | 10 |" in lines[2]
    assert any(line.startswith("note: ") for line in lines)
    assert NONREPRO_NOTE in text


def test_markdown_empty_reports():
    text = reports_to_markdown([], caveat="custom caveat")
    assert "custom caveat" in text
    assert "threads=default" in text


def test_caveat_mentions_scope():
    # the published timing figures must be framed as non-reproducible
    for phrase in ("not", "reproducible", "this machine"):
        assert phrase in NONREPRO_NOTE
