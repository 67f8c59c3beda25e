import numpy as np
import pytest

from takunet import ArchConfig, TakuNet
from takunet.bench import (
    ACTIVATIONS,
    LatencyReport,
    bench_activations,
    bench_model,
    check_activations_at_zero,
    format_activation_table,
)

MINI = ArchConfig(input_size=(64, 64), stem_channels=4, stage_depths=(1, 1, 1, 1), stage_out_channels=(4, 8, 8, 8))


@pytest.fixture(scope="module")
def latency():
    return bench_model(TakuNet(MINI), warmup=3, iters=100)


def test_sample_count_and_fields(latency):
    assert len(latency.samples_ms) == latency.timed_iters == 100
    assert latency.warmup_iters == 3 and latency.batch == 1 and latency.input == (64, 64)
    assert all(s > 0 for s in latency.samples_ms)


def test_fps_definition(latency):
    assert abs(latency.fps - 1000.0 / float(np.mean(latency.samples_ms))) <= 1e-9
    assert latency.mean_ms >= 0.5 * latency.median_ms
    assert latency.p95_ms >= latency.median_ms


def test_summary_from_known_samples():
    r = LatencyReport("cpu", 0, 4, [1.0, 2.0, 3.0, 6.0], 1, (8, 8))
    assert r.mean_ms == 3.0 and r.median_ms == 2.5
    assert abs(r.fps - 1000 / 3) < 1e-12
    assert set(r.as_dict()) == {"device", "batch", "input", "mean_ms", "median_ms", "p95_ms", "fps"}


def test_too_few_iters():
    with pytest.raises(ValueError):
        bench_model(TakuNet(MINI), iters=29)


def test_repeat_runs_reported(latency):
    again = bench_model(TakuNet(MINI), warmup=3, iters=30)
    print(f"fps run 1 {latency.fps:.1f}, run 2 {again.fps:.1f}")
    assert again.fps > 0


def test_activations_at_zero():
    check_activations_at_zero()
    z = np.zeros((3, 3), np.float32)
    for fn in ACTIVATIONS.values():
        assert np.array_equal(fn(z), z)


def test_activation_table_sorted():
    rows = bench_activations(shape=(200, 100), iters=3)
    assert {r.name for r in rows} == set(ACTIVATIONS)
    totals = [r.total_s for r in rows]
    assert totals == sorted(totals)
    text = format_activation_table(rows)
    assert text.splitlines()[1].split()[0] == rows[0].name


def test_doubling_iters_roughly_doubles_time():
    one = sum(r.total_s for r in bench_activations(iters=5))
    two = sum(r.total_s for r in bench_activations(iters=10))
    print(f"5 iters {one:.3f}s, 10 iters {two:.3f}s, ratio {two / one:.2f}")
    assert 2 * 0.7 <= two / one <= 2 * 1.3
