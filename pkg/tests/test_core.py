import numpy as np
import pytest

from submc.core import (
    ChainTrace,
    Dataset,
    RngStream,
    UsageLedger,
    first_cover_step,
    ledger_record,
    parallel_map,
    uniform,
)


def test_uniform_mean_lln():
    stream = RngStream(seed=1, stream_id=0)
    draws = stream.uniforms(10**6)
    assert abs(draws.mean() - 0.5) < 0.002


def test_uniform_determinism():
    a = RngStream(3, 7).uniforms(64)
    b = RngStream(3, 7).uniforms(64)
    assert np.array_equal(a, b)


def test_distinct_streams_differ():
    a = RngStream(1, 0).uniforms(10)
    b = RngStream(1, 1).uniforms(10)
    assert not np.array_equal(a, b)


def test_uniform_single_draw_sequence():
    s = RngStream(5)
    seq = [uniform(s) for _ in range(4)]
    assert np.array_equal(seq, RngStream(5).uniforms(4))


def test_child_streams_independent_and_stable():
    s = RngStream(9)
    c1 = s.child(0)
    c2 = s.child(1)
    assert c1.stream_id != c2.stream_id
    assert np.array_equal(c1.uniforms(8), s.child(0).uniforms(8))
    assert not np.array_equal(RngStream(9).child(0).uniforms(8), c2.uniforms(8))


def test_ledger_union_and_multiplicity():
    led = UsageLedger(4)
    ledger_record(led, [0, 2])
    ledger_record(led, [1])
    assert set(led.cumulative.tolist()) == {0, 1, 2}
    assert led.access_count == 3

    led2 = UsageLedger(4)
    led2.record([])
    assert led2.cumulative.size == 0

    led3 = UsageLedger(4)
    led3.record([0])
    led3.record([0])
    assert led3.cumulative.tolist() == [0]
    assert led3.access_count == 2


def test_ledger_range_error():
    led = UsageLedger(3)
    with pytest.raises(IndexError):
        led.record([3])


def test_ledger_monotone_cumulative():
    gen = np.random.default_rng(0)
    led = UsageLedger(50)
    for _ in range(40):
        led.record(gen.integers(0, 50, size=5))
    sizes = led.cumulative_sizes
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))


def test_first_cover_step_cases():
    led = UsageLedger(3)
    for s in ([0], [1], [2]):
        led.record(s)
    assert first_cover_step(led, 3) == 3

    led2 = UsageLedger(3)
    led2.record([0, 1, 2])
    assert first_cover_step(led2, 2) == 1

    led3 = UsageLedger(3)
    for _ in range(5):
        led3.record([0])
    assert first_cover_step(led3, 2) is None


def test_ledger_from_batches_matches_record():
    gen = np.random.default_rng(1)
    batches = gen.integers(0, 30, size=(25, 4))
    a = UsageLedger.from_batches(30, batches)
    b = UsageLedger(30)
    for row in batches:
        b.record(row)
    assert a.access_count == b.access_count
    assert a.cumulative_sizes == b.cumulative_sizes
    assert a.sizes == b.sizes
    c = UsageLedger.from_batches(30, batches, keep_sets=False)
    assert c.step_sets is None
    assert c.cumulative_sizes == b.cumulative_sizes


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(4))
    ds = Dataset(np.zeros((3, 2)), np.zeros(3))
    assert ds.n == 3 and ds.d == 2


def test_trace_csv_roundtrip(tmp_path):
    led = UsageLedger(5)
    led.record([0, 1])
    led.record([2])
    states = np.array([[0.0], [0.5], [0.25]])
    tr = ChainTrace(states, np.array([True, False]), led)
    path = tmp_path / "trace.csv"
    tr.to_csv(path, manifest_hash="abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# manifest_hash=abc"
    assert lines[1].split(",") == ["step", "theta_0", "accepted", "used_size", "cumulative_size"]
    assert lines[3].split(",") == ["1", "0.5", "1", "2", "2"]


def test_parallel_map_thread_invariance():
    def job(i):
        return RngStream(4).child(i).uniforms(3).sum()

    assert parallel_map(job, 8, threads=1) == parallel_map(job, 8, threads=4)
