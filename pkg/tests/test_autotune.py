"""Tuner: enumeration, measurement, pruning, persistence."""

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtcg import autotune as at
from rtcg import jit

FULL_GRID = {"unroll": (1, 2, 4, 8), "workers": (1, 2, 4)}


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def runnable(self, cost):
        def run():
            self.now += cost
        return run


def oracle_factory(clock, cost_of):
    def factory(assignment):
        return clock.runnable(cost_of(assignment))
    return factory


@pytest.fixture(scope="module")
def fp():
    return jit.PlatformFingerprint(os="test-os", cpu="test-cpu", cores=1,
                                   toolchain="test-cc 1.0",
                                   toolkit_version="0.1.0")


PROTO = at.MeasurementProtocol(warmup=1, repeats=3, statistic="minimum",
                               timeout_seconds=1e9)


# --- parameter space -----------------------------------------------------------


def test_enumerate_full_grid_is_twelve():
    space = at.ParamSpace.make(FULL_GRID)
    assert len(space.enumerate()) == 12


def test_enumerate_constraint_drops_exactly_8x4():
    space = at.ParamSpace.make(
        FULL_GRID, constraints=(lambda a: a["unroll"] * a["workers"] <= 16,))
    got = space.enumerate()
    assert len(got) == 11
    assert {"unroll": 8, "workers": 4} not in got
    assert {"unroll": 8, "workers": 2} in got


def test_enumerate_single_axis_single_value():
    assert at.ParamSpace.make({"unroll": (1,)}).enumerate() == [{"unroll": 1}]


def test_enumerate_order_is_axis_lexicographic():
    space = at.ParamSpace.make({"workers": (1, 2), "unroll": (4, 1)})
    got = space.enumerate()
    # axes sort by name (unroll first); candidates keep their given order
    assert got == [{"unroll": 4, "workers": 1}, {"unroll": 4, "workers": 2},
                   {"unroll": 1, "workers": 1}, {"unroll": 1, "workers": 2}]


def test_empty_space_raises():
    with pytest.raises(at.EmptySpace):
        at.ParamSpace.make({"u": (1, 2)},
                           constraints=(lambda a: False,)).enumerate()
    with pytest.raises(at.EmptySpace):
        at.ParamSpace.make({}).enumerate()


@given(st.dictionaries(st.sampled_from(["p", "q", "r"]),
                       st.lists(st.integers(0, 9), min_size=1, max_size=4,
                                unique=True),
                       min_size=1, max_size=3))
def test_enumerate_count_is_product_of_axis_sizes(axes):
    space = at.ParamSpace.make(axes)
    assert len(space.enumerate()) == math.prod(len(v) for v in axes.values())


# --- measurement ------------------------------------------------------------------


def test_measure_counts_invocations():
    clock = FakeClock()
    calls = []

    def run():
        calls.append(1)
        clock.now += 1e-3

    proto = at.MeasurementProtocol(warmup=2, repeats=3)
    m = at.measure(run, proto, clock=clock)
    assert len(calls) == 5
    assert len(m.samples) == 3


def test_measure_median_of_fake_deltas():
    clock = FakeClock()
    deltas = iter([5e-3, 3e-3, 4e-3])
    proto = at.MeasurementProtocol(warmup=0, repeats=3, statistic="median",
                                   timeout_seconds=1e9)
    m = at.measure(lambda: setattr(clock, "now", clock.now + next(deltas)),
                   proto, clock=clock)
    assert m.seconds == pytest.approx(4e-3)


def test_measure_minimum_statistic():
    clock = FakeClock()
    deltas = iter([5e-3, 3e-3, 4e-3])
    proto = at.MeasurementProtocol(warmup=0, repeats=3, statistic="minimum",
                                   timeout_seconds=1e9)
    m = at.measure(lambda: setattr(clock, "now", clock.now + next(deltas)),
                   proto, clock=clock)
    assert m.seconds == pytest.approx(3e-3)


def test_measure_timeout():
    clock = FakeClock()
    proto = at.MeasurementProtocol(warmup=0, repeats=3, timeout_seconds=1.0)
    with pytest.raises(at.VariantTimeout):
        at.measure(clock.runnable(0.7), proto, clock=clock)


def test_measure_wraps_crashes():
    def boom():
        raise RuntimeError("kernel fault")
    with pytest.raises(at.VariantCrashed) as err:
        at.measure(boom, PROTO, clock=FakeClock())
    assert "kernel fault" in str(err.value)


def test_protocol_validation():
    with pytest.raises(ValueError):
        at.MeasurementProtocol(repeats=0)
    with pytest.raises(ValueError):
        at.MeasurementProtocol(warmup=-1)
    with pytest.raises(ValueError):
        at.MeasurementProtocol(statistic="mean")
    with pytest.raises(ValueError):
        at.MeasurementProtocol(timeout_seconds=0)


# --- tune --------------------------------------------------------------------------


def test_tune_returns_oracle_argmin(fp):
    clock = FakeClock()
    space = at.ParamSpace.make(FULL_GRID)
    result = at.tune(oracle_factory(clock,
                                    lambda a: (10 - a["unroll"]) * 1e-3),
                     space, PROTO, fp=fp, clock=clock, prune=False)
    assert result.best_assignment["unroll"] == 8


def test_tune_tie_breaks_by_enumeration_order(fp):
    clock = FakeClock()
    space = at.ParamSpace.make(FULL_GRID)
    result = at.tune(oracle_factory(clock, lambda a: 1e-3), space, PROTO,
                     fp=fp, clock=clock, prune=False)
    assert result.best_assignment == {"unroll": 1, "workers": 1}


def test_tune_campaigns_are_deterministic(fp):
    space = at.ParamSpace.make(FULL_GRID)
    results = []
    for _ in range(2):
        clock = FakeClock()
        results.append(at.tune(
            oracle_factory(clock, lambda a: a["workers"] * 1e-3),
            space, PROTO, fp=fp, clock=clock))
    assert results[0] == results[1]


def test_tune_isolates_crashing_variants(fp):
    clock = FakeClock()

    def factory(a):
        if a["unroll"] == 2:
            def boom():
                raise RuntimeError("no")
            return boom
        return clock.runnable(a["unroll"] * 1e-3)

    result = at.tune(factory, at.ParamSpace.make(FULL_GRID), PROTO,
                     fp=fp, clock=clock, prune=False)
    crashed = [e for e in result.table if e.status == "crashed"]
    assert len(crashed) == 3
    assert all(dict(e.assignment)["unroll"] == 2 for e in crashed)
    assert result.best_assignment["unroll"] == 1


def test_tune_records_timeouts_and_continues(fp):
    clock = FakeClock()
    proto = at.MeasurementProtocol(warmup=0, repeats=2, timeout_seconds=0.1)

    def factory(a):
        cost = 1.0 if a["workers"] == 4 else 1e-3
        return clock.runnable(cost)

    result = at.tune(factory, at.ParamSpace.make(FULL_GRID), proto,
                     fp=fp, clock=clock, prune=False)
    assert sum(e.status == "timeout" for e in result.table) == 4
    assert result.best_assignment["workers"] != 4


def test_tune_all_failed_lists_every_assignment(fp):
    def factory(a):
        raise RuntimeError("build broke")
    with pytest.raises(at.AllVariantsFailed) as err:
        at.tune(factory, at.ParamSpace.make(FULL_GRID), PROTO,
                fp=fp, clock=FakeClock())
    assert len(err.value.reasons) == 12
    assert "unroll=8,workers=4" in err.value.reasons


def test_tune_factory_failure_is_recorded_not_fatal(fp):
    clock = FakeClock()

    def factory(a):
        if a == {"unroll": 1, "workers": 1}:
            raise OSError("compile failed")
        return clock.runnable(1e-3)

    result = at.tune(factory, at.ParamSpace.make(FULL_GRID), PROTO,
                     fp=fp, clock=clock, prune=False)
    assert result.table[0].status == "crashed"
    assert "compile failed" in result.table[0].reason


def test_prune_drops_condemned_axis_values(fp):
    clock = FakeClock()
    result = at.tune(
        oracle_factory(clock,
                       lambda a: 1e-2 if a["workers"] == 4 else 1e-3),
        at.ParamSpace.make(FULL_GRID), PROTO, fp=fp, clock=clock, prune=True)
    pruned = [dict(e.assignment) for e in result.table if e.status == "pruned"]
    assert pruned and all(p["workers"] == 4 for p in pruned)
    assert result.best_assignment["workers"] != 4


def test_prune_disabled_measures_everything(fp):
    clock = FakeClock()
    result = at.tune(
        oracle_factory(clock,
                       lambda a: 1e-2 if a["workers"] == 4 else 1e-3),
        at.ParamSpace.make(FULL_GRID), PROTO, fp=fp, clock=clock, prune=False)
    assert all(e.status == "ok" for e in result.table)


def test_prune_never_triggers_below_threshold(fp):
    clock = FakeClock()
    result = at.tune(
        oracle_factory(clock, lambda a: 1e-3 + a["unroll"] * 1e-4),
        at.ParamSpace.make(FULL_GRID), PROTO, fp=fp, clock=clock, prune=True)
    assert all(e.status == "ok" for e in result.table)


@given(st.lists(st.integers(1, 40), min_size=4, max_size=4))
def test_prune_is_exact_when_cost_depends_on_one_axis(unroll_costs_ms):
    fp = jit.PlatformFingerprint(os="t", cpu="t", cores=1, toolchain="t",
                                 toolkit_version="0")
    per_unroll = dict(zip((1, 2, 4, 8), unroll_costs_ms))
    clock = FakeClock()
    result = at.tune(
        oracle_factory(clock, lambda a: per_unroll[a["unroll"]] * 1e-3),
        at.ParamSpace.make(FULL_GRID), PROTO, fp=fp, clock=clock, prune=True)
    # the winning unroll's column cost equals the true column minimum: a
    # value is condemned only on evidence from its own assignments, so the
    # best value of the only cost-bearing axis is never eliminated
    best_cost = per_unroll[result.best_assignment["unroll"]]
    assert best_cost == min(per_unroll.values())


@given(st.lists(st.integers(1, 40), min_size=12, max_size=12))
def test_pruned_entries_have_condemning_evidence(costs_ms):
    fp = jit.PlatformFingerprint(os="t", cpu="t", cores=1, toolchain="t",
                                 toolkit_version="0")
    space = at.ParamSpace.make(FULL_GRID)
    table = {at.assignment_text(a): c * 1e-3
             for a, c in zip(space.enumerate(), costs_ms)}
    clock = FakeClock()
    result = at.tune(
        oracle_factory(clock, lambda a: table[at.assignment_text(a)]),
        space, PROTO, fp=fp, clock=clock, prune=True)
    ok = [e for e in result.table if e.status == "ok"]
    best = min(e.stat_seconds for e in ok)
    # every pruned assignment carries an axis value all of whose measured
    # siblings exceeded 3x the final best (best only shrinks over a run, so
    # the condemnation threshold at the time was at least as strict)
    for entry in (e for e in result.table if e.status == "pruned"):
        condemned = False
        for name, value in entry.assignment:
            siblings = [e.stat_seconds for e in ok
                        if dict(e.assignment)[name] == value]
            if siblings and all(s > 3.0 * best * (1 - 1e-9)
                                for s in siblings):
                condemned = True
        assert condemned, entry


def test_tune_sampling_is_seeded_and_counted(fp):
    clock = FakeClock()
    space = at.ParamSpace.make(FULL_GRID)
    factory = oracle_factory(clock, lambda a: 1e-3)
    r1 = at.tune(factory, space, PROTO, fp=fp, clock=clock, sample=5, seed=3,
                 prune=False)
    r2 = at.tune(factory, space, PROTO, fp=fp, clock=clock, sample=5, seed=3,
                 prune=False)
    measured1 = [e.assignment for e in r1.table if e.status == "ok"]
    measured2 = [e.assignment for e in r2.table if e.status == "ok"]
    assert len(measured1) == 5
    assert measured1 == measured2
    assert sum(e.status == "unsampled" for e in r1.table) == 7


def test_tune_sample_of_one(fp):
    clock = FakeClock()
    r = at.tune(oracle_factory(clock, lambda a: 1e-3),
                at.ParamSpace.make(FULL_GRID), PROTO, fp=fp, clock=clock,
                sample=1)
    assert sum(e.status == "ok" for e in r.table) == 1


# --- persistence --------------------------------------------------------------------


def test_store_round_trip_and_warm_hit(tmp_path, fp):
    store = at.TuneStore(tmp_path)
    clock = FakeClock()
    builds = []

    def factory(a):
        builds.append(a)
        return clock.runnable(a["unroll"] * 1e-3)

    space = at.ParamSpace.make(FULL_GRID)
    cold = at.tune(factory, space, PROTO, store=store, problem_key="lin/1e6",
                   fp=fp, clock=clock)
    cold_builds = len(builds)
    warm = at.tune(factory, space, PROTO, store=store, problem_key="lin/1e6",
                   fp=fp, clock=clock)
    assert len(builds) == cold_builds  # zero builds, zero measurements
    assert warm.from_store and not cold.from_store
    assert warm == cold


def test_store_json_round_trip(tmp_path, fp):
    clock = FakeClock()
    result = at.tune(oracle_factory(clock, lambda a: a["unroll"] * 1e-3),
                     at.ParamSpace.make(FULL_GRID), PROTO, fp=fp, clock=clock)
    again = at.TuneResult.from_json(result.to_json())
    assert again == result
    assert again.protocol == PROTO
    assert dict(again.axes)["unroll"] == (1, 2, 4, 8)


def test_store_is_fingerprint_keyed(tmp_path, fp):
    store = at.TuneStore(tmp_path)
    clock = FakeClock()
    at.tune(oracle_factory(clock, lambda a: 1e-3),
            at.ParamSpace.make(FULL_GRID), PROTO, store=store,
            problem_key="k", fp=fp, clock=clock)
    other = jit.PlatformFingerprint(os="test-os", cpu="test-cpu", cores=1,
                                    toolchain="upgraded-cc 2.0",
                                    toolkit_version="0.1.0")
    assert store.load(other, "k") is None
    assert store.load(fp, "k") is not None


def test_store_rejects_unreadable_records(tmp_path, fp):
    store = at.TuneStore(tmp_path)
    path = store._path(fp, "junk")
    path.parent.mkdir(parents=True)
    path.write_text("{broken")
    assert store.load(fp, "junk") is None


def test_store_requires_problem_key(fp):
    with pytest.raises(ValueError):
        at.tune(lambda a: (lambda: None), at.ParamSpace.make(FULL_GRID),
                PROTO, store=at.TuneStore("/tmp/unused"), fp=fp,
                clock=FakeClock())


def test_tune_layout_on_disk(tmp_path, fp):
    store = at.TuneStore(tmp_path)
    clock = FakeClock()
    at.tune(oracle_factory(clock, lambda a: 1e-3),
            at.ParamSpace.make(FULL_GRID), PROTO, store=store,
            problem_key="probe", fp=fp, clock=clock)
    path = tmp_path / "tune" / fp.digest() / "probe.json"
    assert path.exists()
