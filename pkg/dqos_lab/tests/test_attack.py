import math

import numpy as np
import pytest

from dqos_lab.attack import (
    AttackController,
    AttackReport,
    AttackInterval,
    ExitReason,
    StealthTarget,
    StepSizes,
    adjust_rates,
    run_attack,
    stealth_audit,
    write_attack_report,
)
from dqos_lab.columnar_io import read_table


def summed(scale):
    return lambda alphas: scale * sum(alphas)


class FakePredictor:
    """Drop rate at the last switch is 10 * sum(alphas); the rest stay at zero."""

    def __init__(self, n_switches=3):
        self.n_switches = n_switches
        self.calls = 0

    def switch_index(self, name):
        return self.n_switches - 1

    def predict(self, state, alphas):
        self.calls += 1
        out = np.zeros(self.n_switches)
        out[-1] = 10.0 * sum(alphas)
        return out


class FakeMonitor:
    def __init__(self):
        self.windows = []

    def sample_state(self, start, end, granularity=None):
        self.windows.append((start, end))
        return object()


class FakeFleet:
    K = 3

    def __init__(self):
        self.applied = []

    def apply(self, alphas, start_ms, epoch):
        self.applied.append((tuple(alphas), start_ms, epoch))
        return 0


@pytest.fixture
def warm_engine(line_engine):
    line_engine.run(5000)
    return line_engine


def test_climbs_into_band():
    result = adjust_rates((0.0, 0.0, 0.0), summed(10.0), StealthTarget(mean_pct=3.0, band_pct=2.0), StepSizes())
    assert result.reason is ExitReason.BAND
    assert result.alphas == pytest.approx((0.1, 0.1, 0.1))
    assert result.predicted_pct == pytest.approx(3.0)
    assert result.predictor_calls == 3
    assert result.feasible


def test_overshoot_backs_off_by_q():
    result = adjust_rates((0.0, 0.0, 0.0), summed(100.0), StealthTarget(mean_pct=3.0, band_pct=2.0), StepSizes())
    assert result.reason is ExitReason.BAND
    # 0.05 overshoots to 15 %, then four decrements of 0.01 reach 3 %
    assert result.alphas == pytest.approx((0.01, 0.01, 0.01))
    assert result.predictor_calls == 6


def test_infeasible_target_returns_full_rates():
    result = adjust_rates((0.0, 0.3), lambda alphas: 0.0, StealthTarget(mean_pct=1.0), StepSizes())
    assert result.reason is ExitReason.NO_FEASIBLE_RATE
    assert result.alphas == (1.0, 1.0)
    assert not result.feasible


def test_already_at_or_above_mean_is_unchanged():
    target = StealthTarget(mean_pct=0.0, band_pct=3.0)
    result = adjust_rates((0.2, 0.2, 0.2), summed(10.0), target, StepSizes())
    assert result.reason is ExitReason.UNCHANGED
    assert result.alphas == (0.2, 0.2, 0.2)
    assert result.predicted_pct == pytest.approx(6.0)
    assert result.predictor_calls == 1


def test_rates_are_clamped_on_entry():
    result = adjust_rates((1.5, -0.5), summed(10.0), StealthTarget(mean_pct=0.0), StepSizes())
    assert result.alphas == (1.0, 0.0)


def test_empty_attack_vector_is_rejected():
    with pytest.raises(ValueError):
        adjust_rates((), summed(1.0), StealthTarget(), StepSizes())


@pytest.mark.parametrize("max_iterations", [50, None])
def test_oscillating_predictor_hits_guard(max_iterations):
    calls = []

    def flip(alphas):
        calls.append(alphas)
        return 100.0 if len(calls) % 2 == 0 else 0.0

    steps = StepSizes(max_iterations=max_iterations)
    result = adjust_rates((0.0, 0.0, 0.0), flip, StealthTarget(mean_pct=3.0, band_pct=2.0), steps)
    assert result.reason is ExitReason.ITERATION_GUARD
    assert result.predictor_calls <= steps.iteration_limit(3)
    assert result.predictor_calls == len(calls)
    assert result.predicted_pct == 0.0


def test_random_monotone_predictors():
    rng = np.random.default_rng(11)
    for _ in range(1_000):
        k = int(rng.integers(1, 4))
        weights = rng.uniform(0.0, 50.0, size=k)
        target = StealthTarget(mean_pct=float(rng.uniform(0.0, 10.0)), band_pct=float(rng.uniform(1.0, 5.0)))
        steps = StepSizes(float(rng.choice([0.05, 0.1])), float(rng.choice([0.01, 0.02])))
        start = rng.uniform(0.0, 1.0, size=k) if rng.random() < 0.5 else np.zeros(k)

        def predict(alphas, w=weights):
            return float(np.dot(w, alphas))

        result = adjust_rates(start, predict, target, steps)
        alphas = np.array(result.alphas)
        assert np.all((alphas >= 0.0) & (alphas <= 1.0))
        assert result.predictor_calls <= steps.iteration_limit(k)
        assert result.predicted_pct == pytest.approx(predict(alphas))
        if result.reason is ExitReason.BAND:
            assert target.contains(result.predicted_pct)
        elif result.reason is ExitReason.NO_FEASIBLE_RATE:
            assert np.all(alphas == 1.0)
            assert target.below(result.predicted_pct)
        elif result.reason is ExitReason.ITERATION_GUARD:
            assert not target.above(result.predicted_pct)
        else:
            assert not target.below(result.predicted_pct)
            assert alphas == pytest.approx(np.clip(start, 0.0, 1.0))


def test_step_sizes():
    assert StepSizes(0.5, 0.5).iteration_limit(2) == 40
    assert StepSizes(max_iterations=7).iteration_limit(3) == 7
    with pytest.raises(ValueError):
        StepSizes(increment_p=0.01, decrement_q=0.05)
    with pytest.raises(ValueError):
        StepSizes(max_iterations=0)


def test_stealth_target_band():
    target = StealthTarget(mean_pct=2.0, band_pct=3.0)
    assert target.upper_pct == 5.0
    assert target.contains(2.0) and target.contains(5.0)
    assert target.below(1.9) and target.above(5.1)
    with pytest.raises(ValueError):
        StealthTarget(band_pct=0.0)


def test_audit_allows_short_excursions():
    target = StealthTarget(mean_pct=0.0, band_pct=3.0)
    verdict = stealth_audit([0.0, 9.0, 9.0, 9.0, 0.0], target)
    assert verdict.stealthy
    assert str(verdict) == "Stealthy"


def test_audit_flags_long_runs():
    target = StealthTarget(mean_pct=0.0, band_pct=3.0)
    assert str(stealth_audit([9.0, 9.0, 9.0, 9.0, 0.0, 9.0], target)) == "Detected(0,1,2,3)"
    assert stealth_audit([0.0, 4.0, 4.0, 4.0, 4.0], target).windows == (1, 2, 3, 4)
    assert stealth_audit([4.0, 4.0], target, persistence=1).windows == (0, 1)
    with pytest.raises(ValueError):
        stealth_audit([0.0], target, persistence=0)


def test_audit_reads_report_rates():
    target = StealthTarget(mean_pct=0.0, band_pct=3.0)
    report = AttackReport(target, 1, 0.0)
    for i in range(5):
        report.intervals.append(AttackInterval(i, i * 10_000.0, (0.5,), 2.0, ExitReason.BAND, 1, 8.0))
    assert stealth_audit(report, target).windows == (0, 1, 2, 3, 4)


def test_controller_restarts_from_zero_above_band(warm_engine):
    predictor = FakePredictor()
    controller = AttackController(
        predictor, FakeMonitor(), FakeFleet(), StealthTarget("switch3", 3.0, 2.0), StepSizes()
    )
    controller.alphas = (0.5, 0.5, 0.5)
    result = controller.plan(warm_engine)
    assert result.reason is ExitReason.BAND
    assert result.alphas == pytest.approx((0.1, 0.1, 0.1))
    assert result.predictor_calls == 4


def test_run_attack_reassesses_each_interval(warm_engine):
    monitor, fleet = FakeMonitor(), FakeFleet()
    target = StealthTarget("switch3", 3.0, 2.0)
    report = run_attack(
        warm_engine, FakePredictor(), target, StepSizes(), 10.0, monitor=monitor, fleet=fleet, duration_s=30.0
    )
    assert [i.t_ms for i in report.intervals] == [5000, 15000, 25000]
    assert [i.reason for i in report.intervals] == [ExitReason.BAND, ExitReason.UNCHANGED, ExitReason.UNCHANGED]
    assert [start for _, start, _ in fleet.applied] == [5000, 15000, 25000]
    assert monitor.windows[0] == (0.0, 5000.0)
    assert warm_engine.now_ms == 35000
    assert report.end_ms == 35000
    assert not any(math.isnan(rate) for rate in report.actual_drop_rates())


def test_run_attack_no_attack_keeps_zero_rates(warm_engine):
    fleet = FakeFleet()
    report = run_attack(
        warm_engine,
        FakePredictor(),
        StealthTarget("switch3", 3.0, 2.0),
        StepSizes(),
        monitor=FakeMonitor(),
        fleet=fleet,
        duration_s=20.0,
        no_attack=True,
    )
    assert all(alphas == (0.0, 0.0, 0.0) for alphas, _, _ in fleet.applied)
    assert all(i.reason is ExitReason.UNCHANGED for i in report.intervals)


def test_run_attack_needs_history_and_duration(line_engine):
    with pytest.raises(ValueError, match="history"):
        run_attack(line_engine, FakePredictor(), StealthTarget("switch3"), StepSizes(),
                   monitor=FakeMonitor(), fleet=FakeFleet(), duration_s=30.0)
    line_engine.run(5000)
    with pytest.raises(ValueError, match="duration"):
        run_attack(line_engine, FakePredictor(), StealthTarget("switch3"), StepSizes(),
                   monitor=FakeMonitor(), fleet=FakeFleet(), duration_s=5.0)


def test_attack_report_file(tmp_path, warm_engine):
    report = run_attack(
        warm_engine,
        FakePredictor(),
        StealthTarget("switch3", 3.0, 2.0),
        StepSizes(),
        monitor=FakeMonitor(),
        fleet=FakeFleet(),
        duration_s=20.0,
    )
    path = write_attack_report(report, str(tmp_path / "attack.tsv"), {"seed": 0})
    header, table = read_table(path)
    assert header["format"] == "dqos-attack/1"
    assert header["band_pct"] == "2"
    assert list(table.columns)[-3:] == ["alpha_1", "alpha_2", "alpha_3"]
    assert list(table["reason"]) == ["band", "unchanged"]
