"""
Stealthy attack-rate control.

The attacker keeps the predicted drop rate at a monitored switch inside a
band [m, m+k] percent while forging as many new flows as that band allows.
`adjust_rates` is the greedy search: raise every attacker's rate by p while
the prediction is below m, back off by q while it is above m+k. It is run
again every reassessment interval by `AttackController` on the latest
sampled network state.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from dqos_lab import columnar_io
from dqos_lab.predictor import TrainedPredictor
from dqos_lab.simcore import Engine, LatencyRecord, TrafficClass, ms_to_us
from dqos_lab.telemetry import StateMonitor

log = logging.getLogger(__name__)

BAND_TOLERANCE = 1e-9
ATTACK_REPORT_FORMAT = "dqos-attack/1"
ATTACK_REPORT_COLUMNS = [
    "interval",
    "t_ms",
    "predicted_pct",
    "actual_pct",
    "reason",
    "predictor_calls",
]


@dataclass(frozen=True)
class StealthTarget:
    """Drop-rate band [mean_pct, mean_pct + band_pct] at `target_switch`."""

    target_switch: str = "switch34"
    mean_pct: float = 0.0
    band_pct: float = 3.0

    def __post_init__(self):
        if self.band_pct <= 0:
            raise ValueError("band_pct must be > 0")
        if self.mean_pct < 0:
            raise ValueError("mean_pct must be >= 0")

    @property
    def upper_pct(self) -> float:
        return self.mean_pct + self.band_pct

    def below(self, dr: float) -> bool:
        return dr < self.mean_pct - BAND_TOLERANCE

    def above(self, dr: float) -> bool:
        return dr > self.upper_pct + BAND_TOLERANCE

    def contains(self, dr: float) -> bool:
        return not (self.below(dr) or self.above(dr))


@dataclass(frozen=True)
class StepSizes:
    increment_p: float = 0.05
    decrement_q: float = 0.01
    max_iterations: int | None = None

    def __post_init__(self):
        if not 0 < self.decrement_q <= self.increment_p <= 1:
            raise ValueError("step sizes must satisfy 0 < q <= p <= 1")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def iteration_limit(self, k: int) -> int:
        """Predictor-call budget; defaults to 10 * K / q."""
        if self.max_iterations is not None:
            return self.max_iterations
        return max(1, int(math.ceil(10 * k / self.decrement_q)))


class ExitReason(str, Enum):
    UNCHANGED = "unchanged"
    BAND = "band"
    ITERATION_GUARD = "iteration_guard"
    NO_FEASIBLE_RATE = "no_feasible_rate"


@dataclass(frozen=True)
class AdjustResult:
    alphas: tuple[float, ...]
    predicted_pct: float
    reason: ExitReason
    predictor_calls: int

    @property
    def feasible(self) -> bool:
        return self.reason is not ExitReason.NO_FEASIBLE_RATE


Predict = Callable[[tuple[float, ...]], float]


class _Budget:
    def __init__(self, predict: Predict, limit: int, target: StealthTarget):
        self.predict = predict
        self.limit = limit
        self.target = target
        self.calls = 0
        self.best: tuple[float, tuple[float, ...]] | None = None

    @property
    def exhausted(self) -> bool:
        return self.calls >= self.limit

    def __call__(self, alphas: np.ndarray) -> float:
        candidate = tuple(float(a) for a in alphas)
        dr = float(self.predict(candidate))
        self.calls += 1
        if not self.target.above(dr) and (self.best is None or dr > self.best[0]):
            self.best = (dr, candidate)
        return dr

    def fallback(self) -> AdjustResult:
        dr, alphas = self.best
        log.warning("Rate search hit its %d-call guard; keeping %.3f%% at %s", self.limit, dr, alphas)
        return AdjustResult(alphas, dr, ExitReason.ITERATION_GUARD, self.calls)


def adjust_rates(
    alphas: Sequence[float],
    predict: Predict,
    target: StealthTarget,
    steps: StepSizes,
) -> AdjustResult:
    """
    Greedy rate adjustment towards the stealth band.

    Outer loop: while the predicted drop rate is below m, add p to every rate.
    Inner loop: while it is above m+k, subtract q from every rate. Rates are
    clamped to [0, 1] after every step. If every rate is already 1 and the
    prediction is still below m, the result is all ones with
    NO_FEASIBLE_RATE. If the call budget runs out, the best rates seen so far
    (highest prediction not above m+k) are returned with ITERATION_GUARD.
    """
    current = np.clip(np.asarray(alphas, dtype=float), 0.0, 1.0)
    if current.ndim != 1 or current.size == 0:
        raise ValueError("alphas must be a non-empty vector")
    budget = _Budget(predict, steps.iteration_limit(current.size), target)
    dr = budget(current)
    if not target.below(dr):
        return AdjustResult(tuple(float(a) for a in current), dr, ExitReason.UNCHANGED, budget.calls)

    while target.below(dr):
        if np.all(current >= 1.0):
            log.warning(
                "Even full attack rates predict %.3f%% < %.3f%% at %s",
                dr,
                target.mean_pct,
                target.target_switch,
            )
            return AdjustResult(tuple(float(a) for a in current), dr, ExitReason.NO_FEASIBLE_RATE, budget.calls)
        if budget.exhausted:
            return budget.fallback()
        current = np.clip(current + steps.increment_p, 0.0, 1.0)
        dr = budget(current)
        while target.above(dr):
            if budget.exhausted:
                return budget.fallback()
            current = np.clip(current - steps.decrement_q, 0.0, 1.0)
            dr = budget(current)

    return AdjustResult(tuple(float(a) for a in current), dr, ExitReason.BAND, budget.calls)


# --------------------------------------------------------------------------- #
# Periodic controller
# --------------------------------------------------------------------------- #
@dataclass
class AttackInterval:
    index: int
    t_ms: float
    alphas: tuple[float, ...]
    predicted_pct: float
    reason: ExitReason
    predictor_calls: int
    actual_pct: float = math.nan


@dataclass
class AttackReport:
    target: StealthTarget
    k: int
    start_ms: float
    end_ms: float = 0.0
    intervals: list[AttackInterval] = field(default_factory=list)
    records: tuple[LatencyRecord, ...] = ()

    def actual_drop_rates(self) -> np.ndarray:
        return np.array([i.actual_pct for i in self.intervals], dtype=float)

    def mean_latency(self) -> float:
        values = [r.latency for r in self.records if r.traffic_class is TrafficClass.VIDEO]
        return float(np.mean(values)) if values else math.nan

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i in self.intervals:
            row = {
                "interval": i.index,
                "t_ms": i.t_ms,
                "predicted_pct": i.predicted_pct,
                "actual_pct": i.actual_pct,
                "reason": i.reason.value,
                "predictor_calls": i.predictor_calls,
            }
            row.update({f"alpha_{n + 1}": a for n, a in enumerate(i.alphas)})
            rows.append(row)
        columns = ATTACK_REPORT_COLUMNS + [f"alpha_{n + 1}" for n in range(self.k)]
        return pd.DataFrame(rows, columns=columns)


class AttackController:
    """
    Engine timer owner that re-plans the attack rates every `interval_s`.

    At each tick it samples the last `window_s` of network state, searches
    rates with `adjust_rates` against the predictor, schedules the resulting
    streams for the coming interval and closes the previous interval's row
    with the measured drop rate at the target switch.
    """

    def __init__(
        self,
        predictor: TrainedPredictor,
        monitor: StateMonitor,
        fleet: Any,
        target: StealthTarget,
        steps: StepSizes,
        interval_s: float = 10.0,
        window_s: float = 5.0,
        enabled: bool = True,
    ):
        if interval_s <= 0 or window_s <= 0:
            raise ValueError("interval_s and window_s must be > 0")
        self.predictor = predictor
        self.monitor = monitor
        self.fleet = fleet
        self.target = target
        self.steps = steps
        self.interval_s = interval_s
        self.window_s = window_s
        self.enabled = enabled
        self.switch_index = predictor.switch_index(target.target_switch)
        self.alphas: tuple[float, ...] = (0.0,) * fleet.K
        self.intervals: list[AttackInterval] = []
        self.stop_us: float = math.inf

    def start(self, engine: Engine) -> None:
        engine.schedule_timer(self, engine.clock, None)

    def _predictor_at(self, state) -> Predict:
        def predict(alphas: tuple[float, ...]) -> float:
            return float(self.predictor.predict(state, alphas)[self.switch_index])

        return predict

    def close_interval(self, engine: Engine) -> None:
        if self.intervals and math.isnan(self.intervals[-1].actual_pct):
            self.intervals[-1].actual_pct = engine.drop_rate(
                self.target.target_switch, self.interval_s * 1000.0
            )

    def plan(self, engine: Engine) -> AdjustResult:
        now = engine.now_ms
        state = self.monitor.sample_state(now - self.window_s * 1000.0, now)
        predict = self._predictor_at(state)
        if not self.enabled:
            zeros = (0.0,) * self.fleet.K
            return AdjustResult(zeros, predict(zeros), ExitReason.UNCHANGED, 1)
        result = adjust_rates(self.alphas, predict, self.target, self.steps)
        if result.reason is ExitReason.UNCHANGED and self.target.above(result.predicted_pct):
            log.debug("Predicted %.3f%% above band at t=%.0f ms; restarting from zero", result.predicted_pct, now)
            restart = adjust_rates((0.0,) * self.fleet.K, predict, self.target, self.steps)
            result = AdjustResult(
                restart.alphas,
                restart.predicted_pct,
                restart.reason,
                result.predictor_calls + restart.predictor_calls,
            )
        return result

    def on_timer(self, engine: Engine, tag: Any) -> None:
        self.close_interval(engine)
        if engine.clock >= self.stop_us:
            return
        result = self.plan(engine)
        self.alphas = result.alphas
        self.fleet.apply(self.alphas, engine.now_ms, self.interval_s)
        self.intervals.append(
            AttackInterval(
                len(self.intervals),
                engine.now_ms,
                result.alphas,
                result.predicted_pct,
                result.reason,
                result.predictor_calls,
            )
        )
        engine.schedule_timer(self, engine.clock + ms_to_us(self.interval_s * 1000.0), None)


def run_attack(
    engine: Engine,
    predictor: TrainedPredictor,
    target: StealthTarget,
    steps: StepSizes,
    reassess_interval: float = 10.0,
    *,
    monitor: StateMonitor,
    fleet: Any,
    duration_s: float,
    window_s: float = 5.0,
    no_attack: bool = False,
) -> AttackReport:
    """
    Run the controlled attack for `duration_s` from the current clock.

    The engine must already be warmed up by at least `window_s` so the first
    state sample has history. Latency records are those of packets created
    after the attack started.
    """
    start_ms = engine.now_ms
    if start_ms < window_s * 1000.0:
        raise ValueError("run_attack needs at least one sampling window of history")
    intervals = int(math.floor(duration_s / reassess_interval + 1e-9))
    if intervals < 1:
        raise ValueError("duration_s must cover at least one reassessment interval")
    controller = AttackController(
        predictor, monitor, fleet, target, steps, reassess_interval, window_s, enabled=not no_attack
    )
    end_ms = start_ms + intervals * reassess_interval * 1000.0
    controller.stop_us = ms_to_us(end_ms)
    controller.start(engine)
    engine.run(end_ms)
    records = tuple(r for r in engine.records if r.created_at >= start_ms)
    report = AttackReport(target, fleet.K, start_ms, end_ms, controller.intervals, records)
    log.info(
        "Attack on %s band [%.1f, %.1f]%%: %d intervals, mean video latency %.2f ms",
        target.target_switch,
        target.mean_pct,
        target.upper_pct,
        len(report.intervals),
        report.mean_latency(),
    )
    return report


def write_attack_report(report: AttackReport, path: str, meta: dict[str, Any] | None = None) -> str:
    header = dict(meta or {})
    header.update(
        {
            "target_switch": report.target.target_switch,
            "mean_pct": report.target.mean_pct,
            "band_pct": report.target.band_pct,
            "mean_latency_ms": report.mean_latency(),
        }
    )
    return columnar_io.write_table(report.to_frame(), path, ATTACK_REPORT_FORMAT, header)


# --------------------------------------------------------------------------- #
# Audit
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class AuditVerdict:
    windows: tuple[int, ...] = ()

    @property
    def stealthy(self) -> bool:
        return not self.windows

    def __str__(self) -> str:
        if self.stealthy:
            return "Stealthy"
        return "Detected(" + ",".join(str(w) for w in self.windows) + ")"


def stealth_audit(
    report: AttackReport | Sequence[float], target: StealthTarget, persistence: int = 3
) -> AuditVerdict:
    """
    Detected iff the windowed drop rate exceeds m+k for more than
    `persistence` consecutive windows; the verdict lists every window in
    such runs.
    """
    if persistence < 1:
        raise ValueError("persistence must be >= 1")
    rates = report.actual_drop_rates() if isinstance(report, AttackReport) else np.asarray(report, dtype=float)
    flagged: list[int] = []
    run: list[int] = []
    for index, rate in enumerate(rates):
        if target.above(float(rate)):
            run.append(index)
            continue
        if len(run) > persistence:
            flagged.extend(run)
        run = []
    if len(run) > persistence:
        flagged.extend(run)
    return AuditVerdict(tuple(flagged))
