"""
Experiment stages behind the ``dqos-lab`` command.

Each stage takes an `ExperimentConfig` plus an output directory, runs a
fresh seeded simulation where it needs one, and writes self-describing
tab-separated files (header: stage, config hash, seed). Stages share data
only through those files and JSON checkpoints, so they can be run one by
one or chained at reduced scale.
"""

# --------------------------------------------------------------------------- #
# Imports
# --------------------------------------------------------------------------- #
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np
import pandas as pd

from dqos_lab import columnar_io
from dqos_lab.attack import StealthTarget, StepSizes, run_attack, stealth_audit, write_attack_report
from dqos_lab.flowtable import FlowTable
from dqos_lab.loaders import ExperimentConfig, config_hash
from dqos_lab.predictor import (
    TrainedPredictor,
    load_checkpoint,
    save_checkpoint,
    train_predictor,
)
from dqos_lab.simcore import (
    Engine,
    Packet,
    SimConfig,
    SimReport,
    TrafficClass,
    latency_histogram,
    write_sim_report,
)
from dqos_lab.summary_report import write_summary_workbook
from dqos_lab.telemetry import (
    MODEL_IDS,
    Dataset,
    LayoutMismatch,
    Snapshot,
    StateLayout,
    StateMonitor,
    build_matrices,
    collect,
    fit_normalization,
    is_noisy,
    read_dataset,
    select_inputs,
    write_dataset,
)
from dqos_lab.topology import (
    Topology,
    default_topology,
    dump_topology,
    load_topology,
    multi_site_topology,
    same_site_topology,
)
from dqos_lab.traffic import FlowKeyAllocator, TrafficSources, build_sources, uniform_alpha_sampler

log = logging.getLogger(__name__)

BUILTIN_TOPOLOGIES = {
    "default": default_topology,
    "same-site": same_site_topology,
    "multi-site": multi_site_topology,
}
FORCED_MISS_SPACING_MS = 1000.0
FORCED_MISS_COLUMNS = ["scenario", "misses", "frames", "mean_latency_ms", "min_latency_ms", "max_latency_ms"]
TRAIN_SUMMARY_COLUMNS = [
    "model_id",
    "stopped_at_epoch",
    "best_epoch",
    "best_val_loss",
    "test_rmse_pct",
    "mean_baseline_rmse_pct",
    "checkpoint",
]
EVAL_TRACE_COLUMNS = ["interval", "t_ms", "switch", "actual_pct", "predicted_pct"]


# --------------------------------------------------------------------------- #
# Exceptions
# --------------------------------------------------------------------------- #
class PipelineError(Exception):
    """A stage could not run with the given inputs."""


# --------------------------------------------------------------------------- #
# Helpers
# --------------------------------------------------------------------------- #
def resolve_topology(config: ExperimentConfig) -> Topology:
    builder = BUILTIN_TOPOLOGIES.get(config.topology)
    if builder is not None:
        return builder()
    if not os.path.isfile(config.topology):
        raise PipelineError(f"Topology {config.topology!r} is neither built in nor a file")
    return load_topology(config.topology)


def _ensure_output_directory(output_dir: str) -> str:
    if not os.path.isdir(output_dir):
        try:
            os.makedirs(output_dir, exist_ok=True)
            log.info("Created output directory %s", output_dir)
        except OSError:
            log.exception("Unable to create output directory")
            raise PipelineError("Unable to create output directory") from None
    return output_dir


def _meta(config: ExperimentConfig, stage: str, **extra: Any) -> dict[str, Any]:
    return {"stage": stage, "config_hash": config_hash(config), "seed": config.seed, **extra}


def _target_name(config: ExperimentConfig, topology: Topology) -> str:
    name = config.attack.target_switch or topology.target_switch.name
    topology.node(name)
    return name


@dataclass
class LabRun:
    """A warmed-up-able simulation: engine, traffic sources and state monitor."""

    topology: Topology
    engine: Engine
    sources: TrafficSources
    monitor: StateMonitor

    @property
    def fleet(self):
        if self.sources.attackers is None:
            raise PipelineError("Topology has no attacker nodes")
        return self.sources.attackers


def build_lab(config: ExperimentConfig, topology: Topology | None = None, *, dummies: bool = True) -> LabRun:
    """Fresh engine with the state monitor attached at t=0 and every source started."""
    topology = topology or resolve_topology(config)
    engine = Engine(topology, config.sim)
    layout = StateLayout.from_topology(topology)
    retain_ms = max(60_000.0, 3 * config.collect.epoch_s * 1000.0)
    monitor = StateMonitor(layout, config.collect.granularity_ms, retain_ms)
    monitor.attach(engine)
    sources = build_sources(engine, config.traffic, config.seed, dummies=dummies)
    return LabRun(topology, engine, sources, monitor)


def _without_records(config: ExperimentConfig) -> ExperimentConfig:
    """Same experiment with no per-packet latency records kept."""
    return replace(config, sim=replace(config.sim, record_classes=frozenset()))


def drop_counters(engine: Engine, switch: str) -> tuple[float, float]:
    """Cumulative (drops, forwards) at `switch`, background included."""
    state = engine.switch(switch)
    state.sync(engine.clock)
    return state.drop_count, state.forward_count


def drop_pct_since(engine: Engine, switch: str, since: tuple[float, float] = (0.0, 0.0)) -> float:
    """Drop percentage at `switch` since the `drop_counters` reading `since`."""
    drops, forwards = drop_counters(engine, switch)
    d_drops, d_forwards = drops - since[0], forwards - since[1]
    handled = d_drops + d_forwards
    return 100.0 * d_drops / handled if handled > 0 else 0.0


def _check_layout(predictor: TrainedPredictor, topology: Topology) -> None:
    if predictor.layout != StateLayout.from_topology(topology):
        raise LayoutMismatch("Checkpoint layout does not match the configured topology")


# --------------------------------------------------------------------------- #
# Topology
# --------------------------------------------------------------------------- #
def run_topology(config: ExperimentConfig, output_dir: str) -> str:
    topology = resolve_topology(config)
    _ensure_output_directory(output_dir)
    path = os.path.join(output_dir, "topology.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(dump_topology(topology), f, indent=2, sort_keys=True)
        f.write("\n")
    log.info(
        "Topology %s: %d switches, %d connections, target %s",
        topology.fingerprint()[:12],
        len(topology.switches),
        len(topology.connections()),
        topology.target_switch.name,
    )
    return path


# --------------------------------------------------------------------------- #
# Baseline
# --------------------------------------------------------------------------- #
def forced_miss_latencies(topology: Topology, misses: int, frames: int, sim: SimConfig, frame_bytes: int = 1250) -> np.ndarray:
    """
    Latencies of `frames` isolated frames that miss at the first `misses`
    switches of the route and hit everywhere after.

    Every frame uses a fresh session key; the rules past the missing switches
    are installed just before the frame is sent.
    """
    host, server = topology.hosts[0], topology.servers[0]
    path = topology.route(host, server)
    if not 0 <= misses <= len(path):
        raise ValueError(f"misses must be in [0, {len(path)}]")
    engine = Engine(topology, replace(sim, record_classes=frozenset({TrafficClass.VIDEO})))
    keys = FlowKeyAllocator()
    for i in range(frames):
        engine.run(i * FORCED_MISS_SPACING_MS)
        key = keys.session_key(host, server)
        for switch in path[misses:]:
            table: FlowTable = engine.switch(switch).table
            table.preinstall(key, topology.next_hop(host, server, switch), engine.clock)
        engine.send(Packet(key, frame_bytes, host, server, TrafficClass.VIDEO, frame_id=i))
    engine.run(frames * FORCED_MISS_SPACING_MS + 10 * topology.controller_rtt * max(1, misses))
    engine.check_conservation()
    latencies = np.array([r.latency for r in engine.records], dtype=float)
    if latencies.size != frames:
        raise PipelineError(f"{frames - latencies.size} forced-miss frames were not delivered")
    return latencies


def forced_miss_table(config: ExperimentConfig) -> pd.DataFrame:
    rows = []
    for scenario in ("same-site", "multi-site"):
        topology = BUILTIN_TOPOLOGIES[scenario]()
        for misses in range(len(topology.switches) + 1):
            latencies = forced_miss_latencies(
                topology, misses, config.baseline.forced_miss_frames, config.sim, config.traffic.frame_size_bytes
            )
            rows.append(
                (scenario, misses, latencies.size, latencies.mean(), latencies.min(), latencies.max())
            )
            log.info("Forced misses %s x%d: mean %.2f ms", scenario, misses, latencies.mean())
    return pd.DataFrame(rows, columns=FORCED_MISS_COLUMNS)


@dataclass
class BaselineResult:
    report: SimReport
    forced_misses: pd.DataFrame
    paths: list[str]


def run_baseline(config: ExperimentConfig, output_dir: str) -> BaselineResult:
    """No-attack simulation plus the forced table-miss latency scenarios."""
    _ensure_output_directory(output_dir)
    meta = _meta(config, "baseline")
    lab = build_lab(config)
    report = lab.engine.run(config.baseline.duration_s * 1000.0)
    lab.engine.check_conservation()
    log.info("Baseline: mean video latency %.2f ms over %.0f s", report.mean_latency(), config.baseline.duration_s)

    paths = write_sim_report(report, output_dir, meta, prefix="baseline_")
    video = [r for r in report.records if r.traffic_class is TrafficClass.VIDEO]
    histogram_path = os.path.join(output_dir, "baseline_latency_histogram.tsv")
    columnar_io.write_table(
        latency_histogram(video, config.baseline.histogram_bin_ms),
        histogram_path,
        "latency-histogram",
        {**meta, "bin_ms": config.baseline.histogram_bin_ms, "mean_latency_ms": report.mean_latency()},
    )
    forced = forced_miss_table(config)
    forced_path = os.path.join(output_dir, "forced_miss.tsv")
    columnar_io.write_table(
        forced, forced_path, "forced-miss-latency", {**meta, "controller_rtt_ms": same_site_topology().controller_rtt}
    )
    return BaselineResult(report, forced, [*paths, histogram_path, forced_path])


# --------------------------------------------------------------------------- #
# Collection
# --------------------------------------------------------------------------- #
def collect_dataset(config: ExperimentConfig) -> Dataset:
    settings = config.collect
    lab = build_lab(_without_records(config))
    lab.engine.run(settings.warmup_s * 1000.0)
    rng = np.random.default_rng([config.seed, lab.topology.controller.id])
    return collect(lab.engine, lab.monitor, lab.fleet, settings, uniform_alpha_sampler(lab.fleet.K), rng)


def run_collect(config: ExperimentConfig, output_dir: str) -> str:
    _ensure_output_directory(output_dir)
    dataset = collect_dataset(config)
    path = os.path.join(output_dir, "dataset.tsv")
    write_dataset(dataset, path, _meta(config, "collect", epoch_s=config.collect.epoch_s))
    log.info("Wrote %d snapshots to %s", len(dataset), path)
    return path


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #
def _train_worker(args: tuple) -> TrainedPredictor:
    dataset, model_id, train_config, normalization, noise_sigma = args
    return train_predictor(dataset, model_id, train_config, normalization, noise_sigma)


def target_rmse(
    predictor: TrainedPredictor,
    dataset: Dataset,
    switch_name: str,
    *,
    noisy_inputs: bool = False,
    seed: int = 0,
    noise_sigma: float = 0.3,
) -> tuple[float, float]:
    """(model RMSE, constant-training-mean RMSE) of one switch's drop rate, in percent points."""
    if len(dataset) == 0:
        raise PipelineError("Cannot evaluate on an empty split")
    idx = predictor.switch_index(switch_name)
    x, _ = build_matrices(
        dataset, predictor.model_id, predictor.normalization, seed=seed, noise_sigma=noise_sigma, noisy=noisy_inputs
    )
    predicted = predictor.predict_batch(x)[:, idx]
    actual = dataset.targets()[:, idx]
    baseline = predictor.normalization.target_mean[idx]
    rmse = float(np.sqrt(np.mean((predicted - actual) ** 2)))
    baseline_rmse = float(np.sqrt(np.mean((baseline - actual) ** 2)))
    return rmse, baseline_rmse


def run_train(
    config: ExperimentConfig,
    dataset_path: str,
    output_dir: str,
    model_ids: Sequence[int] = MODEL_IDS,
    jobs: int = 1,
) -> pd.DataFrame:
    """Train the requested model variants; one JSON checkpoint each plus a summary table."""
    _ensure_output_directory(output_dir)
    dataset = read_dataset(dataset_path)
    train_split, test_split = dataset.split(config.collect.train_fraction)
    if len(train_split) == 0:
        raise PipelineError(f"{dataset_path}: training split is empty")
    normalization = fit_normalization(train_split)
    tasks = [
        (train_split, model_id, config.train, normalization, config.collect.noise_sigma) for model_id in model_ids
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            predictors = list(pool.map(_train_worker, tasks))
    else:
        predictors = [_train_worker(task) for task in tasks]

    target = _target_name(config, resolve_topology(config))
    meta = _meta(config, "train", dataset=os.path.basename(dataset_path))
    rows = []
    for predictor in predictors:
        path = os.path.join(output_dir, f"model_{predictor.model_id}.json")
        save_checkpoint(predictor, path, meta)
        rmse, baseline_rmse = (
            target_rmse(predictor, test_split, target) if len(test_split) else (math.nan, math.nan)
        )
        report = predictor.report
        rows.append(
            (
                predictor.model_id,
                report.stopped_at_epoch,
                report.best_epoch,
                report.best_val_loss,
                rmse,
                baseline_rmse,
                os.path.basename(path),
            )
        )
    summary = pd.DataFrame(rows, columns=TRAIN_SUMMARY_COLUMNS)
    columnar_io.write_table(
        summary, os.path.join(output_dir, "train_summary.tsv"), "train-summary", {**meta, "target_switch": target}
    )
    return summary


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #
def _predict_all(
    predictor: TrainedPredictor,
    state,
    alphas: tuple[float, ...],
    noise_rng: np.random.Generator | None,
) -> np.ndarray:
    if noise_rng is None:
        return predictor.predict(state, alphas)
    x, _ = select_inputs(
        Snapshot(0.0, state, alphas, state), predictor.model_id, predictor.normalization, noise_rng=noise_rng
    )
    return predictor.predict_batch(x[None, :])[0]


def _draw_alphas(
    predictor: TrainedPredictor,
    state,
    target_index: int,
    k: int,
    settings,
    rng: np.random.Generator,
    noise_rng: np.random.Generator | None,
) -> tuple[tuple[float, ...], np.ndarray]:
    """Random attack vector whose predicted target drop rate lies in the evaluation regime."""
    sampler = uniform_alpha_sampler(k)
    middle = (settings.min_drop_pct + settings.max_drop_pct) / 2.0
    best = None
    for _ in range(settings.max_draws):
        alphas = sampler(rng)
        predicted = _predict_all(predictor, state, alphas, noise_rng)
        dr = predicted[target_index]
        if settings.min_drop_pct <= dr <= settings.max_drop_pct:
            return alphas, predicted
        if best is None or abs(dr - middle) < abs(best[1][target_index] - middle):
            best = (alphas, predicted)
    return best


def run_eval(config: ExperimentConfig, checkpoint_path: str, output_dir: str) -> pd.DataFrame:
    """
    Prediction-vs-actual trace on a fresh simulation.

    Attack vectors are re-drawn every interval and accepted when the model
    puts the target switch inside the evaluation drop regime. Actual rates
    are measured over the same causally delayed window the model was
    trained on.
    """
    _ensure_output_directory(output_dir)
    predictor = load_checkpoint(checkpoint_path)
    settings = config.evaluation
    collect_settings = config.collect
    lab = build_lab(_without_records(config))
    _check_layout(predictor, lab.topology)
    target = _target_name(config, lab.topology)
    target_index = predictor.switch_index(target)
    switch_names = list(predictor.layout.categories[1])

    engine, monitor, fleet = lab.engine, lab.monitor, lab.fleet
    engine.run(collect_settings.warmup_s * 1000.0)
    rng = np.random.default_rng([config.seed, predictor.model_id, 1])
    noise_rng = (
        np.random.default_rng([config.seed, predictor.model_id, 2])
        if settings.noisy_inputs and is_noisy(predictor.model_id)
        else None
    )
    interval_ms = settings.interval_s * 1000.0
    delay_ms = collect_settings.delay_s * 1000.0
    window_ms = collect_settings.window_s * 1000.0
    if delay_ms + window_ms > interval_ms:
        raise PipelineError("collect delay + window must fit inside the evaluation interval")

    rows = []
    t0 = engine.now_ms
    for i in range(int(math.floor(settings.duration_s / settings.interval_s + 1e-9))):
        t = t0 + i * interval_ms
        engine.run(t)
        state = monitor.sample_state(t - window_ms, t)
        alphas, predicted = _draw_alphas(predictor, state, target_index, fleet.K, settings, rng, noise_rng)
        fleet.apply(alphas, t, settings.interval_s)
        engine.run(t + delay_ms + window_ms)
        for n, name in enumerate(switch_names):
            actual = engine.drop_rate(name, window_ms)
            rows.append((i, t, name, actual, float(predicted[n])))

    trace = pd.DataFrame(rows, columns=EVAL_TRACE_COLUMNS)
    at_target = trace[trace["switch"] == target]
    rmse = float(np.sqrt(np.mean((at_target["predicted_pct"] - at_target["actual_pct"]) ** 2)))
    null_mean = float(predictor.normalization.target_mean[target_index])
    null_rmse = float(np.sqrt(np.mean((null_mean - at_target["actual_pct"]) ** 2)))
    meta = _meta(
        config,
        "eval",
        model_id=predictor.model_id,
        target_switch=target,
        target_rmse_pct=rmse,
        null_model_rmse_pct=null_rmse,
        noisy_inputs=bool(noise_rng is not None),
    )
    path = os.path.join(output_dir, f"eval_model_{predictor.model_id}.tsv")
    columnar_io.write_table(trace, path, "eval-trace", meta)
    log.info("Model %d on %s: RMSE %.3f pp (null model %.3f pp)", predictor.model_id, target, rmse, null_rmse)
    return trace


# --------------------------------------------------------------------------- #
# Attack
# --------------------------------------------------------------------------- #
def _video_latency(engine: Engine, since_ms: float) -> float:
    values = [
        r.latency for r in engine.records if r.traffic_class is TrafficClass.VIDEO and r.created_at >= since_ms
    ]
    return float(np.mean(values)) if values else math.nan


def no_attack_latency(config: ExperimentConfig, topology: Topology) -> tuple[float, float]:
    """(mean video latency, mean target drop rate) over the attack period without any attack."""
    settings = config.attack
    lab = build_lab(config, topology)
    target = _target_name(config, topology)
    warmup_ms = settings.warmup_s * 1000.0
    lab.engine.run(warmup_ms)
    start = drop_counters(lab.engine, target)
    lab.engine.run(warmup_ms + settings.duration_s * 1000.0)
    return _video_latency(lab.engine, warmup_ms), drop_pct_since(lab.engine, target, start)


def run_attack_experiment(
    config: ExperimentConfig,
    checkpoint_path: str,
    output_dir: str,
    bands: Sequence[float] | None = None,
    no_attack: bool = False,
) -> pd.DataFrame:
    """
    One controlled attack per band k, each on a fresh seeded simulation.

    The band floor m is the configured mean, or the target switch's drop
    rate measured over the warm-up when unset. Returns the summary table,
    also written as ``attack_summary.tsv`` and ``attack_summary.xlsx``.
    """
    _ensure_output_directory(output_dir)
    settings = config.attack
    predictor = load_checkpoint(checkpoint_path)
    topology = resolve_topology(config)
    _check_layout(predictor, topology)
    target_switch = _target_name(config, topology)
    steps = StepSizes(settings.increment_p, settings.decrement_q, settings.max_iterations)
    baseline_latency, baseline_drop = no_attack_latency(config, topology)
    log.info("No-attack reference: %.2f ms, %.3f%% drops at %s", baseline_latency, baseline_drop, target_switch)

    rows = []
    for band in bands or settings.bands:
        lab = build_lab(config, topology)
        lab.engine.run(settings.warmup_s * 1000.0)
        mean_pct = settings.mean_pct
        if mean_pct is None:
            mean_pct = drop_pct_since(lab.engine, target_switch)
        target = StealthTarget(target_switch, mean_pct, band)
        report = run_attack(
            lab.engine,
            predictor,
            target,
            steps,
            settings.interval_s,
            monitor=lab.monitor,
            fleet=lab.fleet,
            duration_s=settings.duration_s,
            window_s=settings.window_s,
            no_attack=no_attack,
        )
        verdict = stealth_audit(report, target, settings.persistence)
        write_attack_report(
            report,
            os.path.join(output_dir, f"attack_k{band:g}.tsv"),
            _meta(config, "attack", model_id=predictor.model_id, no_attack=no_attack, audit=str(verdict)),
        )
        drops = report.actual_drop_rates()
        attack_latency = report.mean_latency()
        rows.append(
            {
                "band": f"k={band:g}%",
                "no_attack_latency_ms": baseline_latency,
                "attack_latency_ms": attack_latency,
                "latency_ratio": attack_latency / baseline_latency if baseline_latency else math.nan,
                "mean_drop_pct": float(np.mean(drops)) if drops.size else math.nan,
                "max_drop_pct": float(np.max(drops)) if drops.size else math.nan,
                "windows_in_band_pct": float(100.0 * np.mean(drops <= target.upper_pct + 1e-9)) if drops.size else math.nan,
                "audit": str(verdict),
            }
        )
        log.info("Band k=%g: %.2f ms under attack, audit %s", band, attack_latency, verdict)

    summary = pd.DataFrame(rows)
    meta = _meta(config, "attack", model_id=predictor.model_id, target_switch=target_switch, no_attack=no_attack)
    columnar_io.write_table(summary, os.path.join(output_dir, "attack_summary.tsv"), "attack-summary", meta)
    write_summary_workbook(summary, os.path.join(output_dir, "attack_summary.xlsx"))
    return summary
