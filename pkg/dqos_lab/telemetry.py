"""
Network-state observation and the snapshot dataset.

The state vector has five categories, always laid out in this order:

1. mean gap between successive frame deliveries, per host->server connection (ms)
2. packet drop rate, per switch (%)
3. flow-table size, per switch (rules)
4. bandwidth utilisation, per switch-to-switch link (fraction)
5. waiting packets (held on a miss + queued), per switch

`StateMonitor` ticks at the collection granularity and keeps cumulative
counters, so any window aligned to the tick grid can be summarised exactly
after the fact. `collect` runs the epoch protocol: at each epoch start t,
record the state over [t - 5 s, t], apply a fresh attack vector, and record
the changed state over [t + 5 s, t + 10 s].
"""

import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np
import pandas as pd

from dqos_lab import columnar_io
from dqos_lab.simcore import Engine, Packet, SimulationInvariantError, TrafficClass, ms_to_us
from dqos_lab.topology import NodeId, Topology

log = logging.getLogger(__name__)

CATEGORY_PREFIXES = ("gap", "drop", "table", "util", "wait")
DROP_CATEGORY = 2
MODEL_IDS = tuple(range(1, 11))
MODEL_CATEGORIES: dict[int, tuple[int, ...]] = {
    1: (1, 2, 3, 4, 5),
    2: (1, 3, 4, 5),
    3: (1, 3),
    4: (1, 4),
    5: (1, 5),
}
NOISY_MODEL_OFFSET = 5
DATASET_FORMAT = "dqos-snapshots/1"


class InvalidModelId(ValueError):
    """Raised for a model id outside 1..10."""


class LayoutMismatch(ValueError):
    """Raised when two state layouts (dataset, model, topology) disagree."""


def base_model(model_id: int) -> int:
    if model_id not in MODEL_IDS:
        raise InvalidModelId(f"model id must be in 1..10, got {model_id!r}")
    return model_id - NOISY_MODEL_OFFSET if model_id > NOISY_MODEL_OFFSET else model_id


def is_noisy(model_id: int) -> bool:
    return base_model(model_id) != model_id


# --------------------------------------------------------------------------- #
# Layout and vectors
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class StateLayout:
    """Feature names per category, in vector order."""

    categories: tuple[tuple[str, ...], ...]

    @classmethod
    def from_topology(cls, topology: Topology) -> "StateLayout":
        switches = [s.name for s in topology.switches]
        gaps = [f"{h.name}-{s.name}" for h, s in topology.connections()]
        links = [link.link_id for link in topology.switch_links()]
        return cls((tuple(gaps), tuple(switches), tuple(switches), tuple(links), tuple(switches)))

    @classmethod
    def from_feature_names(cls, names: Sequence[str]) -> "StateLayout":
        buckets: dict[str, list[str]] = {p: [] for p in CATEGORY_PREFIXES}
        for name in names:
            prefix, _, item = name.partition(".")
            if prefix not in buckets or not item:
                raise LayoutMismatch(f"Unrecognised feature name {name!r}")
            buckets[prefix].append(item)
        layout = cls(tuple(tuple(buckets[p]) for p in CATEGORY_PREFIXES))
        if list(layout.feature_names()) != list(names):
            raise LayoutMismatch("Feature names are not in category order")
        return layout

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.categories)

    @property
    def width(self) -> int:
        return sum(self.sizes)

    @property
    def n_switches(self) -> int:
        return self.sizes[DROP_CATEGORY - 1]

    def feature_names(self) -> list[str]:
        return [
            f"{prefix}.{item}"
            for prefix, items in zip(CATEGORY_PREFIXES, self.categories)
            for item in items
        ]

    def category_slice(self, category: int) -> slice:
        start = sum(self.sizes[: category - 1])
        return slice(start, start + self.sizes[category - 1])

    def feature_indices(self, model_id: int) -> np.ndarray:
        """State-vector positions a model sees, in category order."""
        cats = MODEL_CATEGORIES[base_model(model_id)]
        return np.concatenate(
            [np.arange(self.width)[self.category_slice(c)] for c in cats]
        ).astype(int)

    def input_dim(self, k: int, model_id: int) -> int:
        return k + len(self.feature_indices(model_id))


@dataclass
class StateVector:
    cat1_frame_gaps: np.ndarray
    cat2_drop_rates: np.ndarray
    cat3_table_sizes: np.ndarray
    cat4_link_util: np.ndarray
    cat5_waiting_frames: np.ndarray
    sample_times: np.ndarray = field(default_factory=lambda: np.empty(0))

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [
                self.cat1_frame_gaps,
                self.cat2_drop_rates,
                self.cat3_table_sizes,
                self.cat4_link_util,
                self.cat5_waiting_frames,
            ]
        ).astype(float)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (
            len(self.cat1_frame_gaps),
            len(self.cat2_drop_rates),
            len(self.cat3_table_sizes),
            len(self.cat4_link_util),
            len(self.cat5_waiting_frames),
        )

    @classmethod
    def from_array(
        cls, layout: StateLayout, values: np.ndarray, sample_times: np.ndarray | None = None
    ) -> "StateVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (layout.width,):
            raise LayoutMismatch(f"State width {values.shape} != layout width {layout.width}")
        parts = [values[layout.category_slice(c)].copy() for c in range(1, 6)]
        times = np.empty(0) if sample_times is None else np.asarray(sample_times, dtype=float)
        return cls(*parts, sample_times=times)

    @classmethod
    def zeros(cls, layout: StateLayout) -> "StateVector":
        return cls.from_array(layout, np.zeros(layout.width))


@dataclass
class Snapshot:
    t: float
    current_state: StateVector
    attack_vector: tuple[float, ...]
    changed_state: StateVector


# --------------------------------------------------------------------------- #
# Monitor
# --------------------------------------------------------------------------- #
class StateMonitor:
    """
    Tick-aligned recorder of the raw counters behind the state vector.

    Each tick row holds, per switch, cumulative drops and forwards plus the
    instantaneous table size and waiting count; per switch link the
    cumulative bytes sent in each direction; per connection the running sum
    and count of inter-frame delivery gaps.
    """

    def __init__(
        self,
        layout: StateLayout,
        granularity_ms: float = 100.0,
        retain_ms: float = 60_000.0,
        link_bandwidths: Sequence[float] | None = None,
    ):
        if granularity_ms <= 0:
            raise ValueError("granularity_ms must be > 0")
        self.layout = layout
        self.granularity_ms = granularity_ms
        self.granularity_us = ms_to_us(granularity_ms)
        n_conn, n_sw, _, n_links, _ = layout.sizes
        self._n_sw = n_sw
        self._n_links = n_links
        self._n_conn = n_conn
        bandwidths = link_bandwidths if link_bandwidths is not None else [1.0] * n_links
        self.link_bandwidths = np.asarray(bandwidths, dtype=float)
        maxlen = max(2, int(math.ceil(retain_ms / granularity_ms)) + 1)
        self._rows: deque[np.ndarray] = deque(maxlen=maxlen)
        self._first_tick = 0
        self.engine: Engine | None = None
        self._gap_sum = np.zeros(n_conn)
        self._gap_count = np.zeros(n_conn)
        self._last_delivery: dict[int, tuple[Any, int]] = {}
        self._conn_index: dict[tuple[NodeId, NodeId], int] = {}
        self._link_ports: list = []
        self._switch_states: list = []

    # row layout: drops | forwards | table | waiting | bytes a->b | bytes b->a | gap sum | gap count
    def _pack(self, drops, forwards, table, waiting, link_bytes, gap_sum, gap_count) -> np.ndarray:
        link_bytes = np.asarray(link_bytes, dtype=float).reshape(self._n_links, 2)
        return np.concatenate(
            [drops, forwards, table, waiting, link_bytes[:, 0], link_bytes[:, 1], gap_sum, gap_count]
        ).astype(float)

    def _unpack(self, rows: np.ndarray) -> dict[str, np.ndarray]:
        n, links, c = self._n_sw, self._n_links, self._n_conn
        bounds = np.cumsum([0, n, n, n, n, links, links, c, c])
        names = ("drops", "forwards", "table", "waiting", "bytes_ab", "bytes_ba", "gap_sum", "gap_count")
        return {name: rows[:, bounds[i]:bounds[i + 1]] for i, name in enumerate(names)}

    @property
    def ticks_recorded(self) -> int:
        return self._first_tick + len(self._rows)

    def record(self, t_ms: float, drops, forwards, table, waiting, link_bytes, gap_sum, gap_count) -> None:
        """Append the counters observed at tick time `t_ms` (the next grid point)."""
        expected = self.ticks_recorded * self.granularity_ms
        if not math.isclose(t_ms, expected, abs_tol=1e-6):
            raise ValueError(f"Tick at {t_ms} ms, expected {expected} ms")
        if len(self._rows) == self._rows.maxlen:
            self._first_tick += 1
        self._rows.append(self._pack(drops, forwards, table, waiting, link_bytes, gap_sum, gap_count))

    def attach(self, engine: Engine) -> None:
        """Start ticking on `engine`; must be attached at clock 0."""
        if engine.clock != 0:
            raise ValueError("StateMonitor must be attached before the simulation starts")
        topology = engine.topology
        self.engine = engine
        self._switch_states = [engine.switches[s] for s in topology.switches]
        self._link_ports = []
        for link in topology.switch_links():
            a, b = sorted(link.endpoints)
            self._link_ports.append((engine.ports[(a, b)], engine.ports[(b, a)]))
        self.link_bandwidths = np.array([link.bandwidth for link in topology.switch_links()])
        self._conn_index = {conn: i for i, conn in enumerate(topology.connections())}
        engine.add_delivery_hook(self._on_delivery)
        engine.schedule_timer(self, 0, None)

    def _on_delivery(self, engine: Engine, packet: Packet) -> None:
        if packet.traffic_class is not TrafficClass.VIDEO:
            return
        index = self._conn_index.get((packet.src, packet.dst))
        if index is None:
            return
        previous = self._last_delivery.get(index)
        if previous is not None and previous[0] == packet.key:
            self._gap_sum[index] += (engine.clock - previous[1]) / 1000.0
            self._gap_count[index] += 1
        self._last_delivery[index] = (packet.key, engine.clock)

    def on_timer(self, engine: Engine, tag: Any) -> None:
        engine.sync()
        switches = self._switch_states
        self.record(
            engine.now_ms,
            [s.drop_count for s in switches],
            [s.forward_count for s in switches],
            [s.table.active_count(engine.clock) for s in switches],
            [s.waiting for s in switches],
            [[ab.bytes_sent, ba.bytes_sent] for ab, ba in self._link_ports],
            self._gap_sum,
            self._gap_count,
        )
        engine.schedule_timer(self, engine.clock + self.granularity_us, None)

    def _rows_at(self, tick_indices: np.ndarray) -> np.ndarray:
        offsets = tick_indices - self._first_tick
        if offsets.size and (offsets.min() < 0 or offsets.max() >= len(self._rows)):
            raise ValueError(
                f"Ticks {tick_indices.min()}..{tick_indices.max()} not retained "
                f"(have {self._first_tick}..{self.ticks_recorded - 1})"
            )
        return np.stack([self._rows[i] for i in offsets]) if offsets.size else np.empty((0, 0))

    def sample_state(
        self, window_start: float, window_end: float, granularity: float | None = None
    ) -> StateVector:
        """
        Average the state over samples at window_start + g, ..., window_end.

        Each sample covers the preceding tick interval. Drop rates and
        utilisation are per-interval rates; table sizes and waiting counts
        are the values seen at the sample instant; frame gaps average only
        over samples that saw deliveries. Samples before t = 0 are skipped.
        """
        g = self.granularity_ms if granularity is None else granularity
        if window_end <= window_start:
            raise ValueError("window_end must be after window_start")
        steps = (window_end - window_start) / g
        if not math.isclose(steps, round(steps), abs_tol=1e-9) or not math.isclose(
            g / self.granularity_ms, round(g / self.granularity_ms), abs_tol=1e-9
        ):
            raise ValueError("granularity must divide the window and be a multiple of the tick")
        times = window_start + g * np.arange(1, int(round(steps)) + 1)
        times = times[times - g >= -1e-9]
        if times.size == 0:
            log.warning("Empty sampling window [%s, %s] ms", window_start, window_end)
            vector = StateVector.zeros(self.layout)
            vector.sample_times = times
            return vector

        ticks = np.rint(times / self.granularity_ms).astype(int)
        prev_ticks = np.rint((times - g) / self.granularity_ms).astype(int)
        now = self._unpack(self._rows_at(ticks))
        before = self._unpack(self._rows_at(prev_ticks))

        d_drops = now["drops"] - before["drops"]
        d_fwd = now["forwards"] - before["forwards"]
        handled = d_drops + d_fwd
        drop_pct = np.divide(100.0 * d_drops, handled, out=np.zeros_like(d_drops), where=handled > 0)

        seconds = g / 1000.0
        capacity = self.link_bandwidths * seconds / 8.0
        util_ab = (now["bytes_ab"] - before["bytes_ab"]) / capacity
        util_ba = (now["bytes_ba"] - before["bytes_ba"]) / capacity
        util = np.clip(np.maximum(util_ab, util_ba), 0.0, 1.0)

        d_gap = now["gap_sum"] - before["gap_sum"]
        d_count = now["gap_count"] - before["gap_count"]
        has = d_count > 0
        per_sample_gap = np.divide(d_gap, d_count, out=np.zeros_like(d_gap), where=has)
        n_with = has.sum(axis=0)
        gaps = np.divide(
            per_sample_gap.sum(axis=0), n_with, out=np.zeros(self._n_conn), where=n_with > 0
        )

        return StateVector(
            gaps,
            drop_pct.mean(axis=0),
            now["table"].mean(axis=0),
            util.mean(axis=0),
            now["waiting"].mean(axis=0),
            sample_times=times,
        )


def sample_state(
    monitor: StateMonitor, window_start: float, window_end: float, granularity: float = 100.0
) -> StateVector:
    return monitor.sample_state(window_start, window_end, granularity)


# --------------------------------------------------------------------------- #
# Dataset
# --------------------------------------------------------------------------- #
@dataclass
class Normalization:
    state_mean: np.ndarray
    state_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def normalize_state(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.state_mean) / self.state_std

    def denormalize_state(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.state_std + self.state_mean

    def normalize_target(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.target_mean) / self.target_std

    def denormalize_target(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.target_std + self.target_mean

    def to_dict(self) -> dict[str, list[float]]:
        return {k: [float(v) for v in getattr(self, k)] for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict[str, list[float]]) -> "Normalization":
        return cls(**{k: np.asarray(data[k], dtype=float) for k in cls.__dataclass_fields__})


def _stats(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


@dataclass
class Dataset:
    layout: StateLayout
    k: int
    snapshots: list[Snapshot] = field(default_factory=list)
    topology_fingerprint: str = ""
    normalization: Normalization | None = None

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self) -> Iterator[Snapshot]:
        return iter(self.snapshots)

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots], dtype=float)

    def alphas(self) -> np.ndarray:
        return np.array([s.attack_vector for s in self.snapshots], dtype=float).reshape(len(self), self.k)

    def current_states(self) -> np.ndarray:
        return np.array([s.current_state.as_array() for s in self.snapshots]).reshape(len(self), self.layout.width)

    def changed_states(self) -> np.ndarray:
        return np.array([s.changed_state.as_array() for s in self.snapshots]).reshape(len(self), self.layout.width)

    def targets(self) -> np.ndarray:
        """Changed-state drop rates, one row per snapshot."""
        return self.changed_states()[:, self.layout.category_slice(DROP_CATEGORY)]

    def split(self, fraction: float = 0.8) -> tuple["Dataset", "Dataset"]:
        """Chronological split: the first `fraction` of snapshots, then the rest."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        cut = int(math.floor(len(self) * fraction))
        head = Dataset(self.layout, self.k, self.snapshots[:cut], self.topology_fingerprint, self.normalization)
        tail = Dataset(self.layout, self.k, self.snapshots[cut:], self.topology_fingerprint, self.normalization)
        return head, tail

    def to_frame(self) -> pd.DataFrame:
        names = self.layout.feature_names()
        columns = (
            ["t_ms"]
            + [f"alpha_{i + 1}" for i in range(self.k)]
            + [f"cur.{n}" for n in names]
            + [f"chg.{n}" for n in names]
        )
        data = np.hstack(
            [self.times()[:, None], self.alphas(), self.current_states(), self.changed_states()]
        ) if len(self) else np.empty((0, len(columns)))
        return pd.DataFrame(data, columns=columns)


def fit_normalization(train: Dataset) -> Normalization:
    """Per-feature mean/std of current states and targets over `train` (std 0 -> 1)."""
    if len(train) == 0:
        raise ValueError("Cannot fit normalization on an empty training split")
    state_mean, state_std = _stats(train.current_states())
    target_mean, target_std = _stats(train.targets())
    return Normalization(state_mean, state_std, target_mean, target_std)


def normalize(dataset: Dataset, train_fraction: float = 0.8) -> Normalization:
    """Fit normalization on the chronological training split and attach it to `dataset`."""
    train, _ = dataset.split(train_fraction)
    dataset.normalization = fit_normalization(train)
    return dataset.normalization


def denormalize(vector: np.ndarray, normalization: Normalization) -> np.ndarray:
    """Map a normalized drop-rate vector back to percent."""
    return normalization.denormalize_target(vector)


# --------------------------------------------------------------------------- #
# Model inputs
# --------------------------------------------------------------------------- #
def select_inputs(
    snapshot: Snapshot,
    model_id: int,
    normalization: Normalization | None = None,
    *,
    noise_rng: np.random.Generator | None = None,
    noise_sigma: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """
    (input, target) for one snapshot.

    Input is the attack vector followed by the model's state categories;
    target is the changed-state drop rate per switch. Both are in normalized
    units when `normalization` is given. For noisy models (6-10) Gaussian
    noise is added to the state part only, and only when `noise_rng` is
    supplied, so inference on clean inputs simply omits it.
    """
    base_model(model_id)
    current = snapshot.current_state.as_array()
    target = snapshot.changed_state.cat2_drop_rates.astype(float)
    if normalization is not None:
        current = normalization.normalize_state(current)
        target = normalization.normalize_target(target)
    bounds = np.cumsum([0, *snapshot.current_state.sizes])
    state = np.concatenate(
        [current[bounds[c - 1]:bounds[c]] for c in MODEL_CATEGORIES[base_model(model_id)]]
    )
    if is_noisy(model_id) and noise_rng is not None:
        state = state + noise_rng.normal(0.0, noise_sigma, size=state.shape)
    alphas = np.asarray(snapshot.attack_vector, dtype=float)
    return np.concatenate([alphas, state]), target


def build_matrices(
    dataset: Dataset,
    model_id: int,
    normalization: Normalization,
    *,
    seed: int = 0,
    noise_sigma: float = 0.3,
    noisy: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Input and target matrices for a whole dataset (noise seeded per model id)."""
    indices = dataset.layout.feature_indices(model_id)
    state = normalization.normalize_state(dataset.current_states())[:, indices]
    if noisy and is_noisy(model_id):
        rng = np.random.default_rng([seed, model_id])
        state = state + rng.normal(0.0, noise_sigma, size=state.shape)
    x = np.hstack([dataset.alphas(), state])
    y = normalization.normalize_target(dataset.targets())
    return x, y


# --------------------------------------------------------------------------- #
# Collection protocol
# --------------------------------------------------------------------------- #
@dataclass
class CollectSettings:
    duration_s: float = 12_000.0
    epoch_s: float = 10.0
    delay_s: float = 5.0
    window_s: float = 5.0
    granularity_ms: float = 100.0
    warmup_s: float = 10.0
    train_fraction: float = 0.8
    noise_sigma: float = 0.3

    def __post_init__(self):
        if self.epoch_s <= 0 or self.window_s <= 0 or self.delay_s < 0:
            raise ValueError("epoch_s and window_s must be > 0, delay_s >= 0")
        if self.delay_s + self.window_s > self.epoch_s:
            raise ValueError("delay_s + window_s must not exceed epoch_s")
        if self.duration_s < self.epoch_s:
            raise ValueError("duration_s must cover at least one epoch")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


AlphaSampler = Callable[[np.random.Generator], Sequence[float]]


def collect(
    engine: Engine,
    monitor: StateMonitor,
    fleet: Any,
    settings: CollectSettings,
    alpha_sampler: AlphaSampler,
    rng: np.random.Generator,
) -> Dataset:
    """
    Run floor(duration / epoch) collection epochs starting at the current clock.

    `fleet` is anything with ``K`` and ``apply(alphas, start_ms, epoch_s)``.
    """
    epoch_ms = settings.epoch_s * 1000.0
    delay_ms = settings.delay_s * 1000.0
    window_ms = settings.window_s * 1000.0
    g = settings.granularity_ms
    t0 = engine.now_ms
    n_epochs = int(math.floor(settings.duration_s / settings.epoch_s + 1e-9))
    dataset = Dataset(monitor.layout, fleet.K, topology_fingerprint=engine.topology.fingerprint())
    log.info("Collecting %d snapshots from t=%.0f ms", n_epochs, t0)
    for i in range(n_epochs):
        t = t0 + i * epoch_ms
        engine.run(t)
        current = monitor.sample_state(t - window_ms, t, g)
        alphas = tuple(float(a) for a in alpha_sampler(rng))
        fleet.apply(alphas, t, settings.epoch_s)
        engine.run(t + delay_ms + window_ms)
        changed = monitor.sample_state(t + delay_ms, t + delay_ms + window_ms, g)
        if changed.sample_times.size and changed.sample_times.min() - g < t + delay_ms - 1e-9:
            raise SimulationInvariantError("changed-state sample precedes the causality delay")
        dataset.snapshots.append(Snapshot(t, current, alphas, changed))
        if (i + 1) % 100 == 0:
            log.info("Collected %d/%d snapshots", i + 1, n_epochs)
    engine.run(t0 + n_epochs * epoch_ms)
    return dataset


def write_dataset(dataset: Dataset, path: str, meta: dict[str, Any] | None = None) -> str:
    header = dict(meta or {})
    header.update(
        {
            "topology_fingerprint": dataset.topology_fingerprint,
            "k": dataset.k,
            "category_sizes": list(dataset.layout.sizes),
            "snapshots": len(dataset),
        }
    )
    return columnar_io.write_table(dataset.to_frame(), path, DATASET_FORMAT, header)


def read_dataset(path: str, expected_layout: StateLayout | None = None) -> Dataset:
    """Load a dataset file, checking its internal layout consistency."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Dataset file not found: {path}")
    header, frame = columnar_io.read_table(path)
    if header.get("format") != DATASET_FORMAT:
        raise LayoutMismatch(f"{path}: not a snapshot dataset ({header.get('format')!r})")
    k = int(header["k"])
    cur = [c[4:] for c in frame.columns if c.startswith("cur.")]
    chg = [c[4:] for c in frame.columns if c.startswith("chg.")]
    if cur != chg:
        raise LayoutMismatch(f"{path}: current and changed state columns differ")
    layout = StateLayout.from_feature_names(cur)
    sizes = [int(s) for s in header["category_sizes"].split(",")]
    if list(layout.sizes) != sizes:
        raise LayoutMismatch(f"{path}: category sizes {sizes} != columns {layout.sizes}")
    if expected_layout is not None and expected_layout != layout:
        raise LayoutMismatch(f"{path}: dataset layout differs from the expected layout")

    alpha_cols = [f"alpha_{i + 1}" for i in range(k)]
    times = frame["t_ms"].to_numpy(dtype=float)
    alphas = frame[alpha_cols].to_numpy(dtype=float)
    current = frame[[f"cur.{n}" for n in cur]].to_numpy(dtype=float)
    changed = frame[[f"chg.{n}" for n in chg]].to_numpy(dtype=float)
    snapshots = [
        Snapshot(
            float(times[i]),
            StateVector.from_array(layout, current[i]),
            tuple(float(a) for a in alphas[i]),
            StateVector.from_array(layout, changed[i]),
        )
        for i in range(len(frame))
    ]
    log.info("Read %d snapshots (K=%d, width %d) from %s", len(snapshots), k, layout.width, path)
    return Dataset(layout, k, snapshots, header.get("topology_fingerprint", ""))
