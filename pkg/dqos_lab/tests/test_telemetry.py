import numpy as np
import pandas as pd
import pytest

from dqos_lab.columnar_io import write_table
from dqos_lab.simcore import Engine, SimConfig
from dqos_lab.telemetry import (
    CollectSettings,
    InvalidModelId,
    LayoutMismatch,
    StateLayout,
    StateMonitor,
    StateVector,
    base_model,
    build_matrices,
    collect,
    fit_normalization,
    is_noisy,
    normalize,
    read_dataset,
    select_inputs,
    write_dataset,
)
from dqos_lab.traffic import TrafficSettings, build_sources


class StubFleet:
    K = 2

    def __init__(self):
        self.calls = []

    def apply(self, alphas, start_ms, epoch):
        self.calls.append((alphas, start_ms, epoch))
        return 0


def fill_monitor(monitor):
    monitor.record(0, [0, 0], [0, 0], [0, 0], [0, 0], [[0, 0]], [0.0], [0])
    monitor.record(100, [1, 0], [3, 10], [2, 4], [1, 0], [[50, 20]], [66.0], [2])
    monitor.record(200, [1, 0], [4, 20], [4, 4], [3, 0], [[150, 20]], [66.0], [2])


@pytest.fixture
def monitor(tiny_layout):
    # 8 kbit/s: a 100 ms tick carries at most 100 bytes
    monitor = StateMonitor(tiny_layout, 100.0, retain_ms=10_000.0, link_bandwidths=[8000.0])
    fill_monitor(monitor)
    return monitor


def test_default_layout_widths(fabric):
    layout = StateLayout.from_topology(fabric)
    assert layout.sizes == (24, 10, 10, 9, 10)
    assert layout.input_dim(3, 1) == 66
    assert layout.input_dim(3, 2) == 56
    assert layout.input_dim(3, 3) == 37
    assert layout.input_dim(3, 4) == 36
    assert layout.input_dim(3, 6) == layout.input_dim(3, 1)
    assert layout.categories[1][9] == "switch34"


def test_feature_indices(tiny_layout):
    assert list(tiny_layout.feature_indices(3)) == [0, 3, 4]
    assert list(tiny_layout.feature_indices(4)) == [0, 5]
    assert list(tiny_layout.feature_indices(10)) == [0, 6, 7]
    assert list(tiny_layout.feature_indices(1)) == list(range(8))


@pytest.mark.parametrize("model_id", [0, 11, -1])
def test_invalid_model_id(model_id):
    with pytest.raises(InvalidModelId):
        base_model(model_id)


def test_noisy_models_share_base_categories():
    assert [base_model(m) for m in (6, 7, 8, 9, 10)] == [1, 2, 3, 4, 5]
    assert is_noisy(6) and not is_noisy(5)


def test_layout_from_feature_names(tiny_layout):
    assert StateLayout.from_feature_names(tiny_layout.feature_names()) == tiny_layout
    names = tiny_layout.feature_names()
    with pytest.raises(LayoutMismatch, match="category order"):
        StateLayout.from_feature_names(names[1:] + names[:1])
    with pytest.raises(LayoutMismatch, match="Unrecognised"):
        StateLayout.from_feature_names(["speed.s1"])


def test_state_vector_width_check(tiny_layout):
    with pytest.raises(LayoutMismatch):
        StateVector.from_array(tiny_layout, np.zeros(5))
    assert StateVector.zeros(tiny_layout).sizes == tiny_layout.sizes


def test_sample_state_averages_tick_intervals(monitor):
    state = monitor.sample_state(0, 200)
    assert list(state.sample_times) == [100, 200]
    assert state.cat2_drop_rates == pytest.approx([12.5, 0.0])
    assert state.cat3_table_sizes == pytest.approx([3.0, 4.0])
    assert state.cat5_waiting_frames == pytest.approx([2.0, 0.0])
    assert state.cat4_link_util == pytest.approx([0.75])
    # the second interval had no deliveries, so it does not dilute the gap
    assert state.cat1_frame_gaps == pytest.approx([33.0])


def test_sample_state_coarser_granularity(monitor):
    state = monitor.sample_state(0, 200, 200)
    assert list(state.sample_times) == [200]
    assert state.cat2_drop_rates == pytest.approx([20.0, 0.0])


def test_sample_state_skips_samples_before_zero(monitor):
    state = monitor.sample_state(-100, 100)
    assert list(state.sample_times) == [100]


def test_sample_state_rejects_bad_windows(monitor):
    with pytest.raises(ValueError):
        monitor.sample_state(200, 100)
    with pytest.raises(ValueError, match="granularity"):
        monitor.sample_state(0, 150)


def test_record_must_follow_tick_grid(monitor):
    with pytest.raises(ValueError, match="expected 300"):
        monitor.record(250, [0, 0], [0, 0], [0, 0], [0, 0], [[0, 0]], [0.0], [0])


def test_monitor_forgets_old_ticks(tiny_layout):
    monitor = StateMonitor(tiny_layout, 100.0, retain_ms=200.0, link_bandwidths=[8000.0])
    for t in range(5):
        monitor.record(t * 100, [0, 0], [0, 0], [0, 0], [0, 0], [[0, 0]], [0.0], [0])
    with pytest.raises(ValueError, match="not retained"):
        monitor.sample_state(0, 100)
    assert monitor.sample_state(300, 400).cat2_drop_rates == pytest.approx([0.0, 0.0])


def test_monitor_must_attach_at_time_zero(line_topology):
    engine = Engine(line_topology)
    engine.run(10)
    with pytest.raises(ValueError, match="attached"):
        StateMonitor(StateLayout.from_topology(line_topology)).attach(engine)


def test_split_is_chronological(linear_dataset):
    train, test = linear_dataset.split(0.8)
    assert (len(train), len(test)) == (48, 12)
    assert train.times().max() < test.times().min()
    with pytest.raises(ValueError):
        linear_dataset.split(0.0)


def test_normalization_uses_training_split_only(linear_dataset):
    norm = normalize(linear_dataset)
    train, _ = linear_dataset.split(0.8)
    assert norm.state_mean == pytest.approx(train.current_states().mean(axis=0))
    assert norm.target_mean == pytest.approx(train.targets().mean(axis=0))
    targets = linear_dataset.targets()
    assert norm.denormalize_target(norm.normalize_target(targets)) == pytest.approx(targets)


def test_constant_features_get_unit_std(linear_dataset):
    for snapshot in linear_dataset:
        snapshot.current_state.cat4_link_util[:] = 0.5
    norm = fit_normalization(linear_dataset)
    assert norm.state_std[linear_dataset.layout.category_slice(4)] == pytest.approx([1.0])


def test_select_inputs_orders_alphas_then_state(linear_dataset):
    snapshot = linear_dataset.snapshots[0]
    x, target = select_inputs(snapshot, 3)
    state = snapshot.current_state
    expected = [*snapshot.attack_vector, *state.cat1_frame_gaps, *state.cat3_table_sizes]
    assert x == pytest.approx(expected)
    assert target == pytest.approx(snapshot.changed_state.cat2_drop_rates)


def test_noise_only_with_generator(linear_dataset):
    snapshot = linear_dataset.snapshots[0]
    clean, _ = select_inputs(snapshot, 1)
    assert select_inputs(snapshot, 6)[0] == pytest.approx(clean)
    noisy, _ = select_inputs(snapshot, 6, noise_rng=np.random.default_rng(1))
    assert noisy[:2] == pytest.approx(clean[:2])
    assert not np.allclose(noisy[2:], clean[2:])


def test_build_matrices_matches_select_inputs(linear_dataset):
    norm = normalize(linear_dataset)
    x, y = build_matrices(linear_dataset, 2, norm)
    row, target = select_inputs(linear_dataset.snapshots[3], 2, norm)
    assert x[3] == pytest.approx(row)
    assert y[3] == pytest.approx(target)
    assert x.shape == (60, linear_dataset.layout.input_dim(2, 2))


def test_build_matrices_noise_is_seeded(linear_dataset):
    norm = normalize(linear_dataset)
    first, _ = build_matrices(linear_dataset, 7, norm, seed=4)
    second, _ = build_matrices(linear_dataset, 7, norm, seed=4)
    clean, _ = build_matrices(linear_dataset, 7, norm, noisy=False)
    assert np.array_equal(first, second)
    assert not np.allclose(first, clean)
    assert clean == pytest.approx(build_matrices(linear_dataset, 2, norm)[0])


def test_dataset_file_keeps_snapshots(tmp_path, linear_dataset):
    path = str(tmp_path / "dataset.tsv")
    write_dataset(linear_dataset, path, {"seed": 0})
    loaded = read_dataset(path, expected_layout=linear_dataset.layout)
    assert loaded.k == 2
    assert loaded.topology_fingerprint == "fingerprint"
    assert loaded.changed_states() == pytest.approx(linear_dataset.changed_states())
    assert loaded.alphas() == pytest.approx(linear_dataset.alphas())


def test_read_dataset_rejects_other_layouts(tmp_path, linear_dataset, fabric):
    path = str(tmp_path / "dataset.tsv")
    write_dataset(linear_dataset, path)
    with pytest.raises(LayoutMismatch):
        read_dataset(path, expected_layout=StateLayout.from_topology(fabric))
    other = str(tmp_path / "other.tsv")
    write_table(pd.DataFrame({"a": [1]}), other, "something-else")
    with pytest.raises(LayoutMismatch, match="not a snapshot dataset"):
        read_dataset(other)
    with pytest.raises(FileNotFoundError):
        read_dataset(str(tmp_path / "missing.tsv"))


def test_collect_epoch_protocol(line_topology):
    engine = Engine(line_topology, SimConfig(seed=2))
    layout = StateLayout.from_topology(line_topology)
    monitor = StateMonitor(layout)
    monitor.attach(engine)
    build_sources(engine, TrafficSettings(), seed=2, dummies=False)
    engine.run(5000)
    fleet = StubFleet()
    settings = CollectSettings(duration_s=30.0)
    dataset = collect(engine, monitor, fleet, settings, lambda rng: rng.uniform(size=2), np.random.default_rng(0))

    assert len(dataset) == 3
    assert [start for _, start, _ in fleet.calls] == [5000, 15000, 25000]
    assert engine.now_ms == 35000
    assert dataset.topology_fingerprint == line_topology.fingerprint()
    snapshot = dataset.snapshots[1]
    assert list(snapshot.changed_state.sample_times)[0] == pytest.approx(20100)
    assert snapshot.current_state.cat1_frame_gaps == pytest.approx([33.0])
    assert snapshot.changed_state.cat2_drop_rates == pytest.approx([0.0, 0.0, 0.0])


def test_collect_settings_validation():
    with pytest.raises(ValueError):
        CollectSettings(delay_s=6.0, window_s=5.0, epoch_s=10.0)
    with pytest.raises(ValueError):
        CollectSettings(duration_s=5.0)
