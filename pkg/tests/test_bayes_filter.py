"""Measurement update tests.

Steps:
- Build per-scan measurement fields from simple beams.
- Update single cells with the normalized three-state product and saturate them.
- Run whole filter steps on small synthetic worlds.
Expectations:
- Endpoint cells carry occupied evidence split by the prior ratio; traversed cells carry free evidence.
- update_cell is neutral for uninformative inputs, symmetric in prediction and measurement, and saturates to
  the TGM limits unless told otherwise.
- Repeatedly seen walls saturate at p_static 0.95; vacated cells drain away from static.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

import tinytgm


def _scan(bearings, ranges, max_range=5.0):
    return tinytgm.Scan.from_ranges(np.asarray(bearings, dtype=float), np.asarray(ranges, dtype=float), max_range)


def test_ism_beliefs():
    ism = tinytgm.InverseSensorModel()
    assert ism.occupied_belief().as_tuple() == pytest.approx((0.4, 0.4, 0.2))
    assert ism.free_belief().as_tuple() == pytest.approx((0.15, 0.15, 0.7))
    skewed = tinytgm.InverseSensorModel(prior_static=0.6, prior_dynamic=0.2)
    assert skewed.occupied_belief().as_tuple() == pytest.approx((0.6, 0.2, 0.2))
    empty_priors = tinytgm.InverseSensorModel(prior_static=0.0, prior_dynamic=0.0)
    assert empty_priors.occupied_belief().as_tuple() == pytest.approx((0.4, 0.4, 0.2))

    with pytest.raises(tinytgm.TgmProgrammingError):
        tinytgm.InverseSensorModel(p_hit_occupied=0.5)
    with pytest.raises(tinytgm.TgmProgrammingError):
        tinytgm.InverseSensorModel(p_miss_free=1.2)


def test_measurement_field_single_beam(small_geometry):
    field = tinytgm.inverse_sensor_model(_scan([0.0], [1.0]), tinytgm.Pose2D(), small_geometry, tinytgm.InverseSensorModel())
    assert field.get((5, 0)) == field.occupied
    for ix in range(5):
        assert field.get((ix, 0)) == field.free
    assert field.get((6, 0)) is None
    assert field.get((0, 1)) is None
    assert len(field) == 6
    assert dict(field.items())[(5, 0)] == field.occupied


def test_measurement_field_max_range_beam_is_free(small_geometry):
    field = tinytgm.inverse_sensor_model(
        _scan([0.0], [1.0], max_range=1.0), tinytgm.Pose2D(), small_geometry, tinytgm.InverseSensorModel()
    )
    assert len(field.hit_cells) == 0
    assert field.get((5, 0)) == field.free


def test_hit_overrides_traversal_in_same_scan(small_geometry):
    field = tinytgm.inverse_sensor_model(
        _scan([0.0, 0.001], [0.6, 1.0]), tinytgm.Pose2D(), small_geometry, tinytgm.InverseSensorModel()
    )
    assert field.get((3, 0)) == field.occupied
    assert field.get((5, 0)) == field.occupied
    assert field.get((4, 0)) == field.free


def test_measurement_outside_pose_and_clipped_beams(small_geometry):
    with pytest.raises(tinytgm.TgmProgrammingError):
        tinytgm.inverse_sensor_model(
            _scan([0.0], [1.0]), tinytgm.Pose2D(-5.0, 0.0), small_geometry, tinytgm.InverseSensorModel()
        )
    # a beam leaving the grid keeps only its in-grid cells
    field = tinytgm.inverse_sensor_model(
        _scan([math.pi], [2.0]), tinytgm.Pose2D(), small_geometry, tinytgm.InverseSensorModel()
    )
    assert len(field.hit_cells) == 0
    assert field.get((0, 0)) == field.free


def test_update_cell_examples():
    prior = tinytgm.CellBelief(0.3, 0.3)
    occupied = tinytgm.CellBelief(0.4, 0.4)
    result = tinytgm.update_cell(occupied, occupied, prior)
    assert result.as_tuple() == pytest.approx((0.4571428571, 0.4571428571, 0.0857142857), abs=1e-9)

    x = tinytgm.CellBelief(0.6, 0.1)
    assert tinytgm.update_cell(x, prior, prior).as_tuple() == pytest.approx(x.as_tuple(), abs=1e-12)
    assert tinytgm.update_cell(prior, x, prior).as_tuple() == pytest.approx(x.as_tuple(), abs=1e-12)
    assert tinytgm.update_cell(prior, tinytgm.CellBelief(0.6, 0.2), prior).as_tuple() == pytest.approx(
        (0.6, 0.2, 0.2), abs=1e-12
    )


def test_update_cell_saturates_by_default():
    prior = tinytgm.CellBelief(0.3, 0.3)
    wall = tinytgm.CellBelief(0.99, 0.0)
    hit = tinytgm.CellBelief(0.9, 0.05)
    assert tinytgm.update_cell(wall, hit, prior).as_tuple() == pytest.approx((0.95, 0.05, 0.0), abs=1e-9)
    assert tinytgm.update_cell(wall, hit, prior) == tinytgm.update_cell(wall, hit, prior, tinytgm.TGM_LIMITS)
    raw = tinytgm.update_cell(wall, hit, prior, None)
    assert raw.p_static > 0.99
    assert raw.p_dynamic == 0.0


def test_update_cell_errors():
    with pytest.raises(tinytgm.DegenerateUpdateError):
        tinytgm.update_cell(tinytgm.CellBelief(1.0, 0.0), tinytgm.CellBelief(0.0, 0.0), tinytgm.CellBelief(0.3, 0.3))
    with pytest.raises(tinytgm.TgmProgrammingError):
        tinytgm.update_cell(tinytgm.CellBelief(0.3, 0.3), tinytgm.CellBelief(0.3, 0.3), tinytgm.CellBelief(0.0, 0.3))


def _random_belief(rng: np.random.Generator, floor: float = 0.0) -> tinytgm.CellBelief:
    a, b, c = rng.dirichlet([1.0, 1.0, 1.0]) * (1 - 3 * floor) + floor
    return tinytgm.CellBelief(a, b)


@pytest.mark.parametrize("seed", range(30))
def test_update_cell_properties(seed):
    rng = np.random.default_rng(seed)
    prior = _random_belief(rng, floor=0.05)
    x, y = _random_belief(rng), _random_belief(rng)

    assert tinytgm.update_cell(x, prior, prior, None).as_tuple() == pytest.approx(x.as_tuple(), abs=1e-12)
    assert tinytgm.update_cell(prior, y, prior, None).as_tuple() == pytest.approx(y.as_tuple(), abs=1e-12)
    try:
        forward = tinytgm.update_cell(x, y, prior)
    except tinytgm.DegenerateUpdateError:
        return
    backward = tinytgm.update_cell(y, x, prior)
    assert forward == backward
    assert sum(forward.as_tuple()) == pytest.approx(1.0, abs=1e-9)
    assert forward.p_static <= 0.95 + 1e-12
    assert forward.p_dynamic >= 0.05 - 1e-12


def test_apply_saturation_examples():
    limits = tinytgm.TGM_LIMITS
    saturated = tinytgm.apply_saturation(tinytgm.CellBelief(0.99, 0.005), limits)
    assert saturated.as_tuple() == pytest.approx((0.95, 0.05, 0.0), abs=1e-12)
    inside = tinytgm.CellBelief(0.4, 0.3)
    assert tinytgm.apply_saturation(inside, limits) == inside
    dynamic = tinytgm.CellBelief(0.0, 0.99)
    assert tinytgm.apply_saturation(dynamic, limits) == dynamic


def test_apply_saturation_removes_excess_from_free_component():
    limits = tinytgm.SaturationLimits(static_range=(0.3, 1.0), dynamic_range=(0.0, 1.0))
    result = tinytgm.apply_saturation(tinytgm.CellBelief(0.1, 0.85), limits)
    assert result.p_static == 0.3
    assert result.p_dynamic == pytest.approx(0.7)

    with pytest.raises(tinytgm.TgmProgrammingError):
        tinytgm.SaturationLimits(static_range=(0.6, 0.5))
    with pytest.raises(tinytgm.TgmProgrammingError):
        tinytgm.SaturationLimits(static_range=(0.6, 1.0), dynamic_range=(0.5, 1.0))


@pytest.fixture
def room():
    """12 m x 12 m grid, sensor in the middle, 90 beams of 5 m."""
    geom = tinytgm.GridGeometry(origin=(-6.0, -6.0), resolution=0.2, width=60, height=60)
    bearings = np.linspace(-math.pi, math.pi, 90, endpoint=False)
    return geom, bearings


def _observe(geom, occupied, bearings, pose=tinytgm.Pose2D(0.05, 0.05, 0.0)):
    ranges, flags = tinytgm.cast_rays(geom, occupied, pose, bearings, 5.0)
    return tinytgm.Scan(bearings, ranges, flags, 5.0), pose


def test_zero_information_scan_equals_prediction(small_geometry, random_map):
    tgm = random_map(small_geometry, 4)
    kernel = tinytgm.uniform_disk_kernel(4.0, 0.1, 0.2)
    stepped = tinytgm.step(tgm, tinytgm.Scan.empty(5.0), tinytgm.Pose2D(1.0, 1.0), kernel, tinytgm.InverseSensorModel())
    predicted = tinytgm.predict(tgm, kernel)
    assert np.array_equal(stepped.static_layer, predicted.static_layer)
    assert np.array_equal(stepped.dynamic_layer, predicted.dynamic_layer)


def test_step_matches_cellwise_update_and_is_deterministic(room):
    geom, bearings = room
    occupied = np.zeros(geom.shape, dtype=bool)
    occupied[:, 45:50] = True
    scan, pose = _observe(geom, occupied, bearings)
    kernel = tinytgm.uniform_disk_kernel(4.0, 0.1, 0.2)
    ism = tinytgm.InverseSensorModel()
    tgm = tinytgm.new_map(geom, 0.3, 0.3)

    first = tinytgm.step(tgm, scan, pose, kernel, ism)
    second = tinytgm.step(tgm, scan, pose, kernel, ism)
    assert np.array_equal(first.static_layer, second.static_layer)
    assert np.array_equal(first.dynamic_layer, second.dynamic_layer)

    prediction = tinytgm.predict(tgm, kernel)
    field = tinytgm.inverse_sensor_model(scan, pose, geom, ism)
    for cell, measurement in list(field.items())[:: max(1, len(field) // 40)]:
        predicted = tinytgm.CellBelief(
            prediction.static_layer[cell[1], cell[0]], prediction.dynamic_layer[cell[1], cell[0]]
        )
        expected = tinytgm.update_cell(predicted, measurement, tgm.prior_belief(), tinytgm.TGM_LIMITS)
        assert first.belief(cell).as_tuple() == pytest.approx(expected.as_tuple(), abs=1e-12)


def test_max_range_scan_clears_traversed_cells(room):
    geom, bearings = room
    scan, pose = _observe(geom, np.zeros(geom.shape, dtype=bool), bearings)
    assert scan.hit_count == 0
    kernel = tinytgm.uniform_disk_kernel(4.0, 0.1, 0.2)
    tgm = tinytgm.step(tinytgm.new_map(geom, 0.3, 0.3), scan, pose, kernel, tinytgm.InverseSensorModel())
    free = tgm.free_layer()
    assert free[30, 40] > 0.4
    assert free[30, 57] == pytest.approx(0.4, abs=1e-12)  # beyond 5 m, untouched


def test_repeated_wall_saturates_static(room):
    geom, bearings = room
    occupied = np.zeros(geom.shape, dtype=bool)
    occupied[:, 45:50] = True  # wall at x in [3.0, 4.0)
    scan, pose = _observe(geom, occupied, bearings)
    kernel = tinytgm.uniform_disk_kernel(4.0, 0.1, 0.2)
    ism = tinytgm.InverseSensorModel()
    diagnostics = tinytgm.FilterDiagnostics()
    tgm = tinytgm.new_map(geom, 0.3, 0.3)
    for _ in range(30):
        tgm = tinytgm.step(tgm, scan, pose, kernel, ism, tinytgm.TGM_LIMITS, diagnostics=diagnostics)

    hits = tinytgm.inverse_sensor_model(scan, pose, geom, ism).hit_cells
    assert len(hits) > 0
    static = tgm.static_layer.flat[hits]
    assert np.all(static <= 0.95 + 1e-12)
    assert static.max() == pytest.approx(0.95, abs=1e-9)
    assert np.mean(static) > 0.85
    assert tgm.is_valid()
    assert diagnostics.steps == 30
    assert diagnostics.degenerate_updates == 0


def test_motionless_cell_keeps_static_dynamic_tie(room):
    geom, bearings = room
    occupied = np.zeros(geom.shape, dtype=bool)
    occupied[30, 45] = True
    scan, pose = _observe(geom, occupied, bearings)
    still = tinytgm.uniform_disk_kernel(0.0, 0.1, 0.2)
    tgm = tinytgm.new_map(geom, 0.3, 0.3)
    for _ in range(5):
        tgm = tinytgm.step(tgm, scan, pose, still, tinytgm.InverseSensorModel(), limits=None)
    s, d = tgm.static_layer[30, 45], tgm.dynamic_layer[30, 45]
    assert s > 0.45
    assert s == pytest.approx(d, abs=1e-12)


def test_vacated_cells_drain_from_static(room):
    geom, bearings = room
    kernel = tinytgm.uniform_disk_kernel(4.0, 0.1, 0.2)
    ism = tinytgm.InverseSensorModel()
    box_a = np.zeros(geom.shape, dtype=bool)
    box_a[28:33, 40:43] = True
    box_b = np.zeros(geom.shape, dtype=bool)
    box_b[28:33, 45:48] = True

    tgm = tinytgm.new_map(geom, 0.3, 0.3)
    scan, pose = _observe(geom, box_a, bearings)
    for _ in range(10):
        tgm = tinytgm.step(tgm, scan, pose, kernel, ism)
    face = tinytgm.inverse_sensor_model(scan, pose, geom, ism).hit_cells
    assert np.mean(tgm.static_layer.flat[face]) > 0.5

    scan, pose = _observe(geom, box_b, bearings)
    for _ in range(10):
        tgm = tinytgm.step(tgm, scan, pose, kernel, ism)
    assert np.all(tgm.static_layer.flat[face] < 0.5)


def test_tgm_mapper_local_update(room):
    geom, bearings = room
    occupied = np.zeros(geom.shape, dtype=bool)
    occupied[:, 45:50] = True
    scan, pose = _observe(geom, occupied, bearings)
    kernel = tinytgm.uniform_disk_kernel(4.0, 0.1, 0.2)
    mapper = tinytgm.TgmMapper(geom, kernel, tinytgm.InverseSensorModel(), local_radius=2.0)
    mapper.map.dynamic_layer[0, 0] = 0.9
    tracer = tinytgm.TraceNode(name="mapper")
    observed = mapper.integrate(scan, pose, tracer)

    assert len(observed) > 0
    assert mapper.map.dynamic_layer[0, 0] == 0.9  # outside the predicted window
    assert set(tracer.children) == {"predict", "update"}
    assert mapper.diagnostics.steps == 1
    assert mapper.match_layer() is mapper.map.static_layer
    assert mapper.render().shape == (60, 60, 3)
