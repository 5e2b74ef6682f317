"""Per-scan time budget.

Steps:
- Build a 512 x 512 map of 0.2 m cells with random static and dynamic mass and a street-like occupancy mask.
- Time full filter steps (prediction with a radius-10 kernel plus the 200-beam update) and scan matches.
Expectations:
- The best of five filter steps takes at most 100 ms; the best of five matches at most 15 ms.
"""

from __future__ import annotations

import math
import time

import numpy as np

import tinytgm

REPEATS = 5


def _best_time(fn) -> float:
    fn()
    best = math.inf
    for _ in range(REPEATS):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _scene(random_map):
    geom = tinytgm.GridGeometry(origin=(-51.1, -51.1), resolution=0.2, width=512, height=512)
    tgm = random_map(geom, 17, static_share=0.2)
    occupied = np.zeros(geom.shape, dtype=bool)
    for y0, y1 in ((300, 315), (197, 212)):
        occupied[y0:y1, 100:240] = True
        occupied[y0:y1, 272:412] = True
    occupied[236:246, 200:300] = True
    occupied[266:276, 180:230] = True
    bearings = np.linspace(-math.pi, math.pi, 200, endpoint=False)
    pose = tinytgm.Pose2D(0.05, 0.05, 0.0)
    ranges, flags = tinytgm.cast_rays(geom, occupied, pose, bearings, 25.0)
    return geom, tgm, occupied, tinytgm.Scan(bearings, ranges, flags, 25.0), pose


def test_filter_step_budget(random_map):
    geom, tgm, _, scan, pose = _scene(random_map)
    kernel = tinytgm.uniform_disk_kernel(v_max=20.0, dt=0.1, resolution=geom.resolution)
    assert kernel.radius_cells == 10
    ism = tinytgm.InverseSensorModel()
    elapsed = _best_time(lambda: tinytgm.step(tgm, scan, pose, kernel, ism))
    assert elapsed <= 0.100, f"filter step took {1e3 * elapsed:.1f} ms"


def test_match_budget(random_map):
    geom, _, occupied, scan, pose = _scene(random_map)
    assert np.count_nonzero(~scan.max_range_flags) > 100
    field = tinytgm.SmoothStaticField(geom, 0.95 * occupied)
    prior = tinytgm.Pose2D(pose.x + 0.12, pose.y - 0.08, pose.theta + 0.02)
    elapsed = _best_time(lambda: tinytgm.match(scan, prior, field))
    assert elapsed <= 0.015, f"match took {1e3 * elapsed:.1f} ms"
