from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest

os.environ.setdefault("DISABLE_TINYTGM_LOGGING", "1")

_ROOT = Path(__file__).resolve().parents[1]
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

import tinytgm  # noqa: E402


@pytest.fixture
def small_geometry() -> tinytgm.GridGeometry:
    """32 x 24 cells of 0.2 m, cell (0, 0) centered at the world origin."""
    return tinytgm.GridGeometry(origin=(0.0, 0.0), resolution=0.2, width=32, height=24)


@pytest.fixture
def random_map():
    """Factory of random valid maps: p_static + p_dynamic <= 1 in every cell."""

    def _make(geom: tinytgm.GridGeometry, seed: int, static_share: float = 0.5) -> tinytgm.TgmMap:
        rng = np.random.default_rng(seed)
        static = rng.uniform(0.0, 1.0, geom.shape) * (rng.uniform(0, 1, geom.shape) < static_share)
        dynamic = rng.uniform(0.0, 1.0, geom.shape) * (1.0 - static)
        return tinytgm.TgmMap(geom, static, dynamic, (0.3, 0.3))

    return _make


@pytest.fixture
def pillar_world():
    """Factory of isolated single-cell pillars plus scans observing them exactly from a pose."""

    def _make(
        pillars: list[tuple[int, int]],
        pose: tinytgm.Pose2D,
        geom: tinytgm.GridGeometry | None = None,
    ) -> tuple[tinytgm.GridGeometry, np.ndarray, tinytgm.Scan]:
        geom = geom or tinytgm.GridGeometry(origin=(-10.0, -10.0), resolution=0.2, width=100, height=100)
        layer = np.zeros(geom.shape)
        centers = []
        for cell in pillars:
            layer[cell[1], cell[0]] = 1.0
            centers.append(tinytgm.cell_center(geom, cell))
        local = pose.inverse().transform_points(np.asarray(centers))
        bearings = np.arctan2(local[:, 1], local[:, 0])
        ranges = np.hypot(local[:, 0], local[:, 1])
        order = np.argsort(bearings)
        scan = tinytgm.Scan(bearings[order], ranges[order], np.zeros(len(order), dtype=bool), 50.0)
        return geom, layer, scan

    return _make
