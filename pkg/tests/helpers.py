"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np

from rhizograph.data_model import STAGES, ZONES, Dataset, WindowRecord

LAYOUT = {"A": 6, "B": 12, "C": 12}


def tube_records(t, k, y=0, c=0, layout=LAYOUT, stages=STAGES):
    return [
        WindowRecord(d, t, k, z, layout[z], y if np.isscalar(y) else y[(d, z)], c if np.isscalar(c) else c[(d, z)])
        for d in stages
        for z in ZONES
    ]


def one_cell_dataset(n, y=0, c=0, zone="A"):
    """A single tube whose only informative cell is ``zone`` at stage 1.

    Other cells carry n=1 windows; they still enter the likelihood, so tests
    that want one observation should restrict to the chosen zone by hand.
    """
    layout = {z: (n if z == zone else 1) for z in ZONES}
    recs = [
        WindowRecord(d, 1, 1, z, layout[z], y if (z == zone and d == 1) else 0, c if (z == zone and d == 1) else 0)
        for d in STAGES
        for z in ZONES
    ]
    return Dataset(recs)


def buffon_polyline_crossings(vertices: np.ndarray, n_drops: int, seed: int) -> np.ndarray:
    """Crossings of a rigid polyline with the lines y = integer, random pose per drop.

    Independent of the package: rotation uniform on [0, 2pi), vertical offset
    uniform on [0, 1). A segment from y0 to y1 crosses |floor(y1) - floor(y0)|
    lines.
    """
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0, 2 * np.pi, n_drops)
    off = rng.uniform(0, 1, n_drops)
    # y-coordinate of every vertex after rotation by phi and shift by off
    y = np.outer(np.sin(phi), vertices[:, 0]) + np.outer(np.cos(phi), vertices[:, 1]) + off[:, None]
    fl = np.floor(y)
    return np.abs(np.diff(fl, axis=1)).sum(axis=1)


def polyline_length(vertices: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(vertices, axis=0), axis=1).sum())
