"""Exact ray/pixel intersection weights for parallel-beam geometry.

The image occupies the square [-1, 1]^2. Pixel ``(i, j)`` covers
``x in [-1 + j*h, -1 + (j+1)*h]`` and ``y in [-1 + i*h, -1 + (i+1)*h]`` with
``h = 2/n``, so the row index runs along y and the column index along x.

For angle ``phi`` the detector normal is ``(cos phi, sin phi)`` and the ray
through detector offset ``s`` is ``{s*(cos phi, sin phi) + t*(-sin phi, cos phi)}``.
Each matrix entry is the length of that ray inside a pixel.
"""

import math

import numpy as np
import scipy.sparse as sp

_PARALLEL_EPS = 1e-12


def default_detector_bins(n):
    return int(math.ceil(math.sqrt(2.0) * n))


def detector_offsets(n_bins):
    """Bin centres covering the image diagonal [-sqrt(2), sqrt(2)]."""
    half = math.sqrt(2.0)
    width = 2.0 * half / n_bins
    return -half + (np.arange(n_bins) + 0.5) * width


def _slab(edges_lo, edges_hi, origin, direction):
    """Parameter interval of a line inside the slabs ``[lo, hi)``.

    ``origin`` has one entry per ray; returns arrays shaped (rays, cells).
    """
    origin = origin[:, None]
    if abs(direction) > _PARALLEL_EPS:
        t1 = (edges_lo[None, :] - origin) / direction
        t2 = (edges_hi[None, :] - origin) / direction
        return np.minimum(t1, t2), np.maximum(t1, t2)
    # ray parallel to the slab: inside for every t or never; half-open so a ray
    # on a shared edge is credited to one pixel only
    inside = (edges_lo[None, :] <= origin) & (origin < edges_hi[None, :])
    lo = np.where(inside, -np.inf, np.inf)
    hi = np.where(inside, np.inf, -np.inf)
    return lo, hi


def intersection_weights(n, angle_deg, offsets):
    """Chord lengths of the rays at one angle; shape (bins, n*n) row-major."""
    h = 2.0 / n
    lo = -1.0 + np.arange(n) * h
    hi = lo + h
    phi = math.radians(angle_deg)
    c, s = math.cos(phi), math.sin(phi)
    ox, oy = offsets * c, offsets * s
    dx, dy = -s, c
    tx_lo, tx_hi = _slab(lo, hi, ox, dx)  # (bins, n) over columns
    ty_lo, ty_hi = _slab(lo, hi, oy, dy)  # (bins, n) over rows
    t_enter = np.maximum(ty_lo[:, :, None], tx_lo[:, None, :])
    t_exit = np.minimum(ty_hi[:, :, None], tx_hi[:, None, :])
    chord = np.clip(t_exit - t_enter, 0.0, None)
    chord[~np.isfinite(chord)] = 0.0
    return chord.reshape(len(offsets), n * n)


def build_matrix(n, angles_deg, n_bins):
    """Sparse system matrix with one row per (angle, bin) pair, angle-major."""
    offsets = detector_offsets(n_bins)
    blocks = []
    for angle in angles_deg:
        w = intersection_weights(n, float(angle), offsets)
        w[w < 1e-14] = 0.0
        blocks.append(sp.csr_matrix(w))
    return sp.vstack(blocks, format="csr")
