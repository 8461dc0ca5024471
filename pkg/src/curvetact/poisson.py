"""Fast Poisson integration of gradient fields.

Heights h on a pixel grid satisfy the 5-point discrete Poisson equation
lap(h) = div(g) with homogeneous Dirichlet boundaries: h is pinned to zero on
the virtual ring just outside the solved region.  The 5-point Laplacian is
diagonalized exactly by the type-I discrete sine transform, so the solve is a
forward DST, an eigenvalue division, and an inverse DST.

``solve_masked`` integrates a field that is only trusted inside a mask (a
contact region): the mask's bounding box is embedded with a 2 px zero-gradient
pad, gradients outside the mask are zeroed, and the solved heights are
reported inside the mask only.  The pad turns the mask edge into a divergence
dipole ring, which is exactly the statement "height falls to zero at the
contact boundary".

Gradient fields are arrays of shape (H, W, 2) ordered (d/du, d/dv) where u is
the column coordinate and v the row coordinate, in mm per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.ndimage


@dataclass(frozen=True)
class HeightMap:
    """Solved heights (mm) plus the mask they are valid on."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask shapes differ")


def divergence(field) -> np.ndarray:
    """Source term div(g) = dGx/du + dGy/dv.

    Central differences in the interior, one-sided at the region edges.
    """
    g = np.asarray(field, dtype=np.float64)
    if g.ndim != 3 or g.shape[2] != 2:
        raise ValueError(f"expected gradient field of shape (H, W, 2), got {g.shape}")
    gx = g[:, :, 0]
    gy = g[:, :, 1]
    b = np.empty(gx.shape, dtype=np.float64)
    # d/du: along columns (axis 1)
    b[:, 1:-1] = 0.5 * (gx[:, 2:] - gx[:, :-2])
    b[:, 0] = gx[:, 1] - gx[:, 0]
    b[:, -1] = gx[:, -1] - gx[:, -2]
    # d/dv: along rows (axis 0)
    b[1:-1, :] += 0.5 * (gy[2:, :] - gy[:-2, :])
    b[0, :] += gy[1, :] - gy[0, :]
    b[-1, :] += gy[-1, :] - gy[-2, :]
    return b


def _dst1_matrix(n: int) -> np.ndarray:
    k = np.arange(1, n + 1)
    return np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * np.outer(k, k) / (n + 1))


def _dstn_ortho(a: np.ndarray, method: str) -> np.ndarray:
    """Orthonormal DST-I along both axes (it is its own inverse)."""
    if method == "fft":
        return scipy.fft.dstn(a, type=1, norm="ortho")
    if method == "direct":
        # O(n^2) matrix form, kept as a validation fallback for the FFT path
        return _dst1_matrix(a.shape[0]) @ a @ _dst1_matrix(a.shape[1])
    raise ValueError(f"unknown DST method {method!r}")


def laplacian_eigenvalues(h: int, w: int) -> np.ndarray:
    """Eigenvalues of the 5-point Laplacian under the zero-ring convention."""
    lam_v = 2.0 * np.cos(np.pi * np.arange(1, h + 1) / (h + 1)) - 2.0
    lam_u = 2.0 * np.cos(np.pi * np.arange(1, w + 1) / (w + 1)) - 2.0
    return lam_v[:, None] + lam_u[None, :]


def solve_fast(source_or_field, method: str = "fft") -> np.ndarray:
    """Solve lap(h) = b on the full rectangle, h = 0 on the virtual outer ring.

    Accepts either a precomputed source term (H, W) or a gradient field
    (H, W, 2), in which case the divergence is taken first.  Exact (to
    round-off) for the 5-point Laplacian.
    """
    arr = np.asarray(source_or_field, dtype=np.float64)
    if arr.ndim == 3:
        b = divergence(arr)
    elif arr.ndim == 2:
        b = arr
    else:
        raise ValueError(f"expected (H, W) source or (H, W, 2) field, got {arr.shape}")
    if b.shape[0] < 1 or b.shape[1] < 1:
        raise ValueError("empty solve region")
    bhat = _dstn_ortho(b, method)
    hhat = bhat / laplacian_eigenvalues(*b.shape)
    return _dstn_ortho(hhat, method)


def apply_laplacian(h: np.ndarray) -> np.ndarray:
    """5-point Laplacian with the same zero-ring convention as solve_fast."""
    h = np.asarray(h, dtype=np.float64)
    padded = np.pad(h, 1)
    return (
        padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
        - 4.0 * h
    )


def solve_masked(field, mask, pad: int = 2, method: str = "fft") -> HeightMap:
    """Integrate gradients trusted only inside a mask.

    Each 8-connected mask component is solved on its own: the component's
    bounding box is embedded with a zero-gradient pad, gradients outside the
    component are zeroed, solve_fast runs on the embedding, and heights are
    reported restricted to the component (zero elsewhere).  Per-component
    solves make disjoint contact patches exactly independent of each other's
    gradients.  A mask covering the whole frame short-circuits to a plain
    solve_fast (the embedding is the identity there).
    """
    g = np.asarray(field, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if g.shape[:2] != m.shape:
        raise ValueError("field and mask shapes differ")
    if not m.any():
        raise ValueError("empty mask: nothing to solve")
    if m.all():
        return HeightMap(values=solve_fast(g, method=method), mask=m)
    values = np.zeros(m.shape, dtype=np.float64)
    labels, count = scipy.ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    for lab in range(1, count + 1):
        comp = labels == lab
        rows = np.flatnonzero(comp.any(axis=1))
        cols = np.flatnonzero(comp.any(axis=0))
        r0, r1 = rows[0], rows[-1] + 1
        c0, c1 = cols[0], cols[-1] + 1
        hh, ww = r1 - r0 + 2 * pad, c1 - c0 + 2 * pad
        emb = np.zeros((hh, ww, 2), dtype=np.float64)
        sub_mask = comp[r0:r1, c0:c1]
        emb[pad : hh - pad, pad : ww - pad] = np.where(
            sub_mask[:, :, None], g[r0:r1, c0:c1], 0.0
        )
        h_emb = solve_fast(emb, method=method)
        core = h_emb[pad : hh - pad, pad : ww - pad]
        values[r0:r1, c0:c1][sub_mask] = core[sub_mask]
    return HeightMap(values=values, mask=m)


def _fill_axis(vals: np.ndarray, bad: np.ndarray):
    """Fill bad runs along axis 1 by linear interpolation between run neighbours.

    Returns (filled values, run length per pixel); runs touching the border get
    an infinite length so the caller can prefer the other axis.
    """
    n_rows, n_cols = vals.shape
    filled = vals.copy()
    runlen = np.zeros(vals.shape, dtype=np.float64)
    for i in range(n_rows):
        row_bad = bad[i]
        if not row_bad.any():
            continue
        j = 0
        while j < n_cols:
            if not row_bad[j]:
                j += 1
                continue
            k = j
            while k < n_cols and row_bad[k]:
                k += 1
            length = k - j
            if j == 0 or k == n_cols:
                runlen[i, j:k] = np.inf
            else:
                runlen[i, j:k] = length
                left = vals[i, j - 1]
                right = vals[i, k]
                t = np.arange(1, length + 1) / (length + 1)
                filled[i, j:k] = left + (right - left) * t
            j = k
    return filled, runlen


def inpaint_occluded(field, occlusion_mask, max_band_px: int = 15):
    """Fill occluded gradient pixels by 1-D linear interpolation across the band.

    Each occluded pixel is bridged along the image axis with the shorter
    occlusion run (i.e. perpendicular to the band it sits in).  Runs wider than
    max_band_px, and runs touching the border, are zero-filled and flagged.

    Returns (filled field (H, W, 2), flagged mask of zero-filled pixels).
    Raises on a fully occluded field.
    """
    g = np.asarray(field, dtype=np.float64)
    occ = np.asarray(occlusion_mask, dtype=bool)
    if g.shape[:2] != occ.shape:
        raise ValueError("field and occlusion mask shapes differ")
    if occ.all():
        raise ValueError("fully occluded field: nothing to interpolate from")
    out = g.copy()
    flagged = np.zeros(occ.shape, dtype=bool)
    if not occ.any():
        return out, flagged
    for ch in range(g.shape[2]):
        plane = np.where(occ, 0.0, g[:, :, ch])
        fill_h, run_h = _fill_axis(plane, occ)
        fill_v, run_v = _fill_axis(plane.T, occ.T)
        fill_v, run_v = fill_v.T, run_v.T
        best = np.minimum(run_h, run_v)
        use_h = run_h <= run_v
        res = np.where(use_h, fill_h, fill_v)
        ok = occ & (best <= max_band_px)
        out[:, :, ch] = np.where(occ, np.where(ok, res, 0.0), g[:, :, ch])
        flagged |= occ & ~ok
    return out, flagged
