"""Diffusion tensor forward model, log-linear fitting, eigenvalues, anisotropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GradientSchemeError, ShapeError
from .volume import DwiStack, FaMap, _quad_form_weights

# S_k below this fraction of S0 is floored before the log so zeroed volumes
# stay finite in the fit.
SIGNAL_FLOOR_FRACTION = 1e-6


@dataclass(frozen=True)
class TensorField:
    """Per-voxel symmetric tensor (Dxx,Dxy,Dxz,Dyy,Dyz,Dzz) over a masked volume."""

    data: np.ndarray  # (6, W, H, D) float64
    mask: np.ndarray  # (W, H, D) bool

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        if data.ndim != 4 or data.shape[0] != 6 or data.shape[1:] != mask.shape:
            raise ShapeError(
                f"tensor field wants (6,W,H,D) plus matching mask, got "
                f"{data.shape} and {mask.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ShapeError("non-finite tensor components")
        if np.any(data[:, ~mask] != 0):
            raise ShapeError("out-of-mask tensor components must be zero")
        data.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    def __repr__(self) -> str:
        return f"TensorField(dims={self.mask.shape}, n_mask={int(self.mask.sum())})"


def predict_signal(tensor6, s0: float, direction, bvalue: float) -> float:
    """Stejskal-Tanner forward model: s0 * exp(-b * g^T D g)."""
    d6 = np.asarray(tensor6, dtype=np.float64)
    g = np.asarray(direction, dtype=np.float64)
    if d6.shape != (6,) or g.shape != (3,):
        raise ShapeError("tensor must be a 6-vector and direction a 3-vector")
    if bvalue < 0:
        raise GradientSchemeError("negative b-value")
    if s0 < 0:
        raise ShapeError("negative s0")
    if bvalue > 0 and abs(np.linalg.norm(g) - 1.0) > 1e-6:
        raise GradientSchemeError(
            f"direction norm {np.linalg.norm(g):.8f} is not unit for b > 0"
        )
    quad = float(_quad_form_weights(g[None])[0] @ d6)
    return float(s0 * np.exp(-float(bvalue) * quad))


def design_matrix(scheme) -> np.ndarray:
    """Rows b_k * (gx^2, 2gxgy, 2gxgz, gy^2, 2gygz, gz^2) over DWI channels."""
    didx = scheme.dwi_indices
    dirs = scheme.bvecs[didx]
    return scheme.bvals[didx, None] * _quad_form_weights(dirs)


def fit_tensor(stack: DwiStack) -> TensorField:
    """Ordinary least squares on the log-linearized forward model, per voxel.

    Out-of-mask voxels (s0 == 0) stay zero. In-mask signals below the floor
    are clamped so corrupted channels contribute a finite residual instead
    of blowing up the log.
    """
    scheme = stack.scheme
    didx = scheme.dwi_indices
    if scheme.b0_indices.size < 1 or didx.size < 6:
        raise GradientSchemeError(
            f"fitting needs 1 b0 + 6 DWIs, scheme has {scheme.b0_indices.size} "
            f"b0 and {didx.size} DWI channels"
        )
    a = design_matrix(scheme)
    rank = np.linalg.matrix_rank(a)
    if rank < 6:
        raise GradientSchemeError(
            f"design matrix rank {rank} < 6: the {didx.size} DWI directions "
            "are collinear or otherwise degenerate"
        )
    pinv = np.linalg.pinv(a)

    s0 = stack.s0
    mask = s0 > 0
    w, h, d = stack.dims
    out = np.zeros((6, w, h, d), dtype=np.float64)
    if mask.any():
        s0_in = s0[mask]
        sig = stack.data[didx][:, mask].astype(np.float64)
        floor = SIGNAL_FLOOR_FRACTION * s0_in
        sig = np.maximum(sig, floor[None, :])
        y = -np.log(sig / s0_in[None, :])
        out[:, mask] = pinv @ y
    return TensorField(out, mask)


def _eig_trig(a00, a01, a02, a11, a12, a22):
    """Closed-form eigenvalues of a symmetric 3x3 matrix, descending."""
    q = (a00 + a11 + a22) / 3.0
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * (
        a01 * a01 + a02 * a02 + a12 * a12
    )
    if p2 <= 0.0:
        return (q, q, q), True
    p = np.sqrt(p2 / 6.0)
    b00, b11, b22 = (a00 - q) / p, (a11 - q) / p, (a22 - q) / p
    b01, b02, b12 = a01 / p, a02 / p, a12 / p
    detb = (
        b00 * (b11 * b22 - b12 * b12)
        - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02)
    )
    r = detb / 2.0
    ok = -1.0 + 1e-10 < r < 1.0 - 1e-10
    phi = np.arccos(min(1.0, max(-1.0, r))) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    return (e1, e2, e3), ok


def _eig_jacobi(m: np.ndarray):
    """Cyclic Jacobi sweep fallback for degenerate discriminants."""
    a = m.astype(np.float64).copy()
    for _ in range(50):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= 1e-30 * max(1.0, np.abs(a).max() ** 2):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if a[p, q] == 0.0:
                continue
            tau = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
            if tau == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
    return tuple(sorted((a[0, 0], a[1, 1], a[2, 2]), reverse=True))


def eig_sym3(tensor6) -> tuple:
    """Descending eigenvalues (l1, l2, l3) of the symmetric 3x3 tensor."""
    d6 = np.asarray(tensor6, dtype=np.float64)
    if d6.shape != (6,):
        raise ShapeError("expected a 6-component tensor")
    if not np.all(np.isfinite(d6)):
        raise ShapeError("non-finite tensor components")
    scale = float(np.abs(d6).max())
    if scale == 0.0:
        return (0.0, 0.0, 0.0)
    a00, a01, a02, a11, a12, a22 = d6 / scale
    (e1, e2, e3), ok = _eig_trig(a00, a01, a02, a11, a12, a22)
    if not ok:
        m = np.array([[a00, a01, a02], [a01, a11, a12], [a02, a12, a22]])
        e1, e2, e3 = _eig_jacobi(m)
    triple = tuple(sorted((e1, e2, e3), reverse=True))
    return tuple(scale * e for e in triple)


def fa_from_eigs(eigs) -> float:
    """Fractional anisotropy of an eigenvalue triple; all-zero maps to 0."""
    l1, l2, l3 = (float(e) for e in eigs)
    den = 2.0 * (l1 * l1 + l2 * l2 + l3 * l3)
    if den == 0.0:
        return 0.0
    num = (l1 - l2) ** 2 + (l1 - l3) ** 2 + (l2 - l3) ** 2
    return float(np.sqrt(num / den))


def _eigvals_batch(d6: np.ndarray) -> np.ndarray:
    """Vectorized descending eigenvalues for (6, M) tensor columns."""
    scale = np.abs(d6).max(axis=0)
    safe = np.where(scale > 0, scale, 1.0)
    a00, a01, a02, a11, a12, a22 = d6 / safe

    q = (a00 + a11 + a22) / 3.0
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * (
        a01**2 + a02**2 + a12**2
    )
    p = np.sqrt(np.maximum(p2, 0.0) / 6.0)
    psafe = np.where(p > 0, p, 1.0)
    b00, b11, b22 = (a00 - q) / psafe, (a11 - q) / psafe, (a22 - q) / psafe
    b01, b02, b12 = a01 / psafe, a02 / psafe, a12 / psafe
    r = (
        b00 * (b11 * b22 - b12 * b12)
        - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02)
    ) / 2.0
    phi = np.arccos(np.clip(r, -1.0, 1.0)) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3

    eigs = np.sort(np.stack([e1, e2, e3]), axis=0)[::-1]
    eigs = np.where(p > 0, eigs, np.stack([q, q, q]))

    # Columns where the trig discriminant saturates get the Jacobi treatment.
    degen = (p > 0) & (np.abs(r) >= 1.0 - 1e-10)
    for col in np.where(degen)[0]:
        m = np.array(
            [
                [a00[col], a01[col], a02[col]],
                [a01[col], a11[col], a12[col]],
                [a02[col], a12[col], a22[col]],
            ]
        )
        eigs[:, col] = _eig_jacobi(m)
    return eigs * safe


def compute_fa_map(stack: DwiStack) -> FaMap:
    """Fit, decompose, and map to anisotropy; clamps eigenvalues and output.

    Negative eigenvalues from noisy fits are clamped to 0 first, and the
    final map is clamped into [0,1].
    """
    field = fit_tensor(stack)
    mask = field.mask
    fa = np.zeros(mask.shape, dtype=np.float64)
    if mask.any():
        eigs = _eigvals_batch(field.data[:, mask])
        eigs = np.maximum(eigs, 0.0)
        den = 2.0 * np.sum(eigs * eigs, axis=0)
        num = (
            (eigs[0] - eigs[1]) ** 2
            + (eigs[0] - eigs[2]) ** 2
            + (eigs[1] - eigs[2]) ** 2
        )
        vals = np.sqrt(num / np.where(den > 0, den, 1.0))
        vals[den == 0] = 0.0
        fa[mask] = np.clip(vals, 0.0, 1.0)
    return FaMap(fa.astype(np.float32), mask)
