"""Synthetic artifact injectors: bias field, elastic distortion, zeroed volumes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .volume import DwiStack


@dataclass(frozen=True)
class BiasFieldSpec:
    """Smooth multiplicative brightening centered at a voxel coordinate."""

    center: tuple  # voxel coordinates, may be fractional
    sigma: float  # mm
    amplitude: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        if len(c) != 3:
            raise ConfigError("bias center must be a 3-vector")
        if not self.sigma > 0:
            raise ConfigError("bias sigma must be positive")
        if not self.amplitude > 0:
            raise ConfigError("bias amplitude must be positive")
        object.__setattr__(self, "center", c)


@dataclass(frozen=True)
class DistortionSpec:
    """Seeded elastic warp from a coarse random displacement grid."""

    grid_spacing: int = 8  # voxels between control points
    displacement_sigma: float = 2.0  # voxels
    seed: int = 0

    def __post_init__(self):
        if int(self.grid_spacing) < 2:
            raise ConfigError("grid_spacing must be at least 2 voxels")
        if self.displacement_sigma < 0:
            raise ConfigError("displacement_sigma must be non-negative")
        object.__setattr__(self, "grid_spacing", int(self.grid_spacing))


@dataclass(frozen=True)
class CorruptedSpec:
    """Channels whose signal is lost and replaced with zeros."""

    channel_indices: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(
            self, "channel_indices", tuple(int(i) for i in self.channel_indices)
        )


def inject_bias_field(stack: DwiStack, spec: BiasFieldSpec) -> DwiStack:
    """Multiply every channel by 1 + amplitude * exp(-|v - c|^2 / (2 sigma^2)).

    Distances are metric: voxel offsets scaled by the stack voxel size.
    """
    w, h, d = stack.dims
    cx, cy, cz = spec.center
    if not (0 <= cx < w and 0 <= cy < h and 0 <= cz < d):
        raise ConfigError(
            f"bias center {spec.center} outside volume dims {(w, h, d)}"
        )
    vx, vy, vz = stack.voxel_size
    x = ((np.arange(w) - cx) * vx)[:, None, None]
    y = ((np.arange(h) - cy) * vy)[None, :, None]
    z = ((np.arange(d) - cz) * vz)[None, None, :]
    dist2 = x * x + y * y + z * z
    mult = 1.0 + spec.amplitude * np.exp(-dist2 / (2.0 * spec.sigma**2))
    data = (stack.data.astype(np.float64) * mult[None]).astype(np.float32)
    return DwiStack(data, stack.scheme, stack.voxel_size)


def _upsample_control_grid(cgrid: np.ndarray, dims, spacing: int) -> np.ndarray:
    """Trilinear interpolation of (3, nx, ny, nz) control values to (3, W, H, D)."""
    out_axes = []
    for axis, dim in enumerate(dims):
        t = np.arange(dim, dtype=np.float64) / spacing
        i0 = np.minimum(t.astype(np.intp), cgrid.shape[axis + 1] - 2)
        frac = t - i0
        out_axes.append((i0, frac))
    (ix, fx), (iy, fy), (iz, fz) = out_axes

    out = np.zeros((3,) + tuple(dims), dtype=np.float64)
    for a in (0, 1):
        wx = (1.0 - fx if a == 0 else fx)[None, :, None, None]
        for b in (0, 1):
            wy = (1.0 - fy if b == 0 else fy)[None, None, :, None]
            for c in (0, 1):
                wz = (1.0 - fz if c == 0 else fz)[None, None, None, :]
                corner = cgrid[:, ix + a][:, :, iy + b][:, :, :, iz + c]
                out += corner * wx * wy * wz
    return out


def warp_with_displacement(data: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Backward warp: out(v) = in(v - u(v)), trilinear with zero padding.

    data is (C, W, H, D); disp is (3, W, H, D) in voxel units. A displacement
    of +1 along x moves content one voxel toward larger x.
    """
    c, w, h, d = data.shape
    grid = np.meshgrid(
        np.arange(w, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(d, dtype=np.float64),
        indexing="ij",
    )
    src = [grid[i] - disp[i] for i in range(3)]
    base = [np.floor(s) for s in src]
    frac = [s - b for s, b in zip(src, base)]
    base = [b.astype(np.intp) for b in base]

    out = np.zeros((c, w, h, d), dtype=np.float64)
    dims = (w, h, d)
    for a in (0, 1):
        ix = base[0] + a
        wxa = 1.0 - frac[0] if a == 0 else frac[0]
        for b in (0, 1):
            iy = base[1] + b
            wyb = 1.0 - frac[1] if b == 0 else frac[1]
            for cc in (0, 1):
                iz = base[2] + cc
                wzc = 1.0 - frac[2] if cc == 0 else frac[2]
                valid = (
                    (ix >= 0) & (ix < dims[0])
                    & (iy >= 0) & (iy < dims[1])
                    & (iz >= 0) & (iz < dims[2])
                )
                weight = wxa * wyb * wzc * valid
                ixc = np.clip(ix, 0, dims[0] - 1)
                iyc = np.clip(iy, 0, dims[1] - 1)
                izc = np.clip(iz, 0, dims[2] - 1)
                out += data[:, ixc, iyc, izc] * weight[None]
    return out


def displacement_field(dims, spec: DistortionSpec) -> np.ndarray:
    """Seeded coarse random field upsampled to voxel resolution, (3, W, H, D)."""
    spacing = spec.grid_spacing
    nctrl = [int(np.ceil((dim - 1) / spacing)) + 1 for dim in dims]
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 4]))
    cgrid = rng.normal(0.0, 1.0, size=(3, *nctrl)) * spec.displacement_sigma
    return _upsample_control_grid(cgrid, dims, spacing)


def inject_distortion(stack: DwiStack, spec: DistortionSpec) -> DwiStack:
    """Apply one seeded elastic deformation identically to all channels."""
    if spec.displacement_sigma == 0:
        return stack
    disp = displacement_field(stack.dims, spec)
    warped = warp_with_displacement(stack.data.astype(np.float64), disp)
    data = np.clip(warped, 0.0, None).astype(np.float32)
    return DwiStack(data, stack.scheme, stack.voxel_size)


def corrupt_volumes(stack: DwiStack, spec: CorruptedSpec) -> DwiStack:
    """Zero out the listed channels; everything else passes through bitwise."""
    c = stack.n_channels
    for i in spec.channel_indices:
        if not 0 <= i < c:
            raise ConfigError(f"corrupt channel {i} out of range for {c} channels")
    if stack.scheme.dwi_indices.size == 0:
        warnings.warn("corrupting a stack with no DWI channels", stacklevel=2)
    if not spec.channel_indices:
        return stack
    data = stack.data.copy()
    data[list(spec.channel_indices)] = 0.0
    return DwiStack(data, stack.scheme, stack.voxel_size)


def inject(stack: DwiStack, spec) -> DwiStack:
    """Dispatch on the artifact spec type."""
    if isinstance(spec, BiasFieldSpec):
        return inject_bias_field(stack, spec)
    if isinstance(spec, DistortionSpec):
        return inject_distortion(stack, spec)
    if isinstance(spec, CorruptedSpec):
        return corrupt_volumes(stack, spec)
    raise ConfigError(f"unknown artifact spec {type(spec).__name__}")
