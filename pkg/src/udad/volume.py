"""Core array types, synthetic phantoms, channel utilities, and volume file I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DvolHeaderError,
    DvolMagicError,
    DvolSizeMismatchError,
    DvolTruncatedError,
    GradientSchemeError,
    ShapeError,
)

DVOL_MAGIC = b"DVOL1\n"

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

# Phantom tissue diffusivities (mm^2/s) and the in-mask b0 signal level.
D_BACKGROUND = 0.7e-3
D_CSF = 3.0e-3
FIBER_EIGS = (1.7e-3, 0.3e-3, 0.3e-3)
S0_VALUE = 1000.0

# Radial fraction of the brain ellipsoid occupied by the CSF-like rim.
_RIM_START = 0.80


@dataclass(frozen=True)
class GradientScheme:
    """Per-channel diffusion sensitization: b-values and unit directions."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.ascontiguousarray(np.asarray(self.bvals, dtype=np.float64))
        bvecs = np.ascontiguousarray(np.asarray(self.bvecs, dtype=np.float64))
        if bvals.ndim != 1 or bvecs.shape != (bvals.size, 3):
            raise GradientSchemeError(
                "expected bvals of shape (C,) and bvecs of shape (C,3), got "
                f"{bvals.shape} and {bvecs.shape}"
            )
        if bvals.size == 0:
            raise GradientSchemeError("empty gradient scheme")
        if not (np.all(np.isfinite(bvals)) and np.all(np.isfinite(bvecs))):
            raise GradientSchemeError("non-finite gradient table entry")
        if np.any(bvals < 0):
            raise GradientSchemeError("negative b-value")
        if not np.any(bvals == 0):
            raise GradientSchemeError("scheme has no b0 entry")
        weighted = bvals > 0
        if weighted.any():
            norms = np.linalg.norm(bvecs[weighted], axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > 1e-6:
                raise GradientSchemeError(
                    f"direction norm off unit by {worst:.2e} on a b > 0 channel"
                )
        bvals.setflags(write=False)
        bvecs.setflags(write=False)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self) -> int:
        return int(self.bvals.size)

    def __repr__(self) -> str:
        return f"GradientScheme(C={len(self)}, n_dwi={self.dwi_indices.size})"

    @property
    def b0_indices(self) -> np.ndarray:
        return np.where(self.bvals == 0)[0]

    @property
    def dwi_indices(self) -> np.ndarray:
        return np.where(self.bvals > 0)[0]

    def subset(self, channel_indices) -> "GradientScheme":
        idx = np.asarray(channel_indices, dtype=np.intp)
        return GradientScheme(self.bvals[idx], self.bvecs[idx])

    def concat(self, other: "GradientScheme") -> "GradientScheme":
        return GradientScheme(
            np.concatenate([self.bvals, other.bvals]),
            np.concatenate([self.bvecs, other.bvecs]),
        )


@dataclass(frozen=True)
class DwiStack:
    """Channel-major diffusion signal volume: (C, W, H, D) float32, non-negative."""

    data: np.ndarray
    scheme: GradientScheme
    voxel_size: np.ndarray = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if data.ndim != 4:
            raise ShapeError(f"stack data must be 4D (C,W,H,D), got shape {data.shape}")
        if data.shape[0] != len(self.scheme):
            raise ShapeError(
                f"{data.shape[0]} data channels vs {len(self.scheme)} scheme entries"
            )
        if not np.all(np.isfinite(data)):
            raise ShapeError("non-finite signal values")
        if np.any(data < 0):
            raise ShapeError("negative signal values")
        vs = np.ascontiguousarray(np.asarray(self.voxel_size, dtype=np.float64))
        if vs.shape != (3,) or np.any(vs <= 0) or not np.all(np.isfinite(vs)):
            raise ShapeError(f"voxel_size must be 3 positive reals, got {vs}")
        data.setflags(write=False)
        vs.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)

    def __repr__(self) -> str:
        c, w, h, d = self.data.shape
        return f"DwiStack(C={c}, dims=({w},{h},{d}))"

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple:
        return self.data.shape[1:]

    @property
    def n_dwi(self) -> int:
        return int(self.scheme.dwi_indices.size)

    @property
    def s0(self) -> np.ndarray:
        """Mean over b0 channels, float64. The reference signal for fitting."""
        b0 = self.scheme.b0_indices
        acc = np.zeros(self.dims, dtype=np.float64)
        for i in b0:
            acc += self.data[i]
        return acc / b0.size

    @property
    def mask(self) -> np.ndarray:
        return self.s0 > 0


@dataclass(frozen=True)
class FaMap:
    """Scalar anisotropy map in [0,1] with its support mask; 0 outside the mask."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        if data.ndim != 3 or mask.shape != data.shape:
            raise ShapeError(
                f"map/mask shape mismatch: {data.shape} vs {mask.shape}"
            )
        inside = data[mask]
        if inside.size and (np.any(inside < 0) or np.any(inside > 1)):
            raise ShapeError("in-mask anisotropy values outside [0,1]")
        if np.any(data[~mask] != 0):
            raise ShapeError("out-of-mask anisotropy values must be exactly 0")
        data.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    def __repr__(self) -> str:
        return f"FaMap(dims={self.data.shape}, n_mask={int(self.mask.sum())})"


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic two-bundle brain phantom."""

    dims: tuple
    n_directions: int = 90
    bvalue: float = 1000.0
    seed: int = 0
    noise_sigma: float = 0.0
    voxel_size: tuple = (1.25, 1.25, 1.25)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 8 for d in dims):
            raise ConfigError(f"phantom dims must be 3 axes of at least 8, got {dims}")
        if int(self.n_directions) < 6:
            raise ConfigError(f"need at least 6 directions, got {self.n_directions}")
        if not self.bvalue > 0:
            raise ConfigError("bvalue must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "n_directions", int(self.n_directions))


def half_sphere_directions(n: int, seed: int = 0) -> np.ndarray:
    """n near-uniform unit vectors on the z > 0 half-sphere, seeded azimuth."""
    if n < 1:
        raise ConfigError("need at least one direction")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    theta0 = rng.uniform(0.0, 2.0 * np.pi)
    i = np.arange(n, dtype=np.float64)
    z = (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    az = i * GOLDEN_ANGLE + theta0
    dirs = np.stack([r * np.cos(az), r * np.sin(az), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs


def phantom_field(spec: PhantomSpec):
    """Ground-truth tensor field of the phantom.

    Returns (tensor6, mask): tensor6 is (6, W, H, D) float64 holding
    (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz), mask is the brain ellipsoid support.
    """
    w, h, d = spec.dims
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 1]))

    cx, cy, cz = (w - 1) / 2.0, (h - 1) / 2.0, (d - 1) / 2.0
    ax = (0.86 + rng.uniform(-0.03, 0.03)) * (w - 1) / 2.0
    ay = (0.86 + rng.uniform(-0.03, 0.03)) * (h - 1) / 2.0
    az = (0.86 + rng.uniform(-0.03, 0.03)) * (d - 1) / 2.0

    x = (np.arange(w, dtype=np.float64) - cx)[:, None, None]
    y = (np.arange(h, dtype=np.float64) - cy)[None, :, None]
    z = (np.arange(d, dtype=np.float64) - cz)[None, None, :]
    r = np.sqrt((x / ax) ** 2 + (y / ay) ** 2 + (z / az) ** 2)
    mask = r <= 1.0
    interior = r <= _RIM_START

    tensor6 = np.zeros((6, w, h, d), dtype=np.float64)
    iso = np.where(interior, D_BACKGROUND, D_CSF)
    for comp in (0, 3, 5):  # Dxx, Dyy, Dzz
        tensor6[comp][mask] = iso[mask]

    lam1, lam2, _ = FIBER_EIGS

    # Bundle 1 runs along x; cross-section is a disc in the (y, z) plane.
    oy = (-0.33 + rng.uniform(-0.06, 0.06)) * ay
    oz = (-0.08 + rng.uniform(-0.06, 0.06)) * az
    rad1 = (0.16 + rng.uniform(-0.03, 0.03)) * min(ay, az)
    b1 = interior & (((y - oy) ** 2 + (z - oz) ** 2) <= rad1 * rad1)
    tensor6[0][b1] = lam1
    tensor6[3][b1] = lam2
    tensor6[5][b1] = lam2

    # Bundle 2 runs along y; later assignment wins in any crossing region.
    ox = (0.33 + rng.uniform(-0.06, 0.06)) * ax
    oz2 = (0.10 + rng.uniform(-0.06, 0.06)) * az
    rad2 = (0.16 + rng.uniform(-0.03, 0.03)) * min(ax, az)
    b2 = interior & (((x - ox) ** 2 + (z - oz2) ** 2) <= rad2 * rad2)
    tensor6[0][b2] = lam2
    tensor6[3][b2] = lam1
    tensor6[5][b2] = lam2

    return tensor6, mask


def _quad_form_weights(bvecs: np.ndarray) -> np.ndarray:
    """Rows (gx^2, 2gxgy, 2gxgz, gy^2, 2gygz, gz^2) so that row . d6 = g^T D g."""
    gx, gy, gz = bvecs[:, 0], bvecs[:, 1], bvecs[:, 2]
    return np.stack(
        [gx * gx, 2 * gx * gy, 2 * gx * gz, gy * gy, 2 * gy * gz, gz * gz], axis=1
    )


def make_phantom(spec: PhantomSpec) -> DwiStack:
    """Synthesize a 1 b0 + n_directions DWI stack from the ground-truth field."""
    tensor6, mask = phantom_field(spec)
    w, h, d = spec.dims
    dirs = half_sphere_directions(spec.n_directions, spec.seed)

    bvals = np.concatenate([[0.0], np.full(spec.n_directions, float(spec.bvalue))])
    bvecs = np.concatenate([np.zeros((1, 3)), dirs], axis=0)
    scheme = GradientScheme(bvals, bvecs)

    flat6 = tensor6.reshape(6, -1)
    quad = _quad_form_weights(dirs) @ flat6  # (n_dirs, n_vox)
    signals = np.empty((len(scheme), w * h * d), dtype=np.float64)
    signals[0] = S0_VALUE
    signals[1:] = S0_VALUE * np.exp(-float(spec.bvalue) * quad)
    signals *= mask.reshape(-1)

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 2]))
        flat_mask = mask.reshape(-1)
        noise = rng.normal(
            0.0, spec.noise_sigma * S0_VALUE, size=(len(scheme), int(flat_mask.sum()))
        )
        signals[:, flat_mask] += noise
        np.clip(signals, 0.0, None, out=signals)

    data = signals.reshape(len(scheme), w, h, d).astype(np.float32)
    return DwiStack(data, scheme, spec.voxel_size)


def subsample(stack: DwiStack, k: int, seed: int = 0) -> DwiStack:
    """Keep one b0 channel plus k DWIs chosen for maximal angular spread.

    Greedy farthest-point selection under the antipodally symmetric angle
    arccos(|u.v|); the seeded draw only picks the starting direction. When k
    equals the DWI count the stack passes through with channels in original
    order, which also makes the operation idempotent on its own output.
    """
    didx = stack.scheme.dwi_indices
    n = didx.size
    if k < 0 or k > n:
        raise ConfigError(f"k={k} outside the available DWI channel range 0..{n}")
    b0 = int(stack.scheme.b0_indices[0])

    if k == n:
        selected = list(didx)
    else:
        dirs = stack.scheme.bvecs[didx]
        ang = np.arccos(np.clip(np.abs(dirs @ dirs.T), 0.0, 1.0))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
        first = int(rng.integers(n))
        mind = ang[first].copy()
        mind[first] = -np.inf
        chosen = [first]
        for _ in range(k - 1):
            nxt = int(np.argmax(mind))  # ties resolve to the lower channel index
            chosen.append(nxt)
            np.minimum(mind, ang[nxt], out=mind)
            mind[nxt] = -np.inf
        selected = sorted(int(didx[i]) for i in chosen)

    rows = [b0] + [int(i) for i in selected]
    return DwiStack(stack.data[rows], stack.scheme.subset(rows), stack.voxel_size)


def average_dwis(stack: DwiStack) -> np.ndarray:
    """Voxelwise mean over DWI channels only, as (W,H,D) float32.

    Accumulates left to right in float64 so the result is independent of
    channel permutation up to the final rounding.
    """
    didx = stack.scheme.dwi_indices
    if didx.size == 0:
        raise GradientSchemeError("stack has no DWI channels to average")
    acc = np.zeros(stack.dims, dtype=np.float64)
    for i in didx:
        acc += stack.data[i]
    return (acc / didx.size).astype(np.float32)


def concat_channels(a, b):
    """Channel concatenation: a's channels then b's.

    Accepts two (C,W,H,D) arrays or two DwiStack with equal spatial dims.
    """
    if isinstance(a, DwiStack) and isinstance(b, DwiStack):
        if a.dims != b.dims:
            raise ShapeError(f"spatial dims differ: {a.dims} vs {b.dims}")
        if not np.array_equal(a.voxel_size, b.voxel_size):
            raise ShapeError("voxel sizes differ")
        data = np.concatenate([a.data, b.data], axis=0)
        return DwiStack(data, a.scheme.concat(b.scheme), a.voxel_size)
    if isinstance(a, np.ndarray) and isinstance(b, np.ndarray):
        if a.ndim != 4 or b.ndim != 4:
            raise ShapeError("expected 4D (C,W,H,D) arrays")
        if a.shape[1:] != b.shape[1:]:
            raise ShapeError(f"spatial dims differ: {a.shape[1:]} vs {b.shape[1:]}")
        return np.concatenate([a, b], axis=0)
    raise ShapeError("operands must be two stacks or two 4D arrays")


def _write_container(path, data4: np.ndarray, voxel_size, bvals, bvecs):
    header = {
        "dims": [int(c) for c in data4.shape],
        "voxel_size_mm": [float(v) for v in voxel_size],
        "bvals": [float(b) for b in bvals],
        "bvecs": [[float(c) for c in v] for v in bvecs],
        "dtype": "f32le",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DVOL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(data4, dtype="<f4").tobytes())


def _read_container(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(DVOL_MAGIC) or raw[: len(DVOL_MAGIC)] != DVOL_MAGIC:
        raise DvolMagicError(f"{path}: not a DVOL container")
    off = len(DVOL_MAGIC)
    if len(raw) < off + 4:
        raise DvolTruncatedError(f"{path}: file ends inside the header length field")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + hlen:
        raise DvolTruncatedError(f"{path}: file ends inside the header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DvolHeaderError(f"{path}: malformed header JSON ({exc})") from exc
    off += hlen

    for key in ("dims", "voxel_size_mm", "bvals", "bvecs", "dtype"):
        if key not in header:
            raise DvolHeaderError(f"{path}: header missing key {key!r}")
    if header["dtype"] != "f32le":
        raise DvolHeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    dims = header["dims"]
    if len(dims) != 4 or any((not isinstance(x, int)) or x < 1 for x in dims):
        raise DvolHeaderError(f"{path}: bad dims {dims}")

    c = dims[0]
    nvals, nvecs = len(header["bvals"]), len(header["bvecs"])
    scalar_map = nvals == 0 and nvecs == 0
    if not scalar_map and (nvals != c or nvecs != c):
        raise DvolSizeMismatchError(
            f"{path}: {c} declared channels but {nvals} bvals / {nvecs} bvecs"
        )
    expected = int(np.prod(dims)) * 4
    payload = raw[off:]
    if len(payload) != expected:
        raise DvolSizeMismatchError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return header, data, scalar_map


def save_dvol(stack: DwiStack, path) -> None:
    _write_container(
        path, stack.data, stack.voxel_size, stack.scheme.bvals, stack.scheme.bvecs
    )


def load_dvol(path) -> DwiStack:
    header, data, scalar_map = _read_container(path)
    if scalar_map:
        raise DvolSizeMismatchError(
            f"{path}: scalar map container (empty bvals); use load_fa_map"
        )
    scheme = GradientScheme(header["bvals"], header["bvecs"])
    return DwiStack(data, scheme, header["voxel_size_mm"])


def save_fa_map(fa: FaMap, path, voxel_size=(1.0, 1.0, 1.0)) -> None:
    """Scalar map in the same container: C=1 and empty gradient table.

    The mask is not stored; loading recovers it as data > 0.
    """
    _write_container(path, fa.data[None], voxel_size, [], [])


def load_fa_map(path) -> FaMap:
    header, data, scalar_map = _read_container(path)
    if not scalar_map or header["dims"][0] != 1:
        raise DvolHeaderError(f"{path}: not a scalar map container")
    vol = data[0]
    return FaMap(vol, vol > 0)
