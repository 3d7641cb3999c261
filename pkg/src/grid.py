"""
Scalar fields, masks, patches and the masked error primitive.

Fields are numpy arrays in row-major (C) order. Field data is float32, masks are
uint8 in {0, 1}; reductions accumulate in float64.
"""
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple, TYPE_CHECKING

import numpy as np

from .errors import BadAxis, DataError, EmptyMask, PatchTooLarge, ShapeMismatch

if TYPE_CHECKING:
    from .synth import Sample


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, ...] = ()

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim not in (2, 3):
            raise ShapeMismatch(f"Volume must have 2 or 3 axes, got shape {self.data.shape}")
        if not self.spacing:
            self.spacing = (1.0,) * self.data.ndim
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim or any(s <= 0 for s in self.spacing):
            raise DataError(f"Volume spacing {self.spacing} invalid for shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("Volume contains NaN or Inf")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


@dataclass
class Mask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        elif not np.all((data == 0) | (data == 1)):
            raise DataError("Mask values must be 0 or 1")
        self.data = np.ascontiguousarray(data, dtype=np.uint8)
        if self.data.ndim not in (2, 3):
            raise ShapeMismatch(f"Mask must have 2 or 3 axes, got shape {self.data.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def is_subset_of(self, other: "Mask") -> bool:
        return bool(np.all(self.data <= other.data))


@dataclass
class Patch:
    """A crop of one sample: input channels first, plus the body mask and the
    normalised dose when the sample has one."""
    origin: Tuple[int, ...]
    size: Tuple[int, ...]
    inputs: np.ndarray
    body: np.ndarray
    dose: Optional[np.ndarray] = None
    sample_id: str = ""

    @property
    def ct(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def channels(self) -> int:
        return self.inputs.shape[0]


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, (Volume, Mask)) else np.asarray(x)


def masked_mse(a, b, m) -> float:
    """Mean squared difference of `a` and `b` over the voxels where `m` is 1."""
    a, b, m = _values(a), _values(b), _values(m)
    if a.shape != b.shape or a.shape != m.shape:
        raise ShapeMismatch(f"masked_mse shapes differ: {a.shape}, {b.shape}, {m.shape}")
    sel = m.astype(bool)
    n = int(sel.sum())
    if n == 0:
        raise EmptyMask("masked_mse needs at least one voxel inside the mask")
    diff = a[sel].astype(np.float64) - b[sel].astype(np.float64)
    return float(np.dot(diff, diff) / n)


def clamp_origin(center: Sequence[int], size: Sequence[int], shape: Sequence[int]) -> Tuple[int, ...]:
    return tuple(
        int(min(max(c - s // 2, 0), n - s)) for c, s, n in zip(center, size, shape)
    )


def extract_patch(s: "Sample", center: Sequence[int], size: Sequence[int]) -> Patch:
    shape = s.shape
    size = tuple(int(v) for v in size)
    if len(size) != len(shape) or len(center) != len(shape):
        raise ShapeMismatch(f"center/size {tuple(center)}/{size} do not match sample shape {shape}")
    if any(v > n or v < 1 for v, n in zip(size, shape)):
        raise PatchTooLarge(f"patch size {size} does not fit sample shape {shape}")

    origin = clamp_origin(center, size, shape)
    window = tuple(slice(o, o + v) for o, v in zip(origin, size))
    dose = s.dose_target()
    return Patch(
        origin=origin,
        size=size,
        inputs=np.ascontiguousarray(s.inputs()[(slice(None),) + window]),
        body=np.ascontiguousarray(s.body.data[window]),
        dose=None if dose is None else np.ascontiguousarray(dose[window]),
        sample_id=s.id,
    )


def flip(p: Patch, axes: Iterable[int]) -> Patch:
    axes = sorted(set(int(a) for a in axes))
    ndim = len(p.size)
    for a in axes:
        if not 0 <= a < ndim:
            raise BadAxis(f"axis {a} is not a spatial axis of a {ndim}-D patch")
    if not axes:
        return p

    def _flip(x: np.ndarray, offset: int) -> np.ndarray:
        return np.ascontiguousarray(np.flip(x, axis=tuple(a + offset for a in axes)))

    return Patch(
        origin=p.origin,
        size=p.size,
        inputs=_flip(p.inputs, 1),
        body=_flip(p.body, 0),
        dose=None if p.dose is None else _flip(p.dose, 0),
        sample_id=p.sample_id,
    )


def random_flip_axes(rng: np.random.Generator, ndim: int) -> Tuple[int, ...]:
    # each spatial axis independently with probability 0.5
    return tuple(a for a in range(ndim) if rng.random() < 0.5)


def bounding_box(mask: np.ndarray) -> Tuple[Tuple[int, int], ...]:
    """Inclusive (lo, hi) index range per axis of the nonzero voxels."""
    nz = np.nonzero(mask)
    if len(nz[0]) == 0:
        raise EmptyMask("bounding box of an empty mask")
    return tuple((int(idx.min()), int(idx.max())) for idx in nz)


def tile_origins(shape: Sequence[int], size: Sequence[int]) -> list:
    """Patch origins covering `shape` with 50% overlap; the last tile on each axis
    is pinned to the far edge."""
    per_axis = []
    for n, s in zip(shape, size):
        if s > n:
            raise PatchTooLarge(f"tile size {tuple(size)} exceeds shape {tuple(shape)}")
        stride = max(s // 2, 1)
        starts = list(range(0, n - s + 1, stride))
        if starts[-1] != n - s:
            starts.append(n - s)
        per_axis.append(starts)
    grids = np.meshgrid(*per_axis, indexing="ij")
    return [tuple(int(g.flat[i]) for g in grids) for i in range(grids[0].size)]
