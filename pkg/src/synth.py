"""
Synthetic patients.

An in-distribution (ID) family of round phantoms with the target in the upper
body, and an out-of-distribution (OOD) family with an elongated body, low
intensity cavities and the target moved to the lower body. Every sample is a
pure function of (seed, family, index).
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from scipy import ndimage

from .config import DOSE_SCALE, PRESCRIPTIONS, DatasetSpec
from .errors import DataError, EmptyTarget, SpecInvalid
from .grid import Mask, Volume
from .logger import setup_logger
from .tensor_io import read_tensor, write_tensor

logger = setup_logger("synth")

ID = "ID"
OOD = "OOD"
_FAMILY_CODE = {ID: 0, OOD: 1}

# target-relative offsets (normalised body units) for the first OARs; any extra
# OAR names are placed on a ring around the target
_OAR_OFFSETS = {
    0: (0.35, 0.0),    # below the target
    1: (0.0, -0.45),   # left
    2: (0.0, 0.45),    # right
    3: (-0.3, 0.0),    # above
}


@dataclass
class Sample:
    id: str
    family: str
    ct: Volume
    body: Mask
    tv_high: Mask
    tv_low: Mask
    oars: Dict[str, Mask]
    prescriptions: Dict[str, float] = field(default_factory=lambda: dict(PRESCRIPTIONS))
    dose: Optional[Volume] = None
    target_center: Tuple[float, ...] = ()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.ct.shape

    @property
    def spacing(self) -> Tuple[float, ...]:
        return self.ct.spacing

    @cached_property
    def _inputs(self) -> np.ndarray:
        channels = [
            self.ct.data,
            self.tv_high.data.astype(np.float32) * np.float32(self.prescriptions["tv_high"] / DOSE_SCALE),
            self.tv_low.data.astype(np.float32) * np.float32(self.prescriptions["tv_low"] / DOSE_SCALE),
        ]
        channels.extend(m.data.astype(np.float32) for m in self.oars.values())
        stacked = np.stack(channels, axis=0).astype(np.float32)
        stacked.setflags(write=False)
        return stacked

    def inputs(self) -> np.ndarray:
        """Network input channels: CT, TV_HIGH and TV_LOW scaled by prescription/70, one per OAR."""
        return self._inputs

    def dose_target(self) -> Optional[np.ndarray]:
        if self.dose is None:
            return None
        return (self.dose.data / np.float32(DOSE_SCALE)).astype(np.float32)

    def structures(self) -> Dict[str, Mask]:
        out = {"tv_high": self.tv_high, "tv_low": self.tv_low}
        out.update(self.oars)
        return out


def _validated(spec: DatasetSpec) -> DatasetSpec:
    try:
        return DatasetSpec.model_validate(spec.model_dump())
    except ValidationError as e:
        raise SpecInvalid(f"Invalid dataset spec:\n{e}")


def _ball(coords: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    offset = coords - center.reshape((-1,) + (1,) * (coords.ndim - 1))
    return np.sqrt(np.sum(offset ** 2, axis=0)) <= radius


def _to_voxel(norm: np.ndarray, center: np.ndarray, semi_axes: np.ndarray) -> np.ndarray:
    return center + norm * semi_axes


def _clip_norm(norm: np.ndarray, limit: float = 0.8) -> np.ndarray:
    length = float(np.sqrt(np.sum(norm ** 2)))
    return norm if length <= limit else norm * (limit / length)


def step_bounds(sigma: float, spacing: Sequence[float]) -> Tuple[float, ...]:
    """Largest dose difference allowed between neighbours along each axis."""
    return tuple(DOSE_SCALE * h / sigma for h in spacing)


def dose_margins(sigma: float, spacing: Sequence[float]) -> Dict[str, float]:
    """Distance from each target at which its dose has fallen to the smallest step bound."""
    bound = min(step_bounds(sigma, spacing))
    return {
        name: sigma * float(np.sqrt(2.0 * np.log(level / bound))) if level > bound else 0.0
        for name, level in PRESCRIPTIONS.items()
    }


def _fit_targets(body: np.ndarray, target: np.ndarray, r_high: float, r_low: float, sigma: float,
                 spacing: Tuple[float, ...]) -> Tuple[float, float]:
    # the voxel just inside the contour neighbours a zero-dose voxel, so the dose
    # must have decayed to the step bound before reaching the body edge
    h = max(spacing)
    idx = tuple(int(np.clip(round(v), 0, n - 1)) for v, n in zip(target, body.shape))
    inner = float(ndimage.distance_transform_edt(body, sampling=spacing)[idx])
    slack = (1.0 + 0.5 * np.sqrt(body.ndim)) * h
    margins = dose_margins(sigma, spacing)
    room_high = (inner - margins["tv_high"] - slack) / h
    room_low = (inner - margins["tv_low"] - slack) / h
    if room_high < 1.0:
        raise SpecInvalid(f"sigma {sigma} leaves no room for a target {inner:.1f} from the body edge")
    return min(r_high, room_high), min(r_low, room_low)


def dose_steps(dose: Volume) -> Tuple[float, ...]:
    """Largest absolute difference between neighbouring voxels along each axis."""
    data = dose.data.astype(np.float64)
    return tuple(float(np.abs(np.diff(data, axis=a)).max()) if data.shape[a] > 1 else 0.0
                 for a in range(data.ndim))


def make_sample(spec: DatasetSpec, family: str, index: int) -> Sample:
    shape = tuple(spec.shape)
    ndim = len(shape)
    spacing = spec.resolved_spacing()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _FAMILY_CODE[family], index]))
    scale = float(np.mean(shape)) / 64.0
    coords = np.indices(shape, dtype=np.float64)

    center = np.array(shape, dtype=np.float64) / 2.0 + rng.uniform(-2.0, 2.0, ndim) * scale
    if family == ID:
        fractions = [rng.uniform(0.40, 0.45), rng.uniform(0.40, 0.45)] + [rng.uniform(0.40, 0.45)] * (ndim - 2)
    else:
        fractions = [rng.uniform(0.44, 0.47)] + [rng.uniform(0.26, 0.30) for _ in range(ndim - 1)]
    semi_axes = np.array(shape, dtype=np.float64) * np.array(fractions)

    rel = (coords - center.reshape((-1,) + (1,) * ndim)) / semi_axes.reshape((-1,) + (1,) * ndim)
    radius = np.sqrt(np.sum(rel ** 2, axis=0))
    body = radius <= 1.0

    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=3.0 * scale)
    texture = texture / (texture.std() + 1e-12) * 0.06
    ct = 0.45 + texture
    ct[(radius >= 0.82) & (radius <= 0.92)] = 0.95

    if family == OOD:
        n_cavities = int(rng.integers(spec.ood_cavities[0], spec.ood_cavities[1] + 1))
        for _ in range(n_cavities):
            norm = np.concatenate([[rng.uniform(-0.3, 0.1)], rng.uniform(-0.5, 0.5, ndim - 1)])
            cavity = _ball(coords, _to_voxel(norm, center, semi_axes), rng.uniform(3.0, 5.0) * scale)
            ct[cavity] = 0.05

    ct = np.where(body, np.clip(ct, 0.0, 1.0), 0.0).astype(np.float32)

    band = spec.id_target_band if family == ID else spec.ood_target_band
    target_norm = np.concatenate([[rng.uniform(*band)], rng.uniform(-0.1, 0.1, ndim - 1)])
    target = _to_voxel(target_norm, center, semi_axes)
    r_high = rng.uniform(3.0, 4.5) * scale
    r_low = r_high + rng.uniform(1.5, 3.0) * scale
    if family == ID:
        r_high, r_low = _fit_targets(body, target, r_high, r_low, spec.sigma, spacing)
    tv_high = _ball(coords, target, r_high) & body
    tv_low = (_ball(coords, target, r_low) | tv_high) & body

    oars = {}
    for k, name in enumerate(spec.oars):
        if k in _OAR_OFFSETS:
            offset = np.zeros(ndim)
            offset[:2] = _OAR_OFFSETS[k]
        else:
            angle = 2.0 * np.pi * (k - len(_OAR_OFFSETS) + 0.5) / max(len(spec.oars) - len(_OAR_OFFSETS), 1)
            offset = np.zeros(ndim)
            offset[:2] = (0.4 * np.sin(angle), 0.4 * np.cos(angle))
        norm = _clip_norm(target_norm + offset)
        oar = _ball(coords, _to_voxel(norm, center, semi_axes), rng.uniform(3.0, 4.0) * scale) & body
        oars[name] = Mask(oar)

    prefix = "id" if family == ID else "ood"
    sample = Sample(
        id=f"{prefix}_{index:03d}",
        family=family,
        ct=Volume(ct, spacing),
        body=Mask(body),
        tv_high=Mask(tv_high),
        tv_low=Mask(tv_low),
        oars=oars,
        target_center=tuple(float(v) for v in target),
    )
    if family == ID:
        sample.dose = analytic_dose(sample, spec.sigma)
    return sample


def analytic_dose(s: Sample, sigma: float) -> Volume:
    """Gaussian fall-off from each target at its prescription level, zero outside the body."""
    dose = np.zeros(s.shape, dtype=np.float64)
    for name in ("tv_high", "tv_low"):
        target = s.structures()[name]
        if target.count == 0:
            raise EmptyTarget(f"{s.id}: target {name} is empty")
        distance = ndimage.distance_transform_edt(target.data == 0, sampling=s.spacing)
        dose = np.maximum(dose, s.prescriptions[name] * np.exp(-distance ** 2 / (2.0 * sigma ** 2)))
    dose = np.where(s.body.as_bool(), dose, 0.0)
    return Volume(dose.astype(np.float32), s.spacing)


def _check_target_bands(samples: Sequence[Sample]):
    id_rows = [s.target_center[0] for s in samples if s.family == ID]
    ood_rows = [s.target_center[0] for s in samples if s.family == OOD]
    if id_rows and ood_rows:
        id_lo, id_hi = min(id_rows), max(id_rows)
        ood_lo, ood_hi = min(ood_rows), max(ood_rows)
        if not (id_hi < ood_lo or ood_hi < id_lo):
            raise DataError(
                f"ID target rows [{id_lo:.1f}, {id_hi:.1f}] overlap OOD rows [{ood_lo:.1f}, {ood_hi:.1f}]"
            )


def _check_sample(s: Sample, sigma: float):
    if not (s.tv_high.is_subset_of(s.tv_low) and s.tv_low.is_subset_of(s.body)):
        raise DataError(f"{s.id}: targets are not nested inside the body")
    for name, oar in s.oars.items():
        if not oar.is_subset_of(s.body):
            raise DataError(f"{s.id}: OAR {name} leaves the body")
    if s.dose is not None:
        for axis, (step, bound) in enumerate(zip(dose_steps(s.dose), step_bounds(sigma, s.spacing))):
            if step > bound + 1e-3:
                raise DataError(f"{s.id}: dose step {step:.2f} along axis {axis} exceeds {bound:.2f}")


def generate(spec: DatasetSpec, jobs: int = 1) -> List[Sample]:
    spec = _validated(spec)
    tasks = [(ID, i) for i in range(spec.n_id)] + [(OOD, i) for i in range(spec.n_ood)]
    logger.info(f"Generating {spec.n_id} ID and {spec.n_ood} OOD samples, shape {spec.shape}, seed {spec.seed}")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(lambda t: make_sample(spec, *t), tasks))
    else:
        samples = [make_sample(spec, family, i) for family, i in tasks]

    for s in samples:
        _check_sample(s, spec.sigma)
    _check_target_bands(samples)
    return samples


def save_dataset(samples: Sequence[Sample], directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        sample_dir = directory / s.id
        write_tensor(sample_dir / "ct.uqt", s.ct.data, "ct")
        write_tensor(sample_dir / "body.uqt", s.body.data, "mask")
        write_tensor(sample_dir / "tv_high.uqt", s.tv_high.data, "mask")
        write_tensor(sample_dir / "tv_low.uqt", s.tv_low.data, "mask")
        for name, oar in s.oars.items():
            write_tensor(sample_dir / f"oar_{name}.uqt", oar.data, "mask")
        if s.dose is not None:
            write_tensor(sample_dir / "dose.uqt", s.dose.data, "dose")
        meta = {
            "id": s.id,
            "family": s.family,
            "prescriptions": s.prescriptions,
            "oars": list(s.oars),
            "spacing": list(s.spacing),
            "target_center": list(s.target_center),
        }
        (sample_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(samples)} samples to {directory}")
    return directory


def load_sample(sample_dir: Path) -> Sample:
    sample_dir = Path(sample_dir)
    meta_path = sample_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"Missing meta.json in {sample_dir}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    spacing = tuple(meta["spacing"])

    def mask(name: str) -> Mask:
        return Mask(read_tensor(sample_dir / f"{name}.uqt")[0])

    dose_path = sample_dir / "dose.uqt"
    return Sample(
        id=meta["id"],
        family=meta["family"],
        ct=Volume(read_tensor(sample_dir / "ct.uqt")[0], spacing),
        body=mask("body"),
        tv_high=mask("tv_high"),
        tv_low=mask("tv_low"),
        oars={name: mask(f"oar_{name}") for name in meta["oars"]},
        prescriptions={k: float(v) for k, v in meta["prescriptions"].items()},
        dose=Volume(read_tensor(dose_path)[0], spacing) if dose_path.exists() else None,
        target_center=tuple(meta.get("target_center", ())),
    )


def load_dataset(directory: Path) -> List[Sample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"Dataset directory not found: {directory}")
    sample_dirs = sorted(p for p in directory.iterdir() if (p / "meta.json").exists())
    if not sample_dirs:
        raise DataError(f"No samples found in {directory}")
    samples = [load_sample(p) for p in sample_dirs]
    logger.info(f"Loaded {len(samples)} samples from {directory}")
    return samples


def split_families(samples: Sequence[Sample]) -> Tuple[List[Sample], List[Sample]]:
    return [s for s in samples if s.family == ID], [s for s in samples if s.family == OOD]
