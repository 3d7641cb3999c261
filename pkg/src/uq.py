"""
Per-sample uncertainty estimators.

RECON: body-masked MSE between the input CT and its reconstruction, read off
the same eval-mode pass that predicts the dose.
MCDO: voxelwise population std of the dose over stochastic dropout passes,
averaged over the body.
DE: voxelwise population std of the dose across independently trained models,
averaged over the body.

Full samples are covered by patches with 50% overlap; overlapping predictions
are averaged uniformly. All dose values are in normalised units (dose / 70).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import BadDropProb, ConfigError, DataError, EmptyEnsemble, NoReconBranch
from .grid import Volume, masked_mse, tile_origins
from .logger import setup_logger
from .net import Params, forward
from .synth import Sample

logger = setup_logger("uq")

RECON = "RECON"
DE = "DE"


def mcdo_tag(p: float) -> str:
    return f"MCDO({p:g})"


@dataclass
class UncertaintyScore:
    sample_id: str
    method: str
    value: float
    aux: Optional[Volume] = None

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value) or self.value < 0:
            raise DataError(f"{self.method} uncertainty for {self.sample_id} is {self.value}")


@dataclass
class Inference:
    dose_hat: np.ndarray
    ct_hat: Optional[np.ndarray]
    tiles: int


def default_patch_size(p: Params, s: Sample) -> List[int]:
    factor = 2 ** (p.config.levels - 1)
    return [n - n % factor for n in s.shape]


def _seed(*entropy: int) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


def predict_volume(p: Params, s: Sample, patch_size: Optional[Sequence[int]] = None, mode: str = "eval",
                   rng_seed: int = 0, dropout_p: Optional[float] = None) -> Inference:
    """Tile the sample, run one forward pass per tile and average overlaps."""
    size = list(patch_size) if patch_size is not None else default_patch_size(p, s)
    origins = tile_origins(s.shape, size)
    inputs = s.inputs()
    dose_sum = np.zeros(s.shape, dtype=np.float64)
    ct_sum = np.zeros(s.shape, dtype=np.float64) if p.config.recon_branch else None
    counts = np.zeros(s.shape, dtype=np.float64)

    for i, origin in enumerate(origins):
        window = tuple(slice(o, o + n) for o, n in zip(origin, size))
        out = forward(p, inputs[(slice(None),) + window], mode=mode,
                      rng_seed=_seed(rng_seed, i), dropout_p=dropout_p)
        dose_sum[window] += out.dose_hat[0, 0].double().numpy()
        if ct_sum is not None:
            ct_sum[window] += out.ct_hat[0, 0].double().numpy()
        counts[window] += 1.0

    dose_hat = (dose_sum / counts).astype(np.float32)
    ct_hat = None if ct_sum is None else (ct_sum / counts).astype(np.float32)
    return Inference(dose_hat=dose_hat, ct_hat=ct_hat, tiles=len(origins))


def dose_error(inference: Inference, s: Sample) -> float:
    """Body-masked MSE between the predicted and the reference dose."""
    target = s.dose_target()
    if target is None:
        raise DataError(f"{s.id} has no reference dose")
    return masked_mse(target, inference.dose_hat, s.body)


def recon_score(inference: Inference, s: Sample) -> UncertaintyScore:
    if inference.ct_hat is None:
        raise NoReconBranch("the network has no CT reconstruction branch")
    return UncertaintyScore(s.id, RECON, masked_mse(s.ct.data, inference.ct_hat, s.body))


def recon_uncertainty(p: Params, s: Sample, patch_size: Optional[Sequence[int]] = None) -> UncertaintyScore:
    if not p.config.recon_branch:
        raise NoReconBranch("recon_uncertainty needs a network built with recon_branch=true")
    return recon_score(predict_volume(p, s, patch_size), s)


def population_std(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Voxelwise std dividing by n, accumulated in float64."""
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps], axis=0)
    return np.std(stack, axis=0)


def score_from_maps(maps: Sequence[np.ndarray], s: Sample, method: str) -> UncertaintyScore:
    std = population_std(maps)
    value = float(std[s.body.as_bool()].mean())
    return UncertaintyScore(s.id, method, value, aux=Volume(std.astype(np.float32), s.spacing))


def _run(fn: Callable[[int], np.ndarray], n: int, jobs: int) -> List[np.ndarray]:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(k) for k in range(n)]


def mcdo_maps(p: Params, s: Sample, drop_p: float, n_passes: int, seed: int,
              patch_size: Optional[Sequence[int]] = None, jobs: int = 1) -> List[np.ndarray]:
    if not 0.0 <= drop_p < 1.0:
        raise BadDropProb(f"drop probability must lie in [0, 1), got {drop_p}")
    if n_passes < 2:
        raise ConfigError(f"MC dropout needs at least 2 passes, got {n_passes}")

    def one_pass(k: int) -> np.ndarray:
        return predict_volume(p, s, patch_size, mode="mc_dropout", rng_seed=_seed(seed, k),
                              dropout_p=drop_p).dose_hat

    return _run(one_pass, n_passes, jobs)


def mcdo_uncertainty(p: Params, s: Sample, drop_p: float, n_passes: int = 20, seed: int = 0,
                     patch_size: Optional[Sequence[int]] = None, jobs: int = 1) -> UncertaintyScore:
    maps = mcdo_maps(p, s, drop_p, n_passes, seed, patch_size, jobs)
    return score_from_maps(maps, s, mcdo_tag(drop_p))


def ensemble_maps(models: Sequence[Params], s: Sample, patch_size: Optional[Sequence[int]] = None,
                  jobs: int = 1) -> List[np.ndarray]:
    if not models:
        raise EmptyEnsemble("deep ensemble needs at least one model")
    return _run(lambda k: predict_volume(models[k], s, patch_size).dose_hat, len(models), jobs)


def de_uncertainty(models: Sequence[Params], s: Sample, patch_size: Optional[Sequence[int]] = None,
                   jobs: int = 1) -> UncertaintyScore:
    """A single model gives 0 by definition."""
    return score_from_maps(ensemble_maps(models, s, patch_size, jobs), s, DE)


def ensemble_mean(maps: Sequence[np.ndarray]) -> Inference:
    mean = np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in maps]), axis=0)
    return Inference(dose_hat=mean.astype(np.float32), ct_hat=None, tiles=0)
