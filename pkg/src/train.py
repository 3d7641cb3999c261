"""
Adam, patch sampling, the training loop, nested cross-validation plans and
ensemble training.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import NetConfig, TrainConfig
from .errors import DataError, DuplicateSeed, NonFiniteGradient, TooFewSamples
from .grid import Patch, bounding_box, extract_patch, flip, random_flip_axes
from .logger import setup_logger
from .net import Params, forward, init, loss_and_grad
from .synth import Sample

logger = setup_logger("train")


@dataclass
class AdamState:
    t: int
    m: Params
    v: Params

    @classmethod
    def zeros(cls, p: Params) -> "AdamState":
        return cls(t=0, m=p.zeros_like(), v=p.zeros_like())


def adam_step(p: Params, g: Params, s: AdamState, cfg: TrainConfig) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update. Returns new parameters and state; inputs are not modified."""
    if p.names() != g.names():
        raise DataError("gradient names do not match parameter names")
    for name, grad in g.items():
        if grad.shape != p[name].shape:
            raise DataError(f"gradient {name} has shape {tuple(grad.shape)}, parameter has {tuple(p[name].shape)}")
        if not torch.isfinite(grad).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")

    t = s.t + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_p, new_m, new_v = [], [], []
    with torch.no_grad():
        for name in p.names():
            grad = g[name]
            m = cfg.beta1 * s.m[name] + (1.0 - cfg.beta1) * grad
            v = cfg.beta2 * s.v[name] + (1.0 - cfg.beta2) * grad * grad
            denom = torch.sqrt(v / bc2) + cfg.eps
            update = torch.where(denom > 0, (m / bc1) / denom, torch.zeros_like(m))
            new_p.append(p[name] - cfg.lr * update)
            new_m.append(m)
            new_v.append(v)
    return p.like(new_p), AdamState(t=t, m=s.m.like(new_m), v=s.v.like(new_v))


@dataclass
class Fold:
    train_ids: List[str]
    val_ids: List[str]
    test_ids: List[str]


@dataclass
class CvPlan:
    outer_holdout: List[str]
    folds: List[Fold]
    n_folds: int
    val_size: int
    test_size: int

    def held_out(self, k: int) -> List[str]:
        """Ids a fold's model never trained on: outer holdout, validation and test."""
        fold = self.folds[k]
        return list(self.outer_holdout) + list(fold.val_ids) + list(fold.test_ids)

    def to_dict(self) -> Dict:
        return {
            "outer_holdout": self.outer_holdout,
            "folds": [
                {"train_ids": f.train_ids, "val_ids": f.val_ids, "test_ids": f.test_ids} for f in self.folds
            ],
        }


def make_cv_plan(ids: Sequence[str], n_folds: int = 11, sizes: Tuple[int, int, int] = (3, 5, 5),
                 seed: int = 42) -> CvPlan:
    """Fixed outer holdout, then moving validation/test blocks over the remaining pool."""
    outer, val, test = sizes
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("sample ids must be unique")
    if len(ids) < outer + val + test + 1:
        raise TooFewSamples(f"{len(ids)} ids cannot fill outer={outer}, val={val}, test={test} plus training")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    holdout, pool = shuffled[:outer], shuffled[outer:]
    if n_folds * test > len(pool):
        raise TooFewSamples(f"{n_folds} folds of {test} test ids need {n_folds * test} ids, pool has {len(pool)}")

    folds = []
    for k in range(n_folds):
        test_ids = pool[k * test:(k + 1) * test]
        val_ids = [pool[((k + 1) * test + j) % len(pool)] for j in range(val)]
        excluded = set(test_ids) | set(val_ids)
        train_ids = [i for i in pool if i not in excluded]
        folds.append(Fold(train_ids=train_ids, val_ids=val_ids, test_ids=test_ids))
    return CvPlan(outer_holdout=holdout, folds=folds, n_folds=n_folds, val_size=val, test_size=test)


def sample_center(s: Sample, patch_size: Sequence[int], rng: np.random.Generator) -> Tuple[int, ...]:
    """Uniform centre inside the TV_LOW bounding box dilated by patch_size / 4."""
    box = bounding_box(s.tv_low.data)
    center = []
    for (lo, hi), size, n in zip(box, patch_size, s.shape):
        margin = size // 4
        lo, hi = max(lo - margin, 0), min(hi + margin, n - 1)
        center.append(int(rng.integers(lo, hi + 1)))
    return tuple(center)


def target_center(s: Sample) -> Tuple[int, ...]:
    return tuple((lo + hi) // 2 for lo, hi in bounding_box(s.tv_low.data))


def sample_batch(samples: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator) -> List[Patch]:
    batch = []
    for _ in range(cfg.batch_size):
        s = samples[int(rng.integers(len(samples)))]
        patch = extract_patch(s, sample_center(s, cfg.patch_size, rng), cfg.patch_size)
        batch.append(flip(patch, random_flip_axes(rng, len(cfg.patch_size))))
    return batch


def validation_loss(p: Params, samples: Sequence[Sample], cfg: TrainConfig) -> float:
    """Eval-mode dual loss on one target-centred patch per validation sample."""
    losses = []
    for s in samples:
        patch = extract_patch(s, target_center(s), cfg.patch_size)
        losses.append(_eval_loss(p, patch))
    return float(np.mean(losses))


def _eval_loss(p: Params, patch: Patch) -> float:
    out = forward(p, patch, mode="eval")
    dtype = out.dose_hat.dtype
    dose = torch.as_tensor(patch.dose[None, None]).to(dtype)
    loss = torch.mean((out.dose_hat - dose) ** 2)
    if out.ct_hat is not None:
        ct = torch.as_tensor(patch.ct[None, None]).to(dtype)
        loss = loss + torch.mean((out.ct_hat - ct) ** 2)
    return float(loss)


def steps_per_epoch(n_train: int, cfg: TrainConfig) -> int:
    return max(1, math.ceil(n_train * cfg.patches_per_patient / cfg.batch_size))


def train_model(samples: Sequence[Sample], cfg: TrainConfig, net_cfg: NetConfig,
                val_samples: Sequence[Sample] = (), tag: str = "model") -> Tuple[Params, List[Dict]]:
    """Train one network; fully determined by cfg.seed. History rows hold
    epoch, train_loss and val_loss (None without validation samples)."""
    samples = list(samples)
    if not samples:
        raise DataError("train_model needs at least one sample")
    missing = [s.id for s in samples if s.dose is None]
    if missing:
        raise DataError(f"training samples without dose labels: {missing[:5]}")
    if net_cfg.in_channels is None:
        net_cfg = net_cfg.with_channels(len(samples[0].oars))

    params = init(net_cfg, cfg.seed)
    state = AdamState.zeros(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    history = []
    n_steps = steps_per_epoch(len(samples), cfg)
    logger.info(f"[{tag}] training on {len(samples)} samples: {cfg.epochs} epochs x {n_steps} steps, "
                f"{params.num_parameters()} parameters, seed {cfg.seed}")

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for step in range(n_steps):
            batch = sample_batch(samples, cfg, rng)
            loss, grads = loss_and_grad(params, batch, rng_seed=int(rng.integers(2 ** 31)))
            if not math.isfinite(loss):
                raise NonFiniteGradient(f"[{tag}] loss became {loss} at epoch {epoch}, step {step}")
            params, state = adam_step(params, grads, state, cfg)
            losses.append(loss)
            logger.debug(f"[{tag}] epoch {epoch} step {step}: loss {loss:.6f}")
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": validation_loss(params, val_samples, cfg) if val_samples else None,
        }
        history.append(row)
        val_text = f", val {row['val_loss']:.6f}" if row["val_loss"] is not None else ""
        logger.info(f"[{tag}] epoch {epoch}/{cfg.epochs}: train {row['train_loss']:.6f}{val_text}")
    return params, history


def ensemble_seeds(base_seed: int, n_models: int) -> List[int]:
    return [base_seed + 1009 * k for k in range(n_models)]


def train_ensemble(samples: Sequence[Sample], cfg: TrainConfig, net_cfg: NetConfig, n_models: int,
                   seeds: Optional[Sequence[int]] = None, val_samples: Sequence[Sample] = (),
                   jobs: int = 1) -> List[Params]:
    """Independent train_model runs that differ only in their seed. Member order
    follows `seeds` whether run serially or in parallel."""
    if n_models < 1:
        raise DataError("n_models must be >= 1")
    seeds = list(seeds) if seeds is not None else ensemble_seeds(cfg.seed, n_models)
    if len(seeds) != n_models:
        raise DataError(f"{n_models} members need {n_models} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise DuplicateSeed(f"ensemble seeds must be distinct, got {seeds}")

    def member(k: int) -> Params:
        member_cfg = cfg.model_copy(update={"seed": int(seeds[k])})
        params, _ = train_model(samples, member_cfg, net_cfg, val_samples, tag=f"member {k + 1}/{n_models}")
        return params

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(member, range(n_models)))
    return [member(k) for k in range(n_models)]
