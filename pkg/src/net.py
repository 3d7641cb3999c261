"""
Dual-decoder dense U-Net.

A shared encoder of dense blocks (features concatenated within a resolution
level, stride-2 convolutions between levels) feeds two decoders with identical
structure: one regresses the dose, the other reconstructs the CT channel of the
input. Both decoders receive skip connections from every encoder level.

The network is written functionally over a `Params` ordered mapping of named
tensors so that parameters can be initialised, differentiated, updated by the
optimizer and serialised without any hidden module state.
"""
import json
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .config import NetConfig, config_hash
from .errors import DataError, ShapeMismatch
from .grid import Patch
from .logger import setup_logger
from .tensor_io import read_tensor, write_tensor

logger = setup_logger("net")

MODES = ("train", "eval", "mc_dropout")
BRANCHES = ("dose_decoder", "ct_decoder")


class PassCounter:
    """Counts network forward passes; used to verify the inference cost of each estimator."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def increment(self, n: int = 1):
        with self._lock:
            self.count += n

    def reset(self):
        with self._lock:
            self.count = 0


FORWARD_PASSES = PassCounter()


@dataclass
class Params:
    tensors: "OrderedDict[str, torch.Tensor]"
    config: Optional[NetConfig] = None

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> List[str]:
        return list(self.tensors)

    def num_parameters(self, prefix: str = "") -> int:
        return sum(t.numel() for name, t in self.tensors.items() if name.startswith(prefix))

    def clone(self) -> "Params":
        return Params(OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()), self.config)

    def like(self, tensors: Iterable[torch.Tensor]) -> "Params":
        return Params(OrderedDict(zip(self.tensors, tensors)), self.config)

    def zeros_like(self) -> "Params":
        return self.like(torch.zeros_like(t) for t in self.tensors.values())

    def to(self, dtype: torch.dtype) -> "Params":
        return self.like(t.detach().to(dtype) for t in self.tensors.values())

    def equal(self, other: "Params") -> bool:
        return self.names() == other.names() and all(
            torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


@dataclass
class ForwardOutput:
    """Head outputs, batch-first with one channel. The autograd graph attached to
    them holds the activations needed for the backward pass."""
    dose_hat: torch.Tensor
    ct_hat: Optional[torch.Tensor] = None


def level_widths(config: NetConfig) -> List[int]:
    return [config.base_channels * 2 ** level for level in range(config.levels)]


def layout(config: NetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Names and shapes of every tensor of the network, in a fixed order."""
    if config.in_channels is None:
        raise ShapeMismatch("NetConfig.in_channels must be resolved before building the network")
    dims = config.spatial_dims
    kernel = (config.kernel,) * dims
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()

    def conv(name: str, cin: int, cout: int, k: Tuple[int, ...] = kernel):
        shapes[f"{name}.weight"] = (cout, cin) + k
        shapes[f"{name}.bias"] = (cout,)

    def dense(name: str, cin: int) -> int:
        for i in range(config.convs_per_block):
            conv(f"{name}.conv{i}", cin + i * config.growth, config.growth)
        return cin + config.convs_per_block * config.growth

    widths = level_widths(config)
    conv("encoder.stem", config.in_channels, widths[0])
    channels = widths[0]
    skips = []
    for level in range(config.levels):
        if level > 0:
            conv(f"encoder.down{level}", channels, widths[level])
            channels = widths[level]
        channels = dense(f"encoder.block{level}", channels)
        skips.append(channels)

    for branch in active_branches(config):
        channels = skips[-1]
        for level in reversed(range(config.levels - 1)):
            conv(f"{branch}.up{level}", channels, widths[level])
            channels = dense(f"{branch}.block{level}", widths[level] + skips[level])
        conv(f"{branch}.head", channels, 1, (1,) * dims)
    return shapes


def active_branches(config: NetConfig) -> Tuple[str, ...]:
    return BRANCHES if config.recon_branch else BRANCHES[:1]


def init(config: NetConfig, seed: int) -> Params:
    """He-normal kernels (std sqrt(2 / fan_in)), zero biases."""
    generator = torch.Generator().manual_seed(int(seed))
    tensors = OrderedDict()
    for name, shape in layout(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            std = he_std(fan_in)
            tensors[name] = torch.randn(shape, generator=generator, dtype=torch.float32) * std
        else:
            tensors[name] = torch.zeros(shape, dtype=torch.float32)
    params = Params(tensors, config)
    logger.debug(f"Initialised {params.num_parameters()} parameters (seed {seed})")
    return params


def he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def dropout(t: torch.Tensor, p: float, generator: torch.Generator) -> torch.Tensor:
    """Inverted unit dropout: zero with probability p, scale survivors by 1 / (1 - p)."""
    if p <= 0.0:
        return t
    keep = (torch.rand(t.shape, generator=generator, dtype=t.dtype) >= p).to(t.dtype)
    return t * keep / (1.0 - p)


def as_batch(x: Union[Patch, Sequence[Patch], np.ndarray, torch.Tensor], dims: int,
             dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if isinstance(x, Patch):
        x = x.inputs[None]
    elif isinstance(x, (list, tuple)):
        x = np.stack([p.inputs for p in x], axis=0)
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if t.ndim == dims + 1:
        t = t.unsqueeze(0)
    if t.ndim != dims + 2:
        raise ShapeMismatch(f"expected a (batch, channels, {dims} spatial axes) input, got shape {tuple(t.shape)}")
    return t.to(dtype)


def _conv(dims: int):
    return F.conv2d if dims == 2 else F.conv3d


def _forward_tensors(tensors: Dict[str, torch.Tensor], config: NetConfig, x: torch.Tensor,
                     p_drop: float, generator: torch.Generator) -> ForwardOutput:
    conv_fn = _conv(config.spatial_dims)
    pad = config.kernel // 2

    def conv(h, name, stride=1, padding=pad):
        return conv_fn(h, tensors[f"{name}.weight"], tensors[f"{name}.bias"], stride=stride, padding=padding)

    def dense(h, name):
        for i in range(config.convs_per_block):
            h = torch.cat([h, F.relu(conv(h, f"{name}.conv{i}"))], dim=1)
        return dropout(h, p_drop, generator)

    h = F.relu(conv(x, "encoder.stem"))
    features = []
    for level in range(config.levels):
        if level > 0:
            h = F.relu(conv(h, f"encoder.down{level}", stride=2))
        h = dense(h, f"encoder.block{level}")
        features.append(h)

    heads = {}
    for branch in active_branches(config):
        h = features[-1]
        for level in reversed(range(config.levels - 1)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.relu(conv(h, f"{branch}.up{level}"))
            h = torch.cat([h, features[level]], dim=1)
            h = dense(h, f"{branch}.block{level}")
        heads[branch] = conv(h, f"{branch}.head", padding=0)
    return ForwardOutput(dose_hat=heads["dose_decoder"], ct_hat=heads.get("ct_decoder"))


def _check_input(config: NetConfig, x: torch.Tensor):
    if x.shape[1] != config.in_channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, network expects {config.in_channels}")
    factor = 2 ** (config.levels - 1)
    if any(s % factor for s in x.shape[2:]):
        raise ShapeMismatch(f"spatial shape {tuple(x.shape[2:])} must be divisible by {factor}")


def _drop_probability(config: NetConfig, mode: str, dropout_p: Optional[float]) -> float:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "eval":
        return 0.0
    if mode == "mc_dropout" and dropout_p is not None:
        return float(dropout_p)
    return config.dropout_p


def forward(p: Params, x, mode: str = "eval", rng_seed: int = 0,
            dropout_p: Optional[float] = None) -> ForwardOutput:
    """Run both heads on a patch (or batch). `dropout_p` overrides the configured
    probability in mc_dropout mode."""
    config = p.config
    dtype = next(iter(p.tensors.values())).dtype
    batch = as_batch(x, config.spatial_dims, dtype)
    _check_input(config, batch)
    generator = torch.Generator().manual_seed(int(rng_seed))
    FORWARD_PASSES.increment()
    with torch.no_grad():
        return _forward_tensors(p.tensors, config, batch, _drop_probability(config, mode, dropout_p), generator)


def loss_and_grad(p: Params, batch: Sequence[Patch], rng_seed: int = 0) -> Tuple[float, Params]:
    """Dose MSE plus CT-reconstruction MSE over full patches, and its exact gradient."""
    if not batch:
        raise DataError("loss_and_grad needs a nonempty batch")
    config = p.config
    dtype = next(iter(p.tensors.values())).dtype
    x = as_batch(list(batch), config.spatial_dims, dtype)
    _check_input(config, x)
    if any(patch.dose is None for patch in batch):
        raise DataError("every training patch needs a dose label")
    dose = torch.as_tensor(np.stack([patch.dose for patch in batch])[:, None]).to(dtype)

    leaves = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in p.tensors.items())
    generator = torch.Generator().manual_seed(int(rng_seed))
    FORWARD_PASSES.increment()
    out = _forward_tensors(leaves, config, x, _drop_probability(config, "train", None), generator)

    loss = F.mse_loss(out.dose_hat, dose)
    if out.ct_hat is not None:
        loss = loss + F.mse_loss(out.ct_hat, x[:, :1])
    grads = torch.autograd.grad(loss, list(leaves.values()))
    return float(loss.detach()), p.like(g.detach() for g in grads)


def save_params(p: Params, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, tensor in p.items():
        write_tensor(directory / f"{name}.uqt", tensor.detach().to(torch.float32).numpy(), "param")
    manifest = {
        "names": p.names(),
        "shapes": {name: list(t.shape) for name, t in p.items()},
        "config": p.config.model_dump(mode="json") if p.config is not None else None,
        "config_hash": config_hash(p.config) if p.config is not None else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_params(directory: Union[str, Path]) -> Params:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"No parameter manifest in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    config = NetConfig.model_validate(manifest["config"]) if manifest.get("config") else None
    if config is not None and manifest.get("config_hash") != config_hash(config):
        raise DataError(f"Parameter manifest in {directory} has a stale config hash")
    tensors = OrderedDict()
    for name in manifest["names"]:
        array, _ = read_tensor(directory / f"{name}.uqt")
        if list(array.shape) != manifest["shapes"][name]:
            raise DataError(f"Tensor {name} has shape {array.shape}, manifest says {manifest['shapes'][name]}")
        tensors[name] = torch.from_numpy(array)
    return Params(tensors, config)
