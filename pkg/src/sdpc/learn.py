"""Dictionary learning, the training loop and back-projection to image space."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn.grad import conv2d_weight

from .core import (
    ConvDictionary,
    LayerConfig,
    NetworkConfig,
    infer,
    predict,
    total_loss,
)
from .errors import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = ["epoch", "layer", "reconstruction_loss", "sparsity_loss", "feedback_loss"]


@dataclass
class TrainConfig:
    """Optimizer settings; defaults are the STL-10 settings."""

    epochs: int = 250
    eta_l: Sequence[float] = (1e-4, 5e-3)
    momentum: float = 0.9
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if any(e < 0 for e in self.eta_l):
            raise ConfigurationError("learning rates must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


def init_dictionary(shape, stride=1, seed=0, dtype=torch.float32) -> ConvDictionary:
    """Standard-normal atoms of ``shape`` ``[F, C, kH, kW]``, each scaled to unit norm."""
    gen = torch.Generator().manual_seed(int(seed))
    atoms = torch.randn(tuple(shape), generator=gen, dtype=torch.float64)
    return ConvDictionary(atoms.to(dtype), stride).normalized()


def build_network(
    shapes: Sequence[Sequence[int]],
    strides: Sequence[int],
    lams: Sequence[float],
    k_fb: float = 1.0,
    t_stab: float = 5e-3,
    max_iters: int = 500,
    seed: int = 0,
    dtype=torch.float32,
) -> NetworkConfig:
    """Randomly initialized network; layer ``i`` draws from seed ``seed + i``."""
    if not len(shapes) == len(strides) == len(lams):
        raise ConfigurationError("shapes, strides and lambdas must have the same length")
    layers = [
        LayerConfig(init_dictionary(s, st, seed=seed + i, dtype=dtype), float(lam))
        for i, (s, st, lam) in enumerate(zip(shapes, strides, lams))
    ]
    return NetworkConfig(layers, k_fb=k_fb, t_stab=t_stab, max_iters=max_iters)


# --------------------------------------------------------------------------
# Dictionary update
# --------------------------------------------------------------------------


def dictionary_gradient(D: ConvDictionary, gamma: torch.Tensor, gamma_below: torch.Tensor) -> torch.Tensor:
    """Gradient of ``0.5 ||gamma_below - D^T gamma||^2`` w.r.t. the atoms, batch-averaged.

    The residual is correlated with the codes, which is the adjoint of the
    transposed convolution used by :func:`predict`.
    """
    g = gamma if gamma.ndim == 4 else gamma.unsqueeze(0)
    below = gamma_below if gamma_below.ndim == 4 else gamma_below.unsqueeze(0)
    g = g.to(D.atoms.dtype)
    below = below.to(D.atoms.dtype)
    residual = below - predict(D, g, output_size=below.shape[-2:])
    grad = -conv2d_weight(residual, D.atoms.shape, g, stride=D.stride)
    return grad / g.shape[0]


def dictionary_step(
    D: ConvDictionary,
    gamma: torch.Tensor,
    gamma_below: torch.Tensor,
    eta_l: float,
    momentum_buffer: torch.Tensor | None = None,
    momentum: float = 0.9,
) -> tuple[ConvDictionary, torch.Tensor]:
    """One momentum-SGD step on the atoms followed by per-atom l2 renormalization.

    Returns the new dictionary and the updated velocity buffer.
    """
    grad = dictionary_gradient(D, gamma, gamma_below)
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite dictionary gradient")
    if momentum_buffer is None:
        momentum_buffer = torch.zeros_like(D.atoms)
    velocity = momentum * momentum_buffer - eta_l * grad
    updated = ConvDictionary(D.atoms + velocity, D.stride).normalized()
    return updated, velocity


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    layer: int
    reconstruction_loss: float
    sparsity_loss: float
    feedback_loss: float


@dataclass
class TrainResult:
    net: NetworkConfig
    history: list[EpochRecord] = field(default_factory=list)
    non_converged: int = 0

    def layer_curve(self, layer: int, term: str = "reconstruction_loss") -> np.ndarray:
        return np.array([getattr(r, term) for r in self.history if r.layer == layer])


def _with_dictionaries(net: NetworkConfig, dicts: Sequence[ConvDictionary]) -> NetworkConfig:
    layers = [dataclasses.replace(l, dictionary=d, eta_c=None) for l, d in zip(net.layers, dicts)]
    return dataclasses.replace(net, layers=layers)


def train(
    net: NetworkConfig,
    data: torch.Tensor,
    cfg: TrainConfig,
    on_epoch: Callable[[int, NetworkConfig, list[EpochRecord]], None] | None = None,
) -> TrainResult:
    """Alternate inference to stability and one dictionary step per mini-batch.

    ``data`` is a preprocessed ``[N, C, H, W]`` tensor.  Images are reshuffled every
    epoch from ``cfg.seed``.  Inference step sizes are recomputed at the start of
    each epoch.  ``on_epoch(epoch, net, records)`` is called after every epoch
    (used for checkpointing).

    Raises
    ------
    NumericalError
        If a gradient or a loss becomes non-finite.
    """
    if data.ndim != 4:
        raise ConfigurationError("training data must be [N, C, H, W]")
    if len(data) == 0:
        raise ConfigurationError("no training images")
    eta_l = list(cfg.eta_l)
    if len(eta_l) < net.n_layers:
        raise ConfigurationError(f"need {net.n_layers} learning rates, got {len(eta_l)}")
    data = data.to(net.dtype)
    rng = np.random.default_rng(cfg.seed)
    buffers: list[torch.Tensor | None] = [None] * net.n_layers
    result = TrainResult(net=net)
    image_shape = data.shape[1:]

    for epoch in range(1, cfg.epochs + 1):
        net = net.with_step_sizes(image_shape)
        order = rng.permutation(len(data))
        sums = np.zeros((3, net.n_layers))
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            batch = data[idx]
            res = infer(net, batch)
            result.non_converged += int((~res.converged).sum())
            loss = total_loss(net, res.gammas, batch)
            if not np.isfinite(loss.total):
                raise NumericalError(f"non-finite loss in epoch {epoch}")
            n = len(idx)
            sums += n * np.stack([loss.reconstruction, loss.sparsity, loss.feedback])
            seen += n
            dicts = []
            below = batch
            for i, layer in enumerate(net.layers):
                D, buffers[i] = dictionary_step(
                    layer.dictionary, res.gammas[i], below, eta_l[i], buffers[i], cfg.momentum
                )
                dicts.append(D)
                below = res.gammas[i]
            net = _with_dictionaries(net, dicts)
        means = sums / seen
        records = [
            EpochRecord(epoch, i + 1, float(means[0, i]), float(means[1, i]), float(means[2, i]))
            for i in range(net.n_layers)
        ]
        result.history.extend(records)
        logger.info(
            "epoch %d: %s", epoch,
            ", ".join(f"L{r.layer} rec={r.reconstruction_loss:.4g}" for r in records),
        )
        if on_epoch is not None:
            on_epoch(epoch, net, records)
    result.net = net
    return result


def write_loss_csv(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_CSV_HEADER)
        for r in history:
            writer.writerow([r.epoch, r.layer, repr(r.reconstruction_loss), repr(r.sparsity_loss), repr(r.feedback_loss)])


def read_loss_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), int(r["layer"]), float(r["reconstruction_loss"]),
                    float(r["sparsity_loss"]), float(r["feedback_loss"]))
        for r in rows
    ]


# --------------------------------------------------------------------------
# Back-projection
# --------------------------------------------------------------------------


@dataclass
class EffectiveDictionary:
    """Layer atoms expressed in image space, with the cumulative stride."""

    atoms: torch.Tensor
    stride: tuple[int, int]

    @property
    def rf_size(self) -> tuple[int, int]:
        return tuple(self.atoms.shape[-2:])

    def as_dictionary(self) -> ConvDictionary:
        return ConvDictionary(self.atoms, self.stride)


def effective_dictionary(net: NetworkConfig, i: int) -> EffectiveDictionary:
    """Receptive fields of layer ``i`` (1-based) obtained by cascading transposed convolutions."""
    if not 1 <= i <= net.n_layers:
        raise ConfigurationError(f"layer index {i} out of range 1..{net.n_layers}")
    D = net.layers[i - 1].dictionary
    atoms = D.atoms
    sh, sw = D.stride
    for j in range(i - 2, -1, -1):
        lower = net.layers[j].dictionary
        atoms = predict(lower, atoms)
        sh *= lower.stride[0]
        sw *= lower.stride[1]
    return EffectiveDictionary(atoms, (sh, sw))


def back_project(net: NetworkConfig, gamma: torch.Tensor, i: int, input_shape=None) -> torch.Tensor:
    """Project the layer-``i`` activity down to image space through layers ``i..1``.

    ``input_shape`` (the image shape) fixes intermediate sizes when strides leave
    remainders; without it the minimal sizes are used.
    """
    if not 1 <= i <= net.n_layers:
        raise ConfigurationError(f"layer index {i} out of range 1..{net.n_layers}")
    sizes = None
    if input_shape is not None:
        sizes = [s[1:] for s in net.layer_shapes(input_shape)]
    out = gamma
    for j in range(i - 1, -1, -1):
        out = predict(
            net.layers[j].dictionary, out, output_size=None if sizes is None else sizes[j], layer=j + 1
        )
    return out
