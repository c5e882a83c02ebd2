"""Inference engine for a hierarchy of non-negative convolutional sparse-coding layers.

Each layer ``i`` holds an activity map ``gamma_i`` (features x height x width) that
predicts the layer below through a transposed convolution with its dictionary
``D_i``.  Inference minimizes, for every layer,

    0.5 * ||gamma_{i-1} - D_i^T gamma_i||^2
        + 0.5 * k_fb * ||gamma_i - D_{i+1}^T gamma_{i+1}||^2
        + lambda_i * ||gamma_i||_1,      gamma_i >= 0

with FISTA-style updates run jointly over layers until every activity map is
stable.  ``gamma_0`` is the input image.

Tensors are ``torch.Tensor``; the dtype of the dictionary atoms drives the
computation (float32 for training, float64 for exact checks).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

__all__ = [
    "ConvDictionary",
    "LayerConfig",
    "NetworkConfig",
    "InferenceState",
    "InferenceResult",
    "LossBreakdown",
    "soft_threshold",
    "predict",
    "forward_drive",
    "compute_step_size",
    "inference_step",
    "fista_momentum",
    "next_alpha",
    "is_stable",
    "relative_change",
    "infer",
    "total_loss",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigurationError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class ConvDictionary:
    """Convolution atoms ``[F, C_in, kH, kW]`` and the spatial stride."""

    atoms: torch.Tensor
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if not isinstance(self.atoms, torch.Tensor):
            self.atoms = torch.as_tensor(np.asarray(self.atoms))
        if self.atoms.ndim != 4:
            raise ConfigurationError(
                f"atoms must be 4-D [F, C_in, kH, kW], got shape {tuple(self.atoms.shape)}"
            )
        self.stride = _pair(self.stride)
        if min(self.stride) < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if min(self.atoms.shape[2:]) < 1:
            raise ConfigurationError("kernel size must be >= 1")

    @property
    def n_features(self) -> int:
        return self.atoms.shape[0]

    @property
    def in_channels(self) -> int:
        return self.atoms.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.atoms.shape[2], self.atoms.shape[3]

    def code_size(self, input_hw: Sequence[int]) -> tuple[int, int]:
        """Spatial size of the activity map for an input of size ``input_hw``."""
        h, w = input_hw[-2:]
        (kh, kw), (sh, sw) = self.kernel_size, self.stride
        if h < kh or w < kw:
            raise ConfigurationError(
                f"input {h}x{w} is smaller than the kernel {kh}x{kw}"
            )
        return (h - kh) // sh + 1, (w - kw) // sw + 1

    def atom_norms(self) -> torch.Tensor:
        return self.atoms.reshape(self.n_features, -1).double().norm(dim=1)

    def normalized(self) -> "ConvDictionary":
        norms = self.atom_norms().clamp_min(1e-12).to(self.atoms.dtype)
        return ConvDictionary(self.atoms / norms.view(-1, 1, 1, 1), self.stride)

    def to(self, dtype) -> "ConvDictionary":
        return ConvDictionary(self.atoms.to(dtype), self.stride)


@dataclass
class LayerConfig:
    """One layer: its dictionary, sparsity penalty and inference step size."""

    dictionary: ConvDictionary
    lam: float
    eta_c: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.eta_c is not None and not self.eta_c > 0:
            raise ConfigurationError(f"eta_c must be > 0, got {self.eta_c}")


@dataclass
class NetworkConfig:
    """An L-layer network.

    ``max_iters`` caps the inference loop; images that hit it are reported as
    non-converged rather than raising.
    """

    layers: list[LayerConfig]
    k_fb: float = 1.0
    t_stab: float = 5e-3
    max_iters: int = 500

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ConfigurationError("network needs at least one layer")
        if not self.t_stab > 0:
            raise ConfigurationError(f"t_stab must be > 0, got {self.t_stab}")
        if self.k_fb < 0:
            raise ConfigurationError(f"k_fb must be >= 0, got {self.k_fb}")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be positive")
        for i in range(1, len(self.layers)):
            below = self.layers[i - 1].dictionary.n_features
            here = self.layers[i].dictionary.in_channels
            if below != here:
                raise ConfigurationError(
                    f"layer {i + 1} expects {here} input channels but layer {i} "
                    f"has {below} features"
                )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dictionaries(self) -> list[ConvDictionary]:
        return [layer.dictionary for layer in self.layers]

    @property
    def dtype(self) -> torch.dtype:
        return self.layers[0].dictionary.atoms.dtype

    def layer_shapes(self, input_shape: Sequence[int]) -> list[tuple[int, int, int]]:
        """Shapes ``(C, H, W)`` of gamma_0 (the input) through gamma_L."""
        c, h, w = _chw(input_shape)
        if c != self.layers[0].dictionary.in_channels:
            raise ConfigurationError(
                f"layer 1 expects {self.layers[0].dictionary.in_channels} input "
                f"channels, input has {c}"
            )
        shapes = [(c, h, w)]
        for layer in self.layers:
            h, w = layer.dictionary.code_size((h, w))
            shapes.append((layer.dictionary.n_features, h, w))
        return shapes

    def with_step_sizes(self, input_shape: Sequence[int], **power_kw) -> "NetworkConfig":
        """Return a copy whose layers carry ``eta_c`` for this input shape."""
        shapes = self.layer_shapes(input_shape)
        layers = [
            dataclasses.replace(layer, eta_c=_step_size_or_bound(layer.dictionary, shapes[i], i + 1, **power_kw))
            for i, layer in enumerate(self.layers)
        ]
        return dataclasses.replace(self, layers=layers)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


def _chw(shape: Sequence[int]) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        return (1,) + shape
    return shape[-3:]


# --------------------------------------------------------------------------
# Elementary operators
# --------------------------------------------------------------------------


def soft_threshold(x, alpha: float):
    """Non-negative soft thresholding: ``x - alpha`` where ``x >= alpha``, else 0.

    With ``alpha = 0`` this is a rectifier.  Works on tensors, arrays and scalars.
    """
    if alpha < 0:
        raise ValueError(f"threshold must be >= 0, got {alpha}")
    if isinstance(x, torch.Tensor):
        return torch.clamp_min(x - alpha, 0.0)
    return np.maximum(np.asarray(x, dtype=float) - alpha, 0.0)


def _batched(t: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if t.ndim == 3:
        return t.unsqueeze(0), True
    if t.ndim == 4:
        return t, False
    raise ConfigurationError(f"expected a 3-D or 4-D tensor, got shape {tuple(t.shape)}")


def predict(D: ConvDictionary, gamma: torch.Tensor, output_size=None, layer=None) -> torch.Tensor:
    """Top-down prediction ``D^T gamma`` as a strided transposed convolution.

    ``output_size`` (H, W) selects the target spatial size when the stride leaves
    a remainder; uncovered border rows/columns are zero.
    """
    g, squeeze = _batched(gamma)
    if g.shape[1] != D.n_features:
        where = f"layer {layer}: " if layer is not None else ""
        raise ConfigurationError(
            f"{where}activity has {g.shape[1]} channels, dictionary has {D.n_features} features"
        )
    (kh, kw), (sh, sw) = D.kernel_size, D.stride
    min_h = (g.shape[2] - 1) * sh + kh
    min_w = (g.shape[3] - 1) * sw + kw
    pad = (0, 0)
    if output_size is not None:
        pad = (int(output_size[-2]) - min_h, int(output_size[-1]) - min_w)
        if not (0 <= pad[0] < sh and 0 <= pad[1] < sw):
            where = f"layer {layer}: " if layer is not None else ""
            raise ConfigurationError(
                f"{where}cannot produce output {tuple(output_size[-2:])} from a "
                f"{g.shape[2]}x{g.shape[3]} activity map"
            )
    out = F.conv_transpose2d(g, D.atoms.to(g.dtype), stride=D.stride, output_padding=pad)
    return out[0] if squeeze else out


def forward_drive(D: ConvDictionary, err: torch.Tensor, layer=None) -> torch.Tensor:
    """Bottom-up drive ``D err``: the strided convolution adjoint to :func:`predict`."""
    e, squeeze = _batched(err)
    if e.shape[1] != D.in_channels:
        where = f"layer {layer}: " if layer is not None else ""
        raise ConfigurationError(
            f"{where}error has {e.shape[1]} channels, dictionary expects {D.in_channels}"
        )
    out = F.conv2d(e, D.atoms.to(e.dtype), stride=D.stride)
    return out[0] if squeeze else out


def compute_step_size(
    D: ConvDictionary,
    input_shape: Sequence[int],
    tol: float = 1e-4,
    max_iter: int = 1000,
    seed: int = 0,
) -> float:
    """Inverse of the largest eigenvalue of ``forward_drive o predict``.

    The eigenvalue is estimated in float64 by power iteration from a fixed-seed
    random start. Iteration stops once the estimated remaining error of the
    Rayleigh quotient, the geometric tail of its observed increments, is
    below ``tol`` (relative).

    Raises
    ------
    NumericalError
        If ``max_iter`` is reached first; ``last_estimate`` holds the last
        eigenvalue estimate.
    """
    c, h, w = _chw(input_shape)
    if c != D.in_channels:
        raise ConfigurationError(f"input has {c} channels, dictionary expects {D.in_channels}")
    ho, wo = D.code_size((h, w))
    D64 = D.to(torch.float64)
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn((1, D.n_features, ho, wo), generator=gen, dtype=torch.float64)
    v /= v.norm()
    mu_prev = None
    delta_prev = None
    rel_tail = math.inf
    for _ in range(max_iter):
        w_ = forward_drive(D64, predict(D64, v, output_size=(h, w)))
        mu = float((v * w_).sum())
        nrm = float(w_.norm())
        if nrm == 0.0:
            raise NumericalError("dictionary operator is identically zero", last_estimate=0.0)
        v = w_ / nrm
        if mu_prev is not None:
            delta = abs(mu - mu_prev)
            if delta <= 1e-12 * abs(mu):  # increments at roundoff level
                return 1.0 / mu
            if delta_prev is not None:
                # geometric tail of the remaining increments
                q = min(delta / delta_prev, 0.999)
                rel_tail = delta * q / (1.0 - q) / abs(mu)
                if rel_tail <= tol and delta <= tol * abs(mu):
                    return 1.0 / mu
            delta_prev = delta
        mu_prev = mu
    raise NumericalError(
        f"power iteration did not converge in {max_iter} iterations",
        last_estimate=mu_prev, error_estimate=rel_tail,
    )


STEP_SIZE_FALLBACK_RTOL = 0.05


def _step_size_or_bound(D: ConvDictionary, input_shape, layer: int, **power_kw) -> float:
    """Step size, or a conservative one when power iteration stalls.

    Large inputs have a clustered top spectrum on which the Rayleigh quotient
    converges only algebraically. If the iteration cap is hit with an
    estimated error within ``STEP_SIZE_FALLBACK_RTOL``, the eigenvalue is
    inflated by twice that error. The tail estimate runs low under algebraic
    convergence; the factor 2 keeps the step near or below ``1 / sigma_max``.
    """
    try:
        return compute_step_size(D, input_shape, **power_kw)
    except NumericalError as exc:
        err = exc.error_estimate
        if exc.last_estimate and err is not None and err <= STEP_SIZE_FALLBACK_RTOL:
            logger.warning("layer %d: power iteration capped, estimated error %.1e; using bound", layer, err)
            return 1.0 / (exc.last_estimate * (1.0 + 2.0 * err))
        raise


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


@dataclass
class InferenceState:
    """Iteration state for a batch of images.

    ``gamma`` holds the last committed activity maps (gamma^{t-1}), ``gamma_m``
    the momentum variables used by the next update, and ``alpha`` the FISTA
    momentum strength alpha^t.
    """

    gamma: list[torch.Tensor]
    gamma_m: list[torch.Tensor]
    alpha: float = 1.0
    iteration: int = 0

    @classmethod
    def zeros(cls, net: NetworkConfig, x: torch.Tensor) -> "InferenceState":
        shapes = net.layer_shapes(x.shape[-3:])[1:]
        n = x.shape[0]
        gamma = [x.new_zeros((n,) + s) for s in shapes]
        return cls(gamma=gamma, gamma_m=[g.clone() for g in gamma])


def _predictions(net: NetworkConfig, gamma_m, shapes):
    return [
        predict(layer.dictionary, gamma_m[i], output_size=shapes[i][1:], layer=i + 1)
        for i, layer in enumerate(net.layers)
    ]


def inference_step(
    state: InferenceState,
    net: NetworkConfig,
    x: torch.Tensor,
    i: int,
    predictions=None,
) -> torch.Tensor:
    """Updated activity of layer ``i`` (0-based) from the momentum variables.

    ``predictions`` optionally carries the precomputed ``D_j^T gamma_m_j`` for all
    layers so they are shared between the bottom-up and top-down errors.
    """
    layer = net.layers[i]
    if layer.eta_c is None:
        raise ConfigurationError(f"layer {i + 1} has no step size; call with_step_sizes()")
    gm = state.gamma_m
    if predictions is None:
        shapes = net.layer_shapes(x.shape[-3:])
        predictions = {}
        predictions[i] = predict(layer.dictionary, gm[i], output_size=shapes[i][1:], layer=i + 1)
        if i + 1 < net.n_layers:
            predictions[i + 1] = predict(
                net.layers[i + 1].dictionary, gm[i + 1], output_size=shapes[i + 1][1:], layer=i + 2
            )
    below = x if i == 0 else gm[i - 1]
    err_lower = below - predictions[i]
    eta = layer.eta_c
    z = gm[i] + eta * forward_drive(layer.dictionary, err_lower, layer=i + 1)
    if i + 1 < net.n_layers and net.k_fb != 0:
        err_upper = net.k_fb * (gm[i] - predictions[i + 1])
        z = z - eta * err_upper
    out = soft_threshold(z, eta * layer.lam)
    if not torch.isfinite(out).all():
        raise NumericalError(f"non-finite activity in layer {i + 1} at iteration {state.iteration + 1}")
    return out


def next_alpha(alpha: float) -> float:
    """FISTA momentum-strength recurrence."""
    return (1.0 + math.sqrt(1.0 + 4.0 * alpha * alpha)) / 2.0


def fista_momentum(state: InferenceState, new_gamma: list[torch.Tensor], enabled: bool = True):
    """Momentum extrapolation from the previous maps ``state.gamma`` to ``new_gamma``.

    Returns ``(gamma_m, alpha_next)``.  With ``enabled=False`` the extrapolation
    coefficient is zero (plain ISTA).
    """
    if state.alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {state.alpha}")
    alpha_next = next_alpha(state.alpha)
    coef = (state.alpha - 1.0) / alpha_next if enabled else 0.0
    gamma_m = [
        soft_threshold(g + coef * (g - g_old), 0.0) for g, g_old in zip(new_gamma, state.gamma)
    ]
    return gamma_m, alpha_next


def relative_change(gamma_t: torch.Tensor, gamma_prev: torch.Tensor) -> torch.Tensor:
    """Per-image ``||gamma_t - gamma_prev|| / ||gamma_t||`` (float64).

    Images whose current map is all zero get 0 when the previous map is also zero
    and ``inf`` otherwise.
    """
    g, _ = _batched(gamma_t)
    p, _ = _batched(gamma_prev)
    num = (g.double() - p.double()).flatten(1).norm(dim=1)
    den = g.double().flatten(1).norm(dim=1)
    ratio = num / torch.where(den > 0, den, torch.ones_like(den))
    zero = den == 0
    ratio = torch.where(zero & (num == 0), torch.zeros_like(ratio), ratio)
    ratio = torch.where(zero & (num > 0), torch.full_like(ratio, math.inf), ratio)
    return ratio


def is_stable(gamma_t, gamma_prev, t_stab: float) -> bool:
    """Relative-variation stability test for one activity map."""
    gamma_t = torch.as_tensor(np.asarray(gamma_t)) if not isinstance(gamma_t, torch.Tensor) else gamma_t
    gamma_prev = (
        torch.as_tensor(np.asarray(gamma_prev)) if not isinstance(gamma_prev, torch.Tensor) else gamma_prev
    )
    if gamma_t.shape != gamma_prev.shape:
        raise ConfigurationError("stability check needs equal shapes")
    g = gamma_t.reshape(1, 1, 1, -1)
    p = gamma_prev.reshape(1, 1, 1, -1)
    return bool(relative_change(g, p)[0] < t_stab)


@dataclass
class InferenceResult:
    """Output of :func:`infer`.

    ``gammas`` are batched ``[N, C, H, W]`` tensors (or 3-D when a single image was
    passed).  ``iterations`` and ``converged`` are per image.
    """

    gammas: list[torch.Tensor]
    iterations: np.ndarray
    converged: np.ndarray
    max_iters: int = 0

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def __iter__(self):
        return iter(self.gammas)

    def __getitem__(self, i):
        return self.gammas[i]


def infer(
    net: NetworkConfig,
    x: torch.Tensor,
    momentum: bool = True,
    max_iters: int | None = None,
) -> InferenceResult:
    """Run inference to stability on an image ``[C, H, W]`` or a batch ``[N, C, H, W]``.

    All layers start at zero.  Each iteration updates every layer from the
    momentum variables of the previous iteration, in ascending layer order.  An
    image stops once every layer satisfies the stability criterion; its maps are
    then frozen, so results do not depend on which other images share the batch.
    Images reaching ``max_iters`` are returned as they are with
    ``converged=False``.

    ``momentum=False`` disables the FISTA extrapolation (plain ISTA).
    """
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x))
    xb, squeeze = _batched(x)
    xb = xb.to(net.dtype)
    if any(layer.eta_c is None for layer in net.layers):
        net = net.with_step_sizes(xb.shape[1:])
    cap = net.max_iters if max_iters is None else int(max_iters)
    shapes = net.layer_shapes(xb.shape[1:])
    n = xb.shape[0]

    final = InferenceState.zeros(net, xb)
    iterations = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    active = torch.arange(n)
    state = InferenceState(
        gamma=[g.clone() for g in final.gamma], gamma_m=[g.clone() for g in final.gamma_m]
    )
    x_act = xb
    t = 0
    while active.numel() > 0 and t < cap:
        t += 1
        state.iteration = t - 1
        preds = _predictions(net, state.gamma_m, shapes)
        new_gamma = [inference_step(state, net, x_act, i, preds) for i in range(net.n_layers)]
        stable = torch.ones(active.numel(), dtype=torch.bool)
        for g_new, g_old in zip(new_gamma, state.gamma):
            stable &= relative_change(g_new, g_old) < net.t_stab
        gamma_m, alpha_next = fista_momentum(state, new_gamma, enabled=momentum)
        state = InferenceState(gamma=new_gamma, gamma_m=gamma_m, alpha=alpha_next, iteration=t)

        done = stable if t < cap else torch.ones_like(stable)
        if done.any():
            idx = active[done]
            for i in range(net.n_layers):
                final.gamma[i][idx] = new_gamma[i][done]
            iterations[idx.numpy()] = t
            converged[idx.numpy()] = stable[done].numpy()
            keep = ~done
            active = active[keep]
            x_act = x_act[keep]
            state = InferenceState(
                gamma=[g[keep] for g in state.gamma],
                gamma_m=[g[keep] for g in state.gamma_m],
                alpha=state.alpha,
                iteration=t,
            )
    if not converged.all():
        logger.debug("%d/%d images hit the iteration cap (%d)", int((~converged).sum()), n, cap)
    gammas = [g[0] for g in final.gamma] if squeeze else final.gamma
    return InferenceResult(gammas=gammas, iterations=iterations, converged=converged, max_iters=cap)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Per-layer loss terms, averaged over the images of a batch."""

    reconstruction: np.ndarray
    feedback: np.ndarray
    sparsity: np.ndarray

    @property
    def per_layer(self) -> np.ndarray:
        return self.reconstruction + self.feedback + self.sparsity

    @property
    def total(self) -> float:
        return float(self.per_layer.sum())


def total_loss(net: NetworkConfig, gammas: Sequence[torch.Tensor], x: torch.Tensor) -> LossBreakdown:
    """Evaluate every layer's loss (reconstruction, feedback and sparsity terms)."""
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x))
    xb, _ = _batched(x)
    gs = [_batched(torch.as_tensor(g))[0] for g in gammas]
    if len(gs) != net.n_layers:
        raise ConfigurationError(f"expected {net.n_layers} activity maps, got {len(gs)}")
    shapes = net.layer_shapes(xb.shape[1:])
    L = net.n_layers
    rec, fb, sp = np.zeros(L), np.zeros(L), np.zeros(L)
    below = xb
    for i, layer in enumerate(net.layers):
        pred = predict(layer.dictionary, gs[i], output_size=shapes[i][1:], layer=i + 1)
        rec[i] = 0.5 * float(((below.double() - pred.double()) ** 2).flatten(1).sum(1).mean())
        sp[i] = layer.lam * float(gs[i].double().abs().flatten(1).sum(1).mean())
        if i + 1 < L:
            up = predict(net.layers[i + 1].dictionary, gs[i + 1], output_size=shapes[i + 1][1:], layer=i + 2)
            fb[i] = 0.5 * net.k_fb * float(((gs[i].double() - up.double()) ** 2).flatten(1).sum(1).mean())
        below = gs[i]
    return LossBreakdown(reconstruction=rec, feedback=fb, sparsity=sp)
