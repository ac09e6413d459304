"""Additive input perturbations on raw gray values (0..255).

Every family returns ``x_adv = x + r`` together with the measured strength
``eps_hat = sqrt(mean(r**2))`` and ``SNR = sum(x**2) / sum(r**2)``. Random
and adversarial noise at the same ``eps`` therefore carry the same noise
energy, which is what makes their effects comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import one_hot, weighted_cross_entropy
from .network import ConfigError, Model
from .tensor import ContractError, Tensor

FAMILIES = ("gaussian", "salt_pepper", "fgsm", "pgd")
LABEL_MODES = ("truth", "predicted")


@dataclass(frozen=True)
class PerturbationSpec:
    family: str
    eps: float = 0.0
    f: float | None = None  # salt-and-pepper pixel fraction; derived from eps when None
    pgd_iters: int = 10
    pgd_step: float | None = None  # default eps / 4
    seed: int = 0
    clip: bool = False
    label_mode: str = "truth"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown perturbation family {self.family!r}")
        if not self.eps >= 0:
            raise ConfigError(f"eps must be non-negative, got {self.eps}")
        if self.f is not None and not 0.0 <= self.f <= 1.0:
            raise ConfigError(f"f must lie in [0, 1], got {self.f}")
        if self.pgd_iters < 1:
            raise ConfigError(f"pgd_iters must be >= 1, got {self.pgd_iters}")
        if self.pgd_step is not None and self.pgd_step <= 0:
            raise ConfigError(f"pgd_step must be positive, got {self.pgd_step}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}")


@dataclass
class PerturbedImage:
    x_adv: np.ndarray
    r: np.ndarray
    eps_measured: float
    snr: float


def measure_epsilon(x, x_adv) -> tuple[float, float]:
    """``(eps_hat, snr)``; SNR is ``inf`` when nothing changed."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise T.DimensionError(f"measure_epsilon: {x.shape} vs {x_adv.shape}")
    r = x_adv - x
    energy = float(np.sum(r * r))
    eps_hat = math.sqrt(energy / r.size) if r.size else 0.0
    snr = float(np.sum(x * x)) / energy if energy > 0 else math.inf
    return eps_hat, snr


def _finish(x: np.ndarray, r: np.ndarray, clip: bool = False) -> PerturbedImage:
    x_adv = x + r
    if clip:
        x_adv = np.clip(x_adv, 0.0, 255.0)
        r = x_adv - x
        x_adv = x + r
    eps_hat, snr = measure_epsilon(x, x_adv)
    return PerturbedImage(x_adv, r, eps_hat, snr)


def gaussian(x, eps: float, seed: int = 0, clip: bool = False) -> PerturbedImage:
    """i.i.d. ``N(0, eps^2)`` noise on every gray-value entry."""
    x = np.asarray(x, dtype=np.float64)
    z = np.random.default_rng(seed).standard_normal(x.shape)
    return _finish(x, eps * z, clip)


def salt_pepper(x, f: float, seed: int = 0) -> PerturbedImage:
    """Set ``round(f * H * W)`` pixels (all channels jointly) to 0 or 255.

    ``x`` is (C, H, W). The pixel order is one fixed permutation per seed, so
    the altered set for a larger ``f`` contains the set for a smaller one.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise T.DimensionError(f"salt_pepper expects (C, H, W), got {x.shape}")
    if not 0.0 <= f <= 1.0:
        raise ConfigError(f"f must lie in [0, 1], got {f}")
    c, h, w = x.shape
    rng = np.random.default_rng(seed)
    order = rng.permutation(h * w)
    values = np.where(rng.random(h * w) < 0.5, 0.0, 255.0)
    k = int(round(f * h * w))
    x_adv = x.reshape(c, h * w).copy()
    chosen = order[:k]
    x_adv[:, chosen] = values[chosen][None, :]
    return _finish(x, x_adv.reshape(c, h, w) - x)


def salt_pepper_fraction(x, eps: float) -> float:
    """Pixel fraction whose expected mean-square perturbation equals ``eps^2``.

    A hit pixel moves each channel to 0 or 255 with equal odds, so its
    expected squared change is ``(x^2 + (255 - x)^2) / 2``.
    """
    x = np.asarray(x, dtype=np.float64)
    per_hit = float(np.mean((x * x + (255.0 - x) ** 2) / 2.0))
    if per_hit <= 0:
        return 0.0
    return min(1.0, eps * eps / per_hit)


def input_gradient(model: Model, x, labels, loss_scale: float = 1.0) -> np.ndarray:
    """Gradient of the weighted cross-entropy w.r.t. gray-value inputs.

    The model normalizes internally, so the chain rule through the
    normalization is part of the tape.
    """
    if labels is None:
        raise ContractError("adversarial perturbations need labels")
    model.eval()
    xt = Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    probs = model.forward_seg(xt)
    target = one_hot(np.asarray(labels), model.config.num_classes, dtype=model.dtype)
    loss = weighted_cross_entropy(probs, target, model.class_weights) * loss_scale
    T.backward(loss)
    return np.zeros_like(xt.data) if xt.grad is None else xt.grad


def predicted_labels(model: Model, x) -> np.ndarray:
    model.eval()
    with T.no_grad():
        return model.forward_seg(np.asarray(x, dtype=np.float64)).data.argmax(axis=1)


def _attack_labels(model, x, labels, label_mode):
    if label_mode == "predicted":
        return predicted_labels(model, x)
    if labels is None:
        raise ContractError("fgsm/pgd in truth mode need ground-truth labels")
    return labels


def fgsm(x, eps: float, model: Model, labels, clip: bool = False, loss_scale: float = 1.0,
         label_mode: str = "truth") -> PerturbedImage:
    """One signed-gradient step: ``r = eps * sign(grad)``, ``sign(0) = 0``.

    ``x`` is (N, C, H, W); the result covers the whole batch.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = _attack_labels(model, x, labels, label_mode)
    g = input_gradient(model, x, labels, loss_scale)
    return _finish(x, eps * np.sign(g).astype(np.float64), clip)


def pgd(x, eps: float, model: Model, labels, iters: int = 10, step: float | None = None,
        clip: bool = False, label_mode: str = "truth") -> PerturbedImage:
    """Iterated signed-gradient steps projected onto the L-inf ball of radius eps."""
    if step is not None and step <= 0:
        raise ConfigError(f"pgd step must be positive, got {step}")
    if iters < 1:
        raise ConfigError(f"pgd iters must be >= 1, got {iters}")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return _finish(x, np.zeros_like(x))
    step = eps / 4.0 if step is None else step
    labels = _attack_labels(model, x, labels, label_mode)
    r = np.zeros_like(x)
    for _ in range(iters):
        x_cur = x + r
        if clip:
            x_cur = np.clip(x_cur, 0.0, 255.0)
        g = input_gradient(model, x_cur, labels)
        r = np.clip(r + step * np.sign(g).astype(np.float64), -eps, eps)
    return _finish(x, r, clip)


def image_seed(seed: int, index: int) -> int:
    """Per-image seed so random noise does not depend on batching."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def perturb_batch(x, spec: PerturbationSpec, model: Model | None = None, labels=None,
                  first_index: int = 0) -> np.ndarray:
    """Apply ``spec`` to a batch (N, C, H, W); returns ``x_adv``."""
    x = np.asarray(x, dtype=np.float64)
    if spec.family == "gaussian":
        return np.stack([gaussian(xi, spec.eps, image_seed(spec.seed, first_index + i), spec.clip).x_adv
                         for i, xi in enumerate(x)])
    if spec.family == "salt_pepper":
        out = []
        for i, xi in enumerate(x):
            f = spec.f if spec.f is not None else salt_pepper_fraction(xi, spec.eps)
            out.append(salt_pepper(xi, f, image_seed(spec.seed, first_index + i)).x_adv)
        return np.stack(out)
    if model is None:
        raise ContractError(f"{spec.family} needs a model")
    if spec.family == "fgsm":
        return fgsm(x, spec.eps, model, labels, spec.clip, label_mode=spec.label_mode).x_adv
    return pgd(x, spec.eps, model, labels, spec.pgd_iters, spec.pgd_step, spec.clip, spec.label_mode).x_adv
