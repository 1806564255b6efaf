"""
Hard-concrete gates.

A gate z is obtained from a binary concrete sample d on (0, 1) with
location `log_alpha` and temperature `beta`, stretched to (gamma, zeta) and
rectified by a hard sigmoid, which puts point masses on exactly 0 and 1:

    d    = sigmoid((logit(u) + log_alpha) / beta),   u ~ Uniform(0, 1)
    dbar = d * (zeta - gamma) + gamma
    z    = min(1, max(0, dbar))

The CDF of d is Q(t) = sigmoid(beta * logit(t) - log_alpha), so the
probability of a non-zero gate, 1 - Q(dbar <= 0), has the closed form
sigmoid(log_alpha - beta * log(-gamma / zeta)). Its sum over gates is the
differentiable surrogate of the L0 norm.
"""

import itertools
import logging
import math
import numpy as np
from scipy.special import expit, logit
from l0_dynamics.config import config
from l0_dynamics.exceptions import (
    InvalidNoiseException,
    OutOfSupportException,
    ShapeMismatchException,
    StaleGateCacheException,
)
from l0_dynamics.my_types import GateConfig

logger = logging.getLogger(__name__)

_gate_ids = itertools.count()


class GateVector:
    """Learnable location parameters of a group of gates."""

    def __init__(self, log_alpha: np.ndarray):
        self.log_alpha = np.array(log_alpha, dtype=np.float64)
        self.grad = np.zeros_like(self.log_alpha)
        self.gate_id = next(_gate_ids)
        # Bumped on every sample so that old caches can be detected
        self.sample_step = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.log_alpha.shape

    @property
    def size(self) -> int:
        return int(self.log_alpha.size)

    def zero_grad(self):
        self.grad.fill(0.0)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.log_alpha)))

    def __repr__(self) -> str:
        return f"GateVector(shape={self.shape}, sample_step={self.sample_step})"


class GateCache:
    """Per-gate smooth values kept from a sample for the pathwise gradient."""

    def __init__(self, d: np.ndarray, gate_id: int, sample_step: int):
        self.d = d
        self.gate_id = gate_id
        self.sample_step = sample_step


def init_log_alpha(
    shape: tuple[int, ...], droprate_init: float, rng: np.random.Generator
) -> GateVector:
    """Gate locations centred so that the initial drop rate is `droprate_init`."""
    mean = math.log(1.0 - droprate_init) - math.log(droprate_init)
    return GateVector(rng.normal(loc=mean, scale=0.01, size=shape))


def draw_noise(
    rng: np.random.Generator, shape: tuple[int, ...], eps: float | None = None
) -> np.ndarray:
    eps = config.noise_eps if eps is None else eps
    return np.clip(rng.random(shape), eps, 1.0 - eps)


def _stretch(d: np.ndarray, gate_config: GateConfig) -> np.ndarray:
    return d * gate_config.stretch + gate_config.gamma


def sample_gates(
    gates: GateVector, gate_config: GateConfig, noise: np.ndarray
) -> tuple[np.ndarray, GateCache]:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != gates.shape:
        raise ShapeMismatchException(gates.shape, noise.shape, "gate noise")
    if not np.all((noise > 0.0) & (noise < 1.0)):
        raise InvalidNoiseException()

    d = expit((logit(noise) + gates.log_alpha) / gate_config.beta)
    z = np.clip(_stretch(d, gate_config), 0.0, 1.0)

    gates.sample_step += 1
    return z, GateCache(d, gates.gate_id, gates.sample_step)


def deterministic_gates(gates: GateVector, gate_config: GateConfig) -> np.ndarray:
    return np.clip(_stretch(expit(gates.log_alpha), gate_config), 0.0, 1.0)


def _check_open_support(t: np.ndarray, low: float, high: float):
    outside = ~((t > low) & (t < high))
    if np.any(outside):
        raise OutOfSupportException(float(t[outside].flat[0]), low, high)


def gate_cdf(
    t: float | np.ndarray,
    log_alpha: float | np.ndarray,
    gate_config: GateConfig,
    stretched: bool = False,
) -> float | np.ndarray:
    """
    Q(t) = P(d <= t) of the binary concrete variable. With `stretched` the
    argument is a point of the stretched variable dbar in (gamma, zeta).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if stretched:
        _check_open_support(t_arr, gate_config.gamma, gate_config.zeta)
        t_arr = (t_arr - gate_config.gamma) / gate_config.stretch
    else:
        _check_open_support(t_arr, 0.0, 1.0)

    q = expit(gate_config.beta * logit(t_arr) - np.asarray(log_alpha))
    return float(q) if np.ndim(q) == 0 else q


def gate_pdf(
    t: float | np.ndarray, log_alpha: float | np.ndarray, gate_config: GateConfig
) -> float | np.ndarray:
    """Binary concrete density on (0, 1), the derivative of `gate_cdf`."""
    t_arr = np.asarray(t, dtype=np.float64)
    _check_open_support(t_arr, 0.0, 1.0)

    q = expit(gate_config.beta * logit(t_arr) - np.asarray(log_alpha))
    density = gate_config.beta * q * (1.0 - q) / (t_arr * (1.0 - t_arr))
    return float(density) if np.ndim(density) == 0 else density


def prob_active(gates: GateVector, gate_config: GateConfig) -> np.ndarray:
    shift = gate_config.beta * math.log(-gate_config.gamma / gate_config.zeta)
    return expit(gates.log_alpha - shift)


def penalty_and_grad(
    gates: GateVector, gate_config: GateConfig
) -> tuple[float, np.ndarray]:
    """Expected number of active gates and its gradient w.r.t. log_alpha."""
    p = prob_active(gates, gate_config)
    return float(p.sum()), p * (1.0 - p)


def pathwise_gate_grad(
    cache: GateCache, gate_config: GateConfig, gates: GateVector | None = None
) -> np.ndarray:
    """
    dz/dlog_alpha for the sample that produced `cache`. Zero where the hard
    sigmoid is saturated. Passing `gates` verifies that the cache belongs to
    their latest sample.
    """
    if gates is not None and (
        cache.gate_id != gates.gate_id or cache.sample_step != gates.sample_step
    ):
        raise StaleGateCacheException(
            f"Cache from gates {cache.gate_id} step {cache.sample_step}, "
            f"expected gates {gates.gate_id} step {gates.sample_step}"
        )

    d = cache.d
    dbar = _stretch(d, gate_config)
    interior = (dbar > 0.0) & (dbar < 1.0)
    return np.where(interior, gate_config.stretch * d * (1.0 - d) / gate_config.beta, 0.0)
