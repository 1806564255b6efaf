import logging
import math
import numpy as np
from l0_dynamics.exceptions import (
    BackwardBeforeForwardException,
    MissingNoiseException,
    ShapeMismatchException,
)
from l0_dynamics.gates import (
    GateCache,
    GateVector,
    deterministic_gates,
    init_log_alpha,
    pathwise_gate_grad,
    penalty_and_grad,
    sample_gates,
)
from l0_dynamics.my_types import GateConfig
from l0_dynamics.types.enums import GateGranularity, Mode

logger = logging.getLogger(__name__)


def as_matrix(x: np.ndarray, cols: int | None = None, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchException("(batch, features)", x.shape, what)
    if cols is not None and x.shape[1] != cols:
        raise ShapeMismatchException(f"(batch, {cols})", x.shape, what)
    return x


class DenseLayer:
    """y = x W^T + b with gradients accumulated into `dW` and `db`."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        weight_decay: float = 0.0,
    ):
        rng = rng or np.random.default_rng()
        bound = 1.0 / math.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight_decay = weight_decay
        self.W = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.b = np.zeros(out_features) if bias else None
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b) if bias else None
        self._x: np.ndarray | None = None

    def effective_weight(self) -> np.ndarray:
        return self.W

    def _affine(self, x: np.ndarray, W: np.ndarray) -> np.ndarray:
        y = x @ W.T
        if self.b is not None:
            y = y + self.b
        return y

    def forward(self, x: np.ndarray, mode: Mode = Mode.INFER) -> np.ndarray:
        x = as_matrix(x, self.in_features)
        self._x = x
        return self._affine(x, self.W)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise BackwardBeforeForwardException()
        dy = as_matrix(dy, self.out_features, "output gradient")
        self.dW += dy.T @ self._x
        if self.b is not None:
            self.db += dy.sum(axis=0)
        return dy @ self.W

    def zero_grad(self):
        self.dW.fill(0.0)
        if self.db is not None:
            self.db.fill(0.0)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"W": self.W}
        if self.b is not None:
            params["b"] = self.b
        return params

    def gradients(self) -> dict[str, np.ndarray]:
        grads = {"W": self.dW}
        if self.db is not None:
            grads["b"] = self.db
        return grads

    def weight_decay_and_grad(self) -> tuple[float, np.ndarray]:
        """0.5 * weight_decay * ||W||^2 and its gradient."""
        if self.weight_decay == 0.0:
            return 0.0, np.zeros_like(self.W)
        return (
            0.5 * self.weight_decay * float(np.sum(self.W * self.W)),
            self.weight_decay * self.W,
        )

    @property
    def parameter_count(self) -> int:
        return int(self.W.size + (self.b.size if self.b is not None else 0))


class L0DenseLayer(DenseLayer):
    """
    Dense layer whose weights are multiplied by hard-concrete gates.

    With per-input-row granularity one gate scales a whole column of W (an
    input feature); with per-element granularity every weight has its own gate.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        gate_config: GateConfig | None = None,
        granularity: GateGranularity = GateGranularity.PER_INPUT_ROW,
        droprate_init: float = 0.5,
        rng: np.random.Generator | None = None,
        weight_decay: float = 0.0,
    ):
        rng = rng or np.random.default_rng()
        super().__init__(in_features, out_features, bias, rng, weight_decay)
        self.gate_config = gate_config or GateConfig()
        self.granularity = granularity
        gate_shape = (
            (in_features,)
            if granularity == GateGranularity.PER_INPUT_ROW
            else (out_features, in_features)
        )
        self.gates = init_log_alpha(gate_shape, droprate_init, rng)
        self._z: np.ndarray | None = None
        self._cache: GateCache | None = None

    def _mask(self, z: np.ndarray) -> np.ndarray:
        # Broadcasting a row vector scales column j of W by z_j
        return z[np.newaxis, :] if z.ndim == 1 else z

    def effective_weight(self) -> np.ndarray:
        """Test-time sparse weights W * z with deterministic gates."""
        return self.W * self._mask(deterministic_gates(self.gates, self.gate_config))

    def forward(
        self,
        x: np.ndarray,
        mode: Mode = Mode.INFER,
        noise: np.ndarray | None = None,
    ) -> np.ndarray:
        x = as_matrix(x, self.in_features)
        if mode == Mode.TRAIN:
            if noise is None:
                raise MissingNoiseException()
            z, self._cache = sample_gates(self.gates, self.gate_config, noise)
        else:
            z = deterministic_gates(self.gates, self.gate_config)
            self._cache = None
        self._z = z
        self._x = x
        return self._affine(x, self.W * self._mask(z))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None or self._z is None:
            raise BackwardBeforeForwardException()
        dy = as_matrix(dy, self.out_features, "output gradient")
        mask = self._mask(self._z)

        grad_w_eff = dy.T @ self._x
        self.dW += grad_w_eff * mask
        if self.b is not None:
            self.db += dy.sum(axis=0)

        if self._cache is not None:
            dz = grad_w_eff * self.W
            if self.granularity == GateGranularity.PER_INPUT_ROW:
                dz = dz.sum(axis=0)
            self.gates.grad += dz * pathwise_gate_grad(
                self._cache, self.gate_config, self.gates
            )

        return dy @ (self.W * mask)

    def zero_grad(self):
        super().zero_grad()
        self.gates.zero_grad()

    def parameters(self) -> dict[str, np.ndarray]:
        return {**super().parameters(), "log_alpha": self.gates.log_alpha}

    def gradients(self) -> dict[str, np.ndarray]:
        return {**super().gradients(), "log_alpha": self.gates.grad}

    def penalty_and_grad(self) -> tuple[float, np.ndarray]:
        return penalty_and_grad(self.gates, self.gate_config)

    def weights_per_gate(self) -> int:
        return self.out_features if self.granularity == GateGranularity.PER_INPUT_ROW else 1


class ELU:
    def __init__(self):
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray, mode: Mode = Mode.INFER) -> np.ndarray:
        self._x = x
        return elu(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise BackwardBeforeForwardException()
        return dy * elu_grad(self._x)


def elu(x: float | np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: float | np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchException(target.shape, pred.shape, "prediction")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
