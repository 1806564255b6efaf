import logging
import zipfile
from pathlib import Path
from typing import NamedTuple, Sequence
import numpy as np
from l0_dynamics.config import config
from l0_dynamics.exceptions import (
    CheckpointFormatException,
    MissingNoiseException,
    NoGatesException,
    ShapeMismatchException,
    UnsupportedModelException,
)
from l0_dynamics.features import library_dim_and_names, transform
from l0_dynamics.gates import deterministic_gates, draw_noise
from l0_dynamics.layers import ELU, DenseLayer, L0DenseLayer, as_matrix
from l0_dynamics.my_types import (
    CheckpointSidecar,
    FeatureMap,
    ModelSpec,
    SparsityCounts,
)
from l0_dynamics.types.enums import ModelKind, Mode, Target

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class EquationTerm(NamedTuple):
    coefficient: float
    feature_index: int
    feature_name: str


class Model:
    """
    A stack of dense layers fed with the concatenated (obs, act) input.

    fcnn and sparse-fcnn use three layers with ELU after the first two;
    l0-sindy maps the input through its feature library and applies one
    bias-free gated layer.
    """

    def __init__(
        self,
        spec: ModelSpec,
        layers: list[DenseLayer],
        feature_map: FeatureMap | None = None,
    ):
        self.spec = spec
        self.layers = layers
        self.activations = [ELU() for _ in range(len(layers) - 1)]
        self.feature_map = feature_map
        self.layer_names = ["fc"] + [f"fc{i}" for i in range(1, len(layers))]

    @property
    def kind(self) -> ModelKind:
        return self.spec.kind

    @property
    def gated_layers(self) -> list[L0DenseLayer]:
        return [layer for layer in self.layers if isinstance(layer, L0DenseLayer)]

    def draw_noise(self, rng: np.random.Generator) -> list[np.ndarray]:
        """One uniform noise array per gated layer, shared by the whole minibatch."""
        return [draw_noise(rng, layer.gates.shape) for layer in self.gated_layers]

    def concat_inputs(self, obs: np.ndarray, act: np.ndarray) -> np.ndarray:
        obs = as_matrix(obs, what="obs")
        act = np.asarray(act, dtype=np.float64)
        if act.ndim == 1:
            act = act[:, np.newaxis]
        act = as_matrix(act, what="act")
        if obs.shape[0] != act.shape[0]:
            raise ShapeMismatchException(obs.shape[0], act.shape[0], "act batch size")
        if obs.shape[1] + act.shape[1] != self.spec.input_dim:
            raise ShapeMismatchException(
                self.spec.input_dim, obs.shape[1] + act.shape[1], "obs + act width"
            )
        return np.concatenate([obs, act], axis=1)

    def forward(
        self,
        obs: np.ndarray,
        act: np.ndarray,
        mode: Mode = Mode.INFER,
        noise: Sequence[np.ndarray] | None = None,
    ) -> np.ndarray:
        x = self.concat_inputs(obs, act)
        if self.spec.library is not None:
            x = transform(self.spec.library, x, self.spec.input_dim)

        gated = self.gated_layers
        if mode == Mode.TRAIN and gated:
            if noise is None:
                raise MissingNoiseException()
            if len(noise) != len(gated):
                raise ShapeMismatchException(len(gated), len(noise), "noise list")
        noise_iter = iter(noise or [])

        for index, layer in enumerate(self.layers):
            if isinstance(layer, L0DenseLayer):
                layer_noise = next(noise_iter) if mode == Mode.TRAIN else None
                x = layer.forward(x, mode, layer_noise)
            else:
                x = layer.forward(x, mode)
            if index < len(self.activations):
                x = self.activations[index].forward(x, mode)
        return x

    def backward(self, dy: np.ndarray):
        for index in reversed(range(len(self.layers))):
            if index < len(self.activations):
                dy = self.activations[index].backward(dy)
            dy = self.layers[index].backward(dy)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameter_blocks(self) -> dict[str, np.ndarray]:
        return {
            f"{name}.{key}": value
            for name, layer in zip(self.layer_names, self.layers)
            for key, value in layer.parameters().items()
        }

    def gradient_blocks(self) -> dict[str, np.ndarray]:
        return {
            f"{name}.{key}": value
            for name, layer in zip(self.layer_names, self.layers)
            for key, value in layer.gradients().items()
        }

    def penalty(self) -> float:
        return sum((layer.penalty_and_grad()[0] for layer in self.gated_layers), 0.0)

    def accumulate_penalty_grad(self, lambda_: float) -> float:
        """Add lambda * dL0/dlog_alpha to the gate gradients, return the penalty."""
        total = 0.0
        for layer in self.gated_layers:
            value, grad = layer.penalty_and_grad()
            layer.gates.grad += lambda_ * grad
            total += value
        return total

    def accumulate_weight_decay_grad(self) -> float:
        total = 0.0
        for layer in self.layers:
            value, grad = layer.weight_decay_and_grad()
            layer.dW += grad
            total += value
        return total

    def open_all_gates(self, log_alpha: float = 20.0):
        for layer in self.gated_layers:
            layer.gates.log_alpha.fill(log_alpha)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.parameter_blocks().items()}

    def restore(self, snapshot: dict[str, np.ndarray]):
        blocks = self.parameter_blocks()
        if blocks.keys() != snapshot.keys():
            raise CheckpointFormatException(
                f"Parameter blocks {sorted(snapshot)} do not match {sorted(blocks)}"
            )
        for name, value in snapshot.items():
            if blocks[name].shape != value.shape:
                raise ShapeMismatchException(blocks[name].shape, value.shape, name)
            blocks[name][...] = value

    def __repr__(self) -> str:
        shapes = ", ".join(
            f"{name}({layer.in_features}->{layer.out_features})"
            for name, layer in zip(self.layer_names, self.layers)
        )
        return f"Model(kind={self.kind}, {shapes})"


def build_model(spec: ModelSpec, seed: int) -> Model:
    rng = np.random.default_rng(seed)

    if spec.kind == ModelKind.L0_SINDY:
        feature_map = library_dim_and_names(spec.library, spec.input_dim)
        layer = L0DenseLayer(
            feature_map.n_features,
            spec.output_dim,
            bias=False,
            gate_config=spec.gate_config,
            granularity=spec.granularity,
            droprate_init=spec.droprate_init,
            rng=rng,
            weight_decay=spec.weight_decay,
        )
        return Model(spec, [layer], feature_map)

    dims = [spec.input_dim, spec.h_dim, spec.h_dim, spec.output_dim]
    layers: list[DenseLayer] = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        if spec.kind == ModelKind.SPARSE_FCNN:
            layers.append(
                L0DenseLayer(
                    fan_in,
                    fan_out,
                    bias=spec.use_bias,
                    gate_config=spec.gate_config,
                    granularity=spec.granularity,
                    droprate_init=spec.droprate_init,
                    rng=rng,
                    weight_decay=spec.weight_decay,
                )
            )
        else:
            layers.append(
                DenseLayer(
                    fan_in,
                    fan_out,
                    bias=spec.use_bias,
                    rng=rng,
                    weight_decay=spec.weight_decay,
                )
            )
    return Model(spec, layers)


def parameter_count(model: Model) -> int:
    """Number of weights and biases, gate locations excluded."""
    return sum(layer.parameter_count for layer in model.layers)


def sparsity_counts(model: Model) -> SparsityCounts:
    gated = model.gated_layers
    if not gated:
        raise NoGatesException(f"{model.kind} model has no gates")

    total_gates = 0
    active_gates = 0
    active_parameters = 0
    for layer in gated:
        z = deterministic_gates(layer.gates, layer.gate_config)
        active = int(np.count_nonzero(z > 0.0))
        total_gates += int(z.size)
        active_gates += active
        active_parameters += active * layer.weights_per_gate()
        if layer.b is not None:
            active_parameters += int(layer.b.size)

    return SparsityCounts(
        total_gates=total_gates,
        active_gates=active_gates,
        active_parameters=active_parameters,
        total_parameters=parameter_count(model),
    )


def _require_l0_sindy(model: Model):
    if model.kind != ModelKind.L0_SINDY or model.feature_map is None:
        raise UnsupportedModelException(
            f"Equation extraction needs an l0-sindy model, got {model.kind}"
        )


def equation_terms(model: Model, threshold: float = 0.0) -> list[list[EquationTerm]]:
    """Full-precision terms |coef * z| > threshold per output, in feature order."""
    _require_l0_sindy(model)
    weights = model.layers[0].effective_weight()
    names = model.feature_map.names
    return [
        [
            EquationTerm(float(row[j]), j, names[j])
            for j in range(len(names))
            if abs(row[j]) > threshold
        ]
        for row in weights
    ]


def format_equation(terms: list[EquationTerm]) -> str:
    if not terms:
        return "0"
    parts = []
    for index, term in enumerate(terms):
        magnitude = f"{abs(term.coefficient):.4f}*{term.feature_name}"
        if index == 0:
            parts.append(f"-{magnitude}" if term.coefficient < 0 else magnitude)
        else:
            parts.append(f"{'-' if term.coefficient < 0 else '+'} {magnitude}")
    return " ".join(parts)


def extract_equation(model: Model, threshold: float | None = None) -> list[str]:
    threshold = config.print_threshold if threshold is None else threshold
    return [format_equation(terms) for terms in equation_terms(model, threshold)]


def evaluate_equations(
    terms: list[list[EquationTerm]], model: Model, obs: np.ndarray, act: np.ndarray
) -> np.ndarray:
    """Evaluate extracted terms as explicit sums over library features."""
    _require_l0_sindy(model)
    features = transform(model.spec.library, model.concat_inputs(obs, act))
    out = np.zeros((features.shape[0], len(terms)))
    for o, output_terms in enumerate(terms):
        for term in output_terms:
            out[:, o] += term.coefficient * features[:, term.feature_index]
    return out


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(model: Model, path: Path, seed: int, target: Target) -> Path:
    """Write the npz container and its JSON sidecar, return the sidecar path."""
    arrays = {
        "format_version": np.array(CHECKPOINT_FORMAT_VERSION),
        "spec": np.array(model.spec.model_dump_json()),
        "seed": np.array(seed),
        "target": np.array(str(target)),
    }
    arrays.update(
        {f"param/{name}": value for name, value in model.parameter_blocks().items()}
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)

    sidecar = CheckpointSidecar(
        format_version=CHECKPOINT_FORMAT_VERSION,
        kind=model.kind,
        target=target,
        seed=seed,
        lambda_=model.spec.gate_config.lambda_ if model.gated_layers else None,
        sparsity=sparsity_counts(model) if model.gated_layers else None,
        equations=extract_equation(model) if model.kind == ModelKind.L0_SINDY else None,
    )
    sidecar_file = sidecar_path(path)
    sidecar_file.write_text(sidecar.model_dump_json(indent=4, by_alias=True))
    logger.info(f"Saved checkpoint to {path}")
    return sidecar_file


def load_checkpoint(path: Path) -> tuple[Model, int, Target]:
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint {path} not found")
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointFormatException(
                    f"Unsupported checkpoint version {version}"
                )
            spec = ModelSpec.model_validate_json(str(data["spec"].item()))
            seed = int(data["seed"])
            target = Target(str(data["target"].item()))
            snapshot = {
                key.removeprefix("param/"): data[key].copy()
                for key in data.files
                if key.startswith("param/")
            }
    except CheckpointFormatException:
        raise
    except (KeyError, ValueError, OSError, zipfile.BadZipFile) as e:
        raise CheckpointFormatException(f"Invalid checkpoint {path}: {e}") from e

    model = build_model(spec, seed)
    model.restore(snapshot)
    logger.info(f"Loaded {model} from {path}")
    return model, seed, target


def read_sidecar(path: Path) -> CheckpointSidecar:
    return CheckpointSidecar.model_validate_json(sidecar_path(path).read_text())
