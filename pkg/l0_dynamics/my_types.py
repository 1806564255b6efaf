import logging
from pathlib import Path
from typing import Annotated, ClassVar, Literal, Self
from pydantic import BaseModel, ConfigDict, Field, model_validator
from l0_dynamics.types.enums import (
    GateGranularity,
    LibraryKind,
    ModelKind,
    Target,
)

logger = logging.getLogger(__name__)


class GateConfig(BaseModel):
    """
    Shape of the hard-concrete distribution shared by a vector of gates.

    The binary concrete sample is stretched to (gamma, zeta) and rectified
    into [0, 1]; `lambda_` weights the expected L0 penalty.
    """

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    beta: float = Field(default=2.0 / 3.0, gt=0.0)
    gamma: float = Field(default=-0.1, lt=0.0)
    zeta: float = Field(default=1.1, gt=1.0)
    lambda_: float = Field(default=1.0, ge=0.0, alias="lambda")

    @property
    def stretch(self) -> float:
        return self.zeta - self.gamma


class PolynomialLibrarySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal[LibraryKind.POLYNOMIAL] = LibraryKind.POLYNOMIAL
    degree: int = Field(default=3, ge=1)
    include_bias: bool = True
    include_interactions: bool = True


class FourierLibrarySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal[LibraryKind.FOURIER] = LibraryKind.FOURIER
    n_frequencies: int = Field(default=1, ge=1)
    include_sin: bool = True
    include_cos: bool = True
    # Accepted for compatibility, ignored with a warning
    interaction_terms: bool = False

    @model_validator(mode="after")
    def check_terms(self) -> Self:
        if not (self.include_sin or self.include_cos):
            raise ValueError("Fourier library needs sin or cos terms")
        if self.interaction_terms:
            logger.warning("Fourier interaction terms are not supported, ignoring them")
        return self


class GeneralizedLibrarySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal[LibraryKind.GENERALIZED] = LibraryKind.GENERALIZED
    libraries: list["LibrarySpec"] = Field(min_length=1)


LibrarySpec = Annotated[
    PolynomialLibrarySpec | FourierLibrarySpec | GeneralizedLibrarySpec,
    Field(discriminator="kind"),
]

GeneralizedLibrarySpec.model_rebuild()


class FeatureMap(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_dim: int = Field(ge=1)
    n_features: int = Field(ge=0)
    names: list[str]

    @model_validator(mode="after")
    def check_names(self) -> Self:
        if len(self.names) != self.n_features:
            raise ValueError(
                f"{len(self.names)} feature names for {self.n_features} features"
            )
        return self


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ModelKind
    input_dim: int = Field(ge=1)
    output_dim: int = Field(ge=1)
    h_dim: int = Field(default=256, ge=1)
    library: LibrarySpec | None = None
    gate_config: GateConfig = Field(default_factory=GateConfig)
    granularity: GateGranularity = GateGranularity.PER_INPUT_ROW
    droprate_init: float = Field(default=0.5, gt=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    use_bias: bool = True

    @model_validator(mode="after")
    def check_library(self) -> Self:
        if (self.kind == ModelKind.L0_SINDY) != (self.library is not None):
            raise ValueError("A feature library is required for, and only for, l0-sindy")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    epochs: int = Field(default=500, ge=1)
    # None means ceil(records / batch_size)
    iterations_per_epoch: int | None = Field(default=None, ge=1)
    lambda_: float = Field(default=1.0, ge=0.0, alias="lambda")
    mc_samples: int = Field(default=1, ge=1)
    seed: int = 0
    target: Target = Target.TRANSITION
    # Per-epoch multiplicative learning-rate decay
    lr_decay: float = Field(default=1.0, gt=0.0, le=1.0)


class IterationRecord(BaseModel):
    epoch: int
    iteration: int
    loss: float
    mse: float
    penalty: float
    weight_decay: float


class EpochMetrics(BaseModel):
    epoch: int
    train_mse: float
    test_mse: float
    penalty: float
    active_gates: int
    wall_time: float


class Metrics(BaseModel):
    epochs: list[EpochMetrics] = Field(default_factory=list)
    # Deterministic-gate count before the first update
    initial_active_gates: int | None = None

    def append(self, epoch_metrics: EpochMetrics):
        self.epochs.append(epoch_metrics)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def train_mse(self) -> list[float]:
        return [e.train_mse for e in self.epochs]

    @property
    def test_mse(self) -> list[float]:
        return [e.test_mse for e in self.epochs]

    @property
    def penalty(self) -> list[float]:
        return [e.penalty for e in self.epochs]

    @property
    def active_gates(self) -> list[int]:
        return [e.active_gates for e in self.epochs]

    @property
    def wall_time(self) -> list[float]:
        return [e.wall_time for e in self.epochs]

    CSV_HEADER: ClassVar[str] = "epoch,train_mse,test_mse,penalty,active_gates,seconds"

    def to_csv(self, path: Path, record_wall_time: bool = False):
        lines = [self.CSV_HEADER]
        for e in self.epochs:
            seconds = e.wall_time if record_wall_time else 0.0
            lines.append(
                f"{e.epoch},{float(e.train_mse)!r},{float(e.test_mse)!r},{float(e.penalty)!r},"
                f"{e.active_gates},{float(seconds)!r}"
            )
        path.write_text("\n".join(lines) + "\n")

    def summary(self) -> "MetricsSummary":
        if not self.epochs:
            raise ValueError("No epochs recorded")
        last = self.epochs[-1]
        return MetricsSummary(
            epochs=len(self.epochs),
            final_train_mse=last.train_mse,
            final_test_mse=last.test_mse,
            best_test_mse=min(self.test_mse),
            final_penalty=last.penalty,
            initial_active_gates=(
                self.epochs[0].active_gates
                if self.initial_active_gates is None
                else self.initial_active_gates
            ),
            final_active_gates=last.active_gates,
            total_seconds=sum(self.wall_time),
        )


class MetricsSummary(BaseModel):
    epochs: int
    final_train_mse: float
    final_test_mse: float
    best_test_mse: float
    final_penalty: float
    initial_active_gates: int
    final_active_gates: int
    total_seconds: float


class SparsityCounts(BaseModel):
    total_gates: int
    active_gates: int
    active_parameters: int
    total_parameters: int


class CheckpointSidecar(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    format_version: int
    kind: ModelKind
    target: Target
    seed: int
    # Penalty weight the gates were trained with, None for ungated models
    lambda_: float | None = Field(default=None, alias="lambda")
    sparsity: SparsityCounts | None = None
    equations: list[str] | None = None


class BlockCheck(BaseModel):
    max_abs_error: float
    max_rel_error: float
    non_finite: int = 0
    passed: bool


class GradientCheckReport(BaseModel):
    tolerance: float
    blocks: dict[str, BlockCheck] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(block.passed for block in self.blocks.values())

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks.values()), default=0.0)


class EvalResult(BaseModel):
    target: Target
    records: int
    mse: float


class ReportRow(MetricsSummary):
    run: str
