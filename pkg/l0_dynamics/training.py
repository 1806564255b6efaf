import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, NamedTuple
import numpy as np
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm
from l0_dynamics.config import RunAdapter, config
from l0_dynamics.exceptions import (
    EmptyBufferException,
    NonFiniteGradientException,
    NonFiniteLossException,
    NumericalAbortException,
    ShapeMismatchException,
)
from l0_dynamics.layers import mse_loss
from l0_dynamics.models import Model, build_model, sparsity_counts
from l0_dynamics.my_types import (
    EpochMetrics,
    IterationRecord,
    Metrics,
    ModelSpec,
    TrainConfig,
)
from l0_dynamics.pendulum import ReplayBuffer
from l0_dynamics.types.enums import Mode, Target
from l0_dynamics.utils.helper import spawn_rngs

logger = logging.getLogger(__name__)


class AdamState:
    """Bias-corrected Adam over named parameter blocks, updated in place."""

    def __init__(
        self,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float | None = None,
    ):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientException(name)

        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        step_size = lr / bc1

        for name, param in params.items():
            g = grads[name]
            if param.shape != g.shape:
                raise ShapeMismatchException(param.shape, g.shape, f"gradient `{name}`")
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)

            denom = np.sqrt(self.v[name] / bc2) + self.epsilon
            param -= step_size * self.m[name] / denom


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float | None = None,
):
    state.step(params, grads, lr)


class SupervisedData(NamedTuple):
    obs: np.ndarray
    act: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.shape[0])


def supervised_from_buffer(buffer: ReplayBuffer, target: Target) -> SupervisedData:
    if buffer.count == 0:
        raise EmptyBufferException()
    targets = buffer.next_obs if target == Target.TRANSITION else buffer.rew[:, np.newaxis]
    return SupervisedData(buffer.obs, buffer.act, targets)


def _check_dims(model: Model, data: SupervisedData):
    width = data.obs.shape[1] + data.act.shape[1]
    if width != model.spec.input_dim:
        raise ShapeMismatchException(model.spec.input_dim, width, "model input")
    if data.targets.shape[1] != model.spec.output_dim:
        raise ShapeMismatchException(
            model.spec.output_dim, data.targets.shape[1], "model output"
        )


def evaluate_data(
    model: Model, data: SupervisedData, chunk_size: int | None = None
) -> float:
    """MSE over all rows, accumulated over chunks of `chunk_size` rows."""
    if len(data) == 0:
        raise EmptyBufferException()
    _check_dims(model, data)
    chunk_size = chunk_size or config.eval_chunk_size
    squared_error = 0.0
    for start in range(0, len(data), chunk_size):
        rows = slice(start, start + chunk_size)
        pred = model.forward(data.obs[rows], data.act[rows], Mode.INFER)
        if pred.shape != data.targets[rows].shape:
            raise ShapeMismatchException(data.targets[rows].shape, pred.shape, "prediction")
        diff = pred - data.targets[rows]
        squared_error += float(np.sum(diff * diff))
    return squared_error / data.targets.size


def evaluate(model: Model, buffer: ReplayBuffer, target: Target) -> float:
    """Full-buffer MSE with deterministic gates."""
    return evaluate_data(model, supervised_from_buffer(buffer, target))


def _epoch_metrics(
    model: Model,
    epoch: int,
    train_data: SupervisedData,
    test_data: SupervisedData,
    wall_time: float,
) -> EpochMetrics:
    gated = bool(model.gated_layers)
    return EpochMetrics(
        epoch=epoch,
        train_mse=evaluate_data(model, train_data),
        test_mse=evaluate_data(model, test_data),
        penalty=model.penalty() if gated else 0.0,
        active_gates=sparsity_counts(model).active_gates if gated else 0,
        wall_time=wall_time,
    )


def fit(
    model: Model,
    train_data: SupervisedData,
    test_data: SupervisedData,
    cfg: TrainConfig,
    callback: Callable[[IterationRecord], None] | None = None,
    log: logging.Logger | logging.LoggerAdapter | None = None,
) -> tuple[Model, Metrics]:
    """
    Minimise mse + lambda * sum(prob_active) (+ weight decay) with Adam.

    Each iteration samples a minibatch with replacement and `mc_samples`
    gate draws shared across the minibatch. Metrics are recorded once per
    epoch with deterministic gates. On a non-finite loss the model is rolled
    back to the end of the last completed epoch before raising.
    """
    log = log or logger
    if len(train_data) == 0 or len(test_data) == 0:
        raise EmptyBufferException("Training and test data must be non-empty")
    _check_dims(model, train_data)
    _check_dims(model, test_data)

    batch_rng, noise_rng = spawn_rngs(cfg.seed, 2)
    lambda_ = cfg.lambda_ if model.gated_layers else 0.0
    iterations = cfg.iterations_per_epoch or math.ceil(len(train_data) / cfg.batch_size)
    optimizer = AdamState(lr=cfg.learning_rate)
    metrics = Metrics(
        initial_active_gates=sparsity_counts(model).active_gates if model.gated_layers else 0
    )
    last_good = model.snapshot()

    log.info(
        f"Training {model} on {len(train_data)} records: {cfg.epochs} epochs x "
        f"{iterations} iterations, lambda={lambda_}"
    )
    with logging_redirect_tqdm():
        for epoch in tqdm(
            range(1, cfg.epochs + 1),
            desc="Training",
            disable=not config.show_progress,
        ):
            started = time.perf_counter()
            lr = cfg.learning_rate * cfg.lr_decay ** (epoch - 1)
            for iteration in range(iterations):
                idx = batch_rng.integers(0, len(train_data), size=cfg.batch_size)
                obs, act, targets = (
                    train_data.obs[idx],
                    train_data.act[idx],
                    train_data.targets[idx],
                )

                model.zero_grad()
                mse = 0.0
                for _ in range(cfg.mc_samples):
                    noise = model.draw_noise(noise_rng)
                    pred = model.forward(obs, act, Mode.TRAIN, noise)
                    sample_mse, d_pred = mse_loss(pred, targets)
                    model.backward(d_pred / cfg.mc_samples)
                    mse += sample_mse / cfg.mc_samples

                penalty = model.accumulate_penalty_grad(lambda_)
                decay = model.accumulate_weight_decay_grad()
                loss = mse + lambda_ * penalty + decay
                if not math.isfinite(loss):
                    model.restore(last_good)
                    raise NonFiniteLossException(epoch, iteration, last_good)
                if callback is not None:
                    callback(
                        IterationRecord(
                            epoch=epoch,
                            iteration=iteration,
                            loss=loss,
                            mse=mse,
                            penalty=penalty,
                            weight_decay=decay,
                        )
                    )

                try:
                    optimizer.step(model.parameter_blocks(), model.gradient_blocks(), lr)
                except NonFiniteGradientException:
                    model.restore(last_good)
                    raise

            epoch_metrics = _epoch_metrics(
                model, epoch, train_data, test_data, time.perf_counter() - started
            )
            metrics.append(epoch_metrics)
            last_good = model.snapshot()
            log.debug(f"Epoch {epoch}: {epoch_metrics}")
            if epoch == 1 or epoch == cfg.epochs or epoch % 10 == 0:
                log.info(
                    f"Epoch {epoch}: train_mse={epoch_metrics.train_mse:.6g} "
                    f"test_mse={epoch_metrics.test_mse:.6g} "
                    f"active_gates={epoch_metrics.active_gates}"
                )

    return model, metrics


def train_model(
    model: Model,
    train_buffer: ReplayBuffer,
    test_buffer: ReplayBuffer,
    cfg: TrainConfig,
    callback: Callable[[IterationRecord], None] | None = None,
    log: logging.Logger | logging.LoggerAdapter | None = None,
) -> tuple[Model, Metrics]:
    return fit(
        model,
        supervised_from_buffer(train_buffer, cfg.target),
        supervised_from_buffer(test_buffer, cfg.target),
        cfg,
        callback,
        log,
    )


class SweepRun(NamedTuple):
    model: Model
    # None when the run aborted
    metrics: Metrics | None
    error: NumericalAbortException | None = None


def spec_with_lambda(spec: ModelSpec, lambda_: float) -> ModelSpec:
    """`spec` whose gate config records the penalty weight it is trained with."""
    return spec.model_copy(
        update={"gate_config": spec.gate_config.model_copy(update={"lambda_": lambda_})}
    )


def sweep_lambda(
    spec: ModelSpec,
    train_buffer: ReplayBuffer,
    test_buffer: ReplayBuffer,
    cfg: TrainConfig,
    lambdas: list[float],
    jobs: int = 1,
) -> dict[float, SweepRun]:
    """
    Independent training runs, one per lambda, each built and trained from
    `cfg.seed` so that results do not depend on `jobs`.

    A numerical abort ends only its own run. Its model is left at the last
    good state and the error is returned in place of metrics.
    """

    def _run(lambda_: float) -> SweepRun:
        run_log = RunAdapter(logger, {"run_name": f"lambda={lambda_}"})
        run_cfg = cfg.model_copy(update={"lambda_": lambda_})
        model = build_model(spec_with_lambda(spec, lambda_), cfg.seed)
        try:
            model, metrics = train_model(
                model, train_buffer, test_buffer, run_cfg, log=run_log
            )
        except NumericalAbortException as e:
            run_log.error(f"Aborted: {e}")
            return SweepRun(model, None, e)
        return SweepRun(model, metrics)

    results: dict[float, SweepRun] = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        futures = {executor.submit(_run, lambda_): lambda_ for lambda_ in lambdas}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return {lambda_: results[lambda_] for lambda_ in lambdas}
