import numpy as np
import pytest
from pydantic import ValidationError
from l0_dynamics.exceptions import (
    CheckpointFormatException,
    MissingNoiseException,
    NoGatesException,
    ShapeMismatchException,
    UnsupportedModelException,
)
from l0_dynamics.gradcheck import gradient_check
from l0_dynamics.layers import mse_loss
from l0_dynamics.models import (
    EquationTerm,
    build_model,
    equation_terms,
    evaluate_equations,
    extract_equation,
    format_equation,
    load_checkpoint,
    parameter_count,
    read_sidecar,
    save_checkpoint,
    sparsity_counts,
)
from l0_dynamics.my_types import GateConfig, ModelSpec, PolynomialLibrarySpec
from l0_dynamics.types.enums import GateGranularity, ModelKind, Mode, Target


def _spec(kind, **kwargs):
    if kind == ModelKind.L0_SINDY:
        kwargs.setdefault("library", PolynomialLibrarySpec(degree=3))
    kwargs.setdefault("input_dim", 4)
    kwargs.setdefault("output_dim", 3)
    return ModelSpec(kind=kind, **kwargs)


def _inputs(rng, batch=8):
    return rng.normal(size=(batch, 3)), rng.uniform(-2.0, 2.0, size=(batch, 1))


def _linear_sindy(weights, log_alpha, names_degree=1, input_dim=2):
    """Single-output l0-sindy over a degree-1 library [1, x0, x1] with one act column."""
    spec = ModelSpec(
        kind=ModelKind.L0_SINDY,
        input_dim=input_dim,
        output_dim=1,
        library=PolynomialLibrarySpec(degree=names_degree),
    )
    model = build_model(spec, seed=0)
    layer = model.layers[0]
    layer.W[...] = np.array([weights], dtype=np.float64)
    layer.gates.log_alpha[...] = log_alpha
    return model


class TestBuildModel:
    def test_fcnn_parameter_count(self):
        model = build_model(_spec(ModelKind.FCNN), seed=0)
        assert parameter_count(model) == 67_843

    def test_sparse_fcnn_counts_weights_only(self):
        model = build_model(_spec(ModelKind.SPARSE_FCNN), seed=0)
        assert parameter_count(model) == 67_843
        assert [layer.gates.size for layer in model.gated_layers] == [4, 256, 256]

    def test_l0_sindy_shapes(self):
        model = build_model(_spec(ModelKind.L0_SINDY), seed=0)
        (layer,) = model.layers
        assert layer.W.shape == (3, 35)
        assert layer.gates.size == 35
        assert layer.b is None
        assert model.feature_map.n_features == 35

    def test_per_element_gates(self):
        model = build_model(
            _spec(ModelKind.L0_SINDY, granularity=GateGranularity.PER_ELEMENT), seed=0
        )
        assert model.layers[0].gates.shape == (3, 35)

    @pytest.mark.parametrize(
        "kind, gated", [(ModelKind.FCNN, 0), (ModelKind.SPARSE_FCNN, 3), (ModelKind.L0_SINDY, 1)]
    )
    def test_gated_layers_by_kind(self, kind, gated):
        assert len(build_model(_spec(kind, h_dim=8), seed=0).gated_layers) == gated

    def test_same_seed_same_parameters(self):
        a = build_model(_spec(ModelKind.SPARSE_FCNN, h_dim=16), seed=3).parameter_blocks()
        b = build_model(_spec(ModelKind.SPARSE_FCNN, h_dim=16), seed=3).parameter_blocks()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_library_required_only_for_sindy(self):
        with pytest.raises(ValidationError):
            ModelSpec(kind=ModelKind.L0_SINDY, input_dim=4, output_dim=3)
        with pytest.raises(ValidationError):
            ModelSpec(
                kind=ModelKind.FCNN, input_dim=4, output_dim=3, library=PolynomialLibrarySpec()
            )

    def test_spec_json_round_trip(self):
        spec = _spec(ModelKind.L0_SINDY, granularity=GateGranularity.PER_ELEMENT)
        assert ModelSpec.model_validate_json(spec.model_dump_json()) == spec


class TestForward:
    def test_zero_fcnn_outputs_zero(self, rng):
        model = build_model(_spec(ModelKind.FCNN, h_dim=8), seed=0)
        for block in model.parameter_blocks().values():
            block.fill(0.0)
        obs, act = _inputs(rng)
        np.testing.assert_array_equal(model.forward(obs, act), np.zeros((8, 3)))

    def test_sindy_bias_feature_passthrough(self, rng):
        model = build_model(_spec(ModelKind.L0_SINDY, output_dim=1), seed=0)
        layer = model.layers[0]
        layer.W.fill(0.0)
        layer.W[0, 0] = 1.0
        model.open_all_gates()
        obs, act = _inputs(rng)
        np.testing.assert_allclose(model.forward(obs, act), np.ones((8, 1)))

    def test_open_sparse_fcnn_equals_fcnn(self, rng):
        dense = build_model(_spec(ModelKind.FCNN, h_dim=32), seed=5)
        sparse = build_model(_spec(ModelKind.SPARSE_FCNN, h_dim=32), seed=6)
        sparse.open_all_gates()
        for d_layer, s_layer in zip(dense.layers, sparse.layers):
            s_layer.W[...] = d_layer.W
            s_layer.b[...] = rng.normal(size=s_layer.b.shape)
            d_layer.b[...] = s_layer.b
        obs, act = _inputs(rng, batch=100)
        np.testing.assert_allclose(sparse.forward(obs, act), dense.forward(obs, act), atol=1e-12)

    def test_act_vector_accepted(self, rng):
        model = build_model(_spec(ModelKind.FCNN, h_dim=8), seed=0)
        obs, act = _inputs(rng)
        np.testing.assert_array_equal(model.forward(obs, act[:, 0]), model.forward(obs, act))

    def test_train_mode_requires_noise(self, rng):
        model = build_model(_spec(ModelKind.SPARSE_FCNN, h_dim=8), seed=0)
        with pytest.raises(MissingNoiseException):
            model.forward(*_inputs(rng), mode=Mode.TRAIN)

    def test_batch_mismatch(self, rng):
        model = build_model(_spec(ModelKind.FCNN, h_dim=8), seed=0)
        with pytest.raises(ShapeMismatchException):
            model.forward(rng.normal(size=(4, 3)), rng.normal(size=(5, 1)))

    def test_width_mismatch(self, rng):
        model = build_model(_spec(ModelKind.FCNN, h_dim=8), seed=0)
        with pytest.raises(ShapeMismatchException):
            model.forward(rng.normal(size=(4, 2)), rng.normal(size=(4, 1)))


class TestModelGradients:
    @pytest.mark.parametrize("kind", list(ModelKind))
    @pytest.mark.parametrize("seed", range(20))
    def test_full_model_train_mode(self, kind, seed):
        rng = np.random.default_rng(seed)
        extra = {"library": PolynomialLibrarySpec(degree=2)} if kind == ModelKind.L0_SINDY else {}
        model = build_model(_spec(kind, h_dim=6, **extra), seed=seed)
        for layer in model.gated_layers:
            layer.gates.log_alpha[...] = rng.normal(0.0, 0.1, size=layer.gates.shape)
        noise = [rng.uniform(0.4, 0.6, size=layer.gates.shape) for layer in model.gated_layers]
        obs, act = _inputs(rng, batch=5)
        target = rng.normal(size=(5, 3))

        def loss() -> float:
            return mse_loss(model.forward(obs, act, Mode.TRAIN, noise), target)[0]

        model.zero_grad()
        _, d_pred = mse_loss(model.forward(obs, act, Mode.TRAIN, noise), target)
        model.backward(d_pred)
        report = gradient_check(loss, model.parameter_blocks(), model.gradient_blocks())
        assert report.passed, report

    def test_penalty_gradient_accumulates(self):
        model = build_model(_spec(ModelKind.L0_SINDY), seed=0)
        model.zero_grad()
        penalty = model.accumulate_penalty_grad(2.0)
        assert penalty == pytest.approx(model.penalty())
        layer = model.layers[0]
        _, grad = layer.penalty_and_grad()
        np.testing.assert_allclose(layer.gates.grad, 2.0 * grad)

    def test_snapshot_restore(self, rng):
        model = build_model(_spec(ModelKind.SPARSE_FCNN, h_dim=8), seed=0)
        snapshot = model.snapshot()
        for block in model.parameter_blocks().values():
            block += 1.0
        model.restore(snapshot)
        for name, block in model.parameter_blocks().items():
            np.testing.assert_array_equal(block, snapshot[name])


class TestSparsityCounts:
    def test_fcnn_has_no_gates(self):
        with pytest.raises(NoGatesException):
            sparsity_counts(build_model(_spec(ModelKind.FCNN, h_dim=8), seed=0))

    @pytest.mark.parametrize("log_alpha, active", [(-20.0, 0), (20.0, 35)])
    def test_all_closed_or_open(self, log_alpha, active):
        model = build_model(_spec(ModelKind.L0_SINDY), seed=0)
        model.layers[0].gates.log_alpha.fill(log_alpha)
        counts = sparsity_counts(model)
        assert counts.total_gates == 35
        assert counts.active_gates == active
        assert counts.active_parameters == 3 * active
        assert counts.total_parameters == 105

    def test_mixed(self):
        model = _linear_sindy([1.0, 1.0, 1.0], np.array([-20.0, 0.0, 20.0]))
        assert sparsity_counts(model).active_gates == 2

    def test_closing_gate_never_increases_active_parameters(self):
        model = build_model(_spec(ModelKind.SPARSE_FCNN, h_dim=8), seed=0)
        previous = sparsity_counts(model).active_parameters
        for layer in model.gated_layers:
            for j in range(layer.gates.size):
                layer.gates.log_alpha.flat[j] = -20.0
                current = sparsity_counts(model).active_parameters
                assert current <= previous <= parameter_count(model)
                previous = current


class TestEquations:
    def test_example_equation(self):
        model = _linear_sindy([0.5, 0.0, -1.2], np.array([20.0, -20.0, 20.0]))
        assert extract_equation(model) == ["0.5000*1 - 1.2000*x1"]

    def test_all_closed(self):
        model = _linear_sindy([0.5, 3.0, -1.2], -20.0)
        assert extract_equation(model) == ["0"]

    def test_half_open_gate_scales_coefficient(self):
        model = _linear_sindy([0.0, 2.0, 0.0], np.array([-20.0, 0.0, -20.0]))
        assert extract_equation(model) == ["1.0000*x0"]

    def test_leading_negative_term(self):
        assert format_equation([EquationTerm(-0.25, 2, "x1")]) == "-0.2500*x1"

    def test_requires_sindy(self):
        with pytest.raises(UnsupportedModelException):
            extract_equation(build_model(_spec(ModelKind.FCNN, h_dim=8), seed=0))

    def test_equations_reproduce_forward(self, rng):
        model = build_model(_spec(ModelKind.L0_SINDY), seed=1)
        layer = model.layers[0]
        layer.W[...] = rng.normal(size=layer.W.shape)
        layer.gates.log_alpha[...] = rng.normal(0.0, 2.0, size=layer.gates.shape)
        obs, act = _inputs(rng, batch=50)
        terms = equation_terms(model)
        np.testing.assert_allclose(
            evaluate_equations(terms, model, obs, act), model.forward(obs, act), atol=1e-10
        )


class TestCheckpoint:
    @pytest.mark.parametrize("kind", list(ModelKind))
    def test_round_trip(self, tmp_path, rng, kind):
        model = build_model(_spec(kind, h_dim=8), seed=4)
        path = tmp_path / "model.npz"
        sidecar = save_checkpoint(model, path, seed=4, target=Target.TRANSITION)
        loaded, seed, target = load_checkpoint(path)
        assert (seed, target) == (4, Target.TRANSITION)
        assert loaded.spec == model.spec
        for name, block in model.parameter_blocks().items():
            np.testing.assert_array_equal(loaded.parameter_blocks()[name], block)
        obs, act = _inputs(rng)
        np.testing.assert_array_equal(loaded.forward(obs, act), model.forward(obs, act))
        assert sidecar.exists()

    def test_sidecar_contents(self, tmp_path):
        model = build_model(_spec(ModelKind.L0_SINDY), seed=0)
        path = tmp_path / "model.npz"
        save_checkpoint(model, path, seed=0, target=Target.REWARD)
        sidecar = read_sidecar(path)
        assert sidecar.kind == ModelKind.L0_SINDY
        assert sidecar.target == Target.REWARD
        assert sidecar.sparsity == sparsity_counts(model)
        assert sidecar.equations == extract_equation(model)

    @pytest.mark.parametrize("kind, expected", [(ModelKind.FCNN, None), (ModelKind.L0_SINDY, 0.05)])
    def test_sidecar_records_gate_lambda(self, tmp_path, kind, expected):
        spec = _spec(kind, h_dim=8, gate_config=GateConfig(lambda_=0.05))
        path = tmp_path / "model.npz"
        save_checkpoint(build_model(spec, seed=0), path, seed=0, target=Target.TRANSITION)
        assert read_sidecar(path).lambda_ == expected
        loaded, _, _ = load_checkpoint(path)
        assert loaded.spec.gate_config.lambda_ == 0.05

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.npz")

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "garbage.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointFormatException):
            load_checkpoint(path)
