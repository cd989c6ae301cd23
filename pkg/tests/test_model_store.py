import struct

import numpy as np
import pytest

from mobe.errors import (
    ArgumentError,
    BadMagicError,
    CheckpointError,
    DimensionMismatchError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)
from mobe.model_store import (
    generate_synthetic,
    load_model,
    read_checkpoint,
    read_tokens,
    save_model,
    write_checkpoint,
    write_tokens,
)
from mobe.models import (
    Activation,
    FactorizedWeights,
    FactorSpec,
    Method,
    MoBELayer,
    MoBEModel,
    MoEConfig,
    MoEModel,
)


def _random_config(rng):
    n = int(rng.integers(2, 6))
    k = int(rng.integers(1, n + 1))
    return MoEConfig(
        layers=int(rng.integers(1, 3)), experts=n, hidden=int(rng.integers(1, 5)),
        intermediate=int(rng.integers(1, 5)), top_k=k,
        activated_override=int(rng.integers(1, k + 1)) if rng.random() < 0.3 else None,
    )


def _random_factorized(rng, config):
    n, d, p = config.experts, config.hidden, config.intermediate
    g = int(rng.integers(1, n + 1))
    m = g * int(rng.integers(1, 3))
    r = int(rng.integers(1, p + 1))
    activation = Activation.from_tag(int(rng.integers(0, len(Activation))))
    mu_present = bool(rng.random() < 0.5)
    method = Method.from_tag(int(rng.integers(0, len(Method))))

    def factors():
        return FactorizedWeights(
            a=rng.standard_normal((n, p, r)), basis=rng.standard_normal((m, r, d)),
            logits=rng.standard_normal((n, m // g)), activation=activation, group_split=g,
            mu=rng.standard_normal((p, d)) if mu_present else None,
        )

    layers = [
        MoBELayer(gate=factors(), up=factors(), down=rng.standard_normal((n, d, p)),
                  router=rng.standard_normal((n, d)))
        for _ in range(config.layers)
    ]
    spec = FactorSpec(rank=r, basis_count=m, group_split=g, activation=activation,
                      mu_present=mu_present, method=method)
    return MoBEModel(config=config, spec=spec, layers=layers)


def _float_count(model):
    """Every float32 a MOBE container stores, logits and router included."""
    c, s = model.config, model.spec
    n, d, p = c.experts, c.hidden, c.intermediate
    per_type = n * p * s.rank + s.basis_count * s.rank * d + n * s.bases_per_group + (p * d if s.mu_present else 0)
    return c.layers * (2 * per_type + n * d * p + n * d)


class TestRoundTrip:

    def test_fuzzed_containers_round_trip(self, tmp_path):
        rng = np.random.default_rng(2024)
        first, second = tmp_path / "a.bin", tmp_path / "b.bin"
        for trial in range(100):
            config = _random_config(rng)
            if trial % 2:
                model = _random_factorized(rng, config)
            else:
                model, _ = generate_synthetic(config, seed=trial)
            save_model(first, model)
            loaded = load_model(first)
            assert loaded.config == config
            save_model(second, loaded)
            assert first.read_bytes() == second.read_bytes()

    def test_dense_values_are_float32(self, tmp_path, gaussian):
        path = tmp_path / "g.moew"
        save_model(path, gaussian)
        config, layers = read_checkpoint(path)
        assert config == gaussian.config
        for ref, got in zip(gaussian.layers, layers):
            np.testing.assert_array_equal(got.gate, ref.gate.astype(np.float32))
            np.testing.assert_array_equal(got.down, ref.down.astype(np.float32))
            np.testing.assert_array_equal(got.router, ref.router.astype(np.float32))

    def test_factorized_header_survives(self, tmp_path):
        rng = np.random.default_rng(5)
        model = _random_factorized(rng, MoEConfig(layers=1, experts=4, hidden=3, intermediate=2, top_k=2))
        path = tmp_path / "f.mobe"
        save_model(path, model)
        loaded = load_model(path)
        assert isinstance(loaded, MoBEModel)
        assert loaded.spec == model.spec
        assert loaded.element_count() == model.element_count()

    def test_config_block_is_ten_words(self, tmp_path):
        rng = np.random.default_rng(11)
        config = MoEConfig(layers=1, experts=4, hidden=3, intermediate=2, top_k=2, activated_override=1)
        model = _random_factorized(rng, config)
        path = tmp_path / "f.mobe"
        save_model(path, model)
        data = path.read_bytes()
        spec = model.spec
        words = struct.unpack_from("<10I", data, 8)
        assert words == (1, 4, 3, 2, 2, spec.rank, spec.basis_count, spec.group_split,
                         spec.activation.tag, int(spec.mu_present))
        # first tensor starts right after the config block: A^0 of the gate
        first = np.frombuffer(data, dtype="<f4", count=2 * spec.rank, offset=48)
        np.testing.assert_array_equal(first, model.layers[0].gate.a[0].astype(np.float32).ravel())
        assert len(data) == 48 + 4 * _float_count(model) + 8
        assert struct.unpack_from("<II", data, len(data) - 8) == (spec.method.tag, 1)

    def test_trailer_carries_method_and_override(self, tmp_path):
        rng = np.random.default_rng(12)
        config = MoEConfig(layers=1, experts=5, hidden=2, intermediate=3, top_k=3, activated_override=2)
        model = _random_factorized(rng, config)
        path = tmp_path / "f.mobe"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.spec.method is model.spec.method
        assert loaded.config.activated_experts == 2

    def test_bad_trailer_method(self, tmp_path):
        rng = np.random.default_rng(13)
        model = _random_factorized(rng, MoEConfig(layers=1, experts=4, hidden=3, intermediate=2, top_k=2))
        path = tmp_path / "f.mobe"
        save_model(path, model)
        data = path.read_bytes()
        path.write_bytes(data[:-8] + struct.pack("<II", 99, 0))
        with pytest.raises(DimensionMismatchError):
            load_model(path)

    def test_dense_element_count(self, gaussian):
        c = gaussian.config
        assert gaussian.element_count() == 3 * c.layers * c.experts * c.hidden * c.intermediate


class TestCorruption:

    @pytest.fixture
    def blob(self, tmp_path, gaussian):
        path = tmp_path / "model.moew"
        save_model(path, gaussian)
        return path, path.read_bytes()

    def test_bad_magic(self, blob):
        path, data = blob
        path.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(BadMagicError):
            load_model(path)

    def test_version_mismatch(self, blob):
        path, data = blob
        path.write_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
        with pytest.raises(VersionMismatchError):
            load_model(path)

    def test_truncation_anywhere(self, blob):
        path, data = blob
        for cut in (0, 3, 7, 20, 55, len(data) // 2, len(data) - 1):
            path.write_bytes(data[:cut])
            with pytest.raises(TruncatedFileError):
                load_model(path)

    def test_trailing_bytes(self, blob):
        path, data = blob
        path.write_bytes(data + b"\x00" * 4)
        with pytest.raises(DimensionMismatchError):
            load_model(path)

    def test_invalid_dimensions_in_header(self, blob):
        path, data = blob
        # n lives in the second config word
        path.write_bytes(data[:12] + struct.pack("<I", 0) + data[16:])
        with pytest.raises(DimensionMismatchError):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "nope.moew")

    def test_errors_are_io_exit_code(self):
        assert BadMagicError("x").exit_code == 2
        assert TruncatedFileError("x").exit_code == 2

    def test_writer_rejects_wrong_layer_count(self, tmp_path, gaussian):
        with pytest.raises(DimensionMismatchError):
            write_checkpoint(tmp_path / "x.moew", gaussian.config, gaussian.layers[:1])


class TestTokens:

    def test_round_trip(self, tmp_path, rng):
        tokens = rng.standard_normal((5, 3)).astype(np.float32)
        path = tmp_path / "t.bin"
        write_tokens(path, tokens)
        np.testing.assert_array_equal(read_tokens(path), tokens)

    def test_rejects_vectors(self, tmp_path):
        with pytest.raises(ShapeError):
            write_tokens(tmp_path / "t.bin", np.zeros(3))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(b"MOEW" + b"\x00" * 8)
        with pytest.raises(BadMagicError):
            read_tokens(path)


class TestGenerator:

    def test_gaussian_is_seeded(self, small_config):
        a, _ = generate_synthetic(small_config, seed=11)
        b, _ = generate_synthetic(small_config, seed=11)
        c, _ = generate_synthetic(small_config, seed=12)
        np.testing.assert_array_equal(a.layers[0].gate, b.layers[0].gate)
        assert not np.array_equal(a.layers[0].gate, c.layers[0].gate)

    def test_gaussian_moments(self):
        config = MoEConfig(layers=1, experts=8, hidden=64, intermediate=32, top_k=2)
        model, truth = generate_synthetic(config, seed=0, std=2.3e-2)
        assert truth is None
        gate = model.layers[0].gate
        assert gate.std() == pytest.approx(2.3e-2, rel=0.05)
        assert abs(gate.mean()) < 4 * 2.3e-2 / np.sqrt(gate.size)

    def test_planted_matches_truth(self, planted):
        model, truth = planted
        assert isinstance(model, MoEModel)
        for dense, factored in zip(model.layers, truth.layers):
            np.testing.assert_allclose(dense.gate, factored.gate.materialize(), atol=1e-12)
            np.testing.assert_allclose(dense.up, factored.up.materialize(), atol=1e-12)
            np.testing.assert_array_equal(dense.down, factored.down)
            coefficients = factored.gate.coefficients()
            np.testing.assert_allclose(coefficients.sum(axis=1), 1.0, atol=1e-12)

    def test_planted_mean_is_near_zero(self):
        config = MoEConfig(layers=1, experts=16, hidden=128, intermediate=48, top_k=2)
        model, truth = generate_synthetic(config, seed=0, mode="planted", basis_count=4)
        n, d, p = config.experts, config.hidden, config.intermediate
        for kind in ("gate", "up"):
            factors = truth.layers[0].factors(kind)
            r = factors.r
            # A entries are iid N(0, 1/r); given the mixed bases the mean estimator is gaussian with this std
            column_sums = factors.mixed().sum(axis=2)
            estimator_std = np.sqrt(p * np.sum(column_sums ** 2) / r) / (n * p * d)
            assert abs(model.layers[0].experts(kind).mean()) < 3 * estimator_std

    def test_planted_requires_compression(self, small_config):
        with pytest.raises(ArgumentError):
            generate_synthetic(small_config, seed=0, mode="planted", basis_count=small_config.experts)

    def test_planted_group_split(self):
        config = MoEConfig(layers=1, experts=8, hidden=4, intermediate=3, top_k=2)
        _, truth = generate_synthetic(config, seed=1, mode="planted", basis_count=2, group_split=2)
        assert truth.layers[0].gate.logits.shape == (8, 1)
        with pytest.raises(ArgumentError):
            generate_synthetic(config, seed=1, mode="planted", basis_count=3, group_split=2)

    def test_unknown_mode(self, small_config):
        with pytest.raises(ArgumentError):
            generate_synthetic(small_config, seed=0, mode="uniform")
