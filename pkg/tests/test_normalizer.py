import numpy as np
import pytest

from mobe.errors import DegenerateInputError, ShapeError
from mobe.models import FactorizedWeights, MoELayer, MoEModel
from mobe.normalizer import (
    fold_sigma,
    identity_stats,
    model_stats,
    mu_omission_cost,
    stats_report,
    weight_stats,
    zscore,
)


class TestZScore:

    def test_normalized_moments(self, rng):
        experts = 0.3 + 0.02 * rng.standard_normal((4, 5, 6))
        normalized, stats = zscore(experts)
        assert normalized.mean() == pytest.approx(0.0, abs=1e-12)
        assert normalized.std() == pytest.approx(1.0, rel=1e-12)
        assert stats.mu == pytest.approx(experts.mean())
        assert stats.sigma == pytest.approx(experts.std())

    def test_constant_weights_are_degenerate(self):
        with pytest.raises(DegenerateInputError):
            zscore(np.full((3, 2, 2), 0.5))

    def test_single_expert(self, rng):
        normalized, _ = zscore(rng.standard_normal((1, 3, 3)))
        assert normalized.shape == (1, 3, 3)

    def test_list_input_must_share_shape(self):
        with pytest.raises(ShapeError):
            zscore([np.ones((2, 2)), np.ones((2, 3))])
        with pytest.raises(ShapeError):
            zscore([])

    def test_mu_matrix_is_elementwise_mean(self, rng):
        experts = rng.standard_normal((5, 3, 4)) + np.arange(12).reshape(3, 4)
        normalized, stats = zscore(experts, mu_matrix=True)
        np.testing.assert_allclose(stats.mu_matrix, experts.mean(axis=0))
        np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-12)


class TestFold:

    def _factors(self, rng, n=4, p=3, r=2, m=2, d=5):
        return FactorizedWeights(
            a=rng.standard_normal((n, p, r)), basis=rng.standard_normal((m, r, d)),
            logits=rng.standard_normal((n, m)),
        )

    def test_fold_identity_with_mu(self, rng):
        factors = self._factors(rng)
        stats = weight_stats(rng.normal(0.7, 2.5, size=(4, 3, 5)))
        folded = fold_sigma(factors, stats, keep_mu=True)
        expected = stats.sigma * factors.materialize() + stats.mu
        np.testing.assert_allclose(folded.materialize(), expected, rtol=1e-12, atol=1e-12)

    def test_fold_without_mu_drops_offset(self, rng):
        factors = self._factors(rng)
        stats = weight_stats(rng.normal(0.7, 2.5, size=(4, 3, 5)))
        folded = fold_sigma(factors, stats)
        assert folded.mu is None
        np.testing.assert_allclose(folded.materialize(), stats.sigma * factors.materialize(), rtol=1e-12)

    def test_identity_stats_change_nothing(self, rng):
        factors = self._factors(rng)
        folded = fold_sigma(factors, identity_stats())
        np.testing.assert_allclose(folded.materialize(), factors.materialize())

    def test_mu_omission_cost(self):
        stats = weight_stats(np.full((2, 3, 4), 2.0) + np.array([0.0, 1e-3]).reshape(2, 1, 1))
        assert mu_omission_cost(stats, 3, 4) == pytest.approx(abs(stats.mu) * np.sqrt(12))


class TestReports:

    def test_stats_report_rows(self, gaussian):
        rows = stats_report(gaussian)
        assert [(row.layer, row.type) for row in rows] == [(0, "gate"), (0, "up"), (1, "gate"), (1, "up")]
        assert all(row.sigma > 0 for row in rows)

    def test_model_stats_pools_layers(self, gaussian):
        pooled = model_stats(gaussian)
        gates = np.concatenate([layer.gate.ravel() for layer in gaussian.layers])
        assert pooled["gate"].mu == pytest.approx(gates.mean())
        assert pooled["gate"].sigma == pytest.approx(gates.std())

    def test_all_zeros_model(self, small_config):
        n, d, p = small_config.experts, small_config.hidden, small_config.intermediate
        layers = [
            MoELayer(gate=np.zeros((n, p, d)), up=np.zeros((n, p, d)), down=np.zeros((n, d, p)),
                     router=np.zeros((n, d)))
            for _ in range(small_config.layers)
        ]
        rows = stats_report(MoEModel(config=small_config, layers=layers))
        assert len(rows) == 2 * small_config.layers
        for row in rows:
            assert (row.mu, row.sigma, row.mu_omission_cost) == (0.0, 0.0, 0.0)
