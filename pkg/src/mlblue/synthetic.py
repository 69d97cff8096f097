"""Synthetic linear-Gaussian model suites with exactly known covariance.

Each model output is an affine function of a shared standard normal factor
vector z: model i, output s returns mean[s, i] + loadings[s, i, :] @ z.
The covariance between models i and j for output s is therefore exactly
loadings[s] @ loadings[s].T, which makes these suites the reference
instruments for every statistical test: sample estimates can be compared
against closed-form truth.

Sampling is counter-based so that independent streams are a matter of
bookkeeping, not luck: the stream for a given (seed, group index) pair is
keyed, and each replication starts at its own counter block. Replications
and groups can be drawn in any order and still produce identical numbers.
"""

from __future__ import annotations

import numpy as np

from .covariance import CovarianceStore

__all__ = ["SyntheticSuite"]


class SyntheticSuite:
    """A bank of correlated linear-Gaussian models.

    loadings has shape (num_outputs, num_models, num_factors); a 2-d array
    is promoted to a single output. means has shape (num_outputs,
    num_models) and defaults to zero.
    """

    def __init__(self, loadings, means=None):
        loadings = np.asarray(loadings, dtype=float)
        if loadings.ndim == 2:
            loadings = loadings[None, :, :]
        if loadings.ndim != 3 or loadings.size == 0:
            raise ValueError("loadings must have shape (outputs, models, factors)")
        if not np.all(np.isfinite(loadings)):
            raise ValueError("loadings must be finite")
        m, ell, d = loadings.shape
        if means is None:
            means = np.zeros((m, ell))
        else:
            means = np.asarray(means, dtype=float)
            if means.ndim == 1:
                means = means[None, :]
            if means.shape != (m, ell) or not np.all(np.isfinite(means)):
                raise ValueError("means must be finite with shape (outputs, models)")
        self._loadings = loadings.copy()
        self._means = means.copy()
        self._loadings.setflags(write=False)
        self._means.setflags(write=False)

    @property
    def num_outputs(self) -> int:
        return self._loadings.shape[0]

    @property
    def num_models(self) -> int:
        return self._loadings.shape[1]

    @property
    def num_factors(self) -> int:
        return self._loadings.shape[2]

    @property
    def loadings(self) -> np.ndarray:
        return self._loadings

    @property
    def means(self) -> np.ndarray:
        return self._means

    def covariance(self, output: int = 1) -> np.ndarray:
        """Exact model covariance for one output (1-based)."""
        a = self._loadings[output - 1]
        return a @ a.T

    def exact_store(self) -> CovarianceStore:
        mats = np.stack(
            [self.covariance(s) for s in range(1, self.num_outputs + 1)]
        )
        return CovarianceStore(mats, provenance="synthetic")

    def evaluate(self, model_ids, z) -> np.ndarray:
        """Deterministic evaluation of the listed models at factor values z.

        z has shape (count, num_factors); the result has shape
        (count, len(model_ids), num_outputs).
        """
        idx = [i - 1 for i in model_ids]
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[1] != self.num_factors:
            raise ValueError("z must have shape (count, num_factors)")
        out = np.empty((z.shape[0], len(idx), self.num_outputs))
        for s in range(self.num_outputs):
            out[:, :, s] = self._means[s, idx] + z @ self._loadings[s, idx, :].T
        return out

    def draw_group(self, group, count: int, seed: int, group_index: int,
                   replication: int = 0) -> np.ndarray:
        """Draw common-input samples of the models in one group.

        All models in the group are evaluated at the same factor draws, as
        the estimator requires. The stream is keyed by (seed, group_index)
        and the counter starts at a block owned by ``replication``, so
        different groups and different replications never share numbers and
        the order of calls does not matter. Returns an array of shape
        (count, len(group), num_outputs) with models in ascending id order.
        """
        if count < 0:
            raise ValueError("count must be >= 0")
        group = tuple(sorted(group))
        z = self._factor_draws(count, seed, group_index, replication)
        return self.evaluate(group, z)

    def _factor_draws(self, count, seed, group_index, replication):
        return self.factor_draws(count, self.num_factors, seed, group_index,
                                 replication)

    @staticmethod
    def factor_draws(count, dim, seed, stream_index, replication=0):
        """Standard normal draws from the keyed counter-based stream.

        Streams with different (seed, stream_index) pairs are independent;
        within one stream each replication owns its own counter block, so
        draws never overlap between replications either.
        """
        key = np.array([seed, stream_index], dtype=np.uint64)
        counter = np.array([0, 0, replication, 0], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key, counter=counter))
        return rng.standard_normal((count, dim))

    @classmethod
    def hierarchy(cls, num_models: int, num_outputs: int = 1, rate: float = 2.0,
                  strength: float = 1.0, h0: float = 0.5, ratio: float = 2.0,
                  mean: float = 1.0, bias: float = 0.0,
                  output_scale: float = 1.0) -> "SyntheticSuite":
        """A mesh-hierarchy-like family with exact power-law behavior.

        Model i (1 = finest) has unit loading on a shared factor plus a
        private factor with weight eta_i, eta_i^2 = strength * (h0 *
        ratio**(i-1))**rate. Consequences, all exact: V[p_i] = 1 + eta_i^2,
        Cov(p_i, p_j) = 1 for i != j, and V[p_i - p_j] = eta_i^2 + eta_j^2.
        Variances along the hierarchy follow the power law in the mesh
        width h_i = h0 * ratio**(i-1), so extrapolation routines can be
        validated against known limits. ``bias`` adds bias * eta_i^2 to
        model i's mean, mimicking discretization bias; ``output_scale``
        multiplies loadings and means of output s by output_scale**(s-1).
        """
        if num_models < 1 or num_outputs < 1:
            raise ValueError("need at least one model and one output")
        if rate <= 0 or strength <= 0 or h0 <= 0 or ratio <= 1:
            raise ValueError("rate, strength, h0 must be > 0 and ratio > 1")
        eta2 = strength * (h0 * ratio ** np.arange(num_models)) ** rate
        eta = np.sqrt(eta2)
        base = np.zeros((num_models, num_models + 1))
        base[:, 0] = 1.0
        base[np.arange(num_models), np.arange(num_models) + 1] = eta
        base_means = mean + bias * eta2
        loadings = np.stack(
            [base * output_scale ** s for s in range(num_outputs)]
        )
        means = np.stack(
            [base_means * output_scale ** s for s in range(num_outputs)]
        )
        return cls(loadings, means)

    @classmethod
    def random(cls, num_models: int, num_outputs: int = 1,
               num_factors: int | None = None, seed: int = 0,
               mean_scale: float = 1.0, diagonal_boost: float = 0.1,
               ) -> "SyntheticSuite":
        """A randomly generated, well-conditioned suite.

        Loadings are standard normal with ``diagonal_boost`` times the
        identity pattern added so no model is a near-exact combination of
        the others. Deterministic in ``seed``.
        """
        if num_factors is None:
            num_factors = num_models + 2
        if num_factors < num_models:
            raise ValueError("need num_factors >= num_models for full rank")
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        loadings = rng.standard_normal((num_outputs, num_models, num_factors))
        loadings[:, :, :num_models] += diagonal_boost * np.eye(num_models)
        means = mean_scale * rng.standard_normal((num_outputs, num_models))
        return cls(loadings, means)
