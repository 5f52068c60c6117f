"""Bayesian linear variable selection with a Zellner g-prior.

Model for response y (length m) and q candidate predictors:

    y ~ N(1 beta0 + X_gamma beta_gamma, sigma^2 I)
    p(sigma^2, beta0) proportional to 1/sigma^2
    beta_gamma | sigma ~ N(0, g sigma^2 (X_gamma' X_gamma)^{-1})
    gamma_i iid Bernoulli(w)

indexed by the hyperparameter h = (w, g).  Predictor columns are centered
before analysis so the flat-prior intercept is orthogonal to beta_gamma;
with that convention every per-model marginal likelihood is closed form,
which yields an exact enumeration oracle for q <= 25 alongside the Gibbs
sampler.  The priors across h are not mutually absolutely continuous with
respect to a common density, but their pairwise ratios are, and
``log_prior_weight`` evaluates a representative of that ratio with no matrix
inversion or determinant.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .errors import InvalidHyperparameterError, SingularDesignError
from .families import ChainSpec, DensityFamily, FunctionOfTheta

logger = logging.getLogger(__name__)

ENUMERATION_MAX_Q = 25


def _expit(logit: float) -> float:
    if logit >= 0.0:
        return 1.0 / (1.0 + math.exp(-logit))
    e = math.exp(logit)
    return e / (1.0 + e)


@dataclass
class ModelState:
    """One draw theta = (gamma, sigma, beta0, beta_gamma)."""

    gamma: np.ndarray      # bool, length q
    sigma: float
    beta0: float
    beta: np.ndarray       # coefficients of included predictors, column order

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=bool)
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if int(self.gamma.sum()) != len(self.beta):
            raise ValueError("beta length must equal the number of included predictors")


@dataclass
class Dataset:
    """Transformed regression data: y and X are ready for analysis."""

    y: np.ndarray
    X: np.ndarray
    names: list[str]
    log_mask: np.ndarray   # True where the log transform was applied

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        m, q = self.X.shape
        if self.y.shape != (m,):
            raise ValueError("y length must match rows of X")
        if len(self.names) != q:
            raise ValueError("need one name per predictor column")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.X))):
            raise ValueError("dataset contains non-finite entries")
        spans = np.ptp(self.X, axis=0)
        if np.any(spans == 0.0):
            bad = [self.names[j] for j in np.flatnonzero(spans == 0.0)]
            raise ValueError(f"constant predictor column(s) after transformation: {bad}")

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]


def ingest_csv(path, response_name: str, binary_names: Sequence[str] = ()) -> Dataset:
    """Load a CSV and apply the log transform to all non-binary columns.

    The response is log-transformed as well; columns listed in
    ``binary_names`` pass through untouched.  Raises on a missing column or a
    non-positive value under the log.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        header = list(reader.fieldnames)
        rows = list(reader)
    missing = [c for c in [response_name, *binary_names] if c not in header]
    if missing:
        raise ValueError(f"{path}: missing column(s) {missing}")
    names = [c for c in header if c != response_name]
    binary = set(binary_names)

    def column(col):
        try:
            vals = np.array([float(r[col]) for r in rows])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: could not parse column {col!r}") from exc
        if col in binary:
            return vals
        if np.any(vals <= 0.0):
            raise ValueError(f"{path}: non-positive value in log-transformed column {col!r}")
        return np.log(vals)

    y = column(response_name)
    X = np.column_stack([column(c) for c in names])
    log_mask = np.array([c not in binary for c in names])
    return Dataset(y=y, X=X, names=names, log_mask=log_mask)


@dataclass
class BlvsStats:
    """Per-sample statistics sufficient for prior-weight ratios at any (w, g)."""

    q_gamma: np.ndarray    # int, number of included predictors
    t2: np.ndarray         # ||X_gamma beta_gamma||^2 / sigma^2
    gamma: np.ndarray      # bool, (n, q) inclusion indicators


class BlvsFamily(DensityFamily):
    """Density-family adapter plus all model-specific machinery."""

    coord_names = ("w", "g")

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.m = dataset.m
        self.q = dataset.q
        self.names = list(dataset.names)
        self._ybar = dataset.y.mean()
        self._yc = dataset.y - self._ybar
        self._tss = float(self._yc @ self._yc)
        if self._tss == 0.0:
            raise ValueError("response is constant")
        self._Xc = dataset.X - dataset.X.mean(axis=0)
        self._XtX = self._Xc.T @ self._Xc
        self._Xty = self._Xc.T @ self._yc
        self._enumeration = None

    def _check_domain(self, coords):
        w, g = coords
        if not 0.0 < w < 1.0:
            raise InvalidHyperparameterError(f"w must lie in (0,1), got {w}")
        if g <= 0.0:
            raise InvalidHyperparameterError(f"g must be positive, got {g}")

    # per-model linear algebra
    def _chol(self, idx: np.ndarray) -> np.ndarray:
        G = self._XtX[np.ix_(idx, idx)]
        try:
            return np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise SingularDesignError(
                f"singular design for model {[self.names[j] for j in idx]}"
            ) from None

    def _ssr(self, idx: np.ndarray) -> float:
        if idx.size == 0:
            return 0.0
        L = self._chol(idx)
        half = solve_triangular(L, self._Xty[idx], lower=True, check_finite=False)
        return float(half @ half)

    def _rss_ratio(self, idx: np.ndarray) -> float:
        """(1 - R^2) for the model given by idx, clipped to be nonnegative."""
        ssr = self._ssr(idx)
        rss = self._tss - ssr
        if rss < 1e-10 * self._tss:
            # near-saturated fit: recompute from the residual vector itself
            L = self._chol(idx)
            beta = cho_solve((L, True), self._Xty[idx], check_finite=False)
            resid = self._yc - self._Xc[:, idx] @ beta
            rss = float(resid @ resid)
        return max(rss, 0.0) / self._tss

    def log_marginal_of_model(self, gamma, g: float) -> float:
        """log m(y | gamma, g) up to one additive constant shared by all models.

        The ratio against the null model is
        (1+g)^{(m-1-q_gamma)/2} [1 + g(1-R^2_gamma)]^{-(m-1)/2}.
        """
        gamma = np.asarray(gamma, dtype=bool)
        if g <= 0.0:
            raise InvalidHyperparameterError(f"g must be positive, got {g}")
        idx = np.flatnonzero(gamma)
        if idx.size > self.m - 2:
            raise SingularDesignError(
                f"model with {idx.size} predictors too large for m={self.m}"
            )
        return self._log_marginal_idx(idx, g)

    def _log_marginal_idx(self, idx: np.ndarray, g: float) -> float:
        rssr = self._rss_ratio(idx)
        return 0.5 * (self.m - 1 - idx.size) * math.log1p(g) \
            - 0.5 * (self.m - 1) * math.log1p(g * rssr)

    # Gibbs sampler
    def conditional_inclusion_prob(self, gamma, i: int, h) -> float:
        """p(gamma_i = 1 | gamma_{-i}, y) with (beta, sigma) integrated out."""
        w, g = self.validate_h(h)
        gamma = np.asarray(gamma, dtype=bool)
        base = gamma.copy()
        base[i] = False
        lm0 = self._log_marginal_idx(np.flatnonzero(base), g)
        base[i] = True
        try:
            lm1 = self._log_marginal_idx(np.flatnonzero(base), g)
        except SingularDesignError:
            return 0.0
        logit = math.log(w) - math.log1p(-w) + lm1 - lm0
        return _expit(logit)

    def gibbs_run(self, spec: ChainSpec) -> list[ModelState]:
        """Marginalized sweep over gamma, then exact (sigma, beta0, beta) draw.

        Each sweep updates every gamma_i from its Bernoulli full conditional
        under the integrated likelihood, then draws (sigma^2, beta0,
        beta_gamma) from their exact conditionals given gamma, so the chain on
        theta has the full posterior as its invariant law.  A singular
        candidate model is treated as having prior probability zero.
        """
        w, g = self.validate_h(spec.h)
        rng = np.random.default_rng(spec.seed)
        m, q = self.m, self.q
        shrink = g / (1.0 + g)
        log_odds = math.log(w) - math.log1p(-w)
        gamma = rng.random(q) < w
        if int(gamma.sum()) > m - 2:
            gamma[:] = False

        # memoized per-model log marginals (exact recomputation, cached; the
        # chain revisits a small set of models over and over)
        lm_cache: dict[bytes, float | None] = {}

        def log_marginal_cached(mask: np.ndarray) -> float | None:
            key = mask.tobytes()
            if key not in lm_cache:
                try:
                    if int(mask.sum()) > m - 2:
                        raise SingularDesignError("model too large")
                    lm_cache[key] = self._log_marginal_idx(np.flatnonzero(mask), g)
                except SingularDesignError:
                    lm_cache[key] = None
            return lm_cache[key]

        lm_cur = log_marginal_cached(gamma)
        if lm_cur is None:      # singular start: fall back to the null model
            gamma[:] = False
            lm_cur = log_marginal_cached(gamma)
        out: list[ModelState] = []
        warned = False
        for sweep in range(spec.burn_in + spec.length):
            for i in range(q):
                flipped = gamma.copy()
                flipped[i] = not flipped[i]
                lm_try = log_marginal_cached(flipped)
                if lm_try is None:
                    if not warned:
                        logger.warning(
                            "singular candidate model at predictor %s; "
                            "treating it as prior-probability zero", self.names[i])
                        warned = True
                    rng.random()  # keep the draw stream aligned
                    continue
                if gamma[i]:
                    lm1, lm0 = lm_cur, lm_try
                else:
                    lm1, lm0 = lm_try, lm_cur
                include = rng.random() < _expit(log_odds + lm1 - lm0)
                if include != gamma[i]:
                    gamma[i] = include
                    lm_cur = lm_try

            idx = np.flatnonzero(gamma)
            ssr = self._ssr(idx)
            a_scale = self._tss - shrink * ssr
            sigma2 = 0.5 * a_scale / rng.standard_gamma(0.5 * (m - 1))
            if idx.size:
                L = self._chol(idx)
                beta_hat = cho_solve((L, True), self._Xty[idx], check_finite=False)
                z = rng.standard_normal(idx.size)
                beta = shrink * beta_hat + math.sqrt(sigma2 * shrink) * \
                    solve_triangular(L.T, z, lower=False, check_finite=False)
            else:
                beta = np.empty(0)
            beta0 = rng.normal(self._ybar, math.sqrt(sigma2 / m))
            if sweep >= spec.burn_in:
                out.append(ModelState(gamma=gamma.copy(), sigma=math.sqrt(sigma2),
                                      beta0=float(beta0), beta=beta))
        return out

    # family contract
    def log_prior_weight(self, h, state: ModelState) -> float:
        w, g = self.validate_h(h)
        idx = np.flatnonzero(state.gamma)
        qg = idx.size
        xb = self._Xc[:, idx] @ state.beta
        t2 = float(xb @ xb) / state.sigma**2
        return qg * math.log(w) + (self.q - qg) * math.log1p(-w) \
            - 0.5 * qg * math.log(g) - 0.5 * t2 / g

    def sample_posterior(self, spec: ChainSpec) -> list[ModelState]:
        return self.gibbs_run(spec)

    def weight_stats(self, samples: Sequence[ModelState]) -> BlvsStats:
        n = len(samples)
        q_gamma = np.empty(n, dtype=np.int64)
        t2 = np.empty(n)
        gamma = np.zeros((n, self.q), dtype=bool)
        for p, st in enumerate(samples):
            idx = np.flatnonzero(st.gamma)
            q_gamma[p] = idx.size
            xb = self._Xc[:, idx] @ st.beta
            t2[p] = float(xb @ xb) / st.sigma**2
            gamma[p] = st.gamma
        return BlvsStats(q_gamma=q_gamma, t2=t2, gamma=gamma)

    def log_weights(self, h, stats: BlvsStats) -> np.ndarray:
        w, g = self.validate_h(h)
        return stats.q_gamma * (math.log(w) - math.log1p(-w) - 0.5 * math.log(g)) \
            + self.q * math.log1p(-w) - stats.t2 / (2.0 * g)

    def grad_log_weights(self, h, stats: BlvsStats) -> np.ndarray:
        w, g = self.validate_h(h)
        dw = stats.q_gamma / w - (self.q - stats.q_gamma) / (1.0 - w)
        dg = -0.5 * stats.q_gamma / g + stats.t2 / (2.0 * g * g)
        return np.column_stack([dw, dg])

    def concat_chains(self, chains):
        pooled: list[ModelState] = []
        for c in chains:
            pooled.extend(c)
        return pooled

    def inclusion_function(self, name: str) -> FunctionOfTheta:
        """Indicator f(theta) = gamma_i for the named predictor."""
        j = self.names.index(name)
        return FunctionOfTheta(
            f"inclusion:{name}",
            lambda samples: np.array([st.gamma[j] for st in samples], dtype=float),
        )

    def enumeration(self) -> "ModelEnumeration":
        if self._enumeration is None:
            self._enumeration = ModelEnumeration(self)
        return self._enumeration


class ModelEnumeration:
    """Exact posterior quantities by summing over all 2^q models.

    R^2_gamma does not depend on (w, g), so the expensive per-model fits are
    done once; every hyperparameter evaluation afterwards is a vectorized
    log-sum-exp over the cached models.
    """

    def __init__(self, family: BlvsFamily):
        q = family.q
        if q > ENUMERATION_MAX_Q:
            raise ValueError(f"enumeration supports q <= {ENUMERATION_MAX_Q}, got q={q}")
        self.family = family
        self.q = q
        n_models = 1 << q
        codes = np.arange(n_models, dtype=np.uint32)
        self.bits = (codes[:, None] >> np.arange(q)) & 1
        self.bits = self.bits.astype(bool)
        self.q_gamma = self.bits.sum(axis=1).astype(np.int64)
        rssr = np.empty(n_models)
        for code in range(n_models):
            rssr[code] = family._rss_ratio(np.flatnonzero(self.bits[code]))
        self.rss_ratio = rssr

    def log_model_weights(self, h) -> np.ndarray:
        """log[ prior(gamma) m(y|gamma,g) ] for every model, up to one constant."""
        w, g = self.family.validate_h(h)
        m = self.family.m
        return self.q_gamma * math.log(w) + (self.q - self.q_gamma) * math.log1p(-w) \
            + 0.5 * (m - 1 - self.q_gamma) * math.log1p(g) \
            - 0.5 * (m - 1) * np.log1p(g * self.rss_ratio)

    def log_marginal(self, h) -> float:
        """log m_h up to the same h-independent constant."""
        return float(logsumexp(self.log_model_weights(h)))

    def model_probs(self, h) -> np.ndarray:
        lw = self.log_model_weights(h)
        return np.exp(lw - logsumexp(lw))

    def inclusion_probs(self, h) -> np.ndarray:
        """P(gamma_i = 1 | y) for each predictor, computed with log-sum-exp."""
        lw = self.log_model_weights(h)
        total = logsumexp(lw)
        return np.array([
            math.exp(logsumexp(lw[self.bits[:, i]]) - total) for i in range(self.q)
        ])

    def exact_bf(self, h, h1) -> float:
        """Bayes factor B(h, h1) = m_h / m_{h1}; the shared constant cancels."""
        return math.exp(self.log_marginal(h) - self.log_marginal(h1))

    def exact_pe(self, h, f: FunctionOfTheta) -> float:
        """Exact posterior expectation of an indicator-style f(gamma).

        Supports functions of gamma only (evaluated per model), which covers
        the inclusion indicators used throughout.
        """
        probs = self.model_probs(h)
        vals = np.array([
            float(f([ModelState(gamma=row, sigma=1.0, beta0=0.0,
                                beta=np.zeros(int(row.sum())))]))
            for row in self.bits
        ])
        return float(probs @ vals)
