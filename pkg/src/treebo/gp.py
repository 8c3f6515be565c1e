"""Deep-kernel Gaussian process: Matérn-5/2 over learned latents.

The kernel is evaluated on the output of a feature map (the attention
encoder, or any fixed map for baselines and oracles). Feature-map weights
and kernel hyperparameters are fit jointly by full-batch Adam on the exact
negative log marginal likelihood of the standardized objective values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from treebo import autodiff as ad
from treebo import encoder as enc
from treebo.optim import AdamState, adam_step, lr_at_epoch

NOISE_FLOOR = 1e-8


@dataclass
class KernelParams:
    """Log-parameterized Matérn-5/2 hyperparameters and observation noise."""

    log_lengthscale: float = 0.0
    log_outputscale: float = 0.0
    log_noise: float = math.log(0.1)

    def as_array(self) -> np.ndarray:
        return np.array([self.log_lengthscale, self.log_outputscale, self.log_noise])

    @classmethod
    def from_array(cls, arr) -> "KernelParams":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_lengthscale)

    @property
    def outputscale2(self) -> float:
        return math.exp(2.0 * self.log_outputscale)

    @property
    def noise2(self) -> float:
        return math.exp(2.0 * self.log_noise) + NOISE_FLOOR

    def to_dict(self):
        return {
            "log_lengthscale": self.log_lengthscale,
            "log_outputscale": self.log_outputscale,
            "log_noise": self.log_noise,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["log_lengthscale"], d["log_outputscale"], d["log_noise"])


def matern52(z1, z2, kp: KernelParams) -> float:
    """Matérn-5/2 covariance between two latent vectors."""
    r = float(np.linalg.norm(np.asarray(z1, float) - np.asarray(z2, float)))
    a = math.sqrt(5.0) * r / kp.lengthscale
    return kp.outputscale2 * (1.0 + a + a * a / 3.0) * math.exp(-a)


def matern52_matrix(za, zb, kp: KernelParams) -> np.ndarray:
    """Cross-covariance matrix between row sets ``za`` and ``zb``."""
    za = np.asarray(za, float)
    zb = np.asarray(zb, float)
    sq = (
        (za * za).sum(1)[:, None]
        + (zb * zb).sum(1)[None, :]
        - 2.0 * za @ zb.T
    )
    r = np.sqrt(np.maximum(sq, 0.0))
    a = math.sqrt(5.0) / kp.lengthscale * r
    return kp.outputscale2 * (1.0 + a + a * a / 3.0) * np.exp(-a)


# ---------------------------------------------------------------------------
# feature maps

class AttentionFeatureMap:
    """The structure-aware encoder as the deep-kernel feature extractor."""

    def __init__(self, params: enc.EncoderParams, backend=None):
        if backend is None:
            from treebo.backend import get_backend

            backend = get_backend()
        self.params = params
        self.backend = backend

    @property
    def n_trainable(self) -> int:
        return self.params.n_params

    @property
    def flat(self) -> np.ndarray:
        return self.params.flat

    def prepare(self, configs):
        return enc.pack_configs(configs), len(configs)

    def latents(self, prepared) -> np.ndarray:
        batches, total = prepared
        return self.backend.encode(self.params, batches, total)

    def latents_with_vjp(self, prepared):
        batches, total = prepared
        return self.backend.encode_with_vjp(self.params, batches, total)

    def copy(self) -> "AttentionFeatureMap":
        return AttentionFeatureMap(self.params.copy(), self.backend)


class FixedVectorMap:
    """A frozen map of normalized value vectors (single-subspace inputs).

    ``matrix`` of shape (d, latent) projects the vectors; None means the
    identity. Carries no trainable weights.
    """

    def __init__(self, matrix: np.ndarray | None = None):
        self.matrix = None if matrix is None else np.asarray(matrix, float)
        self._empty = np.zeros(0)

    n_trainable = 0

    @property
    def flat(self) -> np.ndarray:
        return self._empty

    def prepare(self, configs):
        dims = {len(c.tokens) for c in configs}
        if len(dims) > 1:
            raise ValueError("fixed-map features require configurations of one subspace")
        vecs = np.array([[t.norm_value for t in c.tokens] for c in configs])
        return vecs if self.matrix is None else vecs @ self.matrix

    def latents(self, prepared) -> np.ndarray:
        return prepared

    def latents_with_vjp(self, prepared):
        return prepared, lambda dz: self._empty

    def copy(self) -> "FixedVectorMap":
        return FixedVectorMap(self.matrix)


# ---------------------------------------------------------------------------
# fit state and posterior

@dataclass
class PosteriorPrediction:
    mean: float
    variance: float


class FitState:
    """Trained feature map + kernel and the cached Cholesky of K over the data.

    ``feature_map``/``kernel`` hold the best-seen iterate (the surrogate);
    ``warm_fmap``/``warm_kernel``/``opt_state`` hold the final optimizer
    iterate so a later fit can continue Adam where this one stopped.
    """

    def __init__(self, feature_map, kernel: KernelParams, y_mean, y_std,
                 train_latents, chol, alpha, jitter,
                 warm_fmap=None, warm_kernel=None, opt_state=None):
        self.feature_map = feature_map
        self.kernel = kernel
        self.y_mean = y_mean
        self.y_std = y_std
        self.train_latents = train_latents
        self.chol = chol
        self.alpha = alpha
        self.jitter = jitter
        self.warm_fmap = warm_fmap if warm_fmap is not None else feature_map
        self.warm_kernel = warm_kernel if warm_kernel is not None else kernel
        self.opt_state = opt_state

    @property
    def n_train(self) -> int:
        return self.train_latents.shape[0]

    def standardize(self, y):
        return (np.asarray(y, float) - self.y_mean) / self.y_std

    def destandardize(self, y_std_units):
        return np.asarray(y_std_units, float) * self.y_std + self.y_mean


def _standardization(y: np.ndarray):
    y_mean = float(np.mean(y))
    y_std = float(np.std(y))
    if y_std < 1e-8:
        y_std = 1.0
    return y_mean, y_std


def _nll_graph(feature_map, kernel: KernelParams, prepared, y_standardized):
    """Build the tape graph of the NLL; returns (nll node, leaves, vjp)."""
    z_data, vjp = feature_map.latents_with_vjp(prepared)
    z = ad.leaf(z_data)
    k_leaves = [ad.leaf(np.array(v)) for v in kernel.as_array()]
    log_ell, log_s, log_noise = k_leaves
    ell = ad.exp(log_ell)
    s2 = ad.exp(ad.mul(log_s, 2.0))
    noise2 = ad.add(ad.exp(ad.mul(log_noise, 2.0)), NOISE_FLOOR)
    sqdist = ad.pairwise_sqdist(z)
    K = ad.matern52_from_sqdist(sqdist, ell, s2)
    n = y_standardized.size
    K_noisy = ad.add(K, ad.mul(ad.Tensor(np.eye(n)), noise2))
    nll = ad.gaussian_nll(K_noisy, y_standardized)
    return nll, z, k_leaves, vjp


def nll(observations, feature_map, kernel: KernelParams, prepared=None):
    """NLL value and gradients (feature-map flat, kernel 3-vector).

    ``observations`` is a (configs, y) pair in raw objective units.
    """
    configs, y = observations
    if len(configs) < 2:
        raise ValueError("need at least 2 observations")
    y = np.asarray(y, float)
    y_mean, y_std = _standardization(y)
    if prepared is None:
        prepared = feature_map.prepare(configs)
    node, z, k_leaves, vjp = _nll_graph(feature_map, kernel, prepared, (y - y_mean) / y_std)
    node.backward()
    feat_grads = vjp(z.grad)
    kern_grads = np.array([float(lf.grad) for lf in k_leaves])
    return float(node.data), feat_grads, kern_grads


class OptState:
    """Adam accumulators for the joint (feature-map, kernel) optimization."""

    def __init__(self, n_feat: int):
        self.feat = AdamState(n_feat)
        self.kern = AdamState(3)

    def copy(self) -> "OptState":
        dup = OptState(self.feat.m.size)
        for src, dst in ((self.feat, dup.feat), (self.kern, dup.kern)):
            dst.m[...] = src.m
            dst.v[...] = src.v
            dst.t = src.t
        return dup


def fit(observations, feature_map, kernel: KernelParams, epochs: int = 100,
        base_lr: float = 1e-3, opt_state: OptState | None = None) -> FitState:
    """Full-batch Adam on the NLL.

    The surrogate in the returned state is the best-seen iterate (so its NLL
    never exceeds the starting NLL); the final iterate and Adam accumulators
    ride along for warm-continued fits across loop iterations. The passed
    feature map, kernel, and optimizer state are left untouched: training
    runs on copies, so callers keep stable snapshots.
    """
    configs, y = observations
    if len(configs) < 2:
        raise ValueError("need at least 2 observations to fit")
    y = np.asarray(y, float)
    y_mean, y_std = _standardization(y)
    y_standardized = (y - y_mean) / y_std

    fmap = feature_map.copy()
    kern_arr = kernel.as_array()
    prepared = fmap.prepare(configs)

    opt = opt_state.copy() if opt_state is not None else OptState(fmap.n_trainable)
    best = None
    for epoch in range(epochs):
        node, z, k_leaves, vjp = _nll_graph(
            fmap, KernelParams.from_array(kern_arr), prepared, y_standardized)
        value = float(node.data)
        if best is None or value < best[0]:
            best = (value, fmap.flat.copy(), kern_arr.copy())
        node.backward()
        lr = lr_at_epoch(epoch, base_lr)
        if fmap.n_trainable:
            adam_step(fmap.flat, vjp(z.grad), opt.feat, lr)
        kern_grads = np.array([float(lf.grad) for lf in k_leaves])
        adam_step(kern_arr, kern_grads, opt.kern, lr)

    warm_fmap = fmap
    warm_kernel = KernelParams.from_array(kern_arr)
    final_value = _nll_value(fmap, warm_kernel, prepared, y_standardized)
    best_kern = warm_kernel
    if best[0] < final_value:
        best_fmap = fmap.copy()
        best_fmap.flat[...] = best[1]
        best_kern = KernelParams.from_array(best[2])
    else:
        best_fmap = fmap
    state = _finalize(best_fmap, best_kern, best_fmap.prepare(configs),
                      y_standardized, y_mean, y_std)
    state.warm_fmap = warm_fmap
    state.warm_kernel = warm_kernel
    state.opt_state = opt
    return state


def _nll_value(fmap, kernel, prepared, y_standardized):
    z = fmap.latents(prepared)
    K = matern52_matrix(z, z, kernel) + kernel.noise2 * np.eye(z.shape[0])
    L, _ = ad.cholesky_with_jitter(K)
    half = solve_triangular(L, y_standardized, lower=True, check_finite=False)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return 0.5 * (half @ half + logdet + y_standardized.size * np.log(2 * np.pi))


def _finalize(fmap, kernel, prepared, y_standardized, y_mean, y_std) -> FitState:
    z = fmap.latents(prepared)
    K = matern52_matrix(z, z, kernel) + kernel.noise2 * np.eye(z.shape[0])
    L, jitter = ad.cholesky_with_jitter(K)
    half = solve_triangular(L, y_standardized, lower=True, check_finite=False)
    alpha = solve_triangular(L.T, half, lower=False, check_finite=False)
    return FitState(fmap, kernel, y_mean, y_std, z, L, alpha, jitter)


def predict_batch(state: FitState, configs) -> tuple:
    """Posterior mean and variance (standardized units) for many queries."""
    prepared = state.feature_map.prepare(configs)
    z_query = state.feature_map.latents(prepared)
    k_star = matern52_matrix(state.train_latents, z_query, state.kernel)  # (N, Q)
    means = k_star.T @ state.alpha
    v = solve_triangular(state.chol, k_star, lower=True, check_finite=False)
    variances = state.kernel.outputscale2 - (v * v).sum(axis=0)
    return means, np.maximum(variances, 0.0)


def predict(state: FitState, query) -> PosteriorPrediction:
    means, variances = predict_batch(state, [query])
    return PosteriorPrediction(mean=float(means[0]), variance=float(variances[0]))
