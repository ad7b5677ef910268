"""Diagonal-GMM UBM, total-variability training, and i-vector extraction."""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .features import FeatureMatrix

VARIANCE_FLOOR_SCALE = 1e-4  # floor = scale * global per-dimension variance


class SingularAccumulatorError(Exception):
    """Raised when an EM accumulator is singular (degenerate data or init)."""


@dataclass
class DiagGmm:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-10 or np.any(self.weights <= 0.0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0.0):
            raise ValueError("variances must be positive")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class BwStats:
    """Zeroth and centered first-order Baum-Welch statistics."""

    n: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        self.f = np.asarray(self.f, dtype=np.float64)
        if not (np.all(np.isfinite(self.n)) and np.all(np.isfinite(self.f))):
            raise ValueError("statistics contain non-finite entries")
        if np.any(self.n < 0.0):
            raise ValueError("occupancies must be non-negative")


@dataclass
class TvMatrix:
    """Total-variability matrix, (C*D) x R."""

    t: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.ndim != 2 or self.t.shape[1] < 1:
            raise ValueError("t must be a (C*D, R) matrix with R >= 1")
        if not np.all(np.isfinite(self.t)):
            raise ValueError("t contains non-finite entries")

    @property
    def ivector_dim(self) -> int:
        return self.t.shape[1]


@dataclass
class IVector:
    """Low-dimensional adaptation vector with the identifier it covers."""

    w: np.ndarray
    scope: str = ""

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not np.all(np.isfinite(self.w)):
            raise ValueError("i-vector contains non-finite entries")


def _log_gaussians(gmm: DiagGmm, frames: np.ndarray) -> np.ndarray:
    """Per-frame, per-component log N(x; m_c, diag(sigma2_c)), shape (T, C)."""
    inv_var = 1.0 / gmm.variances
    const = -0.5 * (
        gmm.dim * np.log(2.0 * np.pi) + np.log(gmm.variances).sum(axis=1)
    )
    # (x - m)^2 / sigma^2 expanded to avoid a (T, C, D) intermediate
    quad = (
        (frames**2) @ inv_var.T
        - 2.0 * frames @ (gmm.means * inv_var).T
        + ((gmm.means**2) * inv_var).sum(axis=1)
    )
    return const - 0.5 * quad


def gmm_log_likelihood(gmm: DiagGmm, frames: np.ndarray) -> float:
    """Total log-likelihood of a (T, D) frame block under the mixture."""
    frames = np.asarray(frames, dtype=np.float64)
    log_joint = _log_gaussians(gmm, frames) + np.log(gmm.weights)
    return float(logsumexp(log_joint, axis=1).sum())


def responsibilities(gmm: DiagGmm, frames: np.ndarray) -> np.ndarray:
    """Posterior component responsibilities, shape (T, C), rows sum to 1."""
    log_joint = _log_gaussians(gmm, frames) + np.log(gmm.weights)
    log_post = log_joint - logsumexp(log_joint, axis=1, keepdims=True)
    return np.exp(log_post)


def _kmeanspp_centers(frames: np.ndarray, c: int, rng) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared-distance sampling."""
    t = frames.shape[0]
    centers = np.empty((c, frames.shape[1]))
    centers[0] = frames[rng.integers(t)]
    d2 = ((frames - centers[0]) ** 2).sum(axis=1)
    for k in range(1, c):
        total = d2.sum()
        if total <= 0.0:  # all points coincide with a chosen center
            centers[k:] = centers[0]
            break
        centers[k] = frames[rng.choice(t, p=d2 / total)]
        d2 = np.minimum(d2, ((frames - centers[k]) ** 2).sum(axis=1))
    return centers


def train_ubm(features, c: int, iters: int, seed: int) -> DiagGmm:
    """Train a diagonal GMM by EM with k-means++ initialization.

    iters=0 returns the initialization: k-means++ means, global variance,
    uniform weights. Each EM iteration cannot decrease the total
    log-likelihood; variances are floored at a fraction of the global one.
    """
    if c < 1:
        raise ValueError("component count must be at least 1")
    frames = np.concatenate([m.frames for m in features], axis=0)
    if frames.shape[0] < 10 * c:
        raise ValueError(
            f"{frames.shape[0]} frames is too few for {c} components (need 10 per)"
        )
    global_var = frames.var(axis=0)
    floor = np.maximum(VARIANCE_FLOOR_SCALE * global_var, 1e-12)

    rng = np.random.default_rng(seed)
    means = _kmeanspp_centers(frames, c, rng)
    variances = np.tile(np.maximum(global_var, floor), (c, 1))
    weights = np.full(c, 1.0 / c)
    gmm = DiagGmm(weights, means, variances)

    t = frames.shape[0]
    for _ in range(iters):
        gamma = responsibilities(gmm, frames)
        n = gamma.sum(axis=0)
        n_safe = np.maximum(n, 1e-10)
        means = (gamma.T @ frames) / n_safe[:, None]
        second = (gamma.T @ (frames**2)) / n_safe[:, None]
        variances = np.maximum(second - means**2, floor)
        weights = np.maximum(n, 1e-10)
        weights = weights / weights.sum()
        gmm = DiagGmm(weights, means, variances)
    return gmm


def accumulate_stats(gmm: DiagGmm, x: FeatureMatrix) -> BwStats:
    """Accumulate n_c = sum_t gamma_t(c) and f_c = sum_t gamma_t(c)(x_t - m_c)."""
    if x.dim != gmm.dim:
        raise ValueError(f"feature dim {x.dim} does not match GMM dim {gmm.dim}")
    gamma = responsibilities(gmm, x.frames)
    n = gamma.sum(axis=0)
    f = gamma.T @ x.frames - n[:, None] * gmm.means
    return BwStats(n, f)


def _posterior(gmm: DiagGmm, tv: TvMatrix, stats: BwStats):
    """Posterior precision L = I + T' Sigma^-1 N T and mean of w."""
    c, d = gmm.num_components, gmm.dim
    r = tv.ivector_dim
    t3 = tv.t.reshape(c, d, r)
    inv_var = 1.0 / gmm.variances
    weighted = t3 * inv_var[:, :, None]  # Sigma^-1 T, per component row block
    precision = np.eye(r) + np.einsum("c,cdr,cds->rs", stats.n, weighted, t3)
    rhs = np.einsum("cdr,cd->r", weighted, stats.f)
    mean = np.linalg.solve(precision, rhs)
    return precision, mean, rhs


def extract_ivector(gmm: DiagGmm, tv: TvMatrix, stats: BwStats, scope: str = "") -> IVector:
    """MAP point estimate w = (I + T'S^-1NT)^-1 T'S^-1 f."""
    if not (np.all(np.isfinite(stats.n)) and np.all(np.isfinite(stats.f))):
        raise ValueError("non-finite Baum-Welch statistics")
    _, mean, _ = _posterior(gmm, tv, stats)
    return IVector(mean, scope=scope)


def tv_evidence(gmm: DiagGmm, tv: TvMatrix, stats_list) -> float:
    """Marginal log-likelihood of the stats under M = m + T w, up to a
    T-independent constant. Non-decreasing across train_total_variability
    iterations."""
    total = 0.0
    for stats in stats_list:
        precision, mean, rhs = _posterior(gmm, tv, stats)
        sign, logdet = np.linalg.slogdet(precision)
        if sign <= 0:
            raise SingularAccumulatorError("posterior precision not positive definite")
        total += -0.5 * logdet + 0.5 * float(rhs @ mean)
    return total


def train_total_variability(
    stats_list, gmm: DiagGmm, r: int, iters: int, seed: int, init: np.ndarray | None = None
) -> TvMatrix:
    """EM for the total-variability matrix with a standard-normal prior on w.

    init of None draws Gaussian entries scaled by 0.1 from the seed; an
    explicit all-zero init is rejected because it is a fixed point of EM.
    """
    stats_list = list(stats_list)
    if len(stats_list) < r:
        raise ValueError(f"need at least r={r} utterances of stats, got {len(stats_list)}")
    c, d = gmm.num_components, gmm.dim
    if init is None:
        rng = np.random.default_rng(seed)
        t = 0.1 * rng.standard_normal((c * d, r))
    else:
        t = np.asarray(init, dtype=np.float64)
        if t.shape != (c * d, r):
            raise ValueError(f"init must have shape {(c * d, r)}")
        if not np.any(t):
            raise SingularAccumulatorError(
                "all-zero initialization is a fixed point of EM"
            )
    tv = TvMatrix(t)

    n_all = np.stack([s.n for s in stats_list])  # (U, C)
    f_all = np.stack([s.f for s in stats_list])  # (U, C, D)
    for _ in range(iters):
        means = np.empty((len(stats_list), r))
        second = np.empty((len(stats_list), r, r))
        for i, stats in enumerate(stats_list):
            precision, mean, _ = _posterior(gmm, tv, stats)
            means[i] = mean
            second[i] = np.linalg.inv(precision) + np.outer(mean, mean)
        # per component: T_c solves T_c A_c = B_c; the 1/sigma^2 factor cancels
        a = np.einsum("uc,urs->crs", n_all, second)
        b = np.einsum("ucd,ur->cdr", f_all, means)
        t_new = np.empty_like(tv.t)
        for comp in range(c):
            try:
                solved = np.linalg.solve(a[comp], b[comp].T)
            except np.linalg.LinAlgError as exc:
                raise SingularAccumulatorError(
                    f"singular M-step accumulator for component {comp}"
                ) from exc
            t_new[comp * d : (comp + 1) * d] = solved.T
        tv = TvMatrix(t_new)
    return tv


def append_adaptation(x: FeatureMatrix, iv: IVector) -> FeatureMatrix:
    """Append the adaptation vector to every frame; dim grows by len(w)."""
    if iv.w.size == 0:
        return FeatureMatrix(x.frames.copy(), utterance_id=x.utterance_id)
    tiled = np.tile(iv.w, (x.num_frames, 1))
    return FeatureMatrix(
        np.concatenate([x.frames, tiled], axis=1), utterance_id=x.utterance_id
    )


_MAGIC = b"IVEX1"


def save_adaptation_model(path, gmm: DiagGmm, tv: TvMatrix) -> None:
    """Write UBM + TV matrix: magic "IVEX1", C/D/R as u32 LE, then weights,
    means, variances, T as little-endian float64."""
    c, d = gmm.num_components, gmm.dim
    r = tv.ivector_dim
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", c, d, r))
        for arr in (gmm.weights, gmm.means, gmm.variances, tv.t):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_adaptation_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: bad magic, not an adaptation model file")
    c, d, r = struct.unpack_from("<III", data, len(_MAGIC))
    pos = len(_MAGIC) + 12
    sizes = [c, c * d, c * d, c * d * r]
    shapes = [(c,), (c, d), (c, d), (c * d, r)]
    arrays = []
    for size, shape in zip(sizes, shapes):
        nbytes = size * 8
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated adaptation model")
        arrays.append(
            np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
        )
        pos += nbytes
    weights, means, variances, t = arrays
    return DiagGmm(weights, means, variances), TvMatrix(t)
