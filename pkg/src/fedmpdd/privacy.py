"""Executable checks of the codec's privacy mathematics, plus the DLG attack.

The verifiers are Monte Carlo estimators that report an estimate, its
standard error and the closed-form target side by side; callers decide the
pass band.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .models import ModelKind, ModelState, one_hot
from .projection import ProjectionSpec, decode_mpdd, encode_mpdd, jl_directions, rademacher_rows

log = logging.getLogger(__name__)

# Monte Carlo trials processed per vectorized chunk
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class Estimate:
    """A Monte Carlo mean with its standard error and the analytic value."""

    estimate: float
    stderr: float
    target: float

    def within(self, n_sigma: float) -> bool:
        return abs(self.estimate - self.target) <= n_sigma * self.stderr

    @property
    def rel_error(self) -> float:
        if self.target == 0:
            return abs(self.estimate)
        return abs(self.estimate - self.target) / abs(self.target)


@dataclass(frozen=True)
class VarianceGap:
    """Per-coordinate diag(Var_gauss - Var_rademacher) and the totals."""

    gap: np.ndarray
    stderr: np.ndarray
    coordinate_target: np.ndarray  # 2 g_a^2, the exact diagonal
    isotropic_target: float  # 2 ||g||^2
    trace: Estimate


def _running(samples_iter):
    """Mean and standard error from streamed chunks of samples."""
    n = 0
    s = 0.0
    s2 = 0.0
    for x in samples_iter:
        n += x.shape[0]
        s = s + x.sum(axis=0)
        s2 = s2 + (x * x).sum(axis=0)
    mean = s / n
    var = (s2 - n * mean * mean) / (n - 1)
    return mean, np.sqrt(np.maximum(var, 0.0) / n)


def _trial_seeds(seed: int, lo: int, hi: int) -> np.ndarray:
    return ((np.arange(lo, hi, dtype=np.uint64) + np.uint64(seed) * np.uint64(0x100000001))
            & np.uint64(0xFFFFFFFF))


def mpdd_trials(g: np.ndarray, m: int, trials: int, seed: int = 0):
    """Yield chunks of MPDD estimates of ``g``, one fresh wire seed per trial."""
    d = g.size
    chunk = max(1, _CHUNK_ELEMS // (m * d))
    for lo in range(0, trials, chunk):
        hi = min(trials, lo + chunk)
        seeds = np.repeat(_trial_seeds(seed, lo, hi), m)
        js = np.tile(np.arange(m, dtype=np.uint64), hi - lo)
        U = rademacher_rows(seeds, js, d).reshape(hi - lo, m, d).astype(np.float64)
        s = U @ g
        yield np.einsum("tm,tmd->td", s, U) / m


def verify_relative_recon_error(
    d: int, m: int, g: Optional[np.ndarray] = None, trials: int = 100_000, seed: int = 0
) -> Estimate:
    """Monte Carlo E||g_hat - g||^2 / ||g||^2 against (d - 1) / m."""
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    if g is None:
        g = np.random.default_rng(seed).standard_normal(d)
    g = np.asarray(g, dtype=np.float64)
    if g.size != d:
        raise ValueError(f"g has length {g.size}, expected {d}")
    norm_sq = float(g @ g)
    if norm_sq == 0:
        raise ValueError("gradient must be non-zero")
    errs = (
        (np.sum((est - g) ** 2, axis=1) / norm_sq)[:, None]
        for est in mpdd_trials(g, m, trials, seed)
    )
    mean, se = _running(errs)
    return Estimate(float(mean[0]), float(se[0]), (d - 1) / m)


def verify_second_moment(g: np.ndarray, trials: int = 100_000, seed: int = 0) -> Estimate:
    """Single-direction E||g_hat||^2 against d ||g||^2."""
    g = np.asarray(g, dtype=np.float64)
    sq = (np.sum(est * est, axis=1)[:, None] for est in mpdd_trials(g, 1, trials, seed))
    mean, se = _running(sq)
    return Estimate(float(mean[0]), float(se[0]), g.size * float(g @ g))


def verify_variance_gap(g, trials: int = 1_000_000, seed: int = 0) -> VarianceGap:
    """Estimate diag(Var_gauss[g_hat]) - diag(Var_rademacher[g_hat]) for g_hat = (u.g) u.

    The Gaussian side uses numpy's PCG64 normal stream; the Rademacher side
    uses the codec's direction generator. Each coordinate's variance comes from
    the centred second moment of independent draws, so the standard error of
    the gap combines both sides.
    """
    if trials < 10_000:
        raise ValueError("need at least 10^4 trials")
    g = np.asarray(g, dtype=np.float64)
    d = g.size
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6A55])))
    chunk = max(1, _CHUNK_ELEMS // max(d, 1))

    def gauss():
        for lo in range(0, trials, chunk):
            u = rng.standard_normal((min(trials, lo + chunk) - lo, d))
            yield (u @ g)[:, None] * u

    def rad():
        for lo in range(0, trials, chunk):
            hi = min(trials, lo + chunk)
            u = rademacher_rows(_trial_seeds(seed, lo, hi), 0, d).astype(np.float64)
            yield (u @ g)[:, None] * u

    var_g, se_g = _variance(gauss(), g)
    var_r, se_r = _variance(rad(), g)
    gap = var_g - var_r
    stderr = np.sqrt(se_g**2 + se_r**2)
    norm_sq = float(g @ g)
    trace = Estimate(float(gap.sum()), float(np.sqrt(np.sum(stderr**2))), 2 * norm_sq)
    return VarianceGap(gap, stderr, 2 * g * g, 2 * norm_sq, trace)


def _variance(chunks, mean):
    """Per-coordinate variance about the known mean, with its standard error."""
    sq_dev = ((x - mean) ** 2 for x in chunks)
    return _running(sq_dev)


@dataclass(frozen=True)
class JlReport:
    m: int
    eps: float
    delta: float
    sketch_within: float  # fraction with |U^T g|^2 / m inside (1 +/- eps) |g|^2
    backproj_within: float  # fraction with |g_hat| <= (1 + eps) |g|
    backproj_second_moment: Estimate  # E |g_hat|^2 / |g|^2 against 1 + (d - 1) / m


def verify_jl(d: int, eps: float, delta: float, c: float = 8.0, trials: int = 2000,
              seed: int = 0, g: Optional[np.ndarray] = None) -> JlReport:
    """Norm preservation of the m-direction sketch with m = jl_directions(d, eps, delta, c)."""
    m = jl_directions(d, eps, delta, c)
    if g is None:
        g = np.random.default_rng(seed).standard_normal(d)
    g = np.asarray(g, dtype=np.float64)
    norm_sq = float(g @ g)
    sketch = []
    back = []
    chunk = max(1, _CHUNK_ELEMS // (m * d))
    for lo in range(0, trials, chunk):
        hi = min(trials, lo + chunk)
        seeds = np.repeat(_trial_seeds(seed, lo, hi), m)
        js = np.tile(np.arange(m, dtype=np.uint64), hi - lo)
        U = rademacher_rows(seeds, js, d).reshape(hi - lo, m, d).astype(np.float64)
        s = U @ g
        sketch.append(np.sum(s * s, axis=1) / m / norm_sq)
        est = np.einsum("tm,tmd->td", s, U) / m
        back.append(np.sum(est * est, axis=1) / norm_sq)
    sketch_r = np.concatenate(sketch)
    back_r = np.concatenate(back)
    return JlReport(
        m=m,
        eps=eps,
        delta=delta,
        sketch_within=float(np.mean(np.abs(sketch_r - 1) <= eps)),
        backproj_within=float(np.mean(np.sqrt(back_r) <= 1 + eps)),
        backproj_second_moment=Estimate(
            float(back_r.mean()), float(back_r.std(ddof=1) / np.sqrt(back_r.size)),
            1 + (d - 1) / m,
        ),
    )


def stacked_directions(seeds: Sequence[int], m: int, d: int) -> np.ndarray:
    seeds = np.asarray(seeds, dtype=np.uint64)
    return rademacher_rows(np.repeat(seeds, m), np.tile(np.arange(m), len(seeds)), d)


def elimination_rank(A: np.ndarray, rel_tol: float = 1e-9) -> int:
    """Numerical rank by Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=np.float64)
    rows, cols = A.shape
    if A.size == 0:
        return 0
    scale = np.abs(A).max()
    if scale == 0:
        return 0
    tol = rel_tol * scale
    rank = 0
    for col in range(cols):
        if rank == rows:
            break
        piv = rank + int(np.argmax(np.abs(A[rank:, col])))
        if abs(A[piv, col]) <= tol:
            continue
        if piv != rank:
            A[[rank, piv]] = A[[piv, rank]]
        below = A[rank + 1 :, col] / A[rank, col]
        A[rank + 1 :, col:] -= below[:, None] * A[rank, col:]
        rank += 1
    return rank


def verify_multi_round_rank(seeds: Sequence[int], m: int, d: int) -> dict:
    """Rank of the (T*m) x d matrix of directions an observer collects over T rounds."""
    if len(seeds) < 1:
        raise ValueError("need at least one round")
    rank = elimination_rank(stacked_directions(seeds, m, d))
    return {"rank": rank, "underdetermined": rank < d, "constraints": len(seeds) * m}


def verify_ldp_relative_error(g, tau: float, trials: int = 100_000, seed: int = 0) -> Estimate:
    """Monte Carlo E||zeta||^2 / ||g||^2 for Gaussian zeta, against d tau^2 / ||g||^2."""
    g = np.asarray(g, dtype=np.float64)
    norm_sq = float(g @ g)
    if norm_sq == 0:
        raise ValueError("gradient must be non-zero")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    d = g.size
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1D9])))
    chunk = max(1, _CHUNK_ELEMS // d)

    def rel():
        for lo in range(0, trials, chunk):
            z = tau * rng.standard_normal((min(trials, lo + chunk) - lo, d))
            yield (np.sum(z * z, axis=1) / norm_sq)[:, None]

    mean, se = _running(rel())
    return Estimate(float(mean[0]), float(se[0]), d * tau * tau / norm_sq)


def ldp_flip_frequency(g, tau: float, trials: int = 100_000, seed: int = 0) -> float:
    """Fraction of Gaussian perturbations with (g + zeta) . g < 0."""
    g = np.asarray(g, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF11])))
    z = tau * rng.standard_normal((trials, g.size))
    return float(np.mean((g + z) @ g < 0))


def mpdd_descent_margin(g: np.ndarray, wire_seed: int, m: int) -> float:
    """g_hat . g for one MPDD estimate; equals (1/m) sum_j s_j^2."""
    spec = ProjectionSpec(wire_seed, m, g.size)
    return float(decode_mpdd(encode_mpdd(g, spec), spec) @ g)


def feature_recovery_lower_bound(d: int, m: int, grad_norm: float, lipschitz: float) -> float:
    """Right-hand side (d - 1) ||g||^2 / (m L_v^2) of the input-recovery bound."""
    return (d - 1) * grad_norm**2 / (m * lipschitz**2)


def estimate_input_lipschitz(
    model: ModelKind, state: ModelState, probe_inputs, probe_labels, samples: int = 100,
    radius: float = 1.0, seed: int = 0,
) -> float:
    """Lower estimate of the input-Lipschitz constant of the parameter gradient.

    Pair t perturbs a probe input two ways with noise keyed by (seed, t), so
    the estimate over n samples is a max over the first n pairs and never
    decreases as ``samples`` grows.
    """
    if samples < 10:
        raise ValueError("need at least 10 samples")
    X = np.atleast_2d(np.asarray(probe_inputs, dtype=np.float64))
    Y = one_hot(np.atleast_1d(probe_labels), model.classes)
    best = 0.0
    for t in range(samples):
        rng = np.random.default_rng([seed, t])
        r = t % X.shape[0]
        v1 = X[r] + radius * rng.standard_normal(X.shape[1])
        v2 = X[r] + radius * rng.standard_normal(X.shape[1])
        dist = np.linalg.norm(v1 - v2)
        if dist == 0:
            continue
        G = model.per_sample_grads(state.params, np.stack([v1, v2]), np.stack([Y[r], Y[r]]))
        best = max(best, float(np.linalg.norm(G[0] - G[1]) / dist))
    return best


# -- image similarity ---------------------------------------------------------


def ssim(img_a, img_b, data_range: float = 1.0) -> float:
    """Single-window (global) SSIM with unbiased sample covariance."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two pixels")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("images contain NaN or Inf")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    a = a.ravel()
    b = b.ravel()
    mu_a, mu_b = a.mean(), b.mean()
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    cov = np.sum((a - mu_a) * (b - mu_b)) / (a.size - 1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(num / den)


# -- deep leakage from gradients ---------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 500
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_known: bool = True
    init_seed: int = 0
    finite_diff_h: float = 1e-4

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.finite_diff_h > 0:
            raise ValueError("finite_diff_h must be positive")


@dataclass
class AttackResult:
    reconstruction: np.ndarray
    losses: list[float]
    input_mse: float
    ssim: Optional[float]
    label_logits: Optional[np.ndarray] = None
    mse_history: Optional[list[float]] = None


class AttackDiverged(RuntimeError):
    pass


def image_shape(p: int):
    side = math.isqrt(p)
    return (side, side) if side * side == p and side > 1 else None


def dlg_attack(
    model: ModelKind,
    state: ModelState,
    observed: np.ndarray,
    true_input: np.ndarray,
    true_label: int,
    cfg: AttackConfig = AttackConfig(),
    init: Optional[np.ndarray] = None,
) -> AttackResult:
    """Reconstruct one private input by matching ``observed`` with dummy gradients.

    The matching loss ||g(v') - observed||^2 is differentiated with respect to
    the dummy input (and dummy label logits when the label is unknown) by
    central finite differences; the dummy is updated with Adam. The true
    sample is used only for scoring. Returns the lowest-loss iterate.
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (model.num_params,):
        raise ValueError(f"observed gradient length {observed.size} != {model.num_params}")
    true_input = np.asarray(true_input, dtype=np.float64).ravel()
    p, C = model.input_dim, model.classes
    rng = np.random.default_rng(cfg.init_seed)
    v = rng.standard_normal(p) if init is None else np.array(init, dtype=np.float64)
    y_true = one_hot([true_label], C)[0]
    if cfg.label_known:
        z = np.zeros(0)
    else:
        z = rng.standard_normal(C)
    x = np.concatenate([v, z])
    h = cfg.finite_diff_h
    n_free = x.size
    params = state.params

    def targets(zs):
        if cfg.label_known:
            return np.broadcast_to(y_true, (zs.shape[0], C))
        zs = zs - zs.max(axis=1, keepdims=True)
        e = np.exp(zs)
        return e / e.sum(axis=1, keepdims=True)

    def matching(points):
        G = model.per_sample_grads(params, points[:, :p], targets(points[:, p:]))
        diff = G - observed
        return np.einsum("ij,ij->i", diff, diff)

    eye = np.eye(n_free) * h
    m1 = np.zeros(n_free)
    m2 = np.zeros(n_free)
    best_x, best_loss = x.copy(), math.inf
    losses: list[float] = []
    mses: list[float] = []
    for it in range(cfg.iterations):
        # the centre gets its own one-row batch so it rounds like the observed gradient
        loss = float(matching(x[None, :])[0])
        vals = matching(np.concatenate([x + eye, x - eye]))
        if not np.isfinite(loss) or not np.all(np.isfinite(vals)):
            raise AttackDiverged(f"matching loss became non-finite at iteration {it}")
        losses.append(loss)
        mses.append(float(np.mean((x[:p] - true_input) ** 2)))
        if loss < best_loss:
            best_loss, best_x = loss, x.copy()
        if loss == 0.0:
            break
        grad = (vals[:n_free] - vals[n_free:]) / (2 * h)
        m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
        m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad * grad
        m1_hat = m1 / (1 - cfg.beta1 ** (it + 1))
        m2_hat = m2 / (1 - cfg.beta2 ** (it + 1))
        x = x - cfg.lr * m1_hat / (np.sqrt(m2_hat) + cfg.eps)

    v_hat = best_x[:p]
    shape = image_shape(p)
    score = ssim(v_hat.reshape(shape), true_input.reshape(shape)) if shape else None
    log.debug("dlg finished: best matching loss %.3e", best_loss)
    return AttackResult(
        reconstruction=v_hat,
        losses=losses,
        input_mse=float(np.mean((v_hat - true_input) ** 2)),
        ssim=score,
        label_logits=None if cfg.label_known else best_x[p:],
        mse_history=mses,
    )
