"""Squared-loss mutual information between paired pixels, via a relative
density-ratio fit.

The ratio r(s) = p_joint(s) / (alpha p_joint(s) + (1-alpha) p_product(s)) over
6-dim (input RGB, output RGB) samples is fit with a Gaussian kernel model by
ridge-regularized least squares; the mutual-information surrogate is the
relative Pearson divergence evaluated with the fitted model. Estimation is
two-stage: the fit (centers, kernel width, theta) is frozen, and the training
loss differentiates only the kernel evaluations at output-dependent sample
values, negated so that higher dependence between input and output pixels
lowers the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError, NumericalError
from .tensorcore import Tensor, ops

_SIGMA_FLOOR = 1e-3


@dataclass
class RulsifParams:
    alpha: float = 0.1
    basis: int = 100          # kernel centers, capped at the sample count
    ridge: float = 0.1
    n_pixels: int = 256       # joint samples per image pair

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ContractError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.ridge <= 0:
            raise ContractError(f"ridge must be > 0, got {self.ridge}")
        if self.basis < 1 or self.n_pixels < 2:
            raise ContractError("basis >= 1 and n_pixels >= 2 required")


@dataclass
class RulsifModel:
    centers: np.ndarray       # (b, d)
    sigma: float
    alpha: float
    ridge: float
    theta: np.ndarray         # (b,)
    residual: float


def median_heuristic(x: np.ndarray) -> float:
    """Kernel width sqrt(median(d^2)/2) over strictly positive pairwise squared
    distances, floored away from zero."""
    n = x.shape[0]
    if n < 2:
        return 1.0
    d2 = np.sum(x * x, axis=1)
    sq = d2[:, None] + d2[None, :] - 2.0 * (x @ x.T)
    sq = np.maximum(sq[np.triu_indices(n, k=1)], 0.0)
    pos = sq[sq > 0]
    if pos.size == 0:
        return _SIGMA_FLOOR
    return max(float(np.sqrt(0.5 * np.median(pos))), _SIGMA_FLOOR)


def gaussian_gram(x: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    """exp(-||x_i - c_j||^2 / (2 sigma^2)) as an (n, b) matrix."""
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma * sigma))


def fit_ratio(p: np.ndarray, q: np.ndarray, params: RulsifParams, sigma: float | None = None) -> RulsifModel:
    """Least-squares fit of the relative density ratio of p-samples vs q-samples."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[1]:
        raise ContractError(f"fit_ratio: sample matrices disagree: {p.shape} vs {q.shape}")
    n_p, n_q = p.shape[0], q.shape[0]
    if sigma is None:
        sigma = median_heuristic(p)
    b = min(params.basis, n_p)
    centers = p[:b]
    kp = gaussian_gram(p, centers, sigma)
    kq = gaussian_gram(q, centers, sigma)
    hmat = (params.alpha / n_p) * (kp.T @ kp) + ((1.0 - params.alpha) / n_q) * (kq.T @ kq)
    hmat += params.ridge * np.eye(b)
    hvec = kp.mean(axis=0)
    try:
        factor = cho_factor(hmat, lower=True)
    except np.linalg.LinAlgError as e:
        cond = float(np.linalg.cond(hmat))
        raise NumericalError(f"ratio fit solve failed (condition ~{cond:.3e}): {e}") from e
    theta = cho_solve(factor, hvec)
    residual = float(np.linalg.norm(hmat @ theta - hvec))
    scale = float(np.linalg.norm(hvec))
    if residual > 1e-8 * max(scale, 1.0):
        cond = float(np.linalg.cond(hmat))
        raise NumericalError(
            f"ratio fit residual {residual:.3e} exceeds tolerance (condition ~{cond:.3e})"
        )
    return RulsifModel(centers=centers, sigma=float(sigma), alpha=params.alpha,
                       ridge=params.ridge, theta=theta, residual=residual)


def ratio_values(model: RulsifModel, x: np.ndarray) -> np.ndarray:
    return gaussian_gram(np.asarray(x, dtype=np.float64), model.centers, model.sigma) @ model.theta


def rsmi_estimate(model: RulsifModel, p: np.ndarray, q: np.ndarray) -> float:
    """Relative Pearson-divergence value of the fitted ratio on given samples."""
    gp = ratio_values(model, p)
    gq = ratio_values(model, q)
    a = model.alpha
    return float(gp.mean() - 0.5 * a * np.mean(gp * gp) - 0.5 * (1.0 - a) * np.mean(gq * gq) - 0.5)


def rsmi_from_pixels(u: np.ndarray, v: np.ndarray, params: RulsifParams,
                     rng: np.random.Generator) -> float:
    """Convenience estimator from paired pixel samples u_i ~ input, v_i ~ output."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 2:
        raise ContractError(f"rsmi_from_pixels: need matching (n, d) arrays, got {u.shape}/{v.shape}")
    perm = rng.permutation(u.shape[0])
    joint = np.concatenate([u, v], axis=1)
    shuffled = np.concatenate([u, v[perm]], axis=1)
    model = fit_ratio(joint, shuffled, params)
    return rsmi_estimate(model, joint, shuffled)


# -- training loss (two-stage, graph side) -------------------------------------


@dataclass
class SccPairPlan:
    locations: np.ndarray     # (n,) flat pixel indices
    perm: np.ndarray          # (n,) permutation for the product-side pairing
    fixed_points: int
    u: np.ndarray             # (n, C) input pixels at `locations`
    model: RulsifModel


@dataclass
class SccPlan:
    pairs: list[SccPairPlan] = field(default_factory=list)


def prepare_scc(x_data: np.ndarray, yhat_data: np.ndarray, n: int, params: RulsifParams,
                rng: np.random.Generator) -> SccPlan:
    """Stage one: sample pixel locations and fit one frozen ratio model per pair."""
    if x_data.shape != yhat_data.shape or x_data.ndim != 4:
        raise ContractError(f"prepare_scc: need matching (B,C,H,W), got {x_data.shape}/{yhat_data.shape}")
    b, c, h, w = x_data.shape
    cells = h * w
    n = min(n, cells)
    plan = SccPlan()
    for i in range(b):
        locs = np.sort(rng.choice(cells, size=n, replace=False)).astype(np.int64)
        perm = rng.permutation(n)
        u = np.asarray(x_data[i].reshape(c, cells)[:, locs].T, dtype=np.float64)
        v = np.asarray(yhat_data[i].reshape(c, cells)[:, locs].T, dtype=np.float64)
        joint = np.concatenate([u, v], axis=1)
        shuffled = np.concatenate([u, v[perm]], axis=1)
        model = fit_ratio(joint, shuffled, params)
        plan.pairs.append(SccPairPlan(
            locations=locs, perm=perm, fixed_points=int(np.sum(perm == np.arange(n))),
            u=u, model=model,
        ))
    return plan


def _graph_ratio(samples: Tensor, model: RulsifModel, dtype) -> Tensor:
    centers = ops.constant(model.centers.astype(dtype), dtype=dtype)
    theta = ops.constant(model.theta.astype(dtype).reshape(-1, 1), dtype=dtype)
    c2 = ops.constant(np.sum(model.centers * model.centers, axis=1, dtype=np.float64)
                      .astype(dtype)[None, :], dtype=dtype)
    s2 = ops.sum(ops.mul(samples, samples), axis=1, keepdims=True)
    cross = ops.mul(ops.matmul(samples, ops.transpose(centers)), -2.0)
    d2 = ops.add(ops.add(s2, cross), c2)
    k = ops.exp(ops.mul(d2, -1.0 / (2.0 * model.sigma * model.sigma)))
    return ops.reshape(ops.matmul(k, theta), (samples.shape[0],))


def scc_from_plan(yhat: Tensor, plan: SccPlan) -> Tensor:
    """Stage two: negated divergence estimate, differentiable through yhat only."""
    b, c, h, w = yhat.shape
    if len(plan.pairs) != b:
        raise ContractError(f"scc_from_plan: plan built for {len(plan.pairs)} pairs, batch is {b}")
    dtype = yhat.dtype
    flat = ops.reshape(yhat, (b, c, h * w))
    total = None
    for i, pair in enumerate(plan.pairs):
        v = ops.transpose(ops.take(flat[i], pair.locations, axis=1))      # (n, C)
        u = ops.constant(pair.u.astype(dtype), dtype=dtype)
        joint = ops.concat([u, v], axis=1)
        shuffled = ops.concat([u, ops.take(v, pair.perm, axis=0)], axis=1)
        gp = _graph_ratio(joint, pair.model, dtype)
        gq = _graph_ratio(shuffled, pair.model, dtype)
        a = pair.model.alpha
        est = ops.sub(
            ops.sub(ops.mean(gp), ops.mul(ops.mean(ops.mul(gp, gp)), 0.5 * a)),
            ops.add(ops.mul(ops.mean(ops.mul(gq, gq)), 0.5 * (1.0 - a)), 0.5),
        )
        total = est if total is None else ops.add(total, est)
    return ops.mul(total, -1.0 / b)


def scc_loss(x: Tensor | np.ndarray, yhat: Tensor, n: int, params: RulsifParams,
             rng: np.random.Generator) -> Tensor:
    """Structure-consistency loss: minus the per-pair divergence estimate, averaged."""
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x)
    plan = prepare_scc(x_data, yhat.data, n, params, rng)
    return scc_from_plan(yhat, plan)
