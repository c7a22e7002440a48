"""Training objectives for the refiner.

Three content terms plus the adversarial pair:

* ``src_loss`` — for every query patch, build the softmax distribution of its
  similarities to the other patches of the same image, once on the input side
  and once on the output side, and penalize the Jensen-Shannon divergence
  between the two distributions.
* ``hdce_loss`` — contrastive term whose denominator drops the positive pair
  and reweights the remaining negatives by a von Mises-Fisher factor
  softmax(beta * sim(query, negative)), i.e. self-normalized importance
  weighting that emphasizes hard negatives. Gradients flow through the
  weights.
* ``gan_loss_d`` / ``gan_loss_g`` — non-saturating logistic GAN on patch
  score maps, computed via softplus for stability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingAbort
from .patches import PatchEmbeddingSet
from .tensorcore import Tensor, ops

LOG2 = math.log(2.0)


@dataclass
class LossWeights:
    lambda_src: float = 0.05
    lambda_scc: float = 1.0
    lambda_hdce: float = 1.0
    lambda_gan: float = 1.0
    tau: float = 0.07
    beta: float = 1.0

    def __post_init__(self):
        for name in ("lambda_src", "lambda_scc", "lambda_hdce", "lambda_gan"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ConfigError("tau", f"must be > 0, got {self.tau}")
        if self.beta < 0:
            raise ConfigError("beta", f"must be >= 0, got {self.beta}")


# -- small building blocks ----------------------------------------------------


def similarity_distribution(anchor: Tensor, negatives: Tensor) -> Tensor:
    """Softmax over inner products of one anchor (E,) against rows of (K, E)."""
    logits = ops.matmul(negatives, ops.reshape(anchor, (anchor.shape[-1], 1)))
    return ops.softmax(ops.reshape(logits, (negatives.shape[0],)), axis=0)


def hard_negative_weights(anchor: Tensor, negatives: Tensor, beta: float) -> Tensor:
    """vMF importance weights: softmax(beta * anchor . negative_i). beta=0 is uniform."""
    if beta < 0:
        raise ConfigError("beta", f"must be >= 0, got {beta}")
    logits = ops.matmul(negatives, ops.reshape(anchor, (anchor.shape[-1], 1)))
    scaled = ops.mul(ops.reshape(logits, (negatives.shape[0],)), float(beta))
    return ops.softmax(scaled, axis=0)


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    """JSD of two explicit distributions, with 0 log 0 = 0. Bounded by log 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def _offdiag_index(s: int) -> np.ndarray:
    """Flat indices into an (S, S) matrix selecting each row minus its diagonal."""
    idx = np.arange(s * s).reshape(s, s)
    mask = ~np.eye(s, dtype=bool)
    return idx[mask].reshape(s, s - 1)


def _pair_matrices(wl: Tensor, zl: Tensor, need_ww: bool):
    """Off-diagonal similarity logits per query: (B, S, S-1) tensors."""
    b, s, _ = wl.shape
    off = _offdiag_index(s).reshape(-1)
    diag = (np.arange(s) * s + np.arange(s)).astype(np.int64)

    def offdiag(sim):
        flat = ops.reshape(sim, (b, s * s))
        return ops.reshape(ops.take(flat, off, axis=1), (b, s, s - 1))

    zt = ops.transpose(zl, (0, 2, 1))
    sim_zz = ops.matmul(zl, zt)                      # output-side pairwise sims
    sim_wz = ops.matmul(wl, zt)                      # cross sims: rows w_q, cols z_i
    out = {
        "zz_off": offdiag(sim_zz),
        "wz_off": offdiag(sim_wz),
        "wz_diag": ops.reshape(ops.take(ops.reshape(sim_wz, (b, s * s)), diag, axis=1), (b, s)),
    }
    if need_ww:
        out["ww_off"] = offdiag(ops.matmul(wl, ops.transpose(wl, (0, 2, 1))))
    return out


# -- the three content losses ---------------------------------------------------


def src_loss(pairs: PatchEmbeddingSet) -> Tensor:
    """Mean Jensen-Shannon divergence between input-side and output-side
    per-query similarity distributions, over queries and tap layers."""
    per_layer = []
    for wl, zl in zip(pairs.w, pairs.z):
        mats = _pair_matrices(wl, zl, need_ww=True)
        p = ops.softmax(mats["ww_off"], axis=-1)
        q = ops.softmax(mats["zz_off"], axis=-1)
        m = ops.mul(ops.add(p, q), 0.5)
        kl_pm = ops.sum(ops.mul(p, ops.sub(ops.log(p), ops.log(m))), axis=-1)
        kl_qm = ops.sum(ops.mul(q, ops.sub(ops.log(q), ops.log(m))), axis=-1)
        jsd = ops.mul(ops.add(kl_pm, kl_qm), 0.5)    # (B, S)
        per_layer.append(ops.mean(jsd))
    total = per_layer[0]
    for t in per_layer[1:]:
        total = ops.add(total, t)
    return ops.mul(total, 1.0 / len(per_layer))


def hdce_loss(pairs: PatchEmbeddingSet, tau: float, beta: float) -> Tensor:
    """Decoupled contrastive loss with vMF-weighted negatives.

    Per query q: -s+/tau + log N + log sum_i w_i exp(s-_i/tau), where s+ is
    the aligned input/output similarity, the s- are the query's similarities
    to the other output-side patches, N = S-1, and w = softmax(beta * zz sims).
    """
    if tau <= 0:
        raise ConfigError("tau", f"must be > 0, got {tau}")
    if beta < 0:
        raise ConfigError("beta", f"must be >= 0, got {beta}")
    per_layer = []
    for wl, zl in zip(pairs.w, pairs.z):
        n_neg = wl.shape[1] - 1
        mats = _pair_matrices(wl, zl, need_ww=False)
        weights = ops.softmax(ops.mul(mats["zz_off"], float(beta)), axis=-1)
        logits = ops.mul(mats["wz_off"], 1.0 / tau)
        shift = ops.constant(logits.data.max(axis=-1, keepdims=True), dtype=logits.dtype)
        lse = ops.add(
            ops.log(ops.sum(ops.mul(weights, ops.exp(ops.sub(logits, shift))), axis=-1)),
            ops.reshape(shift, shift.shape[:-1]),
        )
        pos = ops.mul(mats["wz_diag"], 1.0 / tau)
        per_layer.append(ops.mean(ops.add(ops.sub(lse, pos), math.log(n_neg))))
    total = per_layer[0]
    for t in per_layer[1:]:
        total = ops.add(total, t)
    return ops.mul(total, 1.0 / len(per_layer))


# -- adversarial pair -------------------------------------------------------------


def gan_loss_d(disc, real: Tensor, fake: Tensor) -> Tensor:
    """Logistic discriminator loss on patch score maps; fake must be detached."""
    s_real = disc(real)
    s_fake = disc(fake)
    return ops.add(
        ops.mean(ops.softplus(ops.neg(s_real))),     # -E log sigma(D(y))
        ops.mean(ops.softplus(s_fake)),              # -E log(1 - sigma(D(yhat)))
    )


def gan_loss_g(disc, fake: Tensor) -> Tensor:
    """Non-saturating generator loss: -E log sigma(D(yhat))."""
    return ops.mean(ops.softplus(ops.neg(disc(fake))))


# -- combination --------------------------------------------------------------------


def total_loss(src: Tensor, scc: Tensor, hdce: Tensor, gan_g: Tensor, weights: LossWeights,
               step: int = -1) -> Tensor:
    """lambda-weighted sum; aborts on any non-finite term."""
    terms = {"src": src, "scc": scc, "hdce": hdce, "gan_g": gan_g}
    for name, t in terms.items():
        v = t.item()
        if not math.isfinite(v):
            raise TrainingAbort(name, step, v)
    return ops.add(
        ops.add(ops.mul(src, weights.lambda_src), ops.mul(scc, weights.lambda_scc)),
        ops.add(ops.mul(hdce, weights.lambda_hdce), ops.mul(gan_g, weights.lambda_gan)),
    )
