"""Independent numpy re-implementations used as test oracles.

Everything here is written as plain per-query loops against explicit
formulas, deliberately sharing no code with the package internals.
"""
import numpy as np


def softmax_1d(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def jsd_1d(p, q):
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def vmf_weights_oracle(anchor, negatives, beta):
    """softmax(beta * anchor . neg_i) by brute force."""
    return softmax_1d(beta * negatives @ anchor)


def src_oracle(w, z):
    """Mean JSD between input-side and output-side similarity distributions.

    w, z: lists of (B, S, E) arrays, one per tap layer.
    """
    layer_means = []
    for wl, zl in zip(w, z):
        b, s, _ = wl.shape
        total = 0.0
        for bi in range(b):
            for q in range(s):
                pw = np.delete(wl[bi] @ wl[bi, q], q)
                pz = np.delete(zl[bi] @ zl[bi, q], q)
                total += jsd_1d(softmax_1d(pw), softmax_1d(pz))
        layer_means.append(total / (b * s))
    return float(np.mean(layer_means))


def hdce_oracle(w, z, tau, beta):
    """Per-query loop: -s+/tau + log N + log sum_i w_i exp(s-_i/tau)."""
    layer_means = []
    for wl, zl in zip(w, z):
        b, s, _ = wl.shape
        n = s - 1
        total = 0.0
        for bi in range(b):
            for q in range(s):
                neg = np.delete(zl[bi], q, axis=0)
                wgt = softmax_1d(beta * (neg @ zl[bi, q]))
                logits = (neg @ wl[bi, q]) / tau
                shift = logits.max()
                lse = np.log(np.sum(wgt * np.exp(logits - shift))) + shift
                total += lse - (wl[bi, q] @ zl[bi, q]) / tau + np.log(n)
        layer_means.append(total / (b * s))
    return float(np.mean(layer_means))


def decoupled_infonce_oracle(w, z, tau):
    """Plain positive-dropped contrastive loss (no negative reweighting)."""
    layer_means = []
    for wl, zl in zip(w, z):
        b, s, _ = wl.shape
        total = 0.0
        for bi in range(b):
            for q in range(s):
                neg = np.delete(zl[bi], q, axis=0)
                logits = (neg @ wl[bi, q]) / tau
                shift = logits.max()
                lse = np.log(np.sum(np.exp(logits - shift))) + shift
                total += lse - (wl[bi, q] @ zl[bi, q]) / tau
        layer_means.append(total / (b * s))
    return float(np.mean(layer_means))


def unit_rows(rng, b, s, e):
    v = rng.normal(size=(b, s, e))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def rulsif_oracle(xp, xq, centers, sigma, alpha, ridge):
    """Closed-form relative density-ratio fit and divergence estimate."""

    def gram(x):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        return np.exp(-d2 / (2.0 * sigma**2))

    kp, kq = gram(xp), gram(xq)
    bdim = centers.shape[0]
    h_mat = alpha * (kp.T @ kp) / len(xp) + (1 - alpha) * (kq.T @ kq) / len(xq)
    theta = np.linalg.solve(h_mat + ridge * np.eye(bdim), kp.mean(axis=0))
    gp, gq = kp @ theta, kq @ theta
    div = gp.mean() - 0.5 * alpha * (gp**2).mean() - 0.5 * (1 - alpha) * (gq**2).mean() - 0.5
    return theta, float(div)
