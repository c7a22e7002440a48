"""Loss terms against hand values and independent loop oracles."""
import math

import numpy as np
import pytest

from ssrefine.errors import ConfigError, TrainingAbort
from ssrefine.losses import (
    LossWeights,
    gan_loss_d,
    gan_loss_g,
    hard_negative_weights,
    hdce_loss,
    jensen_shannon,
    similarity_distribution,
    src_loss,
    total_loss,
)
from ssrefine.patches import PatchEmbeddingSet
from ssrefine.tensorcore import Tensor, check_gradients, ops

from .oracles import decoupled_infonce_oracle, hdce_oracle, src_oracle, unit_rows, vmf_weights_oracle

LN2 = math.log(2.0)


def tensor_pairs(w, z):
    return PatchEmbeddingSet(
        w=[Tensor(a) for a in w],
        z=[Tensor(a) for a in z],
    )


# -- building blocks ------------------------------------------------------------------


def test_similarity_distribution_two_point():
    anchor = Tensor(np.array([1.0, 0.0]))
    negs = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))  # sims 1 and 0
    p = similarity_distribution(anchor, negs).data
    assert p[0] == pytest.approx(0.7310585786300049, abs=1e-14)
    assert p[1] == pytest.approx(0.2689414213699951, abs=1e-14)


def test_hard_negative_weights_uniform_at_beta_zero():
    rng = np.random.default_rng(0)
    anchor = Tensor(unit_rows(rng, 1, 1, 8)[0, 0])
    negs = Tensor(unit_rows(rng, 1, 5, 8)[0])
    w = hard_negative_weights(anchor, negs, beta=0.0).data
    assert np.allclose(w, 0.2, atol=1e-14)


def test_hard_negative_weights_match_brute_force():
    rng = np.random.default_rng(1)
    for trial in range(20):
        anchor = unit_rows(rng, 1, 1, 16)[0, 0]
        negs = unit_rows(rng, 1, 9, 16)[0]
        beta = float(rng.uniform(0.0, 4.0))
        got = hard_negative_weights(Tensor(anchor), Tensor(negs), beta).data
        want = vmf_weights_oracle(anchor, negs, beta)
        assert np.allclose(got, want, atol=1e-12)


def test_hard_negative_weights_favor_similar():
    anchor = Tensor(np.array([1.0, 0.0]))
    negs = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    w = hard_negative_weights(anchor, negs, beta=2.0).data
    assert w[0] > w[1]


def test_jensen_shannon_reference_points():
    assert jensen_shannon([1.0, 0.0], [0.0, 1.0]) == pytest.approx(LN2, abs=1e-14)
    assert jensen_shannon([0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-14)
    p, q = [0.2, 0.8], [0.6, 0.4]
    assert jensen_shannon(p, q) == pytest.approx(jensen_shannon(q, p), abs=1e-14)
    assert 0.0 <= jensen_shannon(p, q) <= LN2


# -- src ------------------------------------------------------------------------------


def test_src_zero_when_sides_match():
    rng = np.random.default_rng(2)
    w = [unit_rows(rng, 2, 6, 8), unit_rows(rng, 2, 6, 8)]
    pairs = tensor_pairs(w, [a.copy() for a in w])
    assert src_loss(pairs).item() == pytest.approx(0.0, abs=1e-12)


def test_src_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for trial in range(10):
        w = [unit_rows(rng, 2, 5, 8) for _ in range(2)]
        z = [unit_rows(rng, 2, 5, 8) for _ in range(2)]
        got = src_loss(tensor_pairs(w, z)).item()
        assert got == pytest.approx(src_oracle(w, z), abs=1e-10)


def test_src_bounded_by_log2():
    rng = np.random.default_rng(4)
    w = [unit_rows(rng, 1, 4, 4) * 10.0]  # sharp logits push JSD toward the bound
    z = [unit_rows(rng, 1, 4, 4) * 10.0]
    val = src_loss(tensor_pairs(w, z)).item()
    assert 0.0 <= val <= LN2 + 1e-9


def test_src_gradients():
    rng = np.random.default_rng(5)
    raw_w = Tensor(rng.normal(size=(1, 4, 6)), requires_grad=True)
    raw_z = Tensor(rng.normal(size=(1, 4, 6)), requires_grad=True)

    def fn():
        pairs = PatchEmbeddingSet(
            w=[ops.l2_normalize(raw_w, axis=-1)], z=[ops.l2_normalize(raw_z, axis=-1)]
        )
        return src_loss(pairs)

    check_gradients(fn, [raw_w, raw_z])


# -- hdce -----------------------------------------------------------------------------


def test_hdce_two_patch_hand_value():
    # S=2: single negative, weight 1. query sims: s+ = 1, s- = 0, tau = 1
    w = [np.array([[[1.0, 0.0], [0.0, 1.0]]])]
    z = [np.array([[[1.0, 0.0], [0.0, 1.0]]])]
    val = hdce_loss(tensor_pairs(w, z), tau=1.0, beta=1.0).item()
    assert val == pytest.approx(-1.0, abs=1e-12)


def test_hdce_beta_zero_equals_plain_decoupled():
    rng = np.random.default_rng(6)
    for trial in range(10):
        w = [unit_rows(rng, 2, 6, 8)]
        z = [unit_rows(rng, 2, 6, 8)]
        got = hdce_loss(tensor_pairs(w, z), tau=0.07, beta=0.0).item()
        # uniform weights 1/N cancel the +log N offset exactly
        want = decoupled_infonce_oracle(w, z, 0.07)
        assert got == pytest.approx(want, abs=1e-10)


def test_hdce_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for trial in range(10):
        w = [unit_rows(rng, 2, 5, 8) for _ in range(2)]
        z = [unit_rows(rng, 2, 5, 8) for _ in range(2)]
        tau = float(rng.uniform(0.05, 1.0))
        beta = float(rng.uniform(0.0, 3.0))
        got = hdce_loss(tensor_pairs(w, z), tau=tau, beta=beta).item()
        assert got == pytest.approx(hdce_oracle(w, z, tau, beta), abs=1e-10)


def test_hdce_decreases_as_positive_aligns():
    # rotate the output-side positive toward the query; loss must fall monotonically
    e1 = np.array([1.0, 0.0])
    neg = np.array([0.0, 1.0])
    vals = []
    for ang in (1.2, 0.8, 0.4, 0.0):
        zq = np.array([math.cos(ang), math.sin(ang)])
        w = [np.stack([e1, neg])[None]]
        z = [np.stack([zq, neg])[None]]
        vals.append(hdce_loss(tensor_pairs(w, z), tau=0.5, beta=1.0).item())
    assert vals == sorted(vals, reverse=True)


def test_hdce_stable_at_small_tau():
    rng = np.random.default_rng(8)
    w = [unit_rows(rng, 1, 6, 8)]
    z = [unit_rows(rng, 1, 6, 8)]
    val = hdce_loss(tensor_pairs(w, z), tau=1e-3, beta=1.0).item()
    assert math.isfinite(val)
    assert val == pytest.approx(hdce_oracle(w, z, 1e-3, 1.0), rel=1e-10)


def test_hdce_gradients_flow_through_weights():
    rng = np.random.default_rng(9)
    raw_w = Tensor(rng.normal(size=(1, 5, 6)), requires_grad=True)
    raw_z = Tensor(rng.normal(size=(1, 5, 6)), requires_grad=True)

    def fn(beta):
        def inner():
            pairs = PatchEmbeddingSet(
                w=[ops.l2_normalize(raw_w, axis=-1)], z=[ops.l2_normalize(raw_z, axis=-1)]
            )
            return hdce_loss(pairs, tau=0.2, beta=beta)
        return inner

    check_gradients(fn(1.5), [raw_w, raw_z])
    # the z-gradient must depend on beta (weights sit in the graph)
    raw_z.grad = None
    fn(0.0)().backward()
    g0 = raw_z.grad.copy()
    raw_z.grad = None
    fn(3.0)().backward()
    assert not np.allclose(g0, raw_z.grad)


def test_hdce_parameter_validation():
    rng = np.random.default_rng(10)
    pairs = tensor_pairs([unit_rows(rng, 1, 3, 4)], [unit_rows(rng, 1, 3, 4)])
    with pytest.raises(ConfigError):
        hdce_loss(pairs, tau=0.0, beta=1.0)
    with pytest.raises(ConfigError):
        hdce_loss(pairs, tau=0.1, beta=-0.5)


# -- gan ------------------------------------------------------------------------------


class StubDisc:
    """Returns a constant score map regardless of input."""

    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        return Tensor(np.full((x.shape[0], 1, 2, 2), self.value))


def test_gan_hand_values_at_zero_scores():
    disc = StubDisc(0.0)
    x = Tensor(np.zeros((3, 3, 8, 8)))
    assert gan_loss_d(disc, x, x).item() == pytest.approx(2 * LN2, abs=1e-12)
    assert gan_loss_g(disc, x).item() == pytest.approx(LN2, abs=1e-12)


def test_gan_d_rewards_separation():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    confident = gan_loss_d(StubDisc(4.0), x, x)  # high score on BOTH: real ok, fake bad
    assert confident.item() > 2 * LN2  # penalized for scoring fakes high

    class SplitDisc:
        def __init__(self):
            self.calls = 0

        def __call__(self, t):
            self.calls += 1
            v = 4.0 if self.calls == 1 else -4.0  # real first, fake second
            return Tensor(np.full((t.shape[0], 1, 2, 2), v))

    sharp = gan_loss_d(SplitDisc(), x, x)
    assert sharp.item() < 2 * LN2


def test_gan_g_decreases_with_score():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    lo = gan_loss_g(StubDisc(2.0), x).item()
    hi = gan_loss_g(StubDisc(-2.0), x).item()
    assert lo < LN2 < hi


def test_gan_losses_differentiable_through_disc():
    from ssrefine.nets import Discriminator, DiscriminatorConfig

    disc = Discriminator(DiscriminatorConfig(base_width=4, n_stages=2), np.random.default_rng(0))
    fake = Tensor(np.random.default_rng(1).uniform(-1, 1, size=(2, 3, 16, 16)), requires_grad=True)
    gan_loss_g(disc, fake).backward()
    assert fake.grad is not None and np.any(fake.grad != 0)


# -- combination ---------------------------------------------------------------------


def test_total_loss_weighted_sum():
    w = LossWeights(lambda_src=0.05, lambda_scc=2.0, lambda_hdce=1.5, lambda_gan=0.5)
    terms = [Tensor(np.asarray(v)) for v in (0.4, 0.3, 0.2, 0.1)]
    got = total_loss(*terms, weights=w).item()
    assert got == pytest.approx(0.05 * 0.4 + 2.0 * 0.3 + 1.5 * 0.2 + 0.5 * 0.1, abs=1e-12)


def test_total_loss_aborts_on_nonfinite():
    w = LossWeights()
    good = Tensor(np.asarray(0.1))
    bad = Tensor(np.asarray(float("nan")))
    with pytest.raises(TrainingAbort) as exc:
        total_loss(good, bad, good, good, weights=w, step=17)
    assert exc.value.term == "scc"
    assert exc.value.step == 17


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_src=-0.1)
    with pytest.raises(ConfigError):
        LossWeights(tau=0.0)
    with pytest.raises(ConfigError):
        LossWeights(beta=-1.0)
