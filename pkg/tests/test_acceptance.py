"""Acceptance gate: seven criteria, one pass/fail line each.

Criterion 5 trains twelve-plus minutes per run at full scale; everything else
finishes in a couple of minutes combined.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from ssrefine.dataeval import MetricReport, builtin_spec, evaluate_refiner
from ssrefine.harness import TrainConfig, heldout_scenes, load_checkpoint, train
from ssrefine.losses import (
    gan_loss_d,
    gan_loss_g,
    hard_negative_weights,
    hdce_loss,
    src_loss,
)
from ssrefine.nets import Discriminator, DiscriminatorConfig
from ssrefine.patches import PatchEmbeddingSet
from ssrefine.rsmi import RulsifParams, prepare_scc, rsmi_from_pixels, scc_from_plan
from ssrefine.tensorcore import Tensor, check_gradients, ops
from ssrefine import ckpt

from .oracles import decoupled_infonce_oracle, src_oracle, unit_rows, vmf_weights_oracle

README = Path(__file__).resolve().parents[1] / "README.md"


def _report(n: int, ok: bool, detail: str) -> None:
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {n}: {detail}"


# -- criterion 1: documented mapping ----------------------------------------------------


def test_criterion_1_readme_maps_acceptance():
    ok = README.is_file()
    text = README.read_text() if ok else ""
    ok = ok and "## Acceptance criteria" in text
    rows = [f"| {i} |" in text for i in range(1, 8)]
    ok = ok and all(rows)
    _report(1, ok, f"README acceptance table present with {sum(rows)}/7 criterion rows")


# -- criterion 2: gradients of every loss term ------------------------------------------


def _grad_case(seed: int):
    """Returns (fn, leaf tensors, fd eps) for one seeded loss-term case."""
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:  # relation-preserving term through normalization
        raw_w = Tensor(rng.normal(size=(1, 5, 6)), requires_grad=True)
        raw_z = Tensor(rng.normal(size=(1, 5, 6)), requires_grad=True)

        def fn():
            pairs = PatchEmbeddingSet(
                w=[ops.l2_normalize(raw_w, axis=-1)], z=[ops.l2_normalize(raw_z, axis=-1)]
            )
            return src_loss(pairs)

        return fn, [raw_w, raw_z], 1e-5
    if kind == 1:  # structure term through a frozen ratio fit
        params = RulsifParams(basis=25, n_pixels=32)
        x = rng.uniform(-1, 1, size=(1, 3, 8, 8))
        y = Tensor(rng.uniform(-1, 1, size=(1, 3, 8, 8)), requires_grad=True)
        plan = prepare_scc(x, y.data, 32, params, np.random.default_rng(seed + 1))
        return (lambda: scc_from_plan(y, plan)), [y], 1e-5
    if kind == 2:  # hard-negative contrastive term
        raw_w = Tensor(rng.normal(size=(1, 4, 6)), requires_grad=True)
        raw_z = Tensor(rng.normal(size=(1, 4, 6)), requires_grad=True)
        tau = float(rng.uniform(0.1, 0.5))
        beta = float(rng.uniform(0.0, 2.0))

        def fn():
            pairs = PatchEmbeddingSet(
                w=[ops.l2_normalize(raw_w, axis=-1)], z=[ops.l2_normalize(raw_z, axis=-1)]
            )
            return hdce_loss(pairs, tau=tau, beta=beta)

        return fn, [raw_w, raw_z], 1e-5
    # kind == 3: adversarial terms through the score network
    disc = Discriminator(DiscriminatorConfig(base_width=4, n_stages=2), rng)
    real = Tensor(rng.uniform(-1, 1, size=(1, 3, 16, 16)))
    fake = Tensor(rng.uniform(-1, 1, size=(1, 3, 16, 16)), requires_grad=True)
    # detach() shares storage, which would let finite differences on `fake`
    # leak into the discriminator term; freeze an independent copy instead
    fake_const = Tensor(fake.data.copy())

    def fn():
        return ops.add(gan_loss_d(disc, real, fake_const), gan_loss_g(disc, fake))

    # leaky_relu kinks amplified by instance-norm scaling need a finer step
    return fn, [fake] + list(disc.params().values()), 1e-6


def test_criterion_2_gradient_suite():
    t0 = time.monotonic()
    cases = 100
    worst = 0.0
    for seed in range(cases):
        fn, tensors, eps = _grad_case(seed)
        worst = max(worst, check_gradients(fn, tensors, eps=eps, rtol=1e-4, atol=1e-7))
    elapsed = time.monotonic() - t0
    ok = elapsed < 120.0
    _report(2, ok, f"{cases} finite-difference cases within rtol 1e-4 "
                   f"(worst rel err past atol floor: {worst:.2e}), {elapsed:.1f}s")


# -- criterion 3: loss terms equal independent oracles ------------------------------------


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(0)
    worst_hdce = 0.0
    for _ in range(1000):
        w = [unit_rows(rng, 1, 6, 8)]
        z = [unit_rows(rng, 1, 6, 8)]
        got = hdce_loss(PatchEmbeddingSet([Tensor(a) for a in w], [Tensor(a) for a in z]),
                        tau=0.07, beta=0.0).item()
        worst_hdce = max(worst_hdce, abs(got - decoupled_infonce_oracle(w, z, 0.07)))

    worst_src = 0.0
    for _ in range(200):
        w = [unit_rows(rng, 2, 5, 8) for _ in range(2)]
        z = [unit_rows(rng, 2, 5, 8) for _ in range(2)]
        got = src_loss(PatchEmbeddingSet([Tensor(a) for a in w], [Tensor(a) for a in z])).item()
        worst_src = max(worst_src, abs(got - src_oracle(w, z)))

    worst_w = 0.0
    for _ in range(200):
        anchor = unit_rows(rng, 1, 1, 16)[0, 0]
        negs = unit_rows(rng, 1, 9, 16)[0]
        beta = float(rng.uniform(0.0, 4.0))
        got = hard_negative_weights(Tensor(anchor), Tensor(negs), beta).data
        worst_w = max(worst_w, float(np.max(np.abs(got - vmf_weights_oracle(anchor, negs, beta)))))

    ok = worst_hdce <= 1e-10 and worst_src <= 1e-10 and worst_w <= 1e-12
    _report(3, ok, f"max dev: contrastive {worst_hdce:.2e} (1000 runs), "
                   f"relation {worst_src:.2e}, weights {worst_w:.2e}")


# -- criterion 4: dependence estimator sanity ----------------------------------------------


def test_criterion_4_dependence_estimator():
    t0 = time.monotonic()
    params = RulsifParams(alpha=0.1, basis=100, ridge=0.1)
    n = 500
    indep_vals = []
    margins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        u = rng.uniform(-1, 1, size=(n, 3))
        copied = rsmi_from_pixels(u, u.copy(), params, np.random.default_rng(seed + 10_000))
        indep = rsmi_from_pixels(u, rng.uniform(-1, 1, size=(n, 3)), params,
                                 np.random.default_rng(seed + 20_000))
        indep_vals.append(indep)
        margins += copied > indep + 0.1
    mean_indep = float(np.mean(indep_vals))
    elapsed = time.monotonic() - t0
    ok = abs(mean_indep) <= 0.05 and margins >= 19 and elapsed < 60.0
    _report(4, ok, f"independent mean {mean_indep:+.4f} (|.|<=0.05), "
                   f"copy margin >0.1 in {margins}/20 seeds, {elapsed:.1f}s")


# -- criterion 5: the full objective beats its ablation ------------------------------------


@pytest.mark.slow
def test_criterion_5_end_to_end_ablation(tmp_path):
    # Known-failing at toy scale: on palette-only domains the contrastive
    # term (active in both arms) already anchors content, and the two
    # structure terms add no measurable benefit on top of it at any weight.
    # The gate asserts the intended ordering rather than the current
    # behavior; see "Criterion 5 status" in the README for the analysis.
    steps = 5000
    seeds = (0, 1, 2)
    keys = ("pixel_acc", "class_acc", "mean_iou")
    means = {}
    for variant, overrides in (("full", {}), ("ablation", {"lambda_src": 0.0, "lambda_scc": 0.0})):
        per_seed = {k: [] for k in keys}
        for seed in seeds:
            cfg = TrainConfig(seed=seed, steps=steps, **overrides)
            ckpt_path, _ = train(cfg, tmp_path / f"{variant}-s{seed}")
            state = load_checkpoint(ckpt_path)
            rep = evaluate_refiner(state.gen, heldout_scenes(cfg, 100), builtin_spec("toy-target"))
            for k in keys:
                per_seed[k].append(rep.to_dict()[k])
        means[variant] = {k: float(np.mean(per_seed[k])) for k in keys}
    ok = all(means["full"][k] > means["ablation"][k] for k in keys)
    detail = ", ".join(
        f"{k} {means['full'][k]:.4f} vs {means['ablation'][k]:.4f}" for k in keys
    )
    _report(5, ok, f"3-seed means (full vs ablation): {detail}")


# -- criterion 6: segmentation metrics ------------------------------------------------------


def test_criterion_6_metric_correctness():
    hand = MetricReport.from_confusion(np.array([[3, 1], [2, 2]]))
    exact = (
        hand.pixel_acc == pytest.approx(0.625, abs=1e-12)
        and hand.class_acc == pytest.approx(0.625, abs=1e-12)
        and hand.mean_iou == pytest.approx(0.45, abs=1e-12)
    )
    rng = np.random.default_rng(1)
    bound = True
    for _ in range(1000):
        cm = rng.integers(0, 25, size=(5, 5))
        cm[np.diag_indices(5)] += 1
        rep = MetricReport.from_confusion(cm)
        bound = bound and rep.mean_iou <= rep.class_acc + 1e-12
    ok = exact and bound
    _report(6, ok, f"hand confusion exact {exact}, IoU<=recall bound held in 1000 random cases")


# -- criterion 7: bit-exact reproducibility and resume ---------------------------------------


def test_criterion_7_determinism_and_resume(tmp_path):
    base = dict(seed=11, image_size=32, train_scenes=6, rsmi_pixels=96, rsmi_basis=64,
                patches_per_layer=24, batch_size=2, checkpoint_every=100, log_every=100)

    def params_bytes(path):
        arrays, _ = ckpt.load_tensors(path)
        return {k: v.tobytes() for k, v in arrays.items()}

    c1, l1 = train(TrainConfig(steps=6, **base), tmp_path / "r1")
    c2, l2 = train(TrainConfig(steps=6, **base), tmp_path / "r2")
    same_params = params_bytes(c1) == params_bytes(c2)
    cols = lambda p: [ln.rsplit(",", 1)[0] for ln in Path(p).read_text().splitlines()]
    same_losses = cols(l1) == cols(l2)  # all columns except wall_time

    c_full, _ = train(TrainConfig(steps=10, **base), tmp_path / "full")
    c_half, _ = train(TrainConfig(steps=5, **base), tmp_path / "half")
    c_res, _ = train(TrainConfig(steps=10, **base), tmp_path / "half", resume_from=c_half)
    same_resume = params_bytes(c_full) == params_bytes(c_res)

    ok = same_params and same_losses and same_resume
    _report(7, ok, f"fixed-seed params bitwise {same_params}, loss columns {same_losses}, "
                   f"5+5 resume == 10 straight {same_resume}")
