import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from confshield.attacks import (
    AttackConfig,
    AttackMethod,
    attack_dataset,
    craft_raw,
    craft_seed,
    cw_pgd,
    fgsm,
    fgsm_delta,
    parse_sidecar,
    pgd,
    project_l2,
    project_linf,
    psr,
    rescale_to_psr,
)
from confshield.classifier import init_params, input_gradient, loss_and_input_gradient
from confshield.errors import ConfigurationError, DomainError, ZeroPerturbationError
from confshield.signal import IQFrame, load_sigset, measure_power, sigset_bytes


def test_psr_examples():
    assert psr(2.0, 2.0) == 0.0
    assert psr(0.01, 1.0) == pytest.approx(-20.0, abs=1e-12)
    assert psr(0.0, 1.0) == -math.inf
    with pytest.raises(DomainError):
        psr(1.0, 0.0)


def test_rescale_examples():
    frame = np.vstack([np.ones(16), np.zeros(16)])
    delta = np.vstack([np.zeros(16), np.ones(16)])
    assert np.allclose(rescale_to_psr(delta, frame, -20.0), 0.1 * delta, rtol=1e-14)
    assert np.allclose(rescale_to_psr(delta, frame, 0.0), delta, rtol=1e-14)
    with pytest.raises(ZeroPerturbationError):
        rescale_to_psr(np.zeros((2, 16)), frame, -10.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-40.0, 10.0))
def test_rescale_hits_target_and_keeps_direction(seed, target):
    rng = np.random.default_rng(seed)
    frame, delta = rng.standard_normal((2, 2, 32)) * rng.uniform(0.01, 10, 2)[:, None, None]
    out = rescale_to_psr(delta, frame, target)
    assert abs(psr(measure_power(out), measure_power(frame)) - target) <= 0.01
    c = out.ravel() @ delta.ravel() / (delta.ravel() @ delta.ravel())
    assert c > 0 and np.allclose(out, c * delta, rtol=1e-12, atol=0)


def test_fgsm_sign_convention():
    g = np.array([[0.5, -0.2, 0.0]])
    assert np.array_equal(fgsm_delta(g, 0.1), np.array([[0.1, -0.1, 0.0]]))


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(0.001, 2.0))
def test_fgsm_values_in_three_levels(vals, eps):
    d = fgsm_delta(np.asarray(vals).reshape(2, 2), eps)
    assert set(np.unique(d)).issubset({-eps, 0.0, eps})


def test_linf_projection_example():
    assert project_linf(np.array([0.15, -0.3, 0.05]), 0.1).tolist() == [0.1, -0.1, 0.05]


@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6), st.floats(0.0, 5.0))
def test_linf_projection_idempotent_and_shrinking(vals, eps):
    d = np.asarray(vals)
    p = project_linf(d, eps)
    assert np.array_equal(project_linf(p, eps), p)
    assert np.all(np.abs(p) <= np.abs(d))


def test_l2_projection_example():
    d = np.zeros((2, 4))
    d[0, 0] = 2.0
    assert np.allclose(project_l2(d, 1.0), 0.5 * d)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0))
def test_l2_projection_preserves_direction(seed, radius):
    d = np.random.default_rng(seed).standard_normal((2, 8))
    p = project_l2(d, radius)
    c = np.sum(p * d) / np.sum(d * d)
    assert c >= 0 and np.allclose(p, c * d)
    assert np.linalg.norm(p) <= radius * (1 + 1e-12)


def test_fgsm_equals_single_step_pgd_from_zero():
    p = init_params(0)
    x = np.random.default_rng(1).standard_normal((5, 2, 32))
    y = np.array([0, 1, 2, 3, 4])
    eps = 0.05
    f, _ = craft_raw(p, x, y, AttackConfig("fgsm", epsilon=eps))
    g, _ = craft_raw(p, x, y, AttackConfig("pgd", epsilon=eps, steps=1, step_size_beta=eps,
                                           random_start=False))
    assert np.array_equal(f, g)


def test_zero_budget_gives_zero_delta():
    p = init_params(0)
    x = np.random.default_rng(1).standard_normal((3, 2, 32))
    for method in ("fgsm", "pgd", "cw"):
        d, _ = craft_raw(p, x, [0, 1, 2], AttackConfig(method, epsilon=0.0))
        assert np.all(d == 0)
    with pytest.raises(ZeroPerturbationError):
        fgsm(p, IQFrame(x[0]), 0, AttackConfig("fgsm", epsilon=0.0))


def test_cw_without_penalty_is_l2_pgd():
    p = init_params(2)
    x = np.random.default_rng(5).standard_normal((4, 2, 32))
    y = np.array([1, 3, 5, 7])
    eps, radius, beta = 0.05, 0.4, 0.0125
    got, _ = craft_raw(p, x, y, AttackConfig("cw", epsilon=eps, lambda_reg=0.0, l2_radius=radius,
                                             random_start=False, step_size_beta=beta, steps=6))
    d = np.zeros_like(x)
    for _ in range(6):
        _, g = loss_and_input_gradient(p, x + d, y)
        d = project_l2(d + beta * np.sign(g), radius)
    assert np.array_equal(got, d)


def test_cw_penalty_shrinks_perturbations(small_data, small_model):
    part = small_data.tagged("train")
    x, y = part.samples[:112], part.labels[:112]
    norms = {}
    for lam in (0.0, 1.0):
        d, _ = craft_raw(small_model, x, y, AttackConfig("cw", target_psr_db=-10.0, lambda_reg=lam))
        norms[lam] = np.mean(np.sqrt(np.sum(d * d, axis=(1, 2))))
    assert norms[1.0] < norms[0.0]


def test_pgd_raises_loss_on_average(small_data, small_model):
    part = small_data.tagged("train")
    _, traj = craft_raw(small_model, part.samples[:112], part.labels[:112],
                        AttackConfig("pgd", target_psr_db=-10.0))
    assert traj.shape == (11, 112)
    assert traj[-1].mean() >= traj[0].mean()


def test_per_frame_wrappers(small_data, small_model):
    f = small_data.frame(0)
    cfg = AttackConfig(target_psr_db=-15.0, seed=4)
    for fn, method in ((fgsm, AttackMethod.FGSM), (pgd, AttackMethod.PGD), (cw_pgd, AttackMethod.CW)):
        adv = fn(small_model, f, f.label, cfg)
        assert adv.method == method
        assert abs(adv.achieved_psr_db + 15.0) <= 0.01
        assert np.allclose(adv.perturbed, f.samples + adv.delta)
        assert adv.frame.segment_id == f.segment_id


def test_attack_dataset_contract(small_data, small_model):
    part = small_data.subset(np.arange(100))
    adv = attack_dataset(small_model, part, AttackConfig("fgsm", target_psr_db=-20.0))
    assert len(adv.dataset) == 100
    assert np.all(np.abs(adv.achieved_psr_db + 20.0) <= 0.01)
    # stored samples survive a SIGSET round trip unchanged
    from confshield.signal import parse_sigset
    assert np.array_equal(parse_sigset(sigset_bytes(adv.dataset)).samples, adv.dataset.samples)


def test_clean_pass_through(small_data, small_model):
    part = small_data.subset(np.arange(20))
    adv = attack_dataset(small_model, part, AttackConfig(None))
    assert sigset_bytes(adv.dataset) == sigset_bytes(part)


def test_attack_dataset_is_deterministic(small_data, small_model):
    part = small_data.subset(np.arange(40))
    cfg = AttackConfig("pgd", target_psr_db=-10.0, seed=8)
    a = attack_dataset(small_model, part, cfg)
    b = attack_dataset(small_model, part, cfg)
    assert sigset_bytes(a.dataset) == sigset_bytes(b.dataset)
    assert a.sidecar_text() == b.sidecar_text()


def test_attack_order_independent(small_data, small_model):
    # per-frame seeds come from (seed, segment, slice), not the row position
    part = small_data.subset(np.arange(24))
    cfg = AttackConfig("pgd", target_psr_db=-10.0, seed=8)
    perm = np.random.default_rng(0).permutation(24)
    a = attack_dataset(small_model, part, cfg)
    b = attack_dataset(small_model, part.subset(perm), cfg, batch_size=5)
    assert np.array_equal(a.dataset.samples[perm], b.dataset.samples)


def test_craft_seed_is_keyed():
    assert craft_seed(1, 2, 3) == craft_seed(1, 2, 3)
    assert len({craft_seed(1, 2, 3), craft_seed(1, 3, 2), craft_seed(2, 2, 3)}) == 3


def test_sidecar_round_trip(tmp_path, small_data, small_model):
    part = small_data.subset(np.arange(8))
    adv = attack_dataset(small_model, part, AttackConfig("cw", target_psr_db=-10.0))
    path = tmp_path / "adv.sigset"
    adv.save(path)
    rows = parse_sidecar((tmp_path / "adv.sigset.meta").read_text())
    assert len(rows) == 8
    assert {r["method"] for r in rows} == {"cw"}
    assert all(abs(float(r["achieved_psr_db"]) + 10.0) <= 0.01 for r in rows)
    assert np.array_equal(load_sigset(path).samples, adv.dataset.samples)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AttackConfig("pgd", steps=0).validate()
    with pytest.raises(ConfigurationError):
        AttackConfig("cw", lambda_reg=-1.0).validate()
    with pytest.raises(ConfigurationError):
        AttackConfig("pgd", step_size_beta=0.0).validate()
    with pytest.raises(ConfigurationError):
        AttackMethod.parse("deepfool")
    assert AttackMethod.parse("none") is None
