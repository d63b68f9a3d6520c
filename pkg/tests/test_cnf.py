import json
import os

import numpy as np
import pytest

import flowseg.tensor as T
from flowseg.cnf import (
    CnfConfig,
    CnfModel,
    binary_cross_entropy_np,
    cnf_preset,
    cond_gaussian_logprob,
    train_cnf,
)
from flowseg.tensor import Adam, ShapeError, Var


def small_config(**kw):
    base = dict(
        patch=8, levels=2, depth=2, hidden=8, prior_hidden=8, aux_hidden=8,
        iterations=50, batch=4, warmup=5, lr0=1e-3, seed=3,
    )
    base.update(kw)
    return CnfConfig(**base)


def random_pairs(n, patch, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, patch, patch))
    y = (rng.random((n, 1, patch, patch)) < 0.5).astype(float)
    return x, y


def test_cond_gaussian_logprob_single_element():
    got = cond_gaussian_logprob(np.zeros(1), np.zeros(1), np.ones(1))
    assert abs(got - (-0.9189385332)) < 1e-9


def test_cond_gaussian_logprob_at_mean():
    n = 17
    z = np.full(n, 2.5)
    got = cond_gaussian_logprob(z, z.copy(), np.ones(n))
    assert abs(got - (-n * 0.5 * np.log(2 * np.pi))) < 1e-12


def test_cond_gaussian_logprob_matches_pointwise_reference():
    from scipy.stats import norm

    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 4))
    mu = rng.normal(size=(3, 4))
    sigma = np.exp(rng.normal(size=(3, 4)) * 0.3)
    want = norm.logpdf(z, loc=mu, scale=sigma).sum()
    got = cond_gaussian_logprob(z, mu, sigma)
    assert abs(got - want) / abs(want) < 1e-12


def test_cond_gaussian_logprob_rejects_bad_sigma_and_shapes():
    with pytest.raises(ValueError):
        cond_gaussian_logprob(np.zeros(2), np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ShapeError):
        cond_gaussian_logprob(np.zeros(2), np.zeros(3), np.ones(3))


def test_prior_zero_init_gives_standard_base():
    model = CnfModel(small_config())
    _, y = random_pairs(3, 8, seed=2)
    mu, sigma = model.prior_params_np(y)
    assert mu.shape == (3, *model.z_k_shape)
    assert np.all(mu == 0.0)
    assert np.all(sigma == 1.0)


def test_prior_rejects_wrong_spatial_size():
    model = CnfModel(small_config())
    with pytest.raises(ShapeError):
        model.prior_params_np(np.zeros((2, 1, 4, 4)))


def test_identity_nll_is_standard_normal_of_permuted_input():
    model = CnfModel(small_config())
    model.flow.initialize_identity()
    x, y = random_pairs(4, 8, seed=3)
    nll, bpd = model.nll_np(x, y)
    d = 64
    want = 0.5 * np.log(2 * np.pi) * d + 0.5 * (x**2).sum(axis=(1, 2, 3))
    assert np.abs(nll - want).max() < 1e-10
    assert np.abs(bpd - nll / (d * np.log(2))).max() < 1e-12


def test_latent_is_independent_of_mask():
    model = CnfModel(small_config())
    model.flow.initialize_identity()
    x, y1 = random_pairs(4, 8, seed=4)
    _, y2 = random_pairs(4, 8, seed=5)
    zp1, zk1, ld1 = model.flow.forward_np(x)
    zp2, zk2, ld2 = model.flow.forward_np(x)
    assert np.array_equal(zk1, zk2) and np.array_equal(ld1, ld2)
    # and with a trained-looking prior the z's still cannot depend on y:
    # the mask never enters the flow, only the base density
    nll1, _ = model.nll_np(x, y1)
    nll2, _ = model.nll_np(x, y2)
    assert np.array_equal(nll1, nll2)  # zero-init prior: same density too


def test_var_and_np_nll_routes_agree():
    model = CnfModel(small_config())
    rng = np.random.default_rng(6)
    model.flow.randomize(rng, scale=0.1)
    model.prior.w_out.value = rng.normal(0.0, 0.1, size=model.prior.w_out.value.shape)
    model.prior.b_out.value = rng.normal(0.0, 0.1, size=model.prior.b_out.value.shape)
    x, y = random_pairs(4, 8, seed=7)
    model.flow.forward_np(x, init_actnorm=True)
    nll_np, bpd_np = model.nll_np(x, y)
    nll_v, bpd_v, _, _ = model.nll(x, y)
    assert np.abs(nll_v.value - nll_np).max() < 1e-10
    assert np.abs(bpd_v.value - bpd_np).max() < 1e-12


def test_nll_matches_brute_force_change_of_variables():
    # dim 1*4*4 = 16: dense finite-difference Jacobian is cheap
    model = CnfModel(small_config(patch=4))
    rng = np.random.default_rng(8)
    model.flow.randomize(rng, scale=0.1)
    model.prior.w_out.value = rng.normal(0.0, 0.1, size=model.prior.w_out.value.shape)
    model.prior.b_out.value = rng.normal(0.0, 0.1, size=model.prior.b_out.value.shape)
    model.flow.forward_np(rng.normal(size=(16, 1, 4, 4)), init_actnorm=True)

    x = rng.normal(size=(1, 1, 4, 4))
    y = (rng.random((1, 1, 4, 4)) < 0.5).astype(float)

    def flat_fwd(v):
        zp, zk, _ = model.flow.forward_np(v.reshape(1, 1, 4, 4))
        return np.concatenate([z.ravel() for z in zp] + [zk.ravel()])

    eps = 1e-6
    d = 16
    jac = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        jac[:, i] = (flat_fwd(x.ravel() + e) - flat_fwd(x.ravel() - e)) / (2 * eps)
    _, ld_fd = np.linalg.slogdet(jac)

    zp, zk, _ = model.flow.forward_np(x)
    mu, sigma = model.prior_params_np(y)
    lp = cond_gaussian_logprob(zk, mu, sigma)
    for z in zp:
        lp += cond_gaussian_logprob(z, np.zeros_like(z), np.ones_like(z))
    brute = -(lp + ld_fd)
    nll, _ = model.nll_np(x, y)
    assert abs(nll[0] - brute) / max(1.0, abs(brute)) < 1e-4


def test_doubling_sigma_adds_dlog2_at_mean():
    model = CnfModel(small_config())
    model.flow.initialize_identity()
    zc = model.z_k_shape[0]
    shapes = model.flow.z_shapes(8, 8)
    # x that maps to z_k = 0 (the conditional mean under the zero-init prior)
    z_parts = [np.zeros((2, *s)) for s in shapes[:-1]]
    x = model.flow.inverse_np(z_parts, np.zeros((2, *shapes[-1])))
    y = np.zeros((2, 1, 8, 8))
    base, _ = model.nll_np(x, y)
    model.prior.b_out.value[zc:] = np.log(2.0)  # sigma = 2 everywhere
    doubled, _ = model.nll_np(x, y)
    d_k = int(np.prod(model.z_k_shape))
    assert np.abs((doubled - base) - d_k * np.log(2.0)).max() < 1e-10


def test_aux_bce_oracles():
    model = CnfModel(small_config())
    model.flow.initialize_identity()
    x, y = random_pairs(2, 8, seed=9)
    _, zk, _ = model.flow.forward_np(x)

    # zeroed head -> logits 0 -> ln 2 for any mask
    model.aux.w_out.value[:] = 0.0
    model.aux.b_out.value[:] = 0.0
    bce = model.aux_bce(Var(zk), y)
    assert abs(float(bce.value) - np.log(2.0)) < 1e-12

    # saturated correct: logits +50 on all-ones mask
    model.aux.b_out.value[:] = 50.0
    assert float(model.aux_bce(Var(zk), np.ones_like(y)).value) < 1e-6
    # saturated wrong: logits -50 where mask is 1
    model.aux.b_out.value[:] = -50.0
    wrong = float(model.aux_bce(Var(zk), np.ones_like(y)).value)
    assert abs(wrong - 50.0) < 1e-6


def test_aux_bce_rejects_nonbinary_mask():
    model = CnfModel(small_config())
    model.flow.initialize_identity()
    x, y = random_pairs(1, 8, seed=10)
    _, zk, _ = model.flow.forward_np(x)
    with pytest.raises(ValueError):
        model.aux_bce(Var(zk), np.full_like(y, 0.5))


def test_train_step_zero_lr_keeps_params_and_repeats():
    cfg = small_config(lr0=0.0, warmup=0)
    model = CnfModel(cfg)
    opt = Adam(model.parameters())
    x, y = random_pairs(4, 8, seed=11)
    model.train_step(opt, x, y, 0)  # iteration 0 runs the data-dependent actnorm init
    before = {n: p.value.copy() for n, p in model.parameters()}
    r1 = model.train_step(opt, x, y, 1)
    for n, p in model.parameters():
        assert np.array_equal(p.value, before[n]), n
    r2 = model.train_step(opt, x, y, 2)
    assert r1["loss"] == r2["loss"]


def test_train_step_nan_reports_iteration():
    model = CnfModel(small_config())
    opt = Adam(model.parameters())
    x, y = random_pairs(4, 8, seed=12)
    model.train_step(opt, x, y, 0)
    x[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError, match="iteration 7"):
        model.train_step(opt, x, y, 7)


def test_zero_bce_weight_reduces_to_pure_likelihood():
    cfg = small_config(bce_weight=0.0)
    model = CnfModel(cfg)
    opt = Adam(model.parameters())
    x, y = random_pairs(4, 8, seed=13)
    rec = model.train_step(opt, x, y, 0)
    nll, _ = model.nll_np(x, y)  # params changed; recompute from the record instead
    assert rec["loss"] == pytest.approx(rec["nll_bpd"] * 64 * np.log(2), rel=1e-12)


def test_loss_gradients_match_finite_differences():
    model = CnfModel(small_config())
    rng = np.random.default_rng(14)
    x, y = random_pairs(4, 8, seed=15)
    model.flow.forward_np(x, init_actnorm=True)

    nll, _, _, zk = model.nll(x, y)
    loss = T.mean(nll) + model.aux_bce(zk, y) * model.config.bce_weight
    T.backward(loss)

    params = model.parameters()
    names = [n for n, _ in params]
    by_name = dict(params)
    picks = rng.choice(len(names), size=10, replace=False)
    eps = 1e-5
    for pi in picks:
        name = names[pi]
        p = by_name[name]
        flat = p.value.reshape(-1)
        ci = int(rng.integers(flat.size))
        keep = flat[ci]
        flat[ci] = keep + eps
        hi = model.loss_np(x, y)
        flat[ci] = keep - eps
        lo = model.loss_np(x, y)
        flat[ci] = keep
        numeric = (hi - lo) / (2 * eps)
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[ci])
        assert abs(analytic - numeric) / max(1.0, abs(numeric)) < 1e-3, name


def test_sampling_determinism_and_temperature_zero():
    model = CnfModel(small_config())
    model.flow.initialize_identity()
    _, y = random_pairs(3, 8, seed=16)
    a = model.sample(y, temperature=0.8, seed=21)
    b = model.sample(y, temperature=0.8, seed=21)
    c = model.sample(y, temperature=0.8, seed=22)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)

    cold1 = model.sample(y, temperature=0.0, seed=1)
    cold2 = model.sample(y, temperature=0.0, seed=999)
    assert np.array_equal(cold1, cold2)
    mu, _ = model.prior_params_np(y)
    shapes = model.flow.z_shapes(8, 8)
    want = model.flow.inverse_np([np.zeros((3, *s)) for s in shapes[:-1]], mu)
    assert np.array_equal(cold1, want)


def test_identity_model_samples_standard_normal_moments():
    model = CnfModel(small_config())
    model.flow.initialize_identity()
    y = np.zeros((1000, 1, 8, 8))
    x = model.sample(y, temperature=1.0, seed=5)
    n = 1000
    se_mean = 1.0 / np.sqrt(n)
    se_var = np.sqrt(2.0 / (n - 1))
    assert np.abs(x.mean(axis=0)).max() < 4.5 * se_mean
    assert np.abs(x.var(axis=0) - 1.0).max() < 4.5 * se_var


def test_sample_roundtrip_likelihood_consistency():
    model = CnfModel(small_config())
    rng = np.random.default_rng(17)
    model.flow.randomize(rng, scale=0.1)
    model.flow.forward_np(rng.normal(size=(8, 1, 8, 8)), init_actnorm=True)
    _, y = random_pairs(2, 8, seed=18)
    x = model.sample(y, temperature=1.0, seed=33)

    # regenerate the z the sampler drew and compare with the forward pass
    mu, sigma = model.prior_params_np(y)
    srng = np.random.default_rng(np.random.SeedSequence([33, 0x5A11]))
    shapes = model.flow.z_shapes(8, 8)
    parts = [srng.standard_normal((2, *s)) for s in shapes[:-1]]
    z_k = mu + sigma * srng.standard_normal((2, *shapes[-1]))
    zp_f, zk_f, ld_f = model.flow.forward_np(x)
    assert np.abs(zk_f - z_k).max() / max(1.0, np.abs(z_k).max()) < 1e-6
    for a, b in zip(zp_f, parts):
        assert np.abs(a - b).max() / max(1.0, np.abs(b).max()) < 1e-6

    lp = np.array([cond_gaussian_logprob(zk_f[i], mu[i], sigma[i]) for i in range(2)])
    for z in zp_f:
        lp += np.array([cond_gaussian_logprob(z[i], np.zeros_like(z[i]), np.ones_like(z[i])) for i in range(2)])
    nll, _ = model.nll_np(x, y)
    assert np.abs(nll - (-(lp + ld_f))).max() < 1e-6


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = CnfModel(small_config())
    rng = np.random.default_rng(19)
    model.flow.randomize(rng, scale=0.1)
    x, y = random_pairs(4, 8, seed=20)
    model.flow.forward_np(x, init_actnorm=True)
    nll_before, _ = model.nll_np(x, y)

    path = os.path.join(tmp_path, "ckpt")
    model.save(path)
    loaded, meta, _ = CnfModel.load(path)
    nll_after, _ = loaded.nll_np(x, y)
    assert np.array_equal(nll_before, nll_after)
    assert np.array_equal(model.sample(y, 0.5, 7), loaded.sample(y, 0.5, 7))


def test_training_resume_is_bit_exact(tmp_path):
    cfg = small_config(iterations=12, seed=5)
    x, y = random_pairs(16, 8, seed=21)

    one = os.path.join(tmp_path, "one")
    train_cnf(x, y, cfg, one, checkpoint_every=100)
    model_one, _, _ = CnfModel.load(os.path.join(one, "checkpoint"))

    two = os.path.join(tmp_path, "two")
    train_cnf(x, y, cfg, two, checkpoint_every=100, limit=5)
    train_cnf(x, y, cfg, two, checkpoint_every=100, resume=True)
    model_two, meta, _ = CnfModel.load(os.path.join(two, "checkpoint"))

    assert meta["iter"] == cfg.iterations - 1
    for (n1, p1), (n2, p2) in zip(model_one.parameters(), model_two.parameters()):
        assert n1 == n2 and np.array_equal(p1.value, p2.value), n1

    with open(os.path.join(two, "train_log.jsonl")) as fh:
        iters = [json.loads(line)["iter"] for line in fh]
    assert iters == list(range(cfg.iterations))


def test_conditioning_has_effect_after_training():
    cfg = small_config(iterations=100, batch=8, lr0=3e-3, warmup=5, seed=9)
    rng = np.random.default_rng(22)
    # masks: left half-plane or top half-plane; images carry matching structure
    ys, xs = [], []
    for i in range(32):
        m = np.zeros((8, 8))
        if i % 2:
            m[:, :4] = 1.0
        else:
            m[:4, :] = 1.0
        ys.append(m)
        xs.append(m * 1.5 + rng.normal(size=(8, 8)) * 0.3)
    xs = np.stack(xs)[:, None]
    ys = np.stack(ys)[:, None]

    model = CnfModel(cfg)
    opt = Adam(model.parameters())
    for it in range(cfg.iterations):
        idx = np.random.default_rng(np.random.SeedSequence([9, it])).integers(0, 32, size=8)
        model.train_step(opt, xs[idx], ys[idx], it)

    mu_a, sig_a = model.prior_params_np(ys[:1])
    mu_b, sig_b = model.prior_params_np(ys[1:2])
    assert np.abs(mu_a - mu_b).max() > 1e-3


def test_preset_shapes():
    desk = cnf_preset("desk")
    assert desk.patch == 16 and desk.levels == 2 and desk.depth == 4
    paper = cnf_preset("paper")
    assert paper.levels == 4 and paper.depth == 15 and paper.batch == 50
    assert paper.iterations == 396_800 and paper.lr0 == 1e-4
    with pytest.raises(ValueError):
        cnf_preset("huge")
    with pytest.raises(ValueError):
        CnfConfig(patch=10, levels=2)
