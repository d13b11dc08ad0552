import math

import numpy as np
import pytest

from subshift.errors import DimensionMismatch
from subshift.nnet import (
    ModelParams,
    adam_init,
    bce_loss_and_grad,
    cfair_loss_and_grad,
    forward,
    grad_reversal_backward,
    init_params,
    params_from_json,
    params_to_json,
    per_sample_losses,
    sgd_adam_step,
)

PARAM_FIELDS = ("w1", "b1", "w_heads", "b_heads", "w_adv", "b_adv")


def finite_difference_grads(params, field, loss_fn, step=1e-5):
    """Central differences on one parameter block, mutating in place."""
    flat = getattr(params, field).ravel()
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn(params)
        flat[i] = orig - step
        down = loss_fn(params)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(getattr(params, field).shape)


def assert_block_close(analytic, numeric, rel=1e-4):
    scale = max(float(np.linalg.norm(numeric)), 1e-12)
    err = float(np.linalg.norm(analytic - numeric)) / scale
    assert err <= rel, f"relative block error {err:.2e}"


def random_batch(rng, dim, batch, n_groups=4):
    x = rng.normal(size=(batch, dim))
    y = rng.integers(0, 2, size=batch)
    g = rng.integers(0, n_groups, size=batch)
    g[:n_groups] = np.arange(n_groups)  # every group present
    y[:2] = [0, 1]
    return x, y, g


class TestForward:
    def test_zero_weights_give_zero_logits(self):
        params = init_params(3, hidden=4, seed=0).map(np.zeros_like)
        logits, hidden = forward(params, np.ones((5, 3)))
        assert np.all(logits == 0.0)
        assert np.all(hidden == 0.0)

    def test_hand_computed_two_by_two(self):
        # identity encoder, sum head: logit = tanh(x0) + tanh(x1)
        params = ModelParams(
            w1=np.eye(2),
            b1=np.zeros(2),
            w_heads=np.array([[1.0, 1.0]]),
            b_heads=np.zeros(1),
        )
        logits, hidden = forward(params, np.array([[0.5, -0.25]]))
        assert hidden[0, 0] == pytest.approx(math.tanh(0.5), abs=1e-15)
        assert hidden[0, 1] == pytest.approx(math.tanh(-0.25), abs=1e-15)
        assert logits[0] == pytest.approx(math.tanh(0.5) + math.tanh(-0.25), abs=1e-15)

    def test_identical_inputs_identical_logits(self, rng):
        params = init_params(4, hidden=6, seed=3)
        x = rng.normal(size=4)
        la, _ = forward(params, np.stack([x, x]))
        assert la[0] == la[1]

    def test_multi_head_shape(self):
        params = init_params(3, hidden=4, n_heads=5, seed=1)
        logits, hidden = forward(params, np.zeros((7, 3)))
        assert logits.shape == (7, 5)
        assert hidden.shape == (7, 4)

    def test_rejects_wrong_feature_count(self):
        params = init_params(3, hidden=4, seed=0)
        with pytest.raises(DimensionMismatch):
            forward(params, np.zeros((2, 5)))


class TestBceLoss:
    def test_zero_logit_gives_ln2(self):
        params = init_params(3, hidden=4, seed=0).map(np.zeros_like)
        loss, _ = bce_loss_and_grad(params, np.ones((4, 3)), np.array([1, 1, 0, 1]))
        assert loss == pytest.approx(math.log(2.0), abs=1e-15)

    def test_doubling_weights_doubles_loss_and_grads(self, rng):
        params = init_params(4, hidden=5, seed=2)
        x, y, _ = random_batch(rng, 4, 8)
        w = rng.uniform(0.5, 2.0, size=8)
        loss1, g1 = bce_loss_and_grad(params, x, y, sample_weights=w)
        loss2, g2 = bce_loss_and_grad(params, x, y, sample_weights=2.0 * w)
        assert loss2 == 2.0 * loss1
        for f in PARAM_FIELDS[:4]:
            assert np.array_equal(getattr(g2, f), 2.0 * getattr(g1, f))

    def test_per_sample_losses_match_formula(self, rng):
        params = init_params(3, hidden=4, seed=5)
        x, y, _ = random_batch(rng, 3, 6)
        logits, _ = forward(params, x)
        want = np.log1p(np.exp(-np.abs(logits))) + np.maximum(logits, 0) - y * logits
        assert np.allclose(per_sample_losses(params, x, y), want, atol=1e-12)

    def test_mean_of_per_sample_losses_is_unweighted_loss(self, rng):
        params = init_params(3, hidden=4, seed=6)
        x, y, _ = random_batch(rng, 3, 10)
        loss, _ = bce_loss_and_grad(params, x, y)
        assert loss == pytest.approx(float(per_sample_losses(params, x, y).mean()), abs=1e-15)

    def test_multi_head_requires_routing(self):
        params = init_params(3, hidden=4, n_heads=2, seed=0)
        with pytest.raises(DimensionMismatch):
            bce_loss_and_grad(params, np.zeros((2, 3)), np.array([0, 1]))

    def test_routed_loss_uses_only_own_head(self, rng):
        """Perturbing an unused head leaves routed losses unchanged."""
        params = init_params(3, hidden=4, n_heads=3, seed=7)
        x, y, _ = random_batch(rng, 3, 6)
        head_ids = np.zeros(6, dtype=int)
        base = per_sample_losses(params, x, y, head_ids=head_ids)
        params.w_heads[2] += 10.0
        bumped = per_sample_losses(params, x, y, head_ids=head_ids)
        assert np.array_equal(base, bumped)


class TestGradientChecks:
    """Analytic gradients against central finite differences, blockwise."""

    @pytest.mark.parametrize("seed", range(3))
    def test_plain_bce(self, seed):
        rng = np.random.default_rng(100 + seed)
        params = init_params(5, hidden=7, seed=seed)
        x, y, _ = random_batch(rng, 5, 12)
        _, grads = bce_loss_and_grad(params, x, y)
        for f in PARAM_FIELDS[:4]:
            fd = finite_difference_grads(params, f, lambda p: bce_loss_and_grad(p, x, y)[0])
            assert_block_close(getattr(grads, f), fd)

    @pytest.mark.parametrize("seed", range(3))
    def test_weighted_bce(self, seed):
        rng = np.random.default_rng(200 + seed)
        params = init_params(4, hidden=6, seed=seed)
        x, y, _ = random_batch(rng, 4, 10)
        w = rng.uniform(0.1, 3.0, size=10)
        _, grads = bce_loss_and_grad(params, x, y, sample_weights=w)
        for f in PARAM_FIELDS[:4]:
            fd = finite_difference_grads(
                params, f, lambda p: bce_loss_and_grad(p, x, y, sample_weights=w)[0]
            )
            assert_block_close(getattr(grads, f), fd)

    @pytest.mark.parametrize("seed", range(3))
    def test_multi_head(self, seed):
        rng = np.random.default_rng(300 + seed)
        params = init_params(4, hidden=5, n_heads=4, seed=seed)
        x, y, g = random_batch(rng, 4, 12)
        _, grads = bce_loss_and_grad(params, x, y, head_ids=g)
        for f in PARAM_FIELDS[:4]:
            fd = finite_difference_grads(
                params, f, lambda p: bce_loss_and_grad(p, x, y, head_ids=g)[0]
            )
            assert_block_close(getattr(grads, f), fd)

    @pytest.mark.parametrize("seed", range(3))
    def test_adversarial(self, seed):
        """Encoder sees bce - mu*adv, adversary sees adv, heads see bce."""
        mu = 0.1
        rng = np.random.default_rng(400 + seed)
        params = init_params(4, hidden=5, adv_groups=3, seed=seed)
        x, y, g = random_batch(rng, 4, 14, n_groups=3)
        _, _, grads = cfair_loss_and_grad(params, x, y, g, mu)

        def bce_of(p):
            return cfair_loss_and_grad(p, x, y, g, mu)[0]

        def adv_of(p):
            return cfair_loss_and_grad(p, x, y, g, mu)[1]

        for f in ("w1", "b1"):
            fd = finite_difference_grads(params, f, lambda p: bce_of(p) - mu * adv_of(p))
            assert_block_close(getattr(grads, f), fd)
        for f in ("w_heads", "b_heads"):
            fd = finite_difference_grads(params, f, bce_of)
            assert_block_close(getattr(grads, f), fd)
        for f in ("w_adv", "b_adv"):
            fd = finite_difference_grads(params, f, adv_of)
            assert_block_close(getattr(grads, f), fd)

    def test_permutation_invariance(self, rng):
        params = init_params(4, hidden=5, n_heads=4, seed=9)
        x, y, g = random_batch(rng, 4, 12)
        w = rng.uniform(0.5, 1.5, size=12)
        perm = rng.permutation(12)
        loss_a, grads_a = bce_loss_and_grad(params, x, y, sample_weights=w, head_ids=g)
        loss_b, grads_b = bce_loss_and_grad(
            params, x[perm], y[perm], sample_weights=w[perm], head_ids=g[perm]
        )
        assert loss_a == pytest.approx(loss_b, rel=1e-12)
        for f in PARAM_FIELDS[:4]:
            assert np.allclose(getattr(grads_a, f), getattr(grads_b, f), rtol=1e-12, atol=1e-15)


class TestGradReversal:
    def test_mu_zero_matches_plain_bce(self, rng):
        params = init_params(4, hidden=5, adv_groups=3, seed=11)
        x, y, g = random_batch(rng, 4, 10, n_groups=3)
        bce, _, grads = cfair_loss_and_grad(params, x, y, g, mu=0.0)
        plain_loss, plain = bce_loss_and_grad(params, x, y)
        assert bce == pytest.approx(plain_loss, abs=1e-15)
        for f in PARAM_FIELDS[:4]:
            assert np.array_equal(getattr(grads, f), getattr(plain, f))

    def test_scales_by_minus_mu(self, rng):
        g = rng.normal(size=(3, 4))
        assert np.array_equal(grad_reversal_backward(g, 0.1), -0.1 * g)

    def test_handles_param_trees(self):
        params = init_params(3, hidden=4, seed=0)
        flipped = grad_reversal_backward(params, 2.0)
        assert np.array_equal(flipped.w1, -2.0 * params.w1)

    def test_composite_sign_via_finite_differences(self, rng):
        """Larger mu pushes the encoder gradient against the adversary's."""
        params = init_params(4, hidden=5, adv_groups=3, seed=13)
        x, y, g = random_batch(rng, 4, 12, n_groups=3)
        _, _, g_lo = cfair_loss_and_grad(params, x, y, g, mu=0.0)
        _, _, g_hi = cfair_loss_and_grad(params, x, y, g, mu=0.5)
        adv_part = (g_hi.w1 - g_lo.w1) / 0.5

        def adv_of(p):
            return cfair_loss_and_grad(p, x, y, g, mu=0.0)[1]

        fd = finite_difference_grads(params, "w1", adv_of)
        assert_block_close(adv_part, -fd)

    def test_rejects_model_without_adversary(self):
        params = init_params(3, hidden=4, seed=0)
        with pytest.raises(DimensionMismatch):
            cfair_loss_and_grad(params, np.zeros((2, 3)), [0, 1], [0, 1], mu=0.1)


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        params = init_params(3, hidden=4, seed=0)
        zeros = params.map(np.zeros_like)
        new, _ = sgd_adam_step(params, zeros, adam_init(params), lr=0.1)
        for f in PARAM_FIELDS[:4]:
            assert np.array_equal(getattr(new, f), getattr(params, f))

    def test_weight_decay_is_decoupled(self):
        params = init_params(3, hidden=4, seed=0)
        zeros = params.map(np.zeros_like)
        new, _ = sgd_adam_step(params, zeros, adam_init(params), lr=0.1, weight_decay=0.5)
        assert np.allclose(new.w1, params.w1 * (1.0 - 0.1 * 0.5), atol=1e-15)

    def test_quadratic_converges(self):
        """min 0.5*||p||^2: gradient is p itself."""
        params = init_params(2, hidden=3, seed=4)
        state = adam_init(params)
        for _ in range(500):
            params, state = sgd_adam_step(params, params, state, lr=0.01)
        for f in PARAM_FIELDS[:4]:
            assert np.all(np.abs(getattr(params, f)) < 1e-3)

    def test_bitwise_deterministic(self, rng):
        x, y, _ = random_batch(rng, 3, 8)

        def run():
            params = init_params(3, hidden=4, seed=7)
            state = adam_init(params)
            for _ in range(20):
                _, grads = bce_loss_and_grad(params, x, y)
                params, state = sgd_adam_step(params, grads, state, lr=1e-3, weight_decay=1e-4)
            return params

        a, b = run(), run()
        for f in PARAM_FIELDS[:4]:
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_loss_decreases_after_warmup(self):
        """Separable toy set, full batch, small lr: monotone past warmup."""
        rng = np.random.default_rng(21)
        x = np.concatenate([rng.normal(-2.0, 0.5, size=(40, 2)), rng.normal(2.0, 0.5, size=(40, 2))])
        y = np.repeat([0, 1], 40)
        params = init_params(2, hidden=4, seed=1)
        state = adam_init(params)
        losses = []
        for _ in range(200):
            loss, grads = bce_loss_and_grad(params, x, y)
            losses.append(loss)
            params, state = sgd_adam_step(params, grads, state, lr=0.01)
        for k in range(50, len(losses)):
            assert losses[k] <= losses[k - 1] + 1e-6
        assert losses[-1] < losses[0]


class TestSerialization:
    def test_round_trip_exact(self):
        params = init_params(5, hidden=6, n_heads=3, adv_groups=4, seed=17)
        back = params_from_json(params_to_json(params))
        for f in PARAM_FIELDS:
            assert np.array_equal(getattr(back, f), getattr(params, f))

    def test_round_trip_without_adversary(self):
        params = init_params(3, hidden=4, seed=2)
        back = params_from_json(params_to_json(params))
        assert back.w_adv is None and back.b_adv is None
        assert np.array_equal(back.w1, params.w1)

    def test_shape_header_present(self):
        import json as json_mod

        payload = json_mod.loads(params_to_json(init_params(3, hidden=4, seed=0)))
        assert payload["shapes"]["w1"] == [3, 4]
        assert len(payload["values"]["w1"]) == 12
