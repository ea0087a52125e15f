import numpy as np
import pytest
from scipy import integrate, stats

from autood.errors import ContractError
from autood.models.run_config import ControllerConfig
from autood.services import controller as ctrl
from autood.substrate.gradcheck import grad_check
from autood.substrate.tensor import Tensor

SLOTS = [2, 3]


@pytest.fixture
def state():
    return ctrl.init_controller(SLOTS, ControllerConfig(hidden_size=4), seed=0)


def test_weight_shapes_cover_every_slot():
    shapes = ctrl.weight_shapes([4, 4, 7], hidden=5)
    assert shapes["head/2/w"] == (5, 7)
    assert "embed/2" not in shapes and shapes["embed/1"] == (4, 5)
    assert shapes["lstm/1/w"] == (10, 20)


def test_gaussian_kl_matches_quadrature():
    for mean_q, sigma_q, mean_p, sigma_p in [(0.3, 0.5, 0.0, 1.0), (-1.0, 0.2, 0.5, 0.3), (0.0, 0.1, 0.0, 0.1)]:
        q, p = stats.norm(mean_q, sigma_q), stats.norm(mean_p, sigma_p)
        numeric, _ = integrate.quad(lambda x: q.pdf(x) * (q.logpdf(x) - p.logpdf(x)),
                                    mean_q - 12 * sigma_q, mean_q + 12 * sigma_q)
        exact = ctrl.gaussian_kl(mean_q, sigma_q, mean_p, sigma_p).item()
        assert exact == pytest.approx(numeric, abs=1e-6)
        assert exact >= 0.0


def test_kl_terms_are_non_negative(state, rng):
    assert ctrl.kl_prior(state).item() >= 0.0
    for _ in range(5):
        assert ctrl.sample_policy(state, rng).kl_sharpen.item() >= 0.0


def test_sample_actions_scores_given_sequences(state, rng):
    rollout = ctrl.sample_actions(state, state.mu, rng)
    assert len(rollout.actions) == 2 and rollout.log_probs.shape == (2,)
    assert all(0 <= a < size for a, size in zip(rollout.actions, SLOTS))
    scored = ctrl.sample_actions(state, state.mu, actions=rollout.actions)
    np.testing.assert_allclose(scored.log_probs.data, rollout.log_probs.data)
    assert np.all(scored.log_probs.data <= 0.0)
    with pytest.raises(ContractError):
        ctrl.sample_actions(state, state.mu, actions=[0, 3])
    with pytest.raises(ContractError):
        ctrl.sample_actions(state, state.mu, actions=[0])


def test_logits_are_bounded_by_the_tanh_constant(state, rng):
    rollout = ctrl.sample_actions(state, state.mu, rng)
    for logits in rollout.logits:
        assert np.all(np.abs(logits) <= state.config.tanh_constant)


def test_variational_loss_gradient(state):
    noise_rng = np.random.default_rng(3)
    noise = {name: noise_rng.standard_normal(state.mu[name].shape) for name in state.names}
    resample = {name: noise_rng.standard_normal(state.mu[name].shape) for name in state.names}

    def loss_for(mu_head, rho_head):
        state.mu["head/1/w"], state.rho["head/1/w"] = mu_head, rho_head
        phi = ctrl.sample_weights(state, noise=noise).phi
        theta, kl = ctrl.sharpen(state, phi, None, noise=resample)
        rollout = ctrl.sample_actions(state, theta, actions=[1, 2])
        return ctrl.variational_loss(state, rollout.log_probs, kl, episodes=4)

    point = [Tensor(state.mu["head/1/w"].data.copy()), Tensor(state.rho["head/1/w"].data.copy())]
    assert grad_check(loss_for, point) < 1e-4


def test_data_gradient_without_experience_is_zero(state, rng):
    phi = ctrl.sample_weights(state, rng).phi
    grads = ctrl.data_gradient(state, phi, [])
    assert all(not g.any() for g in grads.values())
    grads = ctrl.data_gradient(state, phi, [[1, 2], [0, 0]])
    assert any(g.any() for g in grads.values())


def test_sharpening_skips_non_finite_gradients(state, rng):
    phi = ctrl.sample_weights(state, rng).phi
    bad = {name: np.full(phi[name].shape, np.nan) for name in phi}
    theta, kl = ctrl.sharpen(state, phi, bad, rng)
    assert kl.item() == 0.0
    assert theta["embed/start"] is phi["embed/start"]


def test_intrinsic_reward_never_lowers_the_reward():
    assert ctrl.intrinsic_reward(0.7, 0.3, 0.01) == pytest.approx(0.703)
    assert ctrl.intrinsic_reward(0.7, 0.3, 0.0) == 0.7
    with pytest.raises(ContractError):
        ctrl.intrinsic_reward(0.7, 0.3, -1.0)


def test_update_keeps_sharpening_rates_non_negative(state, rng):
    policy = ctrl.sample_policy(state, rng)
    for tensor in state.eta.values():
        tensor.data[:] = 1e-9
    assert ctrl.apply_gradients(state, ctrl.variational_loss(state, policy.log_probs, policy.kl_sharpen, 1))
    assert all(np.all(t.data >= 0.0) for t in state.eta.values())


def test_controller_checkpoint_round_trip(tmp_path, state, rng):
    state.initial_hidden = ctrl.average_hidden([ctrl.sample_actions(state, state.mu, rng).hidden for _ in range(3)])
    ctrl.save_controller(state, tmp_path / "controller.aodt")
    restored = ctrl.load_controller(tmp_path / "controller.aodt", state.config)
    assert restored.slot_sizes == state.slot_sizes
    assert ctrl.greedy_actions(restored) == ctrl.greedy_actions(state)
    for name in state.names:
        np.testing.assert_array_equal(restored.rho[name].data, state.rho[name].data)


def test_zero_heads_sample_uniformly():
    state = ctrl.init_controller([4], ControllerConfig(hidden_size=4), seed=1)
    theta = dict(state.mu)
    theta["head/0/w"] = Tensor(np.zeros((4, 4)))
    theta["head/0/b"] = Tensor(np.zeros(4))
    rng = np.random.default_rng(5)
    draws = [ctrl.sample_actions(state, theta, rng).actions[0] for _ in range(2000)]
    counts = np.bincount(draws, minlength=4)
    assert stats.chisquare(counts).pvalue > 1e-3
    scored = ctrl.sample_actions(state, theta, actions=[2])
    assert scored.log_probs.item() == pytest.approx(np.log(0.25))


def test_sharpening_kl_is_the_squared_shift_over_the_prior():
    config = ControllerConfig(hidden_size=3, sigma_prior=0.1)
    state = ctrl.init_controller([2], config, seed=0)
    eta, delta_grad = 0.02, 1.5
    for name in state.names:
        state.rho[name].data[:] = ctrl.inverse_softplus(config.sigma_prior)
        state.eta[name].data[:] = eta
    phi = {name: Tensor(state.mu[name].data.copy()) for name in state.names}
    data_grad = {name: np.full(phi[name].shape, delta_grad) for name in state.names}
    _, kl = ctrl.sharpen(state, phi, data_grad, np.random.default_rng(0))
    delta = eta * delta_grad
    assert kl.item() == pytest.approx(delta ** 2 / (2 * config.sigma_prior ** 2), rel=1e-9)


def test_explicit_temperature_is_not_replaced_by_the_default(state, rng):
    with pytest.raises(ContractError):
        ctrl.sample_actions(state, state.mu, rng, temperature=0.0)
    sharp = ctrl.sample_actions(state, state.mu, actions=[1, 2], temperature=0.5)
    default = ctrl.sample_actions(state, state.mu, actions=[1, 2])
    assert not np.allclose(sharp.log_probs.data, default.log_probs.data)
