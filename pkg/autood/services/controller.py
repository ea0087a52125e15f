"""Bayesian two-layer LSTM policy over action slots.

Every controller weight w has a variational mean μ_w, a softplus-
parameterised scale σ_w = softplus(ρ_w) and a sharpening rate η_w. One
child is sampled per draw: φ ~ q(φ) = N(μ, σ²), then the draw is sharpened
on the previous step's action sequences, θ = φ − η⊙∇(−log p(D|φ)) + σ⊙ε′,
and actions are decoded slot by slot under θ. All KL terms are averaged
over the number of scalar weights.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from autood.errors import ContractError, FormatError, NumericError
from autood.models.run_config import ControllerConfig
from autood.substrate import functional as F
from autood.substrate import optim
from autood.substrate.checkpoint import load_tensors, save_tensors
from autood.substrate.tensor import Tensor, as_tensor, grad, log, reduce_sum, stack

logger = structlog.get_logger(__name__)

LSTM_LAYERS = 2
ADAM_BETA1 = 0.9

Hidden = List[Tuple[np.ndarray, np.ndarray]]


def inverse_softplus(value: float) -> float:
    return float(np.log(np.expm1(value)))


def gaussian_kl(mean_q, sigma_q, mean_p, sigma_p) -> Tensor:
    """Elementwise KL[N(mean_q, sigma_q²) ‖ N(mean_p, sigma_p²)]."""
    sigma_q = as_tensor(sigma_q)
    diff = as_tensor(mean_q) - mean_p
    return log(as_tensor(sigma_p)) - log(sigma_q) \
        + (sigma_q * sigma_q + diff * diff) / (2.0 * np.square(sigma_p)) - 0.5


@dataclass
class ControllerState:
    slot_sizes: Tuple[int, ...]
    config: ControllerConfig
    mu: Dict[str, Tensor]
    rho: Dict[str, Tensor]
    eta: Dict[str, Tensor]
    optimizer: optim.OptimizerState
    initial_hidden: Optional[Hidden] = None
    experience: List[List[int]] = field(default_factory=list)

    @property
    def names(self) -> List[str]:
        return list(self.mu)

    @property
    def n_weights(self) -> int:
        return int(sum(t.size for t in self.mu.values()))

    def sigma(self, name: str) -> Tensor:
        return F.softplus(self.rho[name])

    def trainable(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for prefix, table in (("mu", self.mu), ("rho", self.rho), ("eta", self.eta)):
            out.update({f"{prefix}/{name}": tensor for name, tensor in table.items()})
        return out

    def hidden(self) -> Hidden:
        if self.initial_hidden is not None:
            return [(h.copy(), c.copy()) for h, c in self.initial_hidden]
        zeros = np.zeros((1, self.config.hidden_size))
        return [(zeros.copy(), zeros.copy()) for _ in range(LSTM_LAYERS)]


class WeightDraw(NamedTuple):
    phi: Dict[str, Tensor]
    noise: Dict[str, np.ndarray]


class Rollout(NamedTuple):
    actions: List[int]
    log_probs: Tensor
    hidden: Hidden
    logits: List[np.ndarray]


class SampledPolicy(NamedTuple):
    theta: Dict[str, Tensor]
    actions: List[int]
    log_probs: Tensor
    kl_sharpen: Tensor
    hidden: Hidden


def weight_shapes(slot_sizes: Sequence[int], hidden: int) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {"embed/start": (1, hidden)}
    for layer in range(LSTM_LAYERS):
        shapes[f"lstm/{layer}/w"] = (2 * hidden, 4 * hidden)
        shapes[f"lstm/{layer}/b"] = (4 * hidden,)
    for t, size in enumerate(slot_sizes):
        shapes[f"head/{t}/w"] = (hidden, size)
        shapes[f"head/{t}/b"] = (size,)
        if t < len(slot_sizes) - 1:
            shapes[f"embed/{t}"] = (size, hidden)
    return shapes


def init_controller(slot_sizes: Sequence[int], config: Optional[ControllerConfig] = None,
                    seed: int = 0) -> ControllerState:
    config = config or ControllerConfig()
    slot_sizes = tuple(int(s) for s in slot_sizes)
    if not slot_sizes or min(slot_sizes) < 1:
        raise ContractError(f"controller needs at least one non-empty slot, got {slot_sizes}")
    rng = np.random.default_rng(seed)
    rho0 = inverse_softplus(config.sigma_init)
    mu, rho, eta = {}, {}, {}
    for name, shape in weight_shapes(slot_sizes, config.hidden_size).items():
        mu[name] = Tensor(rng.uniform(-config.init_range, config.init_range, size=shape), requires_grad=True)
        rho[name] = Tensor(np.full(shape, rho0), requires_grad=True)
        eta[name] = Tensor(np.full(shape, config.eta_lr_init), requires_grad=True)
    optimizer = optim.OptimizerState(kind="adam", learning_rate=config.learning_rate, momentum=ADAM_BETA1)
    return ControllerState(slot_sizes=slot_sizes, config=config, mu=mu, rho=rho, eta=eta, optimizer=optimizer)


def sample_weights(state: ControllerState, rng: Optional[np.random.Generator] = None,
                   noise: Optional[Dict[str, np.ndarray]] = None) -> WeightDraw:
    """Reparameterised draw φ = μ + σ⊙ε."""
    if noise is None:
        noise = {name: rng.standard_normal(state.mu[name].shape) for name in state.names}
    phi = {name: state.mu[name] + state.sigma(name) * noise[name] for name in state.names}
    return WeightDraw(phi=phi, noise=noise)


def data_gradient(state: ControllerState, phi: Dict[str, Tensor],
                  sequences: Sequence[Sequence[int]]) -> Dict[str, np.ndarray]:
    """∇_φ of the mean negative log-likelihood of ``sequences``, with φ held constant."""
    if not sequences:
        return {name: np.zeros(phi[name].shape) for name in phi}
    leaves = {name: Tensor(phi[name].data.copy(), requires_grad=True) for name in phi}
    total = None
    for actions in sequences:
        nll = -sample_actions(state, leaves, actions=actions).log_probs.sum()
        total = nll if total is None else total + nll
    loss = total / float(len(sequences))
    return dict(zip(leaves, grad(loss, list(leaves.values()))))


def sharpen(state: ControllerState, phi: Dict[str, Tensor], data_grad: Optional[Dict[str, np.ndarray]] = None,
            rng: Optional[np.random.Generator] = None,
            noise: Optional[Dict[str, np.ndarray]] = None) -> Tuple[Dict[str, Tensor], Tensor]:
    """θ = φ − η⊙data_grad + σ⊙ε′ and KL[q(θ|φ,D) ‖ N(φ, σ_prior²)] per weight."""
    if data_grad is not None and not all(np.all(np.isfinite(g)) for g in data_grad.values()):
        logger.warning("Posterior sharpening skipped", reason="non-finite data gradient")
        return dict(phi), Tensor(0.0)
    if noise is None:
        noise = {name: rng.standard_normal(phi[name].shape) for name in state.names}
    theta: Dict[str, Tensor] = {}
    total = None
    for name in state.names:
        sigma = state.sigma(name)
        g = data_grad[name] if data_grad is not None else np.zeros(phi[name].shape)
        shift = state.eta[name] * g
        theta[name] = phi[name] - shift + sigma * noise[name]
        term = reduce_sum(gaussian_kl(shift, sigma, 0.0, state.config.sigma_prior))
        total = term if total is None else total + term
    return theta, total / float(state.n_weights)


def _select(logp: np.ndarray, rng: Optional[np.random.Generator], greedy: bool) -> int:
    if greedy:
        return int(np.argmax(logp))
    p = np.exp(logp)
    return int(rng.choice(len(p), p=p / p.sum()))


def sample_actions(state: ControllerState, theta: Dict[str, Tensor], rng: Optional[np.random.Generator] = None,
                   actions: Optional[Sequence[int]] = None, greedy: bool = False,
                   temperature: Optional[float] = None, tanh_constant: Optional[float] = None) -> Rollout:
    """Decode one action sequence under ``theta``.

    logits_t = tanh_constant · tanh(head_t(h_t) / temperature); the chosen
    action's embedding feeds slot t+1. Passing ``actions`` scores a given
    sequence instead of sampling one.
    """
    temperature = state.config.temperature if temperature is None else temperature
    tanh_constant = state.config.tanh_constant if tanh_constant is None else tanh_constant
    if temperature <= 0 or tanh_constant <= 0:
        raise ContractError(f"temperature {temperature} and tanh_constant {tanh_constant} must be positive")
    if actions is not None and len(actions) != len(state.slot_sizes):
        raise ContractError(f"expected {len(state.slot_sizes)} actions, got {len(actions)}")
    if rng is None and actions is None and not greedy:
        raise ContractError("sampling needs a random generator")

    hidden = [(Tensor(h), Tensor(c)) for h, c in state.hidden()]
    inputs = theta["embed/start"]
    chosen: List[int] = []
    log_probs: List[Tensor] = []
    logits_seen: List[np.ndarray] = []
    for t, size in enumerate(state.slot_sizes):
        for layer in range(LSTM_LAYERS):
            h, c = F.lstm_cell(inputs, hidden[layer][0], hidden[layer][1],
                               theta[f"lstm/{layer}/w"], theta[f"lstm/{layer}/b"])
            hidden[layer] = (h, c)
            inputs = h
        head = inputs @ theta[f"head/{t}/w"] + theta[f"head/{t}/b"]
        logits = tanh_constant * F.tanh(head / temperature)
        logp = F.log_softmax(logits)
        if actions is not None:
            action = int(actions[t])
            if not 0 <= action < size:
                raise ContractError(f"action {action} outside slot {t} range [0, {size})")
        else:
            action = _select(logp.data[0], rng, greedy)
        chosen.append(action)
        log_probs.append(logp[0, action])
        logits_seen.append(logits.data[0].copy())
        if t < len(state.slot_sizes) - 1:
            inputs = theta[f"embed/{t}"][action:action + 1]
    final = [(h.data.copy(), c.data.copy()) for h, c in hidden]
    return Rollout(actions=chosen, log_probs=stack(log_probs), hidden=final, logits=logits_seen)


def sample_policy(state: ControllerState, rng: np.random.Generator,
                  data_grad_sequences: Optional[Sequence[Sequence[int]]] = None) -> SampledPolicy:
    """Draw φ, sharpen it on controller experience, and sample one child's actions."""
    draw = sample_weights(state, rng)
    sequences = state.experience if data_grad_sequences is None else data_grad_sequences
    try:
        theta, kl = sharpen(state, draw.phi, data_gradient(state, draw.phi, sequences), rng)
    except NumericError as exc:
        logger.warning("Posterior sharpening skipped", reason=exc.message)
        theta, kl = dict(draw.phi), Tensor(0.0)
    rollout = sample_actions(state, theta, rng)
    return SampledPolicy(theta=theta, actions=rollout.actions, log_probs=rollout.log_probs,
                         kl_sharpen=kl, hidden=rollout.hidden)


def kl_prior(state: ControllerState) -> Tensor:
    """KL[q(φ) ‖ N(0, hyperprior²)] averaged per weight."""
    total = None
    for name in state.names:
        term = reduce_sum(gaussian_kl(state.mu[name], state.sigma(name), 0.0, state.config.hyperprior_scale))
        total = term if total is None else total + term
    return total / float(state.n_weights)


def variational_loss(state: ControllerState, log_probs: Tensor, kl_sharpen: Tensor, episodes: int) -> Tensor:
    """−log p(D|θ) + KL[q(θ|φ,D) ‖ p(θ|φ)] + KL[q(φ) ‖ p(φ)] / C."""
    if episodes < 1:
        raise ContractError("episodes per epoch must be >= 1")
    return -log_probs.sum() + kl_sharpen + kl_prior(state) / float(episodes)


def intrinsic_reward(reward: float, kl_sharpen: float, eta_explore: float) -> float:
    if eta_explore < 0:
        raise ContractError("eta_explore must be >= 0")
    return float(reward) + eta_explore * max(float(kl_sharpen), 0.0)


def apply_gradients(state: ControllerState, loss: Tensor) -> bool:
    """One Adam step on μ, ρ, η; returns False when the step was rejected."""
    params = state.trainable()
    grads = dict(zip(params, grad(loss, list(params.values()))))
    try:
        optim.step(state.optimizer, params, grads)
    except NumericError as exc:
        logger.warning("Controller update skipped", error=exc.message)
        return False
    for tensor in state.eta.values():
        np.maximum(tensor.data, 0.0, out=tensor.data)
    return True


def greedy_actions(state: ControllerState) -> List[int]:
    return sample_actions(state, state.mu, greedy=True).actions


def average_hidden(hiddens: Sequence[Hidden]) -> Hidden:
    return [(np.mean([h[layer][0] for h in hiddens], axis=0), np.mean([h[layer][1] for h in hiddens], axis=0))
            for layer in range(LSTM_LAYERS)]


# -- checkpoints ---------------------------------------------------------------

def save_controller(state: ControllerState, path: Union[str, Path]) -> Path:
    tensors = {"ctrl/meta/slot_sizes": np.array(state.slot_sizes, dtype=np.float64)}
    for prefix, table in (("mu", state.mu), ("rho", state.rho), ("eta", state.eta)):
        for name, tensor in table.items():
            tensors[f"ctrl/{prefix}/{name}"] = tensor.data
    for layer, (h, c) in enumerate(state.hidden()):
        tensors[f"ctrl/hidden/{layer}/h"] = h
        tensors[f"ctrl/hidden/{layer}/c"] = c
    return save_tensors(path, tensors)


def load_controller(path: Union[str, Path], config: Optional[ControllerConfig] = None) -> ControllerState:
    tensors = load_tensors(path)
    if "ctrl/meta/slot_sizes" not in tensors:
        raise FormatError("controller checkpoint has no slot sizes", offset=0)
    slot_sizes = tuple(int(s) for s in tensors["ctrl/meta/slot_sizes"])
    hidden_size = tensors["ctrl/mu/embed/start"].shape[1]
    config = (config or ControllerConfig()).model_copy(update={"hidden_size": hidden_size})
    state = init_controller(slot_sizes, config)
    for prefix, table in (("mu", state.mu), ("rho", state.rho), ("eta", state.eta)):
        for name in table:
            table[name] = Tensor(tensors[f"ctrl/{prefix}/{name}"], requires_grad=True)
    state.initial_hidden = [(tensors[f"ctrl/hidden/{layer}/h"], tensors[f"ctrl/hidden/{layer}/c"])
                            for layer in range(LSTM_LAYERS)]
    return state
