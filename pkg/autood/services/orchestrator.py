"""Curiosity-guided search with self-imitation, and its random-search baseline.

One epoch samples M candidates in M/n controller steps of n children. Every
controller step trains and scores its children on the shared ParamStore,
shapes their rewards with the information-gain bonus, and takes one
REINFORCE + variational Adam step. After the M candidates the top-K final
hidden states seed the next epoch, and the self-imitation sweep replays
buffered sequences with clipped advantages.
"""
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from autood.errors import AutoODError, ContractError
from autood.models.records import SearchRecord, TopModel
from autood.models.run_config import RunConfig
from autood.services import controller as ctrl
from autood.services import metrics
from autood.services.datasets import Splits
from autood.services.detectors import ParamStore, build, score, train_child
from autood.services.search_space import decode, random_actions, slot_sizes
from autood.substrate.tensor import Tensor

logger = structlog.get_logger(__name__)

Actions = Tuple[int, ...]


# -- replay buffer and baseline ------------------------------------------------

@dataclass
class ReplayBuffer:
    """Best (actions, raw reward) pairs seen so far, reward-descending, distinct by actions."""

    capacity: int = 10
    entries: List[Tuple[Actions, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def rewards(self) -> List[float]:
        return [r for _, r in self.entries]


def replay_insert(buffer: ReplayBuffer, actions: Sequence[int], reward: float) -> Tuple[ReplayBuffer, bool]:
    if not np.isfinite(reward):
        raise ContractError("replay rewards must be finite")
    actions = tuple(int(a) for a in actions)
    if buffer.capacity == 0:
        return buffer, False
    for position, (stored, stored_reward) in enumerate(buffer.entries):
        if stored == actions:
            if reward <= stored_reward:
                return buffer, False
            del buffer.entries[position]
            break
    else:
        if len(buffer.entries) >= buffer.capacity:
            if reward <= buffer.entries[-1][1]:
                return buffer, False
            buffer.entries.pop()
    position = next((i for i, (_, r) in enumerate(buffer.entries) if r < reward), len(buffer.entries))
    buffer.entries.insert(position, (actions, float(reward)))
    return buffer, True


@dataclass
class Baseline:
    value: float = 0.0
    decay: float = 0.95


def update_baseline(baseline: Baseline, rewards: Sequence[float]) -> Baseline:
    if len(rewards) == 0:
        raise ContractError("baseline update needs at least one reward")
    baseline.value = baseline.decay * baseline.value + (1.0 - baseline.decay) * float(np.mean(rewards))
    return baseline


# -- search log ------------------------------------------------------------------

class SearchLog:
    """Append-only record of every child evaluation."""

    def __init__(self, records: Optional[List[SearchRecord]] = None):
        self.records: List[SearchRecord] = list(records or [])

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def next_step(self) -> int:
        return self.records[-1].step + 1 if self.records else 0

    def append(self, record: SearchRecord) -> SearchRecord:
        if record.step != self.next_step:
            raise ContractError(f"log step {record.step} breaks the sequence, expected {self.next_step}")
        self.records.append(record)
        return record

    def phase(self, name: str) -> List[SearchRecord]:
        return [r for r in self.records if r.phase == name]

    def comparable(self) -> List[dict]:
        """Records with wall-clock fields removed, for reproducibility checks."""
        return [r.model_dump(exclude={"wall_time"}) for r in self.records]

    def to_jsonl(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(r.model_dump_json() + "\n" for r in self.records))
        return path

    @classmethod
    def from_jsonl(cls, path: Union[str, Path]) -> "SearchLog":
        lines = Path(path).read_text().splitlines()
        return cls([SearchRecord.model_validate_json(line) for line in lines if line.strip()])


# -- candidates ------------------------------------------------------------------

class Candidate(NamedTuple):
    index: int
    actions: List[int]
    reward: float
    hidden: ctrl.Hidden


def select_top_k(candidates: Sequence[Candidate], k: int) -> List[Candidate]:
    """Highest reward first; ties go to the earlier sample."""
    if k > len(candidates):
        raise ContractError(f"cannot pick top {k} of {len(candidates)} candidates")
    return sorted(candidates, key=lambda c: (-c.reward, c.index))[:k]


# -- child evaluation -------------------------------------------------------------

class ChildOutcome(NamedTuple):
    reward: float
    failed: bool = False
    train_loss: Optional[float] = None
    train_steps: int = 0
    error: Optional[str] = None
    wall_time: float = 0.0


def evaluate_child(actions: Sequence[int], splits: Splits, config: RunConfig, store: ParamStore,
                   rng: np.random.Generator, epoch: int = 0, progress: Optional[float] = None,
                   budget: Optional[int] = None) -> ChildOutcome:
    """Build, train on the label-free train split, and score on valid; failures give reward 0."""
    started = time.perf_counter()
    budget = config.child.budget_steps if budget is None else budget
    try:
        spec = decode(actions)
        model = build(spec, splits.sample_shape, store)
        result = train_child(model, splits.train.samples, budget, config.child, rng, epoch=epoch, progress=progress)
        if result.failed:
            return ChildOutcome(0.0, True, result.final_loss, budget, result.error, time.perf_counter() - started)
        valid = splits.valid
        scores = score(model, valid.samples, config.child.lambda_reg, config.child.score_chunk)
        reward = metrics.reward(config.search.reward_metric, scores.scores, valid.labels,
                                scores.pixel_map, valid.masks)
    except AutoODError as exc:
        logger.warning("Child evaluation failed", actions=list(actions), error=exc.message, code=exc.code)
        return ChildOutcome(0.0, True, None, budget, exc.message, time.perf_counter() - started)
    except Exception as exc:
        logger.warning("Child evaluation failed", actions=list(actions), error=str(exc), code="INTERNAL_ERROR")
        return ChildOutcome(0.0, True, None, budget, str(exc), time.perf_counter() - started)
    return ChildOutcome(float(reward), False, result.final_loss, budget, None, time.perf_counter() - started)


class ChildEvaluator:
    """Evaluates batches of children, sequentially or on isolated store copies."""

    def __init__(self, config: RunConfig, splits: Splits, store: ParamStore):
        self.config = config
        self.splits = splits
        self.store = store
        self.evaluations = 0

    def _rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, index])

    def __call__(self, batch: Sequence[Sequence[int]], epoch: int = 0,
                 progress: Optional[float] = None) -> List[ChildOutcome]:
        first = self.evaluations
        self.evaluations += len(batch)
        if self.config.workers <= 1 or len(batch) == 1:
            return [evaluate_child(actions, self.splits, self.config, self.store, self._rng(first + i),
                                   epoch, progress) for i, actions in enumerate(batch)]

        copies = [self.store.copy() for _ in batch]
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            futures = [pool.submit(evaluate_child, actions, self.splits, self.config, copies[i],
                                   self._rng(first + i), epoch, progress) for i, actions in enumerate(batch)]
            outcomes = [f.result() for f in futures]
        for worker in copies:
            self.store.merge(worker)
        return outcomes


# -- controller updates ------------------------------------------------------------

def policy_gradient_loss(policies: Sequence[ctrl.SampledPolicy], rewards: Sequence[float], baseline: float) -> Tensor:
    """−(1/n) Σ_k (r_k − b) Σ_t log π(a_t | a_<t; θ_k)."""
    total = None
    for policy, reward in zip(policies, rewards):
        term = policy.log_probs.sum() * (-(float(reward) - baseline))
        total = term if total is None else total + term
    return total / float(len(policies))


def reinforce_update(state: ctrl.ControllerState, policies: Sequence[ctrl.SampledPolicy], rewards: Sequence[float],
                     baseline: float, episodes: int) -> bool:
    """Policy-gradient ascent combined additively with the variational loss."""
    if not policies:
        raise ContractError("reinforce_update needs at least one sampled policy")
    variational = None
    for policy in policies:
        term = ctrl.variational_loss(state, policy.log_probs, policy.kl_sharpen, episodes)
        variational = term if variational is None else variational + term
    loss = policy_gradient_loss(policies, rewards, baseline) + variational / float(len(policies))
    return ctrl.apply_gradients(state, loss)


def imitation_loss(state: ctrl.ControllerState, weights: Dict[str, Tensor],
                   entries: Sequence[Tuple[Actions, float]], baseline: float) -> Tensor:
    """(1/n) Σ −log π(a)·(r − b)+ over replayed entries."""
    total = None
    for actions, reward in entries:
        advantage = max(float(reward) - baseline, 0.0)
        term = ctrl.sample_actions(state, weights, actions=actions).log_probs.sum() * (-advantage)
        total = term if total is None else total + term
    return total / float(len(entries))


def self_imitation_update(state: ctrl.ControllerState, buffer: ReplayBuffer, baseline: float,
                          rng: np.random.Generator, batch: int) -> List[Tuple[Actions, float]]:
    """Replay a minibatch sampled ∝ (r − b)+ and descend the clipped-advantage NLL.

    Returns the replayed entries. When no entry beats the baseline the
    entries are drawn uniformly and the controller is left unchanged.
    """
    if not buffer.entries:
        logger.info("Self-imitation skipped", reason="empty buffer")
        return []
    advantages = np.maximum(np.array(buffer.rewards) - baseline, 0.0)
    if advantages.sum() <= 0:
        picks = rng.choice(len(buffer), size=batch, replace=True)
        return [buffer.entries[i] for i in picks]
    picks = rng.choice(len(buffer), size=batch, replace=True, p=advantages / advantages.sum())
    entries = [buffer.entries[i] for i in picks]
    draw = ctrl.sample_weights(state, rng)
    ctrl.apply_gradients(state, imitation_loss(state, draw.phi, entries, baseline))
    return entries


class StepResult(NamedTuple):
    policy: ctrl.SampledPolicy
    outcome: ChildOutcome
    kl_bonus: float
    shaped: float
    baseline: float
    inserted: bool


def controller_step(state: ctrl.ControllerState, rng: np.random.Generator,
                    evaluate: Callable[[List[List[int]]], List[ChildOutcome]], n: int, baseline: Baseline,
                    buffer: ReplayBuffer, eta_explore: float, episodes: int) -> List[StepResult]:
    """Sample n children, shape their rewards, and update controller, baseline and buffer."""
    policies = [ctrl.sample_policy(state, rng) for _ in range(n)]
    outcomes = evaluate([p.actions for p in policies])
    bonuses = [eta_explore * max(p.kl_sharpen.item(), 0.0) for p in policies]
    shaped = [ctrl.intrinsic_reward(o.reward, p.kl_sharpen.item(), eta_explore) for p, o in zip(policies, outcomes)]
    used = baseline.value
    reinforce_update(state, policies, shaped, used, episodes)
    update_baseline(baseline, shaped)
    inserted = [replay_insert(buffer, p.actions, o.reward)[1] for p, o in zip(policies, outcomes)]
    state.experience = [list(p.actions) for p in policies]
    return [StepResult(p, o, k, s, used, i) for p, o, k, s, i in zip(policies, outcomes, bonuses, shaped, inserted)]


# -- search loops -------------------------------------------------------------------

class SearchResult(NamedTuple):
    log: SearchLog
    top: List[TopModel]
    controller: Optional[ctrl.ControllerState]
    store: ParamStore
    buffer: ReplayBuffer
    controller_updates: int = 0
    imitation_updates: int = 0


def _record(log: SearchLog, epoch: int, phase: str, actions: Sequence[int], outcome: ChildOutcome,
            kl_bonus: float = 0.0, shaped: Optional[float] = None, baseline: float = 0.0,
            event: str = "none") -> SearchRecord:
    record = log.append(SearchRecord(
        step=log.next_step, epoch=epoch, phase=phase, actions=list(actions), raw_reward=outcome.reward,
        kl_bonus=kl_bonus, shaped_reward=outcome.reward if shaped is None else shaped, baseline=baseline,
        buffer_event=event, train_loss=outcome.train_loss, failed=outcome.failed,
        train_steps=outcome.train_steps, wall_time=outcome.wall_time,
    ))
    logger.info("Child evaluated", step=record.step, epoch=epoch, phase=phase,
                reward=round(outcome.reward, 4), failed=outcome.failed)
    return record


def top_models(log: SearchLog, k: int = 5) -> List[TopModel]:
    best: Dict[Actions, float] = {}
    first_seen: Dict[Actions, int] = {}
    for record in log:
        key = tuple(record.actions)
        reward = record.raw_reward or 0.0
        first_seen.setdefault(key, record.step)
        if reward > best.get(key, -np.inf):
            best[key] = reward
    ranked = sorted(best, key=lambda a: (-best[a], first_seen[a]))[:k]
    return [TopModel(rank=i + 1, reward=best[a], actions=list(a), spec=json.loads(decode(a).to_json()))
            for i, a in enumerate(ranked)]


def _replay(log: SearchLog, evaluator: ChildEvaluator, buffer: ReplayBuffer, entries, epoch: int,
            progress: float, baseline: float, phase: str) -> None:
    if not entries:
        return
    outcomes = evaluator([list(a) for a, _ in entries], epoch, progress)
    for (actions, _), outcome in zip(entries, outcomes):
        replay_insert(buffer, actions, outcome.reward)
        _record(log, epoch, phase, actions, outcome, baseline=baseline, event="replayed")


def run_search(config: RunConfig, splits: Splits, out_dir: Optional[Union[str, Path]] = None) -> SearchResult:
    search = config.search
    rng = np.random.default_rng(config.seed)
    state = ctrl.init_controller(slot_sizes(config.child.n_layers), config.controller, seed=config.seed)
    store = ParamStore(config.seed)
    evaluator = ChildEvaluator(config, splits, store)
    buffer = ReplayBuffer(capacity=search.buffer_capacity)
    baseline = Baseline(decay=search.baseline_decay)
    log = SearchLog()
    updates = imitations = 0
    logger.info("Search started", epochs=search.epochs, candidates=search.candidates,
                children_per_step=search.children_per_step, seed=config.seed)

    for epoch in range(search.epochs):
        progress = epoch / search.epochs
        candidates: List[Candidate] = []
        for _ in range(search.candidates // search.children_per_step):
            results = controller_step(state, rng, lambda batch: evaluator(batch, epoch, progress),
                                      search.children_per_step, baseline, buffer, search.eta_explore,
                                      search.candidates)
            updates += 1
            for result in results:
                record = _record(log, epoch, "search", result.policy.actions, result.outcome, result.kl_bonus,
                                 result.shaped, result.baseline, "inserted" if result.inserted else "rejected")
                candidates.append(Candidate(record.step, result.policy.actions, result.outcome.reward,
                                            result.policy.hidden))
        state.initial_hidden = ctrl.average_hidden([c.hidden for c in select_top_k(candidates, search.top_k)])

        if search.buffer_capacity == 0:
            continue
        for _ in range(search.sim_steps):
            entries = self_imitation_update(state, buffer, baseline.value, rng, search.sim_batch)
            imitations += 1
            _replay(log, evaluator, buffer, entries, epoch, progress, baseline.value, "imitation")

    result = SearchResult(log=log, top=top_models(log, search.report_top), controller=state, store=store,
                          buffer=buffer, controller_updates=updates, imitation_updates=imitations)
    logger.info("Search finished", evaluations=len(log), best=result.top[0].reward if result.top else None)
    if out_dir is not None:
        from autood.services.reporting import write_artifacts
        write_artifacts(result, config, splits, out_dir)
    return result


def run_random_search(config: RunConfig, splits: Splits, out_dir: Optional[Union[str, Path]] = None) -> SearchResult:
    """Uniform children under the same evaluation pipeline and child-training budget."""
    search = config.search
    rng = np.random.default_rng(config.seed)
    store = ParamStore(config.seed)
    evaluator = ChildEvaluator(config, splits, store)
    buffer = ReplayBuffer(capacity=search.buffer_capacity)
    log = SearchLog()
    logger.info("Random search started", epochs=search.epochs, candidates=search.candidates, seed=config.seed)

    for epoch in range(search.epochs):
        progress = epoch / search.epochs
        batch = [random_actions(config.child.n_layers, rng) for _ in range(search.candidates)]
        for step in range(0, len(batch), search.children_per_step):
            chunk = batch[step:step + search.children_per_step]
            for actions, outcome in zip(chunk, evaluator(chunk, epoch, progress)):
                inserted = replay_insert(buffer, actions, outcome.reward)[1]
                _record(log, epoch, "random", actions, outcome, event="inserted" if inserted else "rejected")
        if search.buffer_capacity == 0:
            continue
        for _ in range(search.sim_steps):
            entries = buffer.entries[:search.sim_batch]
            entries = [entries[i % len(entries)] for i in range(search.sim_batch)] if entries else []
            _replay(log, evaluator, buffer, entries, epoch, progress, 0.0, "random")

    result = SearchResult(log=log, top=top_models(log, search.report_top), controller=None, store=store, buffer=buffer)
    logger.info("Random search finished", evaluations=len(log), best=result.top[0].reward if result.top else None)
    if out_dir is not None:
        from autood.services.reporting import write_artifacts
        write_artifacts(result, config, splits, out_dir)
    return result
