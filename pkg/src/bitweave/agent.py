"""Double DQN with prioritized replay for learning encoding plans.

The agent builds a plan one bit at a time with masked epsilon-greedy actions.
Terminal rewards come from the environment's cache, a real evaluation, or,
once the learned reward model is accurate enough, an imagined estimate.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import pickle
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .env import Environment, StateMatrix, initial_state, transition, valid_actions
from .linearize import EncodingPlan
from .nn import Adam, QNetwork, RewardModel, load_arrays, save_arrays
from .replay import PrioritizedReplay, Transition

log = logging.getLogger(__name__)

EXPLORATION = "exploration"
MODEL_GATED = "model-gated"


@dataclass
class Hyperparameters:
    gamma: float = 0.99
    batch_size: int | None = None  # None: one sample per linear bit
    replay_capacity: int = 1_000_000
    lr_start: float = 1e-3
    lr_min: float = 1e-4
    eps_start: float = 1.0
    eps_min: float = 0.1
    target_update: int = 100
    max_episodes: int = 5000
    model_accuracy: float = 0.9
    decay_fraction: float = 0.5
    eps_fixed: float | None = None
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    priority_eps: float = 1e-6
    hidden_scale: float = 4.0
    reward_model: bool = True
    holdout: int = 10
    min_train_samples: int = 10
    rel_tolerance: float = 0.10
    margin_quantile: float = 0.95
    model_steps: int = 100
    model_batch: int = 256
    model_lr: float = 3e-3
    max_seconds: float | None = None
    seed: int = 0

    def _decay(self, start, end, episode):
        horizon = max(1.0, self.decay_fraction * self.max_episodes)
        frac = min(1.0, episode / horizon)
        return start + (end - start) * frac

    def epsilon(self, episode: int) -> float:
        if self.eps_fixed is not None:
            return self.eps_fixed
        return self._decay(self.eps_start, self.eps_min, episode)

    def learning_rate(self, episode: int) -> float:
        return self._decay(self.lr_start, self.lr_min, episode)

    def beta(self, episode: int) -> float:
        frac = min(1.0, episode / max(1, self.max_episodes))
        return self.per_beta_start + (self.per_beta_end - self.per_beta_start) * frac


@dataclass
class BestEncoding:
    plan: EncodingPlan
    reward: float
    episode: int


class StepOutcome(NamedTuple):
    reward: float
    next_state: StateMatrix
    kind: str | None  # "real", "cached", "imagined"; None before the last bit


def shape_rewards(steps: list[Transition], terminal_reward: float) -> list[Transition]:
    """Spread ``log(terminal_reward)`` evenly over every step of the episode."""
    if not terminal_reward > 0:
        raise ValueError(f"terminal reward must be a positive speedup, got {terminal_reward}")
    credit = math.log(terminal_reward) / len(steps)
    return [dataclasses.replace(tr, reward=credit) for tr in steps]


class RewardModelGate:
    """Learned terminal-reward predictor and the switch into model-gated filtering.

    The newest ``holdout`` real evaluations are kept out of training and used to
    score the model: accuracy is the fraction predicted within ``rel_tolerance``
    of the true speedup, and the error margin is a high quantile of those errors.
    """

    def __init__(self, order: int, total_bits: int, hyper: Hyperparameters):
        self.hyper = hyper
        self.model = RewardModel(order, total_bits, hyper.hidden_scale, seed=hyper.seed + 1)
        self.opt = Adam()
        self.rng = np.random.default_rng(hyper.seed + 2)
        self.states: list[np.ndarray] = []
        self.targets: list[float] = []
        self.phase = EXPLORATION
        self.accuracy = 0.0
        self.margin = math.inf
        self.history: list[dict] = []

    @property
    def is_open(self) -> bool:
        return self.phase == MODEL_GATED

    def predict(self, bits: np.ndarray) -> float:
        return math.exp(self.model(bits))

    def _fit(self, n_train: int) -> None:
        x = np.asarray(self.states[:n_train], dtype=np.float64)
        y = np.asarray(self.targets[:n_train])
        for _ in range(self.hyper.model_steps):
            if n_train > self.hyper.model_batch:
                pick = self.rng.choice(n_train, self.hyper.model_batch, replace=False)
                xb, yb = x[pick], y[pick]
            else:
                xb, yb = x, y
            pred = self.model(xb)
            grads = self.model.backward(2.0 * (pred - yb) / len(yb))
            self.opt.step(self.model.params(), grads, self.hyper.model_lr)

    def evaluate(self) -> tuple[float, np.ndarray]:
        k = self.hyper.holdout
        x = np.asarray(self.states[-k:], dtype=np.float64)
        actual = np.exp(np.asarray(self.targets[-k:]))
        predicted = np.exp(self.model(x))
        rel = np.abs(predicted - actual) / np.abs(actual)
        return float(np.mean(rel <= self.hyper.rel_tolerance)), rel

    def add(self, bits: np.ndarray, speedup: float) -> None:
        self.states.append(np.asarray(bits, dtype=np.int8))
        self.targets.append(math.log(speedup))
        n_train = len(self.states) - self.hyper.holdout
        if n_train < self.hyper.min_train_samples:
            return
        self._fit(n_train)
        self.accuracy, rel = self.evaluate()
        self.margin = float(np.quantile(rel, self.hyper.margin_quantile))
        self.phase = MODEL_GATED if self.accuracy >= self.hyper.model_accuracy else EXPLORATION
        self.history.append({"samples": len(self.states), "holdout": len(rel),
                             "accuracy": self.accuracy, "margin": self.margin,
                             "phase": self.phase})


@dataclass
class TrainingResult:
    best: BestEncoding
    episodes: int
    truncated: bool
    counts: dict[str, int]
    history: list[dict] = field(repr=False, default_factory=list)


class Agent:
    def __init__(self, env: Environment, hyper: Hyperparameters | None = None):
        self.env = env
        self.hyper = hyper = hyper or Hyperparameters()
        budget = env.budget
        self.order, self.total_bits = budget.order, budget.total
        self.batch_size = hyper.batch_size or self.total_bits
        self.policy = QNetwork(self.order, self.total_bits, hyper.hidden_scale, seed=hyper.seed)
        self.target = QNetwork(self.order, self.total_bits, hyper.hidden_scale, seed=hyper.seed)
        self.target.copy_from(self.policy)
        self.opt = Adam()
        self.replay = PrioritizedReplay(hyper.replay_capacity, hyper.per_alpha,
                                        hyper.priority_eps, seed=hyper.seed + 3)
        self.gate = RewardModelGate(self.order, self.total_bits, hyper) if hyper.reward_model else None
        self.rng = np.random.default_rng(hyper.seed + 4)
        self.best: BestEncoding | None = None
        self.episode = 0
        self.counts: Counter = Counter({"real": 0, "cached": 0, "imagined": 0})
        self.history: list[dict] = []
        self.train_steps = 0
        self.rejected_steps = 0

    # -- acting ---------------------------------------------------------------

    def select_action(self, s: StateMatrix, epsilon: float) -> int:
        """Epsilon-greedy over valid modes; greedy ties go to the lowest mode."""
        valid = valid_actions(s)
        if self.rng.random() < epsilon:
            return int(valid[self.rng.integers(len(valid))])
        q = self.policy(s.bits)
        masked = np.where(s.valid_mask(), q, -np.inf)
        return int(np.argmax(masked))

    def filter_execute_action(self, a: int, s: StateMatrix) -> StepOutcome:
        s1 = transition(s, a)
        if not s1.is_terminal:
            return StepOutcome(0.0, s1, None)
        plan = s1.plan()
        hit = self.env.lookup(plan)
        if hit is not None:
            return StepOutcome(hit.speedup, s1, "cached")
        if self.gate is not None and self.gate.is_open and self.best is not None:
            predicted = self.gate.predict(s1.bits)
            threshold = self.best.reward * (1.0 - self.gate.margin)
            if predicted < threshold:
                return StepOutcome(predicted, s1, "imagined")
        out = self.env.terminal_reward(plan)
        if out.cached:
            return StepOutcome(out.speedup, s1, "cached")
        if self.gate is not None and not out.timed_out:
            self.gate.add(s1.bits, out.speedup)
        return StepOutcome(out.speedup, s1, "real")

    # -- learning -------------------------------------------------------------

    def td_targets(self, batch: list[Transition]) -> np.ndarray:
        """``r + gamma * Q_target(s', argmax_valid Q_policy(s'))``; terminal rows keep only ``r``."""
        rewards = np.array([tr.reward for tr in batch])
        live = [i for i, tr in enumerate(batch) if not tr.done]
        if not live:
            return rewards
        s1 = np.stack([batch[i].next_state for i in live])
        mask = np.stack([batch[i].next_mask for i in live])
        q_online = np.where(mask, self.policy(s1), -np.inf)
        best = np.argmax(q_online, axis=1)
        q_eval = self.target(s1)[np.arange(len(live)), best]
        out = rewards.copy()
        out[live] += self.hyper.gamma * q_eval
        return out

    def train_step(self, batch: list[Transition], weights: np.ndarray | None = None,
                   lr: float | None = None) -> tuple[float, np.ndarray]:
        """One Adam step on the importance-weighted mean squared TD error."""
        n = len(batch)
        weights = np.ones(n) if weights is None else np.asarray(weights)
        lr = self.hyper.lr_start if lr is None else lr
        y = self.td_targets(batch)
        actions = np.array([tr.action for tr in batch])
        q = self.policy(np.stack([tr.state for tr in batch]))
        td = y - q[np.arange(n), actions]
        loss = float(np.mean(weights * td * td))
        if not math.isfinite(loss):
            log.warning("rejected training step: non-finite loss %r", loss)
            self.rejected_steps += 1
            return loss, td
        g = np.zeros_like(q)
        g[np.arange(n), actions] = -2.0 * weights * td / n
        grads = self.policy.backward(g)
        if self.opt.step(self.policy.params(), grads, lr):
            self.train_steps += 1
        else:
            self.rejected_steps += 1
        return loss, td

    def sync_target(self) -> None:
        self.target.copy_from(self.policy)

    # -- episodes -------------------------------------------------------------

    def run_episode(self, forced: EncodingPlan | None = None) -> dict:
        e = self.episode
        eps = self.hyper.epsilon(e)
        lr = self.hyper.learning_rate(e)
        beta = self.hyper.beta(e)
        s = initial_state(self.env.budget)
        steps: list[Transition] = []
        out = None
        for t in range(self.total_bits):
            a = forced.picks[t] if forced is not None else self.select_action(s, eps)
            out = self.filter_execute_action(a, s)
            s1 = out.next_state
            done = s1.is_terminal
            next_mask = np.zeros(self.order, bool) if done else s1.valid_mask()
            steps.append(Transition(s.bits, a, out.reward, s1.bits, done, next_mask))
            if len(self.replay) >= self.batch_size:
                idx, batch, w = self.replay.sample(self.batch_size, beta)
                _, td = self.train_step(batch, w, lr)
                self.replay.update_priorities(idx, td)
            s = s1
        kind = out.kind
        self.counts[kind] += 1
        if self.episode > 0 and self.episode % self.hyper.target_update == 0:
            self.sync_target()
        plan = s.plan()
        if kind != "imagined" and (self.best is None or out.reward > self.best.reward):
            self.best = BestEncoding(plan, out.reward, e)
        shaped = shape_rewards(steps, out.reward)
        if kind == "imagined":
            shaped = [dataclasses.replace(tr, imagined=True) for tr in shaped]
        for tr in shaped:
            self.replay.add(tr)
        record = {
            "episode": e, "epsilon": eps, "lr": lr, "plan": plan.to_string(),
            "reward": out.reward, "kind": kind, "best": self.best.reward if self.best else None,
            "best_plan": self.best.plan.to_string() if self.best else None,
            "phase": self.gate.phase if self.gate else EXPLORATION,
            **{k: self.counts[k] for k in ("real", "cached", "imagined")},
        }
        self.history.append(record)
        self.episode += 1
        return record

    def train(self, episodes: int | None = None, stop_reward: float | None = None,
              log_path: str | os.PathLike | None = None,
              callback: Callable[[dict], None] | None = None) -> TrainingResult:
        """Run episodes until ``hyper.max_episodes`` (or ``episodes`` more), a
        wall-clock limit, or the best reward reaching ``stop_reward``.

        Episode 0 always replays the default interleaving so the best encoding
        never falls below the baseline.
        """
        limit = self.hyper.max_episodes if episodes is None else self.episode + episodes
        started = time.monotonic()
        truncated = False
        fh = open(log_path, "a") if log_path else None
        try:
            while self.episode < limit:
                if self.hyper.max_seconds is not None and time.monotonic() - started > self.hyper.max_seconds:
                    truncated = True
                    break
                forced = self.env.alto_plan if self.episode == 0 else None
                record = self.run_episode(forced)
                if fh:
                    fh.write(json.dumps(record) + "\n")
                    fh.flush()
                if callback:
                    callback(record)
                if stop_reward is not None and self.best.reward >= stop_reward:
                    break
        finally:
            if fh:
                fh.close()
        return TrainingResult(self.best, self.episode, truncated, dict(self.counts), self.history)

    # -- checkpoints ----------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        save_arrays(os.path.join(directory, "policy.npz"), self.policy.params())
        save_arrays(os.path.join(directory, "target.npz"), self.target.params())
        save_arrays(os.path.join(directory, "adam.npz"), self.opt.state())
        self.env.cache.save(os.path.join(directory, "cache.txt"))
        state = {
            "episode": self.episode,
            "counts": dict(self.counts),
            "best": None if self.best is None else
            {"plan": self.best.plan.to_string(), "reward": self.best.reward, "episode": self.best.episode},
            "hyper": dataclasses.asdict(self.hyper),
            "rng": self.rng.bit_generator.state,
            "train_steps": self.train_steps,
        }
        with open(os.path.join(directory, "state.json"), "w") as fh:
            json.dump(state, fh, indent=1)
        with open(os.path.join(directory, "replay.pkl"), "wb") as fh:
            pickle.dump({"replay": self.replay, "gate": self.gate, "history": self.history}, fh)

    @classmethod
    def load(cls, directory: str | os.PathLike, env: Environment,
             hyper: Hyperparameters | None = None) -> "Agent":
        with open(os.path.join(directory, "state.json")) as fh:
            state = json.load(fh)
        agent = cls(env, hyper or Hyperparameters(**state["hyper"]))
        agent.policy.set_params(load_arrays(os.path.join(directory, "policy.npz")))
        agent.target.set_params(load_arrays(os.path.join(directory, "target.npz")))
        agent.opt.load_state(load_arrays(os.path.join(directory, "adam.npz")))
        cache_path = os.path.join(directory, "cache.txt")
        if os.path.exists(cache_path):
            env.cache.load(cache_path)
        agent.episode = state["episode"]
        agent.counts = Counter(state["counts"])
        if state["best"]:
            b = state["best"]
            agent.best = BestEncoding(EncodingPlan.from_string(b["plan"]), b["reward"], b["episode"])
        agent.rng.bit_generator.state = state["rng"]
        agent.train_steps = state["train_steps"]
        with open(os.path.join(directory, "replay.pkl"), "rb") as fh:
            blob = pickle.load(fh)
        agent.replay = blob["replay"]
        agent.gate = blob["gate"]
        agent.history = blob["history"]
        return agent


def run_training(env: Environment, hyper: Hyperparameters | None = None, **kwargs) -> TrainingResult:
    return Agent(env, hyper).train(**kwargs)
