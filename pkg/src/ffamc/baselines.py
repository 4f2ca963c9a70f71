"""Comparison policies: a calibrated SNR lookup table and a DQN agent."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression

from .autodiff import NumericError, sgd_step
from .channel import ConfigError, keyed_rng
from .models import Head, PolicyModel, SampleSet
from .phy import MCS_MIN, N_CLASSES

# smallest gap kept between consecutive LUT thresholds
_MIN_GAP_DB = 1e-6
REWARD_HIT = 100.0


# ---------------------------------------------------------------------------
# Lookup table


@dataclass(frozen=True)
class LutThresholds:
    """Lower SNR edges (dB) of the 15 CQI bins.

    ``thresholds_db[0]`` is the floor edge; anything below it still maps to
    the lowest MCS.  CQI ``c`` (1..15) maps to ``cqi_to_mcs[c - 1]``.
    """

    thresholds_db: tuple
    cqi_to_mcs: tuple = tuple(range(MCS_MIN, MCS_MIN + N_CLASSES))

    def __post_init__(self):
        t = np.asarray(self.thresholds_db, dtype=float)
        if t.shape != (N_CLASSES,) or not np.all(np.isfinite(t)):
            raise ConfigError(f"need {N_CLASSES} finite thresholds")
        if np.any(np.diff(t) <= 0):
            raise ConfigError("LUT thresholds must be strictly ascending")
        if len(self.cqi_to_mcs) != N_CLASSES:
            raise ConfigError(f"CQI mapping must have {N_CLASSES} entries")
        object.__setattr__(self, "thresholds_db", tuple(float(v) for v in t))
        object.__setattr__(self, "cqi_to_mcs", tuple(int(v) for v in self.cqi_to_mcs))

    def cqi(self, sinr_db):
        """CQI 1..15.  A value sitting exactly on an edge takes the lower bin."""
        edges = np.asarray(self.thresholds_db[1:])
        return np.searchsorted(edges, np.asarray(sinr_db, dtype=float), side="left") + 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "threshold_db"])
            for c, t in enumerate(self.thresholds_db):
                w.writerow([MCS_MIN + c, repr(t)])

    @classmethod
    def from_csv(cls, path) -> "LutThresholds":
        with open(path) as fh:
            rows = sorted(csv.DictReader(fh), key=lambda r: int(r["class"]))
        return cls(tuple(float(r["threshold_db"]) for r in rows))


def lut_predict(lut: LutThresholds, sinr_db):
    """MCS index for each SNR value (scalar in, int out)."""
    mcs = np.asarray(lut.cqi_to_mcs)[lut.cqi(sinr_db) - 1]
    return int(mcs) if np.ndim(sinr_db) == 0 else mcs


def calibrate_lut(sinr_db, labels) -> LutThresholds:
    """Midpoint-rule thresholds from per-class mean SNR.

    ``labels`` are raw MCS indices.  Classes absent from the data get a mean
    interpolated linearly from their populated neighbours (held flat past
    the ends).  Means are made nondecreasing by isotonic regression before
    midpoints are taken, then spread to keep the edges strictly ascending.
    """
    s = np.asarray(sinr_db, dtype=float)
    cls = np.asarray(labels, dtype=int) - MCS_MIN
    if s.shape != cls.shape or s.size == 0:
        raise ConfigError("sinr and labels must be nonempty and aligned")
    if np.any((cls < 0) | (cls >= N_CLASSES)):
        raise ConfigError("labels outside the MCS range")
    present = np.unique(cls)
    if len(present) < 2:
        raise ConfigError("LUT calibration needs at least two distinct labels")
    counts = np.bincount(cls, minlength=N_CLASSES)
    means = np.bincount(cls, weights=s, minlength=N_CLASSES)[present] / counts[present]
    full = np.interp(np.arange(N_CLASSES), present, means)
    # empty classes carry no weight in the isotonic fit
    w = np.where(counts > 0, counts, 1e-9).astype(float)
    full = isotonic_regression(full, weights=w).x
    edges = np.empty(N_CLASSES)
    edges[1:] = 0.5 * (full[:-1] + full[1:])
    edges[0] = full[0]
    for i in range(1, N_CLASSES):
        edges[i] = max(edges[i], edges[i - 1] + _MIN_GAP_DB)
    return LutThresholds(tuple(edges))


def context_free_snr_db(sinr_db, x) -> np.ndarray:
    """Per-user SNR that ignores co-scheduled users, recovered from stored data.

    For the target user (column 0 of the last frame in ``x``) the ratio of
    matched-filter SNR to post-ZF SINR is ``||h||^2 [(G G^H)^-1]_00``, which
    is scale free, so the normalized tensor is enough to recover it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    h = x[:, -1, 0] + 1j * x[:, -1, 1]  # (N, n_bs, n_ue)
    g = np.swapaxes(h, 1, 2)
    gram = g @ np.conj(np.swapaxes(g, 1, 2))
    e0 = np.zeros((gram.shape[-1], 1))
    e0[0] = 1.0
    inv00 = np.real(np.linalg.solve(gram, np.broadcast_to(e0, gram.shape[:-1] + (1,)))[:, 0, 0])
    ratio = np.sum(np.abs(h[:, :, 0]) ** 2, axis=1) * inv00
    return np.asarray(sinr_db, dtype=float) + 10 * np.log10(ratio)


def lut_input_db(samples: SampleSet, mode: str = "post_zf") -> np.ndarray:
    """SNR fed to the LUT: ``post_zf`` (stored SINR) or ``single_user`` (context free)."""
    if samples.sinr_db is None:
        raise ConfigError("samples carry no SINR")
    if mode == "post_zf":
        return np.asarray(samples.sinr_db, dtype=float)
    if mode == "single_user":
        return context_free_snr_db(samples.sinr_db, samples.x)
    raise ConfigError(f"unknown LUT input {mode!r}")


# ---------------------------------------------------------------------------
# DQN


@dataclass(frozen=True)
class DqnConfig:
    hidden_layers: int = 5
    hidden_width: int = 64
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 10_000
    gamma: float = 0.0
    replay_capacity: int = 10_000
    batch_size: int = 64
    sync_period: int = 500
    learning_rate: float = 1e-3
    episodes: int = 50
    seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.hidden_layers != 5 or self.hidden_width != 64:
            raise ConfigError("the DQN is fixed at five hidden layers of 64 units")
        for name in ("epsilon_start", "epsilon_end", "gamma"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if min(self.epsilon_decay_steps, self.replay_capacity, self.batch_size, self.sync_period,
               self.episodes) < 1:
            raise ConfigError("DQN step counts, capacity and batch size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")

    def epsilon(self, step: int) -> float:
        frac = min(step / self.epsilon_decay_steps, 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool = True

    def __post_init__(self):
        if self.reward not in (0.0, REWARD_HIT):
            raise ValueError(f"reward must be 0 or {REWARD_HIT:g}")
        if not 0 <= self.action < N_CLASSES:
            raise ValueError("action outside the class range")


def reward(action: int, oracle_class: int) -> float:
    return REWARD_HIT if action == oracle_class else 0.0


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, state_shape):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, *state_shape))
        self.next_states = np.zeros((capacity, *state_shape))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, t: Transition) -> None:
        i = self._next
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def oldest(self) -> int:
        """Ring slot of the oldest stored transition."""
        return (self._next - self._size) % self.capacity

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return (self.oldest() + rng.integers(0, self._size, n)) % self.capacity

    def sample(self, n: int, rng: np.random.Generator):
        i = self.sample_indices(n, rng)
        return self.states[i], self.actions[i], self.rewards[i], self.next_states[i], self.dones[i]


class QNet(PolicyModel):
    """Flattened channel window -> five 64-wide ReLU layers -> 15 action values."""

    kind = "dqn"

    def __init__(self, cfg: DqnConfig, n_in: int):
        self.cfg = cfg
        self.n_in = n_in
        sizes = (cfg.hidden_width,) * cfg.hidden_layers + (N_CLASSES,)
        self.head = Head(n_in, sizes, keyed_rng(cfg.init_seed, 1), name="q")

    def layers(self):
        return list(self.head.dense)

    def _relus(self):
        return self.head.relus

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.head.forward(x.reshape(len(x), -1))

    def backward(self, dq):
        return self.head.backward(dq)

    def descriptor(self) -> dict:
        d = super().descriptor()
        d["n_in"] = self.n_in
        return d

    def copy_from(self, other: "QNet") -> None:
        self.load_state_dict({k: v.copy() for k, v in other.state_dict().items()})


def build_qnet(cfg: DqnConfig, state_shape) -> QNet:
    return QNet(cfg, int(np.prod(state_shape)))


def load_qnet(path) -> QNet:
    from .autodiff import load_tensors

    with open(f"{path}.arch.json") as fh:
        desc = json.load(fh)
    if desc.get("kind") != "dqn":
        raise ConfigError("checkpoint is not a DQN")
    net = QNet(DqnConfig(**desc["config"]), int(desc["n_in"]))
    net.load_state_dict(load_tensors(path))
    return net


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else keyed_rng(int(seed), 23)


def greedy_actions(q: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lower class on ties
    return np.argmax(np.atleast_2d(q), axis=1)


def dqn_act(qnet: QNet, state, epsilon: float, seed) -> int:
    """Epsilon-greedy class (0..14).  ``seed`` is an int or a Generator."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    rng = _as_rng(seed)
    if rng.random() < epsilon:
        return int(rng.integers(0, N_CLASSES))
    return int(greedy_actions(qnet.forward(np.asarray(state)[None]))[0])


def bellman_targets(rewards, next_q, dones, gamma: float) -> np.ndarray:
    """``r + gamma max_a' Q_target(s', a')``, with the bootstrap dropped for terminal steps."""
    boot = np.where(dones, 0.0, gamma * np.max(next_q, axis=1))
    return np.asarray(rewards, dtype=float) + boot


@dataclass
class DqnCurve:
    mean_reward: list = field(default_factory=list)  # behaviour policy, per episode
    loss: list = field(default_factory=list)
    greedy_acc: list = field(default_factory=list)  # on the replayed dataset

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "mean_reward", "loss", "greedy_acc"])
            for e, row in enumerate(zip(self.mean_reward, self.loss, self.greedy_acc), start=1):
                w.writerow([e, *(repr(float(v)) for v in row)])


def dqn_train(data: SampleSet, cfg: DqnConfig, log=None, check_targets: bool = False):
    """Train a Q-network by replaying the labeled dataset as an environment.

    Each episode visits every sample once in a keyed order.  The agent acts
    epsilon-greedily, is paid 100 for the oracle class and 0 otherwise, and
    every transition is terminal.  One mini-batch update on the squared
    Bellman error of the chosen action follows each step once the buffer
    holds a full batch.
    """
    n = len(data)
    if n == 0:
        raise ConfigError("DQN training needs a nonempty dataset")
    shape = data.x.shape[1:]
    qnet = build_qnet(cfg, shape)
    target = build_qnet(cfg, shape)
    target.copy_from(qnet)
    params = qnet.params()
    for p in params:
        p.zero_grad()
    buf = ReplayBuffer(cfg.replay_capacity, shape)
    rng = keyed_rng(cfg.seed, 21)
    curve = DqnCurve()
    step = 0
    for ep in range(cfg.episodes):
        order = keyed_rng(cfg.seed, 22, ep).permutation(n)
        rewards, losses = [], []
        for i in order:
            s = data.x[i]
            a = dqn_act(qnet, s, cfg.epsilon(step), rng)
            r = reward(a, int(data.y[i]))
            buf.push(Transition(s, a, r, s, True))
            rewards.append(r)
            step += 1
            if len(buf) >= cfg.batch_size:
                bs, ba, br, bn, bd = buf.sample(cfg.batch_size, rng)
                if cfg.gamma > 0:
                    y = bellman_targets(br, target.forward(bn), bd, cfg.gamma)
                else:
                    y = np.asarray(br, dtype=float)
                if check_targets and not np.array_equal(y[bd], br[bd]):
                    raise AssertionError("terminal Bellman target differs from reward")
                q = qnet.forward(bs)
                rows = np.arange(len(ba))
                err = q[rows, ba] - y
                loss = float(np.mean(err * err))
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite DQN loss at step {step}")
                dq = np.zeros_like(q)
                dq[rows, ba] = 2.0 * err / len(ba)
                qnet.backward(dq)
                sgd_step(params, cfg.learning_rate)
                losses.append(loss)
            if step % cfg.sync_period == 0:
                target.copy_from(qnet)
        curve.mean_reward.append(float(np.mean(rewards)))
        curve.loss.append(float(np.mean(losses)) if losses else float("nan"))
        curve.greedy_acc.append(dqn_accuracy(qnet, data))
        if log:
            log(f"episode {ep + 1}/{cfg.episodes} reward={curve.mean_reward[-1]:.2f} "
                f"loss={curve.loss[-1]:.3f} greedy_acc={curve.greedy_acc[-1]:.4f}")
    return qnet, curve


def dqn_predict(qnet: QNet, x: np.ndarray, batch: int = 512) -> np.ndarray:
    """Greedy MCS indices for a batch of states."""
    q = np.concatenate([qnet.forward(x[i : i + batch]) for i in range(0, len(x), batch)])
    return greedy_actions(q) + MCS_MIN


def dqn_accuracy(qnet: QNet, data: SampleSet) -> float:
    return float(np.mean(dqn_predict(qnet, data.x) == data.y + MCS_MIN))


__all__ = [
    "DqnConfig",
    "DqnCurve",
    "LutThresholds",
    "QNet",
    "ReplayBuffer",
    "Transition",
    "bellman_targets",
    "build_qnet",
    "calibrate_lut",
    "context_free_snr_db",
    "dqn_accuracy",
    "dqn_act",
    "dqn_predict",
    "dqn_train",
    "greedy_actions",
    "load_qnet",
    "lut_input_db",
    "lut_predict",
    "reward",
]
