"""Grounded action transformation: fusion features, forward and inverse models,
action grounding and the outer training loop.

The forward model ``f(s, a, X)`` predicts the next observation of the real
world; ``X`` is built per lane from the observation, the domain context and the
oracle's dynamics estimate. The inverse model ``h(s', s)`` names the simulator
action that leads from ``s`` to ``s'``. Grounding replaces a policy action ``a``
by ``h(f(s, a, X), s)`` before it is executed in simulation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .agent import DQNAgent, run_episode
from .env import OBS_DIM, EpisodeStats, TrafficSignalEnv
from .neural import Adam, MlpSpec, cross_entropy_loss, glorot_init, mlp_backward, mlp_forward, mse_loss, softmax
from .oracle import DynamicsEstimate, DynamicsOracle, make_backend
from .scenario import NUM_LANES, NUM_PHASES, ConfigError, DomainContext, ExperimentConfig, RoadType, Weather, \
    builtin_profile
from .streams import episode_seed, stream

MODES = ("direct", "vanilla_gat", "prompt_gat")
MODE_ALIASES = {"direct": "direct", "vanilla": "vanilla_gat", "vanilla_gat": "vanilla_gat",
                "prompt": "prompt_gat", "prompt_gat": "prompt_gat"}

LANE_INPUT_DIM = 1 + 4 + len(Weather) + len(RoadType)
LANE_INPUT_COLS = NUM_LANES * LANE_INPUT_DIM
COUNT_SCALE = 20.0

_V0 = builtin_profile("V0")
_ESTIMATE_SCALE = np.array([_V0.accel, _V0.decel, _V0.e_decel, max(_V0.startup_delay, 1.0)])
_WEATHERS = list(Weather)
_ROADS = list(RoadType)


def normalize_mode(mode: str) -> str:
    try:
        return MODE_ALIASES[mode]
    except KeyError:
        raise ConfigError("mode", f"unknown mode {mode!r}; expected one of {', '.join(MODES)}") from None


# --- records ------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionRecord:
    s: np.ndarray
    a: int
    s_next: np.ndarray
    r: float
    ctx: DomainContext
    lane_estimates: tuple[DynamicsEstimate, ...] | None = None

    def __post_init__(self):
        if self.lane_estimates is not None and len(self.lane_estimates) != NUM_LANES:
            raise ValueError(f"lane_estimates needs {NUM_LANES} entries, got {len(self.lane_estimates)}")

    def to_json(self) -> str:
        est = None if self.lane_estimates is None else [list(e.as_tuple()) for e in self.lane_estimates]
        return json.dumps({"s": [float(v) for v in self.s], "a": int(self.a),
                           "s_next": [float(v) for v in self.s_next], "r": float(self.r),
                           "weather": self.ctx.weather.value, "road_type": self.ctx.road_type.value,
                           "lane_estimates": est})

    @classmethod
    def from_json(cls, line: str) -> "TransitionRecord":
        d = json.loads(line)
        est = d.get("lane_estimates")
        return cls(np.array(d["s"], dtype=np.float64), int(d["a"]), np.array(d["s_next"], dtype=np.float64),
                   float(d["r"]), DomainContext(d["weather"], d["road_type"]),
                   None if est is None else tuple(DynamicsEstimate(*e) for e in est))


def save_dataset(records: Sequence[TransitionRecord], path: str | Path) -> None:
    """One JSON object per line; floats are written with full precision."""
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def load_dataset(path: str | Path) -> list[TransitionRecord]:
    return [TransitionRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --- fusion -------------------------------------------------------------------------

def lane_inputs(s, ctx: DomainContext, estimates: Sequence[DynamicsEstimate]) -> np.ndarray:
    """Pre-fusion rows, one per lane: scaled count, scaled estimate, weather and road one-hots."""
    if len(estimates) != NUM_LANES:
        raise ValueError(f"need {NUM_LANES} lane estimates, got {len(estimates)}")
    s = np.asarray(s, dtype=np.float64)
    rows = np.zeros((NUM_LANES, LANE_INPUT_DIM))
    rows[:, 0] = s[:NUM_LANES] / COUNT_SCALE
    rows[:, 1:5] = np.array([e.as_tuple() for e in estimates]) / _ESTIMATE_SCALE
    rows[:, 5 + _WEATHERS.index(ctx.weather)] = 1.0
    rows[:, 8 + _ROADS.index(ctx.road_type)] = 1.0
    return rows


def fuse_features(s, ctx: DomainContext, estimates: Sequence[DynamicsEstimate], W: np.ndarray,
                  b: np.ndarray) -> np.ndarray:
    """Concatenate ``ReLU(row @ W + b)`` over lanes in index order."""
    return np.maximum(lane_inputs(s, ctx, estimates) @ W + b, 0.0).reshape(-1)


def one_hot(actions, n: int = NUM_PHASES) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((actions.size, n))
    out[np.arange(actions.size), actions.reshape(-1)] = 1.0
    return out


def forward_design(records: Sequence[TransitionRecord], fused: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix ``[s | a | lane rows flattened]`` and next-state targets.

    Without fusion, or for records lacking estimates, the lane block is zero.
    """
    if not records:
        raise ValueError("empty dataset")
    X = np.zeros((len(records), OBS_DIM + 1 + LANE_INPUT_COLS))
    y = np.zeros((len(records), OBS_DIM))
    for i, rec in enumerate(records):
        X[i, :OBS_DIM] = rec.s
        X[i, OBS_DIM] = rec.a
        if fused:
            if rec.lane_estimates is None:
                raise ValueError("fused training needs lane_estimates on every record")
            X[i, OBS_DIM + 1:] = lane_inputs(rec.s, rec.ctx, rec.lane_estimates).reshape(-1)
        y[i] = rec.s_next
    return X, y


def inverse_design(records: Sequence[TransitionRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValueError("empty dataset")
    X = np.array([np.concatenate([r.s_next, r.s]) for r in records])
    return X, np.array([r.a for r in records], dtype=np.int64)


# --- estimators -------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class ForwardModel(RegressorMixin, BaseEstimator):
    """Next-observation regressor with a shared per-lane fusion layer.

    ``fit``/``predict`` take the matrix built by :func:`forward_design`:
    observation, action index, then the flattened pre-fusion lane rows. With
    ``fusion=False`` the fused block fed to the trunk is all zeros.
    """

    def __init__(self, fusion: bool = True, fusion_width: int = 8, hidden: tuple = (128, 64),
                 learning_rate: float = 1e-4, batch_size: int = 64, epochs: int = 20, grad_clip: float = 0.5,
                 init: str = "glorot", random_state: int = 0):
        self.fusion = fusion
        self.fusion_width = fusion_width
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.grad_clip = grad_clip
        self.init = init
        self.random_state = random_state

    @property
    def n_fused(self) -> int:
        return NUM_LANES * self.fusion_width

    def initialize(self) -> "ForwardModel":
        rng = np.random.default_rng(self.random_state)
        self.fusion_spec_ = MlpSpec((LANE_INPUT_DIM, self.fusion_width), output="relu")
        self.trunk_spec_ = MlpSpec((OBS_DIM + NUM_PHASES + self.n_fused, *self.hidden, OBS_DIM))
        fusion_w = glorot_init(self.fusion_spec_, rng)
        trunk_w = glorot_init(self.trunk_spec_, rng)
        if self.init == "zeros":
            fusion_w = [np.zeros_like(w) for w in fusion_w]
            trunk_w = [np.zeros_like(w) for w in trunk_w]
        elif self.init != "glorot":
            raise ValueError(f"unknown init {self.init!r}")
        self.fusion_weights_ = fusion_w
        self.weights_ = trunk_w
        self.optimizer_ = Adam(self.learning_rate, self.grad_clip)
        self._batch_rng = np.random.default_rng([self.random_state, 1])
        self.n_features_in_ = OBS_DIM + 1 + LANE_INPUT_COLS
        self.loss_curve_ = []
        return self

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != OBS_DIM + 1 + LANE_INPUT_COLS:
            raise ValueError(f"expected {OBS_DIM + 1 + LANE_INPUT_COLS} feature columns, got {X.shape[1]}")
        a = X[:, OBS_DIM]
        if np.any(a != np.round(a)) or np.any(a < 0) or np.any(a >= NUM_PHASES):
            raise ValueError("action column must hold integers in 0..3")
        return X

    def _forward(self, X: np.ndarray):
        n = X.shape[0]
        rows = X[:, OBS_DIM + 1:].reshape(n * NUM_LANES, LANE_INPUT_DIM)
        if self.fusion:
            fused, fcache = mlp_forward(self.fusion_spec_, self.fusion_weights_, rows)
            fused = fused.reshape(n, self.n_fused)
        else:
            fused, fcache = np.zeros((n, self.n_fused)), None
        trunk_in = np.hstack([X[:, :OBS_DIM], one_hot(X[:, OBS_DIM].astype(np.int64)), fused])
        out, tcache = mlp_forward(self.trunk_spec_, self.weights_, trunk_in)
        return out, (fcache, tcache, n)

    def fused_features(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = self._check_X(X)
        if not self.fusion:
            return np.zeros((X.shape[0], self.n_fused))
        rows = X[:, OBS_DIM + 1:].reshape(-1, LANE_INPUT_DIM)
        return mlp_forward(self.fusion_spec_, self.fusion_weights_, rows)[0].reshape(X.shape[0], -1)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return self._forward(self._check_X(X))[0]

    def _epoch(self, X: np.ndarray, y: np.ndarray) -> float:
        losses = []
        for idx in _batches(len(X), self.batch_size, self._batch_rng):
            out, (fcache, tcache, n) = self._forward(X[idx])
            loss, g = mse_loss(out, y[idx])
            tgrads, gin = mlp_backward(tcache, g)
            params, grads = self.weights_, tgrads
            if self.fusion:
                gfused = gin[:, OBS_DIM + NUM_PHASES:].reshape(n * NUM_LANES, self.fusion_width)
                fgrads, _ = mlp_backward(fcache, gfused)
                params, grads = self.weights_ + self.fusion_weights_, tgrads + fgrads
            self.optimizer_.step(params, grads)
            losses.append(loss * len(idx))
        mean = float(sum(losses) / len(X))
        self.loss_curve_.append(mean)
        return mean

    def partial_fit(self, X, y) -> "ForwardModel":
        """One epoch over ``(X, y)``; initializes on first use."""
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        X = self._check_X(X)
        if y.ndim != 2 or y.shape[1] != OBS_DIM:
            raise ValueError(f"targets must have {OBS_DIM} columns")
        if not hasattr(self, "weights_"):
            self.initialize()
        self._epoch(X, y)
        return self

    def fit(self, X, y) -> "ForwardModel":
        self.initialize()
        for _ in range(self.epochs):
            self.partial_fit(X, y)
        return self


class InverseModel(ClassifierMixin, BaseEstimator):
    """Action classifier on ``[s_next | s]``; ties in the logits go to the lowest action."""

    def __init__(self, n_actions: int = NUM_PHASES, hidden: tuple = (64, 64), learning_rate: float = 1e-5,
                 batch_size: int = 64, epochs: int = 20, grad_clip: float = 0.5, init: str = "glorot",
                 random_state: int = 0):
        self.n_actions = n_actions
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.grad_clip = grad_clip
        self.init = init
        self.random_state = random_state

    def initialize(self) -> "InverseModel":
        self.spec_ = MlpSpec((2 * OBS_DIM, *self.hidden, self.n_actions), output="softmax")
        if self.init == "zeros":
            self.weights_ = [np.zeros_like(w) for w in glorot_init(self.spec_, np.random.default_rng(0))]
        elif self.init == "glorot":
            self.weights_ = glorot_init(self.spec_, np.random.default_rng(self.random_state))
        else:
            raise ValueError(f"unknown init {self.init!r}")
        self.optimizer_ = Adam(self.learning_rate, self.grad_clip)
        self._batch_rng = np.random.default_rng([self.random_state, 1])
        self.classes_ = np.arange(self.n_actions)
        self.n_features_in_ = 2 * OBS_DIM
        self.loss_curve_ = []
        return self

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2 * OBS_DIM:
            raise ValueError(f"expected {2 * OBS_DIM} feature columns, got {X.shape[1]}")
        return X

    def decision_function(self, X) -> np.ndarray:
        """Logits, one column per action."""
        check_is_fitted(self, "weights_")
        return mlp_forward(self.spec_, self.weights_, self._check_X(X))[0]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def partial_fit(self, X, y) -> "InverseModel":
        X, y = check_X_y(X, y, dtype=np.float64)
        X = self._check_X(X)
        if not hasattr(self, "weights_"):
            self.initialize()
        y = y.astype(np.int64)
        losses = []
        for idx in _batches(len(X), self.batch_size, self._batch_rng):
            logits, cache = mlp_forward(self.spec_, self.weights_, X[idx])
            loss, g = cross_entropy_loss(logits, y[idx])
            grads, _ = mlp_backward(cache, g)
            self.optimizer_.step(self.weights_, grads)
            losses.append(loss * len(idx))
        self.loss_curve_.append(float(sum(losses) / len(X)))
        return self

    def fit(self, X, y) -> "InverseModel":
        self.initialize()
        for _ in range(self.epochs):
            self.partial_fit(X, y)
        return self


def make_models(config: ExperimentConfig, mode: str, seed: int) -> tuple[ForwardModel, InverseModel]:
    g = config.gat
    fwd = ForwardModel(fusion=normalize_mode(mode) == "prompt_gat", fusion_width=g.fusion_width,
                       hidden=g.forward_hidden, learning_rate=g.forward_lr, batch_size=g.batch_size,
                       epochs=g.forward_epochs, grad_clip=g.grad_clip,
                       random_state=episode_seed(seed, "init", 1)).initialize()
    inv = InverseModel(hidden=g.inverse_hidden, learning_rate=g.inverse_lr, batch_size=g.batch_size,
                       epochs=g.inverse_epochs, grad_clip=g.grad_clip,
                       random_state=episode_seed(seed, "init", 2)).initialize()
    return fwd, inv


def train_forward(model: ForwardModel, records: Sequence[TransitionRecord], epochs: int | None = None) -> float:
    """Continue training on ``records``; returns the mean loss of the last epoch."""
    if not records:
        raise ValueError("train_forward: empty dataset")
    X, y = forward_design(records, fused=model.fusion)
    for _ in range(model.epochs if epochs is None else epochs):
        model.partial_fit(X, y)
    return model.loss_curve_[-1]


def train_inverse(model: InverseModel, records: Sequence[TransitionRecord], epochs: int | None = None) -> float:
    if not records:
        raise ValueError("train_inverse: empty dataset")
    X, y = inverse_design(records)
    for _ in range(model.epochs if epochs is None else epochs):
        model.partial_fit(X, y)
    return model.loss_curve_[-1]


def forward_row(s, a: int, ctx: DomainContext | None = None,
                estimates: Sequence[DynamicsEstimate] | None = None) -> np.ndarray:
    row = np.zeros(OBS_DIM + 1 + LANE_INPUT_COLS)
    row[:OBS_DIM] = s
    row[OBS_DIM] = a
    if estimates is not None:
        row[OBS_DIM + 1:] = lane_inputs(s, ctx, estimates).reshape(-1)
    return row


def ground_action(s, a: int, forward: ForwardModel, inverse: InverseModel, oracle: DynamicsOracle | None,
                  ctx: DomainContext) -> int:
    """``h(f(s, a, X), s)``. The oracle is consulted only when the forward model fuses."""
    s = np.asarray(s, dtype=np.float64)
    estimates = None
    if forward.fusion:
        if oracle is None:
            raise ConfigError("oracle", "fused forward model needs an oracle")
        estimates = oracle.lane_estimates(ctx, s[:NUM_LANES])
    s_hat = forward.predict(forward_row(s, a, ctx, estimates)[None, :])[0]
    return int(inverse.predict(np.concatenate([s_hat, s])[None, :])[0])


# --- outer loop ----------------------------------------------------------------------

@dataclass
class GatRun:
    mode: str
    seed: int
    policy: DQNAgent
    forward: ForwardModel
    inverse: InverseModel
    sim_stats: EpisodeStats
    real_stats: EpisodeStats
    d_sim: list = field(default_factory=list)
    d_real: list = field(default_factory=list)
    oracle_calls: int = 0
    grounded: int = 0
    forward_mse: float = float("nan")
    forward_losses: list = field(default_factory=list)
    inverse_losses: list = field(default_factory=list)
    curve: list = field(default_factory=list)


def _mean_stats(stats: Sequence[EpisodeStats]) -> EpisodeStats:
    if len(stats) == 1:
        return stats[0]
    return EpisodeStats(att=float(np.mean([s.att for s in stats])), tp=float(np.mean([s.tp for s in stats])),
                        reward_mean=float(np.mean([s.reward_mean for s in stats])),
                        queue_mean=float(np.mean([s.queue_mean for s in stats])),
                        delay=float(np.mean([s.delay for s in stats])))


def evaluate(config: ExperimentConfig, agent: DQNAgent, env_factory: Callable[[], object], seed: int,
             episodes: int = 1, record: list | None = None) -> EpisodeStats:
    """Greedy policy on the evaluation traffic of ``seed``."""
    stats = []
    for k in range(episodes):
        env = env_factory()
        run_episode(env, agent, seed=episode_seed(seed, "eval", k), train=False, epsilon=0.0, record=record)
        stats.append(env.episode_stats())
    return _mean_stats(stats)


def pretrain_policy(config: ExperimentConfig, seed: int, episodes: int | None = None,
                    on_episode: Callable[[int, list], None] | None = None) -> DQNAgent:
    """Train a fresh policy in the simulator; episode ``k`` uses arrival stream ``k``."""
    agent = DQNAgent.from_config(config, seed)
    env = TrafficSignalEnv(config, config.sim_profile)
    for ep in range(config.gat.pretrain_episodes if episodes is None else episodes):
        rewards = run_episode(env, agent, seed=episode_seed(seed, "arrivals", ep))
        if on_episode is not None:
            on_episode(ep, rewards)
    return agent


def run_prompt_gat(config: ExperimentConfig, mode: str, seed: int | None = None,
                   oracle: DynamicsOracle | None = None, policy: DQNAgent | None = None,
                   real_env_factory: Callable[[], object] | None = None,
                   log_dir: str | Path | None = None) -> GatRun:
    """Pretrain (unless ``policy`` is given), then alternate rollouts, model fitting
    and grounded policy training for ``config.trainer.episodes`` iterations, and
    finally evaluate the greedy policy in both worlds.

    Rollouts act epsilon-greedily at the policy's current epsilon, draw that
    exploration from their own streams and never feed the replay buffer, so
    in ``direct`` mode the policy matches plain simulator training with the
    same seed bit for bit.
    """
    mode = normalize_mode(mode)
    seed = config.seed if seed is None else int(seed)
    if mode == "prompt_gat" and oracle is None:
        oracle = DynamicsOracle(make_backend(config.oracle), config.oracle.cache or None)
    calls_before = oracle.calls if oracle is not None else 0
    tr, g = config.trainer, config.gat
    log_dir = Path(log_dir) if log_dir is not None else None

    def log(name):
        return None if log_dir is None else log_dir / f"{name}.csv"

    def sim_env(name=None, steps=None):
        return TrafficSignalEnv(config, config.sim_profile, steps=steps, log_path=log(name) if name else None)

    def real_env(name=None, steps=None):
        if real_env_factory is not None:
            return real_env_factory()
        return TrafficSignalEnv(config, config.real_profile, steps=steps, log_path=log(name) if name else None)

    curve = []
    if policy is None:
        agent = pretrain_policy(config, seed, on_episode=lambda ep, rw: curve.append(("pretrain", ep, rw)))
    else:
        agent = policy
    fwd, inv = make_models(config, mode, seed)
    real_ctx, sim_ctx = config.real_context, config.sim_context
    d_sim: list[TransitionRecord] = []
    d_real: list[TransitionRecord] = []
    f_losses, i_losses = [], []
    grounded = [0]

    def ground(obs, a):
        grounded[0] += 1
        return ground_action(obs, a, fwd, inv, oracle, real_ctx)

    episode_index = g.pretrain_episodes if policy is None else agent.episodes
    for it in range(tr.episodes):
        trace: list = []
        run_episode(sim_env(), agent, seed=episode_seed(seed, "rollout", 0, it), train=False,
                    epsilon=agent.epsilon, record=trace, rng=stream(seed, "rollout", 0, it, 1))
        d_sim.extend(TransitionRecord(s, a, sn, r, sim_ctx) for s, a, sn, r in trace)
        for k in range(g.real_rollouts):
            trace = []
            run_episode(real_env(), agent, seed=episode_seed(seed, "rollout", 1, it, k), train=False,
                        epsilon=agent.epsilon, record=trace, rng=stream(seed, "rollout", 1, it, k + 1))
            for s, a, sn, r in trace:
                est = None
                if mode == "prompt_gat":
                    est = tuple(oracle.lane_estimates(real_ctx, s[:NUM_LANES]))
                d_real.append(TransitionRecord(s, a, sn, r, real_ctx, est))
        if mode != "direct":
            f_losses.append(train_forward(fwd, d_real, g.forward_epochs))
            i_losses.append(train_inverse(inv, d_sim, g.inverse_epochs))
        for j in range(g.policy_episodes):
            rewards = run_episode(sim_env("train_sim"), agent, seed=episode_seed(seed, "arrivals", episode_index),
                                  ground=ground if mode != "direct" else None)
            curve.append(("policy", episode_index, rewards))
            episode_index += 1

    steps = tr.test_steps
    sim_stats = evaluate(config, agent, lambda: sim_env("eval_sim", steps), seed, g.eval_episodes)
    held_out: list = []
    real_stats = evaluate(config, agent, lambda: real_env("eval_real", steps), seed, g.eval_episodes, held_out)
    mse = forward_error(fwd, held_out, real_ctx, oracle if fwd.fusion else None)
    calls = (oracle.calls - calls_before) if oracle is not None else 0
    return GatRun(mode, seed, agent, fwd, inv, sim_stats, real_stats, d_sim, d_real, calls, grounded[0],
                  mse, f_losses, i_losses, curve)


def forward_error(model: ForwardModel, trace: Sequence[tuple], ctx: DomainContext,
                  oracle: DynamicsOracle | None = None) -> float:
    """Mean squared next-state error over ``(s, a, s_next, r)`` tuples."""
    if not trace:
        return float("nan")
    rows = [forward_row(s, a, ctx, oracle.lane_estimates(ctx, s[:NUM_LANES]) if oracle is not None else None)
            for s, a, _, _ in trace]
    target = np.array([sn for _, _, sn, _ in trace])
    return float(np.mean((model.predict(np.array(rows)) - target) ** 2))
