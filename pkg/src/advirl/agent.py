"""Proximal Policy Optimization for the attack environment.

The actor-critic is a two-hidden-layer tanh perceptron with a Gaussian
mean head (one output per field parameter), a scalar value head and a
state-independent log standard deviation.  Gradients are derived by hand for
this fixed architecture; ``tests/test_agent.py`` checks them against
central finite differences.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

LOG_2PI = math.log(2.0 * math.pi)
POLICY_MAGIC = b"AVPL"
POLICY_VERSION = 1
_POLICY_HEADER = struct.Struct("<4sIIIII")


class AgentError(ValueError):
    pass


PARAM_NAMES = ("w1", "b1", "w2", "b2", "w_mu", "b_mu", "w_v", "b_v", "log_std")


@dataclass
class PolicyParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_mu: np.ndarray
    b_mu: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        obs_dim, h1 = self.w1.shape
        h2 = self.w2.shape[1]
        act = self.w_mu.shape[1]
        expected = {
            "w1": (obs_dim, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,),
            "w_mu": (h2, act), "b_mu": (act,), "w_v": (h2,), "b_v": (1,), "log_std": (act,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise AgentError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def obs_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def act_dim(self) -> int:
        return self.w_mu.shape[1]

    @property
    def hidden(self) -> Tuple[int, int]:
        return self.w1.shape[1], self.w2.shape[1]

    def arrays(self) -> List[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "PolicyParams":
        return PolicyParams(*(a.copy() for a in self.arrays()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "PolicyParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return PolicyParams(*out)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "PolicyParams") -> bool:
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays()))


def init_policy(obs_dim: int, act_dim: int, hidden: Tuple[int, int] = (64, 64), seed: int = 0,
                log_std_init: float = math.log(0.01), mean_scale: float = 0.01) -> PolicyParams:
    """Scaled-normal trunk, near-zero mean head, std exp(log_std_init) everywhere."""
    rng = np.random.default_rng(seed)
    h1, h2 = hidden
    return PolicyParams(
        w1=rng.normal(0.0, 1.0 / math.sqrt(obs_dim), size=(obs_dim, h1)),
        b1=np.zeros(h1),
        w2=rng.normal(0.0, 1.0 / math.sqrt(h1), size=(h1, h2)),
        b2=np.zeros(h2),
        w_mu=rng.normal(0.0, mean_scale / math.sqrt(h2), size=(h2, act_dim)),
        b_mu=np.zeros(act_dim),
        w_v=rng.normal(0.0, 1.0 / math.sqrt(h2), size=h2),
        b_v=np.zeros(1),
        log_std=np.full(act_dim, float(log_std_init)),
    )


@dataclass(frozen=True)
class PpoConfig:
    n_steps: int = 2
    batch_size: int = 2
    max_grad_norm: float = 0.00001
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    update_epochs: int = 4
    entropy_coeff: float = 0.0
    value_coeff: float = 0.5
    total_timesteps: int = 2000
    seed: int = 0
    hidden: Tuple[int, int] = (64, 64)
    log_std_init: float = math.log(0.01)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_steps < 1:
            raise AgentError("n_steps must be >= 1")
        if not 1 <= self.batch_size <= self.n_steps:
            raise AgentError("batch_size must lie in [1, n_steps]")
        if not 0.0 < self.gamma <= 1.0:
            raise AgentError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise AgentError("gae_lambda must lie in [0, 1]")
        if not self.clip_epsilon > 0:
            raise AgentError("clip_epsilon must be positive")
        if not self.max_grad_norm > 0:
            raise AgentError("max_grad_norm must be positive")
        if self.learning_rate < 0:
            raise AgentError("learning_rate must be nonnegative")
        if self.update_epochs < 1 or self.total_timesteps < 0:
            raise AgentError("update_epochs must be >= 1 and total_timesteps >= 0")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise AgentError("hidden must be two positive layer widths")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "PpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise AgentError(f"unknown ppo config keys: {sorted(unknown)}")
        return cls(**data)


# -- forward pass -----------------------------------------------------------


def _trunk(p: PolicyParams, obs: np.ndarray):
    h1 = np.tanh(obs @ p.w1 + p.b1)
    h2 = np.tanh(h1 @ p.w2 + p.b2)
    return h1, h2


def policy_forward(p: PolicyParams, obs) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (mean, log_std, value) for one observation or a batch of them."""
    x = np.asarray(obs, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != p.obs_dim:
        raise AgentError(f"observation has {x2.shape[1]} entries, policy expects {p.obs_dim}")
    _, h2 = _trunk(p, x2)
    mean = h2 @ p.w_mu + p.b_mu
    value = h2 @ p.w_v + p.b_v[0]
    if single:
        return mean[0], p.log_std.copy(), value[0]
    return mean, p.log_std.copy(), value


def gaussian_log_prob(action, mean, log_std) -> np.ndarray:
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * np.shape(log_std)[-1] * LOG_2PI


def sample_action(mean, log_std, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Draw from the diagonal Gaussian and return the sample with its log density."""
    mean = np.asarray(mean, dtype=np.float64)
    noise = rng.standard_normal(mean.shape)
    action = mean + np.exp(log_std) * noise
    log_prob = -0.5 * float(noise @ noise) - float(np.sum(log_std)) - 0.5 * mean.size * LOG_2PI
    return action, log_prob


# -- rollouts ---------------------------------------------------------------


@dataclass
class RolloutBuffer:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    last_observation: Optional[np.ndarray] = None
    infos: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("observations", "actions", "log_probs", "values", "dones"):
            if len(getattr(self, name)) != n:
                raise AgentError(f"buffer field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.rewards)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float,
                bootstrap_value: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets; also stored on the buffer."""
    rewards = np.asarray(buffer.rewards, dtype=np.float64)
    values = np.asarray(buffer.values, dtype=np.float64)
    dones = np.asarray(buffer.dones, dtype=np.float64)
    n = len(rewards)
    adv = np.zeros(n)
    gae = 0.0
    for t in reversed(range(n)):
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
    buffer.advantages = adv
    buffer.returns = adv + values
    return buffer.advantages, buffer.returns


def collect_rollout(env, p: PolicyParams, n_steps: int, rng: np.random.Generator,
                    obs: Optional[np.ndarray] = None,
                    on_step: Optional[Callable] = None) -> RolloutBuffer:
    """Step the environment ``n_steps`` times with the current policy, resetting on done."""
    if obs is None:
        obs = env.reset()
    rows = {k: [] for k in ("observations", "actions", "log_probs", "values", "rewards", "dones")}
    infos = []
    for _ in range(n_steps):
        mean, log_std, value = policy_forward(p, obs)
        action, logp = sample_action(mean, log_std, rng)
        result = env.step(action)
        rows["observations"].append(obs)
        rows["actions"].append(action)
        rows["log_probs"].append(logp)
        rows["values"].append(float(value))
        rows["rewards"].append(float(result.reward))
        rows["dones"].append(bool(result.done))
        infos.append(result)
        if on_step is not None:
            on_step(result, env)
        obs = env.reset() if result.done else result.observation
    return RolloutBuffer(
        observations=np.array(rows["observations"]),
        actions=np.array(rows["actions"]),
        log_probs=np.array(rows["log_probs"]),
        values=np.array(rows["values"]),
        rewards=np.array(rows["rewards"]),
        dones=np.array(rows["dones"], dtype=bool),
        last_observation=obs,
        infos=infos,
    )


# -- loss and gradients ------------------------------------------------------


def ppo_loss_and_grad(p: PolicyParams, obs, actions, old_log_probs, advantages, returns,
                      cfg: PpoConfig, normalize: bool = True):
    """Clipped-surrogate loss for one minibatch and its exact gradient.

    Returns ``(loss, grads, stats)`` where ``grads`` is a PolicyParams of
    partial derivatives.
    """
    x = np.asarray(obs, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    b = x.shape[0]
    adv = np.asarray(advantages, dtype=np.float64)
    if normalize:
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    ret = np.asarray(returns, dtype=np.float64)

    h1, h2 = _trunk(p, x)
    mean = h2 @ p.w_mu + p.b_mu
    value = h2 @ p.w_v + p.b_v[0]
    inv_std = np.exp(-p.log_std)
    z = (a - mean) * inv_std
    logp = -0.5 * np.sum(z * z, axis=1) - np.sum(p.log_std) - 0.5 * p.act_dim * LOG_2PI
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(logp - np.asarray(old_log_probs, dtype=np.float64))
        surr1 = ratio * adv
        surr2 = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    value_loss = np.mean((value - ret) ** 2)
    entropy = float(np.sum(p.log_std) + 0.5 * p.act_dim * (1.0 + LOG_2PI))
    loss = policy_loss + cfg.value_coeff * value_loss - cfg.entropy_coeff * entropy

    # the unclipped branch carries gradient wherever it attains the minimum
    active = surr1 <= surr2
    with np.errstate(over="ignore", invalid="ignore"):
        d_logp = np.where(active, -adv * ratio / b, 0.0)
    d_mean = d_logp[:, None] * z * inv_std
    d_log_std = d_logp @ (z * z - 1.0) - cfg.entropy_coeff
    d_value = cfg.value_coeff * 2.0 * (value - ret) / b

    g_w_mu = h2.T @ d_mean
    g_b_mu = d_mean.sum(axis=0)
    g_w_v = h2.T @ d_value
    g_b_v = np.array([d_value.sum()])
    d_h2 = d_mean @ p.w_mu.T + np.outer(d_value, p.w_v)
    d_z2 = d_h2 * (1.0 - h2 * h2)
    g_w2 = h1.T @ d_z2
    g_b2 = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ p.w2.T) * (1.0 - h1 * h1)
    g_w1 = x.T @ d_z1
    g_b1 = d_z1.sum(axis=0)
    grads = PolicyParams(g_w1, g_b1, g_w2, g_b2, g_w_mu, g_b_mu, g_w_v, g_b_v, d_log_std)
    clipped = np.abs(ratio - 1.0) > cfg.clip_epsilon
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": entropy,
        "clip_fraction": float(np.mean(clipped)),
    }
    return float(loss), grads, stats


def global_norm(grads: PolicyParams) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays()))


def clip_grads(grads: PolicyParams, max_norm: float) -> Tuple[PolicyParams, float]:
    """Scale gradients so their global l2 norm does not exceed ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = PolicyParams(*(g * scale for g in grads.arrays()))
    return grads, norm


def ppo_update(p: PolicyParams, buffer: RolloutBuffer, cfg: PpoConfig,
               rng: Optional[np.random.Generator] = None) -> Tuple[PolicyParams, Dict]:
    """Run ``update_epochs`` passes of clipped-surrogate gradient descent over the buffer."""
    if buffer.advantages is None or buffer.returns is None:
        raise AgentError("compute_gae must run before ppo_update")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    new = p.copy()
    n = len(buffer)
    history = []
    for _ in range(cfg.update_epochs):
        order = rng.permutation(n) if n > cfg.batch_size else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            # non-finite values are detected below, so numpy need not warn about them
            with np.errstate(invalid="ignore", over="ignore"):
                loss, grads, stats = ppo_loss_and_grad(
                    new, buffer.observations[idx], buffer.actions[idx], buffer.log_probs[idx],
                    buffer.advantages[idx], buffer.returns[idx], cfg,
                )
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.arrays()):
                msg = (f"non-finite loss or gradient (loss={loss}, "
                       f"policy_loss={stats['policy_loss']}, value_loss={stats['value_loss']}); "
                       "update aborted")
                log.warning(msg)
                return p, {"aborted": msg, "updates": len(history)}
            grads, norm = clip_grads(grads, cfg.max_grad_norm)
            for param, g in zip(new.arrays(), grads.arrays()):
                param -= cfg.learning_rate * g
            stats["grad_norm"] = norm
            history.append(stats)
    summary = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    summary["updates"] = len(history)
    return new, summary


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    best_params: np.ndarray
    best_reward: float
    history: List[dict]
    policy: PolicyParams
    best_step: int = -1


def history_row(step: int, episode: int, result, cfg) -> dict:
    """One reward-history record for a StepResult under an AttackConfig."""
    summary = result.summary
    target = summary.get(cfg.target_label) if cfg.target_label else None
    true = summary.get(cfg.true_label)
    if cfg.target_label:
        count = target.count if target else 0
    else:
        count = cfg.num_views - (true.count if true else 0)
    return {
        "step": step,
        "episode": episode,
        "reward": float(result.reward),
        "target_avg_conf": target.avg_confidence if target else 0.0,
        "true_avg_conf": true.avg_confidence if true else 0.0,
        "mse": float(result.mse),
        "target_count": count,
    }


def train(env, cfg: PpoConfig, policy: Optional[PolicyParams] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Alternate rollouts and PPO updates, keeping the highest-reward parameter vector."""
    rng = np.random.default_rng(cfg.seed)
    if policy is None:
        policy = init_policy(env.observation_dim, env.action_dim, cfg.hidden, seed=cfg.seed,
                             log_std_init=cfg.log_std_init)
    history: List[dict] = []
    best = {"reward": -math.inf, "params": env.base.params.copy(), "step": -1}
    counters = {"step": 0, "episode": 0}

    def on_step(result, env_):
        row = history_row(counters["step"], counters["episode"], result, env_.config)
        history.append(row)
        if result.reward > best["reward"]:
            best.update(reward=result.reward, params=env_.params.copy(), step=counters["step"])
        if progress is not None:
            progress(row)
        counters["step"] += 1
        if result.done:
            counters["episode"] += 1

    obs = env.reset()
    while counters["step"] < cfg.total_timesteps:
        n = min(cfg.n_steps, cfg.total_timesteps - counters["step"])
        try:
            buf = collect_rollout(env, policy, n, rng, obs=obs, on_step=on_step)
        except Exception as exc:
            raise RuntimeError(f"environment failed at step {counters['step']}: {exc}") from exc
        obs = buf.last_observation
        last_done = bool(buf.dones[-1])
        bootstrap = 0.0 if last_done else float(policy_forward(policy, obs)[2])
        compute_gae(buf, cfg.gamma, cfg.gae_lambda, bootstrap)
        if len(buf) >= cfg.batch_size:
            policy, _ = ppo_update(policy, buf, cfg, rng)
    return TrainResult(best["params"], best["reward"], history, policy, best["step"])


# -- checkpoints ------------------------------------------------------------


def save_policy(p: PolicyParams, path: PathLike) -> None:
    h1, h2 = p.hidden
    header = _POLICY_HEADER.pack(POLICY_MAGIC, POLICY_VERSION, p.obs_dim, h1, h2, p.act_dim)
    Path(path).write_bytes(header + p.to_vector().astype("<f8").tobytes())


def load_policy(path: PathLike) -> PolicyParams:
    data = Path(path).read_bytes()
    if data[:4] != POLICY_MAGIC:
        raise AgentError(f"{path}: not a policy checkpoint")
    if len(data) < _POLICY_HEADER.size:
        raise AgentError(f"{path}: truncated header")
    _, version, obs_dim, h1, h2, act = _POLICY_HEADER.unpack_from(data)
    if version != POLICY_VERSION:
        raise AgentError(f"{path}: checkpoint version {version}, expected {POLICY_VERSION}")
    template = init_policy(obs_dim, act, (h1, h2))
    vec = np.frombuffer(data[_POLICY_HEADER.size:], dtype="<f8")
    if vec.size != template.to_vector().size:
        raise AgentError(f"{path}: payload size does not match header shapes")
    return template.from_vector(vec.astype(np.float64))
