"""Numpy actor-critic: a tanh MLP trunk with a Gaussian action head and a value head.

Parameters live in one flat float64 vector; :class:`PolicyLayout` maps it to weight
views.  Gradients are written out by hand (reverse mode through two tanh layers).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
INIT_LOG_STD = float(np.log(0.5))
# Network means are centred on 0; the sampled unit action is centred on half capacity.
ACTION_OFFSET = 0.5
PARAM_MAGIC = b"MRCL"
PARAM_VERSION = 1


@dataclass(frozen=True)
class PolicyLayout:
    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (64, 64)

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        dims = (self.obs_dim, *self.hidden)
        out = []
        for i in range(len(self.hidden)):
            out += [(f"W{i}", (dims[i], dims[i + 1])), (f"b{i}", (dims[i + 1],))]
        h = dims[-1]
        out += [("Wmu", (h, self.act_dim)), ("bmu", (self.act_dim,)), ("log_std", (self.act_dim,)),
                ("Wv", (h, 1)), ("bv", (1,))]
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {flat.shape}, layout needs ({self.size},)")
        views, i = {}, 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            views[name] = flat[i:i + n].reshape(shape)
            i += n
        return views

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(shape), min(shape)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


def init_params(layout: PolicyLayout, rng: np.random.Generator) -> np.ndarray:
    flat = layout.zeros()
    p = layout.unpack(flat)
    for i in range(len(layout.hidden)):
        p[f"W{i}"][...] = _orthogonal(rng, p[f"W{i}"].shape, np.sqrt(2.0))
    p["Wmu"][...] = _orthogonal(rng, p["Wmu"].shape, 0.01)
    p["Wv"][...] = _orthogonal(rng, p["Wv"].shape, 1.0)
    p["log_std"][...] = INIT_LOG_STD
    return flat


def forward(layout: PolicyLayout, params: np.ndarray, obs: np.ndarray, cache: bool = False):
    """Returns (mu, log_std, value) and optionally the activations needed by :func:`backward`."""
    p = layout.unpack(params)
    x = np.asarray(obs, dtype=float)
    if x.shape[-1] != layout.obs_dim:
        raise ValueError(f"observation has {x.shape[-1]} features, policy expects {layout.obs_dim}")
    acts = [x]
    for i in range(len(layout.hidden)):
        x = np.tanh(x @ p[f"W{i}"] + p[f"b{i}"])
        acts.append(x)
    mu = x @ p["Wmu"] + p["bmu"]
    value = (x @ p["Wv"] + p["bv"])[..., 0]
    if cache:
        return mu, p["log_std"].copy(), value, acts
    return mu, p["log_std"].copy(), value


def backward(layout: PolicyLayout, params: np.ndarray, acts: list[np.ndarray], d_mu: np.ndarray,
             d_log_std: np.ndarray, d_value: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss given its partials with respect to the three outputs."""
    p = layout.unpack(params)
    grad = layout.zeros()
    g = layout.unpack(grad)
    h = acts[-1]
    g["Wmu"][...] = h.T @ d_mu
    g["bmu"][...] = d_mu.sum(0)
    g["log_std"][...] = d_log_std
    g["Wv"][...] = h.T @ d_value[:, None]
    g["bv"][...] = d_value.sum()
    dh = d_mu @ p["Wmu"].T + d_value[:, None] @ p["Wv"].T
    for i in reversed(range(len(layout.hidden))):
        dz = dh * (1.0 - acts[i + 1] ** 2)
        g[f"W{i}"][...] = acts[i].T @ dz
        g[f"b{i}"][...] = dz.sum(0)
        if i:
            dh = dz @ p[f"W{i}"].T
    return grad


@dataclass
class MlpPolicy:
    """Convenience bundle of a layout and its parameter vector."""

    layout: PolicyLayout
    params: np.ndarray

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, rng: np.random.Generator,
               hidden=(64, 64)) -> "MlpPolicy":
        layout = PolicyLayout(obs_dim, act_dim, tuple(hidden))
        return cls(layout, init_params(layout, rng))

    def __call__(self, obs):
        return forward(self.layout, self.params, obs)

    def copy(self) -> "MlpPolicy":
        return MlpPolicy(self.layout, self.params.copy())

    def save(self, path) -> None:
        save_params(path, self.layout, self.params)

    @classmethod
    def load(cls, path) -> "MlpPolicy":
        return cls(*load_params(path))


def save_params(path, layout: PolicyLayout, params: np.ndarray) -> None:
    """Binary file: magic, version, obs/act dims, hidden sizes, then little-endian float64 params."""
    header = PARAM_MAGIC + struct.pack("<IIII", PARAM_VERSION, layout.obs_dim, layout.act_dim,
                                       len(layout.hidden))
    header += struct.pack(f"<{len(layout.hidden)}I", *layout.hidden)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + np.asarray(params, dtype="<f8").tobytes())


def load_params(path) -> tuple[PolicyLayout, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, obs_dim, act_dim, n_hidden = struct.unpack_from("<IIII", data, 4)
    if version != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported parameter file version {version}")
    off = 4 + 16
    hidden = struct.unpack_from(f"<{n_hidden}I", data, off)
    off += 4 * n_hidden
    layout = PolicyLayout(obs_dim, act_dim, tuple(hidden))
    params = np.frombuffer(data, dtype="<f8", offset=off).astype(float)
    if params.size != layout.size:
        raise ValueError(f"{path}: expected {layout.size} parameters, found {params.size}")
    return layout, params


# --- Gaussian head -------------------------------------------------------------------

def gaussian_logp(x, mean, log_std) -> np.ndarray:
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


def sample_action(mean, log_std, rng: np.random.Generator):
    """Draw x ~ N(mean, exp(log_std)); return (clip(x, 0, 1), x, log-prob of x)."""
    mean = np.asarray(mean, dtype=float)
    x = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return np.clip(x, 0.0, 1.0), x, gaussian_logp(x, mean, log_std)


# --- advantage estimation ------------------------------------------------------------

def gae(rewards, values, bootstrap, gamma: float, lam: float, dones=None):
    """Generalised advantage estimates along axis 0.

    ``dones[t]`` marks that the episode ends after step t; the value after a terminal
    step is treated as zero.  ``bootstrap`` is V(s_T) for the step following the data.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} and values {v.shape} differ in shape")
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=float)
    if d.shape != r.shape:
        raise ValueError("dones must align with rewards")
    adv = np.zeros_like(r)
    next_v = np.asarray(bootstrap, dtype=float) * np.ones_like(r[0])
    last = np.zeros_like(r[0])
    for t in reversed(range(len(r))):
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_v = v[t]
    return adv, adv + v


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# --- PPO -----------------------------------------------------------------------------

@dataclass
class PpoHyper:
    lr: float = 3e-4
    n_steps: int = 2048
    minibatch_size: int = 64
    epochs: int = 10
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float | None = 0.5
    kl_target: float = 0.01
    kl_coef: float = 0.0
    optimizer: str = "adam"
    normalize_advantages: bool = True

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip range must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class PpoBatch:
    """Flat per-sample arrays; ``actions`` are the unclipped Gaussian draws."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    mu: np.ndarray
    log_std: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    def take(self, idx) -> "PpoBatch":
        return PpoBatch(self.obs[idx], self.actions[idx], self.logp[idx], self.mu[idx], self.log_std,
                        self.advantages[idx], self.returns[idx])


def ppo_loss_and_grad(layout: PolicyLayout, params: np.ndarray, batch: PpoBatch, clip: float,
                      vf_coef: float, kl_coef: float, ent_coef: float):
    """Loss to minimise: -clipped surrogate + c_v MSE + c_KL KL(old||new) - c_ent entropy."""
    n = len(batch)
    mu, log_std, value, acts = forward(layout, params, batch.obs, cache=True)
    mean = mu + ACTION_OFFSET
    sig = np.exp(log_std)
    z = (batch.actions - mean) / sig
    logp = np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)
    ratio = np.exp(logp - batch.logp)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    surrogate = np.minimum(unclipped, clipped)
    # gradient flows only where the unclipped branch is the minimum
    active = unclipped <= clipped
    d_logp = -np.where(active, ratio * adv, 0.0) / n

    d_mu = d_logp[:, None] * z / sig
    d_ls = np.sum(d_logp[:, None] * (z**2 - 1.0), axis=0)

    err = value - batch.returns
    d_value = vf_coef * 2.0 * err / n

    old_mean = batch.mu + ACTION_OFFSET
    dmu = mean - old_mean
    var_old, var_new = np.exp(2 * batch.log_std), np.exp(2 * log_std)
    kl_each = np.sum(log_std - batch.log_std + (var_old + dmu**2) / (2 * var_new) - 0.5, axis=-1)
    d_mu = d_mu + kl_coef * dmu / var_new / n
    d_ls = d_ls + kl_coef * np.sum(1.0 - (var_old + dmu**2) / var_new, axis=0) / n

    entropy = gaussian_entropy(log_std)
    d_ls = d_ls - ent_coef

    loss = (-surrogate.mean() + vf_coef * np.mean(err**2) + kl_coef * kl_each.mean()
            - ent_coef * entropy)
    grad = backward(layout, params, acts, d_mu, d_ls, d_value)
    stats = {
        "policy_loss": float(-surrogate.mean()),
        "value_loss": float(np.mean(err**2)),
        "kl": float(kl_each.mean()),
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip)),
    }
    return float(loss), grad, stats


def clip_grad_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(params), np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Sgd:
    lr: float

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


def make_optimizer(hyper: PpoHyper):
    return Adam(hyper.lr) if hyper.optimizer == "adam" else Sgd(hyper.lr)


def ppo_update(layout: PolicyLayout, params: np.ndarray, batch: PpoBatch, hyper: PpoHyper,
               rng: np.random.Generator, optimizer=None):
    """Epochs of shuffled minibatch steps; returns (new params, diagnostics).

    A non-finite loss or gradient aborts the whole update and returns the input params.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    opt = optimizer if optimizer is not None else make_optimizer(hyper)
    if hyper.normalize_advantages:
        batch = replace(batch, advantages=normalize_advantages(batch.advantages))
    theta = params.copy()
    mb = min(hyper.minibatch_size, len(batch))
    history = []
    for _ in range(hyper.epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), mb):
            sub = batch.take(order[start:start + mb])
            loss, grad, stats = ppo_loss_and_grad(layout, theta, sub, hyper.clip, hyper.vf_coef,
                                                  hyper.kl_coef, hyper.ent_coef)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                return params.copy(), {"error": "non-finite loss or gradient", "kl_coef": hyper.kl_coef}
            theta = opt.step(theta, clip_grad_norm(grad, hyper.max_grad_norm))
            history.append(stats | {"loss": loss})
    mu, log_std, _ = forward(layout, theta, batch.obs)
    kl = float(np.mean(np.sum(
        log_std - batch.log_std
        + (np.exp(2 * batch.log_std) + (mu - batch.mu) ** 2) / (2 * np.exp(2 * log_std)) - 0.5,
        axis=-1)))
    diag = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    diag["kl"] = kl
    diag["kl_coef"] = adapt_kl_coef(hyper.kl_coef, kl, hyper.kl_target)
    diag["error"] = None
    return theta, diag


def adapt_kl_coef(coef: float, kl: float, target: float) -> float:
    if kl > 2.0 * target:
        return coef * 2.0
    if kl < target / 2.0:
        return coef / 2.0
    return coef


# --- rollouts --------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Time-major (T, B, ...) arrays for B lock-step episodes of length T."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    mu: np.ndarray
    log_std: np.ndarray
    rewards: np.ndarray  # scalarised
    vec_rewards: np.ndarray  # (T, B, d) normalised, maximisation orientation
    raw_totals: np.ndarray  # (B, d) raw episode objectives
    dones: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.rewards.size

    @property
    def episode_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)

    @property
    def normalized_totals(self) -> np.ndarray:
        return self.vec_rewards.sum(axis=0)

    def to_ppo(self, gamma: float, lam: float) -> PpoBatch:
        adv, ret = gae(self.rewards, self.values, 0.0, gamma, lam, self.dones)
        flat = lambda a: a.reshape(-1, *a.shape[2:])  # noqa: E731
        return PpoBatch(flat(self.obs), flat(self.actions), flat(self.logp), flat(self.mu),
                        self.log_std, flat(adv), flat(ret))


def scalarize_steps(vec_rewards: np.ndarray, weight: np.ndarray, method: str = "linear") -> np.ndarray:
    """Per-step scalar rewards from (T, B, d) vectors.

    Tchebycheff is not additive over time, so it is paid once at the final step on the
    episode-total vector.
    """
    w = np.asarray(weight, dtype=float)
    if method == "linear":
        return vec_rewards @ w
    if method == "tchebycheff":
        out = np.zeros(vec_rewards.shape[:2])
        total = vec_rewards.sum(axis=0)
        out[-1] = -np.max(w * (1.0 - total), axis=-1)
        return out
    raise ValueError(f"unknown scalarisation {method!r}")


def scalarized_rollout(env, layout: PolicyLayout, params: np.ndarray, weight, rng: np.random.Generator,
                       scalarization: str = "linear") -> RolloutBatch:
    """Run ``env.n_envs`` episodes in lock-step with stochastic actions."""
    obs = env.reset(int(rng.integers(2**63 - 1)))
    T = env.horizon
    obs_l, act_l, logp_l, val_l, mu_l, vec_l = [], [], [], [], [], []
    log_std = None
    for _ in range(T):
        mu, log_std, value = forward(layout, params, obs)
        unit, x, logp = sample_action(mu + ACTION_OFFSET, log_std, rng)
        obs_l.append(obs)
        act_l.append(x)
        logp_l.append(logp)
        val_l.append(value)
        mu_l.append(mu)
        obs, vec = env.step(unit)
        vec_l.append(vec)
    vec_rewards = np.array(vec_l)
    dones = np.zeros(vec_rewards.shape[:2])
    dones[-1] = 1.0
    return RolloutBatch(np.array(obs_l), np.array(act_l), np.array(logp_l), np.array(val_l),
                        np.array(mu_l), log_std, scalarize_steps(vec_rewards, weight, scalarization),
                        vec_rewards, env.raw_totals.copy(), dones)


@dataclass
class TrainResult:
    params: np.ndarray
    env_steps: int
    log: list[dict] = field(default_factory=list)
    optimizer: object = None


def train_policy(problem, layout: PolicyLayout, params: np.ndarray, weight, total_steps: int,
                 hyper: PpoHyper, rng: np.random.Generator, scalarization: str = "linear",
                 optimizer=None) -> TrainResult:
    """PPO on the ``weight``-scalarised reward for ``total_steps`` environment steps.

    Each update collects ``hyper.n_steps`` steps rounded to whole episodes (at least one),
    capped by what remains of the budget.
    """
    theta = params.copy()
    opt = make_optimizer(hyper) if optimizer is None else optimizer
    T = problem.horizon
    used, log = 0, []
    kl_coef = hyper.kl_coef
    while total_steps - used >= T:
        n_ep = max(1, min(hyper.n_steps, total_steps - used) // T)
        env = problem.make_env(n_ep)
        batch = scalarized_rollout(env, layout, theta, weight, rng, scalarization)
        used += batch.n_steps
        h = replace(hyper, kl_coef=kl_coef)
        theta, diag = ppo_update(layout, theta, batch.to_ppo(h.gamma, h.lam), h, rng, opt)
        kl_coef = diag["kl_coef"]
        log.append({"env_steps": used, "mean_return": float(batch.episode_returns.mean())} | diag)
    return TrainResult(theta, used, log, opt)


def evaluate_policy(problem, layout: PolicyLayout, params: np.ndarray, n_episodes: int, seed: int):
    """Mean raw and normalised episode objectives under the deterministic mean action."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = problem.make_env(n_episodes)
    obs = env.reset(seed)
    for _ in range(env.horizon):
        mu, _, _ = forward(layout, params, obs)
        obs, _ = env.step(np.clip(mu + ACTION_OFFSET, 0.0, 1.0))
    raw = env.raw_totals.mean(axis=0)
    return raw, problem.normalize(raw)
