"""Discrete soft actor-critic over neighbour-selection actions."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .env import EnvAbort, EnvConfig, ExploreEnv, Transition
from .neural import (
    NetConfig, PolicyNet, QNet, collate, load_module, load_optimizer, read_checkpoint, save_checkpoint,
)

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "episodes", "J_Q", "J_pi", "J_alpha", "alpha", "entropy",
                 "episode_reward", "episode_length", "episode_rate"]


@dataclass
class SacConfig:
    gamma: float = 1.0
    batch: int = 256
    lr: float = 1e-5
    alpha_lr: float = 1e-5
    alpha_init: float = 0.1
    entropy_scale: float = 0.01     # target entropy = scale * ln(k)
    target_period: int = 256
    capacity: int = 10_000
    min_fill: int = 2_000
    updates_per_episode: int = 1
    instances: int = 32
    episodes: int = 3_000
    seed: int = 0
    checkpoint_every: int = 100     # episodes

    def __post_init__(self):
        for name in ("batch", "lr", "alpha_lr", "alpha_init", "entropy_scale", "target_period",
                     "capacity", "min_fill", "updates_per_episode", "instances"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def target_entropy(self, k: int) -> float:
        return self.entropy_scale * math.log(k)


class ReplayBuffer:
    """FIFO transition store with uniform sampling without replacement."""

    def __init__(self, capacity: int = 10_000, min_fill: int = 2_000):
        self.capacity, self.min_fill = capacity, min_fill
        self.items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def append(self, t) -> None:
        self.items.append(t)

    def extend(self, ts) -> None:
        self.items.extend(ts)

    @property
    def ready(self) -> bool:
        return len(self.items) >= self.min_fill

    def sample(self, n: int, rng: np.random.Generator) -> list:
        idx = rng.choice(len(self.items), size=min(n, len(self.items)), replace=False)
        return [self.items[i] for i in idx]


# -- losses -----------------------------------------------------------------

def soft_state_value(q, probs, alpha, log_probs=None):
    """``sum_a pi(a) (Q(a) - alpha log pi(a))`` with ``0 log 0 = 0``.

    Works on tensors or arrays; the last axis indexes actions.
    """
    if float(alpha) <= 0:
        raise ValueError("temperature must be positive")
    q, probs = torch.as_tensor(q, dtype=torch.float64) if not torch.is_tensor(q) else q, \
        torch.as_tensor(probs, dtype=torch.float64) if not torch.is_tensor(probs) else probs
    if log_probs is None:
        log_probs = torch.where(probs > 0, torch.log(probs.clamp_min(1e-300)), torch.zeros_like(probs))
    return (probs * (q - alpha * log_probs)).sum(-1)


@dataclass
class Batch:
    obs: object           # GraphBatch
    next_obs: object
    actions: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor

    @classmethod
    def of(cls, transitions):
        ts = list(transitions)
        return cls(collate(t.obs for t in ts), collate(t.next_obs for t in ts),
                   torch.tensor([t.action for t in ts], dtype=torch.int64),
                   torch.tensor([t.reward for t in ts], dtype=torch.float32),
                   torch.tensor([float(t.done) for t in ts], dtype=torch.float32))


def critic_targets(batch: Batch, targets, policy, alpha, gamma):
    with torch.no_grad():
        probs, logp = policy(batch.next_obs)
        tq = torch.minimum(targets[0](batch.next_obs), targets[1](batch.next_obs))
        v = soft_state_value(tq, probs, alpha, logp)
        return batch.rewards + gamma * (1.0 - batch.dones) * v


def critic_loss(batch: Batch, critics, targets, policy, alpha, gamma):
    """Sum over both critics of the mean half squared TD error. Returns ``(loss, q1, q2)``."""
    y = critic_targets(batch, targets, policy, alpha, gamma)
    a = batch.actions[:, None]
    q1, q2 = critics[0](batch.obs), critics[1](batch.obs)
    loss = 0.5 * ((q1.gather(1, a).squeeze(1) - y) ** 2).mean() + 0.5 * ((q2.gather(1, a).squeeze(1) - y) ** 2).mean()
    return loss, q1, q2


def policy_loss(obs, qmin, policy, alpha):
    """``E_o sum_a pi(a|o) (alpha log pi(a|o) - min Q(o,a))``; ``qmin`` is treated as constant."""
    probs, logp = policy(obs)
    loss = (probs * (alpha * logp - qmin.detach())).sum(-1).mean()
    entropy = -(probs * logp).sum(-1)
    return loss, entropy.detach()


def temperature_loss(entropy, log_alpha, target_entropy):
    """``E[-alpha (log pi + H_target)]`` in expectation over pi: ``alpha (H - H_target)``."""
    return (log_alpha.exp() * (entropy.detach() - target_entropy)).mean()


# -- trainer ----------------------------------------------------------------

class Trainer:
    def __init__(self, env_cfg: EnvConfig, net_cfg: NetConfig = NetConfig(), cfg: SacConfig = SacConfig()):
        self.env_cfg, self.net_cfg, self.cfg = env_cfg, net_cfg, cfg
        s = cfg.seed
        self.policy = PolicyNet(net_cfg, seed=s * 10 + 1)
        self.critics = [QNet(net_cfg, seed=s * 10 + 2), QNet(net_cfg, seed=s * 10 + 3)]
        self.targets = [copy.deepcopy(c).requires_grad_(False) for c in self.critics]
        self.log_alpha = torch.tensor(math.log(cfg.alpha_init), requires_grad=True)
        self.pi_opt = torch.optim.Adam(self.policy.parameters(), lr=cfg.lr)
        self.q_opt = torch.optim.Adam([p for c in self.critics for p in c.parameters()], lr=cfg.lr)
        self.a_opt = torch.optim.Adam([self.log_alpha], lr=cfg.alpha_lr)
        self.buffer = ReplayBuffer(cfg.capacity, cfg.min_fill)
        self.rng = np.random.default_rng([cfg.seed, 11])
        self.step = 0
        self.episodes = 0
        self.target_entropy = cfg.target_entropy(env_cfg.k)

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    def sync_targets(self) -> None:
        for t, c in zip(self.targets, self.critics):
            t.load_state_dict(c.state_dict())

    def update(self, transitions) -> dict:
        """One gradient step on critics, policy and temperature."""
        batch = Batch.of(transitions)
        alpha = self.log_alpha.exp().detach()
        jq, q1, q2 = critic_loss(batch, self.critics, self.targets, self.policy, alpha, self.cfg.gamma)
        self.q_opt.zero_grad()
        jq.backward()
        self.q_opt.step()

        jpi, entropy = policy_loss(batch.obs, torch.minimum(q1, q2), self.policy, alpha)
        self.pi_opt.zero_grad()
        jpi.backward()
        self.pi_opt.step()

        ja = temperature_loss(entropy, self.log_alpha, self.target_entropy)
        self.a_opt.zero_grad()
        ja.backward()
        self.a_opt.step()

        self.step += 1
        if self.step % self.cfg.target_period == 0:
            self.sync_targets()
        return dict(step=self.step, J_Q=jq.item(), J_pi=jpi.item(), J_alpha=ja.item(),
                    alpha=self.alpha, entropy=float(entropy.mean()))

    def train_step(self):
        """Sample a batch and update, or return ``None`` while the buffer is underfilled."""
        if not self.buffer.ready:
            log.debug("skip: buffer %d < %d", len(self.buffer), self.buffer.min_fill)
            return None
        return self.update(self.buffer.sample(self.cfg.batch, self.rng))

    # -- persistence ----------------------------------------------------------

    def _optimizers(self):
        named = lambda mods: [(f"{i}/{n}", p) for i, m in enumerate(mods) for n, p in m.named_parameters()]
        return {"policy": (self.pi_opt, named([self.policy])),
                "critics": (self.q_opt, named(self.critics)),
                "alpha": (self.a_opt, [("log_alpha", self.log_alpha)])}

    def state(self) -> dict:
        return {"step": self.step, "episodes": self.episodes, "log_alpha": self.log_alpha.item(),
                "sac": asdict(self.cfg), "net": asdict(self.net_cfg), "env": self.env_cfg.to_dict()}

    def save(self, path) -> None:
        mods = {"policy": self.policy, "critic0": self.critics[0], "critic1": self.critics[1],
                "target0": self.targets[0], "target1": self.targets[1]}
        tmp = f"{path}.tmp"
        save_checkpoint(tmp, mods, self.state(), self._optimizers())
        os.replace(tmp, path)

    def load(self, path) -> None:
        manifest, arrays = read_checkpoint(path)
        load_module(self.policy, arrays, "policy")
        for i in range(2):
            load_module(self.critics[i], arrays, f"critic{i}")
            load_module(self.targets[i], arrays, f"target{i}")
        st = manifest["state"]
        self.step, self.episodes = int(st["step"]), int(st["episodes"])
        with torch.no_grad():
            self.log_alpha.fill_(st["log_alpha"])
        for name, (opt, named) in self._optimizers().items():
            load_optimizer(opt, named, arrays, name, self.step)


def load_policy(path) -> tuple[PolicyNet, dict]:
    """Policy network plus the checkpoint's state block."""
    manifest, arrays = read_checkpoint(path)
    st = manifest["state"]
    net = PolicyNet(NetConfig(**st["net"]))
    load_module(net, arrays, "policy")
    net.eval()
    return net, st


# -- data collection --------------------------------------------------------

@dataclass
class EpisodeLog:
    seed: int
    transitions: list = field(default_factory=list)
    reward: float = 0.0
    length: float = 0.0
    rate: float = 0.0
    completed: bool = False
    steps: int = 0
    error: str | None = None


def choose(probs: np.ndarray, rng: np.random.Generator | None, greedy: bool) -> int:
    if greedy:
        return int(np.argmax(probs))
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


def collect_rollouts(policy: PolicyNet, env_cfg: EnvConfig, seeds, greedy: bool = False) -> list[EpisodeLog]:
    """Run one episode per seed, stepping all environments in lockstep.

    Observations of all live environments go through the network as one
    batch. Each episode samples actions from its own seed-derived stream, so
    results do not depend on how episodes are grouped.
    """
    envs, logs, obs, rngs = [], [], [], []
    for s in seeds:
        env = ExploreEnv(env_cfg)
        ep = EpisodeLog(int(s))
        try:
            o = env.reset(seed=int(s))
        except Exception as exc:  # generation failure: drop and go on
            ep.error = f"{type(exc).__name__}: {exc}"
            log.warning("episode %d dropped: %s", s, ep.error)
            logs.append(ep)
            continue
        envs.append(env), logs.append(ep), obs.append(o), rngs.append(np.random.default_rng([int(s), 5]))
    live = [i for i, ep in enumerate(logs) if ep.error is None]
    slot = {i: j for j, i in enumerate(live)}
    while live:
        with torch.no_grad():
            probs, _ = policy(collate(obs[slot[i]] for i in live))
        probs = probs.numpy()
        still = []
        for row, i in enumerate(live):
            j = slot[i]
            env, ep, o = envs[j], logs[i], obs[j]
            a = choose(probs[row, :len(o.neighbors)], rngs[j], greedy)
            try:
                o2, r, done, info = env.step(a)
            except EnvAbort as exc:
                ep.error = str(exc)
                ep.transitions = []
                log.warning("episode %d aborted: %s", ep.seed, exc)
                continue
            ep.transitions.append(Transition(o, a, r, o2, bool(info["complete"])))
            ep.reward += r
            obs[j] = o2
            if done:
                ep.length, ep.rate, ep.completed, ep.steps = env.length, env.rate, env.completed, env.steps
            else:
                still.append(i)
        live = still
    return logs


def train(trainer: Trainer, out_dir, seed_base: int = 0, resume: bool = False) -> None:
    """Collect with ``instances`` parallel episodes, then update once per finished episode."""
    cfg = trainer.cfg
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    if resume and os.path.exists(ckpt):
        trainer.load(ckpt)
        log.info("resumed at episode %d, step %d", trainer.episodes, trainer.step)
    new_file = not (resume and os.path.exists(metrics_path))
    with open(metrics_path, "w" if new_file else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new_file:
            w.writeheader()
        last_ckpt = trainer.episodes
        while trainer.episodes < cfg.episodes:
            n = min(cfg.instances, cfg.episodes - trainer.episodes)
            seeds = [seed_base + trainer.episodes + i for i in range(n)]
            trainer.policy.eval()
            logs = collect_rollouts(trainer.policy, trainer.env_cfg, seeds)
            trainer.policy.train()
            for ep in logs:
                trainer.episodes += 1
                if ep.error is not None:
                    continue
                trainer.buffer.extend(ep.transitions)
                for _ in range(cfg.updates_per_episode):
                    m = trainer.train_step()
                    if m is None:
                        continue
                    m.update(episodes=trainer.episodes, episode_reward=ep.reward,
                             episode_length=ep.length, episode_rate=ep.rate)
                    w.writerow(m)
                log.info("episode %d seed %d reward %.2f length %.0f rate %.3f steps %d buffer %d",
                         trainer.episodes, ep.seed, ep.reward, ep.length, ep.rate, ep.steps, len(trainer.buffer))
            fh.flush()
            if trainer.episodes - last_ckpt >= cfg.checkpoint_every or trainer.episodes >= cfg.episodes:
                trainer.save(ckpt)
                last_ckpt = trainer.episodes
