"""DDPG search over the six bit ratios.

One episode walks the bit steps 2..7; each action is a fraction of the
still-unassigned elements (clamped to the budget). The only non-zero reward
arrives on the terminal step.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .alloc import STEP_BITS, Allocator, compression_stats
from .nn.layers import Dense, ReLU, Sigmoid
from .nn.model import Model
from .nn.optim import Adam
from .nn.zoo import init_params
from .rng import substream

log = logging.getLogger(__name__)

OBS_DIM = 5
FULL_EPISODES = 800
FULL_WARMUP = 100


# -- environment -------------------------------------------------------------

class RatioEnv:
    """Episodic environment over a sorted channel list and a size budget."""

    def __init__(self, sorted_list, budget_bits, target="weights"):
        self.sorted = sorted_list
        self.budget = budget_bits
        self.target = target
        self.alloc = None
        self.prev_action = 0.0

    def reset(self):
        self.alloc = Allocator(self.sorted, self.budget)
        self.prev_action = 0.0
        return self.observation()

    def observation(self):
        a = self.alloc
        C = len(self.sorted)
        k = min(a.step, len(STEP_BITS) - 1)
        s, e = a.last_segment
        return np.array([
            k / (len(STEP_BITS) - 1),
            a.remaining_elements / self.sorted.total,
            s / C,
            e / C,
            self.prev_action,
        ])

    def step(self, action):
        """Apply one (clamped) action. Returns (next obs, done, clamped action)."""
        clamped = self.alloc.apply(float(action))
        self.prev_action = clamped
        return self.observation(), self.alloc.done, clamped

    def policy(self):
        return self.alloc.policy(self.target)


# -- agent -------------------------------------------------------------------

@dataclass
class Transition:
    obs: np.ndarray
    action: float
    reward: float
    next_obs: np.ndarray
    terminal: bool


class ReplayBuffer:
    def __init__(self, capacity=600):
        self.capacity = capacity
        self.items = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def add(self, t):
        self.items.append(t)

    def sample(self, n, rng):
        idx = rng.choice(len(self.items), size=n, replace=False)
        batch = [self.items[i] for i in idx]
        return (np.stack([t.obs for t in batch]),
                np.array([[t.action] for t in batch]),
                np.array([[t.reward] for t in batch]),
                np.stack([t.next_obs for t in batch]),
                np.array([[float(t.terminal)] for t in batch]))


def _mlp(in_dim, hidden, out_layers, seed, name, zero_final=False, final_scale=3e-3):
    layers = [Dense(in_dim, hidden), ReLU(), Dense(hidden, hidden), ReLU(), Dense(hidden, 1), *out_layers]
    params = init_params(layers, seed)
    rng = substream(seed, name, "final")
    last = params[4]
    last["weight"] = (np.zeros_like(last["weight"]) if zero_final
                      else rng.uniform(-final_scale, final_scale, size=last["weight"].shape))
    return Model(layers, params, (in_dim,), name=name)


@dataclass
class DDPGConfig:
    hidden: int = 300
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_size: int = 600
    gamma: float = 1.0
    tau: float = 0.01
    sigma_start: float = 0.5
    sigma_final: float = 0.01
    # learning uses reward minus a moving average; logged rewards stay raw
    baseline_rate: float = 0.1


class AgentNets:
    """Actor, critic and their target copies."""

    def __init__(self, seed=0, cfg=None, zero_final=False):
        self.cfg = cfg or DDPGConfig()
        h = self.cfg.hidden
        self.actor = _mlp(OBS_DIM, h, [Sigmoid()], substream(seed, "actor").integers(2**31),
                          "actor", zero_final)
        self.critic = _mlp(OBS_DIM + 1, h, [], substream(seed, "critic").integers(2**31),
                           "critic", zero_final)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, self.cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params, self.cfg.critic_lr)

    def policy_action(self, obs):
        return float(self.actor.forward_tape(np.asarray(obs)[None]).acts[-1][0, 0])

    def q_value(self, obs, action, target=False):
        net = self.critic_target if target else self.critic
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(action).reshape(-1, 1)], axis=1)
        return net.forward_tape(x).acts[-1]

    def soft_update(self, tau=None):
        tau = self.cfg.tau if tau is None else tau
        for online, target in ((self.actor, self.actor_target), (self.critic, self.critic_target)):
            for i, d in online.params.items():
                for name, t in d.items():
                    tgt = target.params[i][name]
                    if tau == 1.0:
                        tgt[...] = t
                    else:
                        tgt *= 1.0 - tau
                        tgt += tau * t
            target.touch()


def act(agent, obs, sigma, rng):
    """Actor output plus Gaussian exploration noise, clipped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    a = agent.policy_action(obs)
    if sigma > 0:
        a = a + rng.normal(0.0, sigma)
    return float(np.clip(a, 0.0, 1.0))


def noise_schedule(episode, total=FULL_EPISODES, warmup=None, start=0.5, final=0.01):
    """Constant noise during warm-up, then exponential decay reaching ``final`` at the last episode."""
    if warmup is None:
        warmup = round(total * FULL_WARMUP / FULL_EPISODES)
    if not 0 <= episode < total:
        raise ValueError(f"episode {episode} outside [0, {total})")
    if episode < warmup:
        return start
    span = total - 1 - warmup
    if span <= 0:
        return start
    decay = (final / start) ** (1.0 / span)
    return start * decay ** (episode - warmup)


def update(agent, buffer, rng, train_actor=True):
    """One DDPG step. Returns False (and does nothing) while the buffer is underfilled."""
    cfg = agent.cfg
    if len(buffer) < cfg.batch_size:
        return False
    obs, action, reward, next_obs, terminal = buffer.sample(cfg.batch_size, rng)
    B = len(obs)

    next_a = agent.actor_target.forward_tape(next_obs).acts[-1]
    q_next = agent.q_value(next_obs, next_a, target=True)
    y = reward + cfg.gamma * (1.0 - terminal) * q_next

    critic = agent.critic
    tape = critic.forward_tape(np.concatenate([obs, action], axis=1))
    q = tape.acts[-1]
    _, grads = critic.backward_tape(tape, 2.0 * (q - y) / B)
    agent.critic_opt.step(critic.params, grads)
    critic.touch()

    if not train_actor:
        agent.soft_update()
        return True
    actor = agent.actor
    atape = actor.forward_tape(obs)
    mu = atape.acts[-1]
    ctape = critic.forward_tape(np.concatenate([obs, mu], axis=1))
    dx, _ = critic.backward_tape(ctape, np.full((B, 1), -1.0 / B))
    _, agrads = actor.backward_tape(atape, dx[:, -1:])
    agent.actor_opt.step(actor.params, agrads)
    actor.touch()

    agent.soft_update()
    return True


# -- search loop -------------------------------------------------------------

@dataclass
class SearchResult:
    best_policy: object
    best_reward: float
    log: list = field(default_factory=list)

    def log_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def run_search(sorted_list, budget_bits, reward_fn, episodes=FULL_EPISODES, seed=0,
               target="weights", cfg=None, warmup=None, agent=None):
    """Full DDPG episode loop; ``reward_fn(policy) -> float`` scores complete policies."""
    cfg = cfg or DDPGConfig()
    env = RatioEnv(sorted_list, budget_bits, target)
    agent = agent or AgentNets(seed, cfg)
    buffer = ReplayBuffer(cfg.buffer_size)
    noise_rng = substream(seed, "noise")
    replay_rng = substream(seed, "replay")
    best = SearchResult(None, -np.inf)
    if warmup is None:
        warmup = round(episodes * FULL_WARMUP / FULL_EPISODES)
    baseline = None
    for ep in range(episodes):
        sigma = noise_schedule(ep, episodes, warmup, cfg.sigma_start, cfg.sigma_final)
        obs = env.reset()
        steps, proposed, clamped = [], [], []
        done = False
        while not done:
            a = act(agent, obs, sigma, noise_rng)
            next_obs, done, a_c = env.step(a)
            proposed.append(a)
            clamped.append(a_c)
            steps.append([obs, a_c, next_obs, done])
            obs = next_obs
        policy = env.policy()
        reward = float(reward_fn(policy))
        baseline = reward if baseline is None else baseline + cfg.baseline_rate * (reward - baseline)
        learn_reward = reward - baseline
        for o, a_c, n, d in steps:
            buffer.add(Transition(o, a_c, learn_reward if d else 0.0, n, d))
            update(agent, buffer, replay_rng, train_actor=ep >= warmup)
        stats = compression_stats(policy)
        best.log.append({
            "episode": ep, "actions": proposed, "clamped": clamped,
            "avg_bits": stats["avg_bits"], "compression": stats["compression"],
            "size_bits": stats["size_bits"], "reward": reward, "sigma": sigma,
            "transitions": len(steps),
        })
        if reward > best.best_reward:
            best.best_policy, best.best_reward = policy, reward
        log.debug("episode %d reward %.4f avg bits %.3f", ep, reward, stats["avg_bits"])
    return best
