"""Decentralized PPO for populations of recurrent attention agents.

Each agent owns its parameters, optimizer, and value net; nothing is shared
except the scalar attention-matching bonus, which is computed once per step
from the maps every map-producing agent already emitted while acting. The
rollout store keeps those maps, so the bonus never triggers another network
pass (``RolloutBuffer.no_rerun_forward_calls`` proves it).

Population variants:
  - ``joint_attention``: attention on, trains with the shaped bonus.
  - ``attention_only``: attention on, maps join the bonus pool for metrics,
    but the agent's own reward is the raw environment reward.
  - ``independent_ppo``: attention off, plain recurrent PPO.
  - ``frozen_expert``: attention on, greedy actions, never updated; its maps
    still count toward the bonus (the social-learning setting).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .attention_net import AgentCore, act, pose_vector
from .gridworlds import ENCODING_VERSION, encode_observation, make_config, reset, step
from .ja_reward import (IncentiveConfig, beta_schedule, joint_attention_reward,
                        jsd, kl_divergence, clipped_jsd)

# observation channels are small non-negative ids; scale each to ~[0, 1]
OBS_SCALE = np.array([11.0, 6.0, 3.0])

VARIANTS = ("joint_attention", "attention_only", "independent_ppo",
            "frozen_expert")


def observation_array(grid: np.ndarray) -> np.ndarray:
    """Float conv input from an integer observation grid."""
    return grid.astype(np.float64) / OBS_SCALE


@dataclass
class PPOConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 4
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    chunk_length: int = 16
    segment_length: int = 128
    n_envs: int = 8

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "gamma",
                     "gae_lambda", "chunk_length", "segment_length",
                     "n_envs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("entropy_coef", "value_coef"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError(f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        if self.segment_length % self.chunk_length != 0:
            raise ValueError("segment_length must be a multiple of chunk_length")
        if self.batch_size % self.chunk_length != 0:
            raise ValueError("batch_size must be a multiple of chunk_length")


@dataclass
class AgentSpec:
    variant: str = "joint_attention"
    checkpoint: str | None = None     # directory, for frozen experts
    params: dict | None = None        # in-memory alternative to checkpoint
    agent_index: int = 0              # which agent to load from the checkpoint

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "frozen_expert" and self.checkpoint is None \
                and self.params is None:
            raise ValueError("frozen_expert needs a checkpoint or params")


@dataclass
class PopulationSpec:
    agents: list = field(default_factory=lambda: [AgentSpec(), AgentSpec()])
    incentive: IncentiveConfig = field(default_factory=IncentiveConfig)

    def __post_init__(self):
        self.agents = [a if isinstance(a, AgentSpec) else AgentSpec(a)
                       for a in self.agents]
        if not any(a.variant != "frozen_expert" for a in self.agents):
            raise ValueError("population needs at least one learner")


class AgentRunner:
    """One agent's core, optimizer, and role flags."""

    def __init__(self, spec: AgentSpec, height: int, width: int,
                 ppo: PPOConfig, seed: int):
        self.variant = spec.variant
        self.uses_attention = spec.variant != "independent_ppo"
        self.uses_bonus = spec.variant == "joint_attention"
        self.trainable = spec.variant != "frozen_expert"
        self.action_mode = "sample" if self.trainable else "greedy"
        self.core = AgentCore(height, width,
                              use_attention=self.uses_attention, seed=seed)
        if spec.variant == "frozen_expert":
            loaded = spec.params if spec.params is not None \
                else load_agent_params(spec.checkpoint, spec.agent_index)
            set_agent_params(self.core, loaded)
        self.adam = nm.AdamState(self.core.params, lr=ppo.learning_rate) \
            if self.trainable else None


def agent_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def build_population(pop: PopulationSpec, height: int, width: int,
                     ppo: PPOConfig, seed: int) -> list:
    return [AgentRunner(spec, height, width, ppo, agent_seed(seed, k))
            for k, spec in enumerate(pop.agents)]


# ---------------------------------------------------------------------------
# vectorized environments

class EnvSet:
    """A fixed set of environments stepped in lockstep, with auto-reset.

    Episode seeds are drawn from a deterministic per-env stream so an
    identical (config, seed) pair replays the same layouts in the same
    order.
    """

    def __init__(self, kind: str, variant: str, config, n_envs: int,
                 seed: int):
        self.kind = kind
        self.variant = variant
        self.config = config
        self.n_envs = n_envs
        self.base_seed = seed
        self.n_agents = config.agent_count
        self.states = [None] * n_envs
        self.grids = [None] * n_envs      # float conv inputs, shared per env
        self.poses = [None] * n_envs      # per env: per agent (x, y, dir)
        self._episode_index = [0] * n_envs
        self.completed_episodes = 0
        self.segment_episode_returns: list = []   # collective, cleared by caller
        self._running_env_return = np.zeros((n_envs, self.n_agents))
        for e in range(n_envs):
            self._reset_env(e)

    def _next_seed(self, e: int) -> int:
        j = self._episode_index[e]
        self._episode_index[e] += 1
        return int(np.random.SeedSequence(
            [self.base_seed, e, j]).generate_state(1)[0])

    def _store_obs(self, e: int, obs) -> None:
        self.grids[e] = observation_array(obs[0][0])
        self.poses[e] = [o[1] for o in obs]

    def _reset_env(self, e: int) -> None:
        state, obs = reset(self.kind, self.variant, seed=self._next_seed(e),
                           config=self.config)
        self.states[e] = state
        self._store_obs(e, obs)
        self._running_env_return[e] = 0.0

    def batch_obs(self, agent_index: int):
        grids = np.stack(self.grids)
        poses = np.stack([pose_vector(*self.poses[e][agent_index])
                          for e in range(self.n_envs)])
        return grids, poses

    def step(self, actions: np.ndarray):
        """actions (n_envs, n_agents) -> rewards (n_envs, n_agents), dones.

        Environments that finish are reset in place; the returned done flag
        marks the boundary so recurrent states and advantage traces cut.
        """
        rewards = np.zeros((self.n_envs, self.n_agents))
        dones = np.zeros(self.n_envs, dtype=bool)
        for e in range(self.n_envs):
            state, outcome, obs = step(self.states[e], actions[e])
            self.states[e] = state
            rewards[e] = outcome.rewards
            self._running_env_return[e] += outcome.rewards
            if outcome.done:
                dones[e] = True
                self.segment_episode_returns.append(
                    float(self._running_env_return[e].sum()))
                self.completed_episodes += 1
                self._reset_env(e)
            else:
                self._store_obs(e, obs)
        return rewards, dones


# ---------------------------------------------------------------------------
# rollout storage

class RolloutBuffer:
    """On-policy segment store for every agent plus the shared bonus lane."""

    def __init__(self, n_agents: int, T: int, E: int, h: int, w: int,
                 cell: int, map_agents, store_logits: bool):
        self.T, self.E = T, E
        self.map_agents = tuple(map_agents)
        self.obs = [np.zeros((T, E, h, w, 3)) for _ in range(n_agents)]
        self.pose = [np.zeros((T, E, 6)) for _ in range(n_agents)]
        self.actions = [np.zeros((T, E), dtype=np.int64) for _ in range(n_agents)]
        self.log_probs = [np.zeros((T, E)) for _ in range(n_agents)]
        self.values = [np.zeros((T, E)) for _ in range(n_agents)]
        self.r_env = [np.zeros((T, E)) for _ in range(n_agents)]
        self.h0 = [np.zeros((T, E, cell)) for _ in range(n_agents)]
        self.c0 = [np.zeros((T, E, cell)) for _ in range(n_agents)]
        self.reset_mask = np.zeros((T, E), dtype=bool)
        self.done = np.zeros((T, E), dtype=bool)
        self.mean_maps = {k: np.zeros((T, E, h, w)) for k in self.map_agents}
        self.logit_maps = {k: np.zeros((T, E, h, w))
                           for k in self.map_agents} if store_logits else None
        # one producer still gets the lane (identically zero, the degenerate
        # single-agent case); no producers at all means no lane
        self.r_ja = np.zeros((T, E)) if len(self.map_agents) >= 1 else None
        self.bootstrap = [np.zeros(E) for _ in range(n_agents)]
        self.base_step = 0
        self.no_rerun_forward_calls = 0
        self.advantages = [None] * n_agents
        self.returns = [None] * n_agents


def recompute_r_ja(buffer: RolloutBuffer, incentive: IncentiveConfig) -> np.ndarray:
    """Bonus recomputed from stored maps alone (the replay contract)."""
    if buffer.r_ja is None:
        raise ValueError("buffer has no bonus lane (fewer than two map producers)")
    out = np.zeros((buffer.T, buffer.E))
    for t in range(buffer.T):
        for e in range(buffer.E):
            maps = [buffer.mean_maps[k][t, e] for k in buffer.map_agents]
            logits = None
            if buffer.logit_maps is not None:
                logits = [buffer.logit_maps[k][t, e] for k in buffer.map_agents]
            out[t, e] = joint_attention_reward(maps, incentive, logit_maps=logits)
    return out


def collect_rollouts(envset: EnvSet, agents: list, incentive: IncentiveConfig,
                     ppo: PPOConfig, rec_states: list, pending_reset: np.ndarray,
                     rng: np.random.Generator, base_step: int) -> tuple:
    """Roll ``segment_length`` vector steps; returns (buffer, pending_reset).

    ``rec_states`` (one per agent) are advanced in place. The bonus for each
    step is computed inside an instrumented block that must not add forward
    passes.
    """
    T, E = ppo.segment_length, envset.n_envs
    h, w = envset.states[0].height, envset.states[0].width
    map_agents = [k for k, a in enumerate(agents) if a.uses_attention]
    store_logits = incentive.metric == "clipped_jsd"
    buf = RolloutBuffer(len(agents), T, E, h, w, agents[0].core.cell_size,
                        map_agents, store_logits)
    buf.base_step = base_step

    for t in range(T):
        if pending_reset.any():
            for st in rec_states:
                st.h[pending_reset] = 0.0
                st.c[pending_reset] = 0.0
        buf.reset_mask[t] = pending_reset
        actions = np.zeros((E, len(agents)), dtype=np.int64)
        step_maps = {}
        step_logits = {}
        for k, agent in enumerate(agents):
            buf.h0[k][t] = rec_states[k].h
            buf.c0[k][t] = rec_states[k].c
            grids, poses = envset.batch_obs(k)
            buf.obs[k][t] = grids
            buf.pose[k][t] = poses
            logits, value, maps, new_state = agent.core.agent_step(
                grids, poses, rec_states[k])
            rec_states[k] = new_state.detach()
            a, logp = act(logits, agent.action_mode, rng)
            actions[:, k] = a
            buf.actions[k][t] = a
            buf.log_probs[k][t] = logp
            buf.values[k][t] = value.data
            if maps is not None:
                step_maps[k] = maps.mean_map
                step_logits[k] = maps.head_logits.mean(axis=1)
                buf.mean_maps[k][t] = step_maps[k]
                if store_logits:
                    buf.logit_maps[k][t] = step_logits[k]

        if buf.r_ja is not None and len(map_agents) >= 2:
            calls_before = sum(a.core.forward_calls for a in agents)
            for e in range(E):
                maps = [step_maps[k][e] for k in map_agents]
                lg = [step_logits[k][e] for k in map_agents] if store_logits \
                    else None
                buf.r_ja[t, e] = joint_attention_reward(maps, incentive,
                                                        logit_maps=lg)
            buf.no_rerun_forward_calls += \
                sum(a.core.forward_calls for a in agents) - calls_before

        rewards, dones = envset.step(actions)
        for k in range(len(agents)):
            buf.r_env[k][t] = rewards[:, k]
        buf.done[t] = dones
        pending_reset = dones.copy()

    # bootstrap values for the truncated tail
    if pending_reset.any():
        for st in rec_states:
            st.h[pending_reset] = 0.0
            st.c[pending_reset] = 0.0
    for k, agent in enumerate(agents):
        grids, poses = envset.batch_obs(k)
        _, value, _, _ = agent.core.agent_step(grids, poses, rec_states[k])
        buf.bootstrap[k] = value.data.copy()
    return buf, pending_reset


# ---------------------------------------------------------------------------
# advantages and the PPO step

def compute_advantages(buffer: RolloutBuffer, agents: list,
                       incentive: IncentiveConfig, ppo: PPOConfig) -> None:
    """GAE per agent over the segment, normalized per agent.

    Rewards are the stored environment rewards plus, for bonus-using
    agents, beta(global step) times the shared bonus.
    """
    T, E = buffer.T, buffer.E
    betas = np.array([beta_schedule(buffer.base_step + t * E, incentive)
                      for t in range(T)])
    nonterm = 1.0 - buffer.done.astype(np.float64)
    for k, agent in enumerate(agents):
        rewards = buffer.r_env[k].copy()
        if agent.uses_bonus and buffer.r_ja is not None:
            rewards += betas[:, None] * buffer.r_ja
        adv = np.zeros((T, E))
        carry = np.zeros(E)
        for t in reversed(range(T)):
            next_value = buffer.bootstrap[k] if t == T - 1 \
                else buffer.values[k][t + 1]
            delta = rewards[t] + ppo.gamma * nonterm[t] * next_value \
                - buffer.values[k][t]
            carry = delta + ppo.gamma * ppo.gae_lambda * nonterm[t] * carry
            adv[t] = carry
        buffer.returns[k] = adv + buffer.values[k]
        std = adv.std()
        if std > 1e-8:
            adv = (adv - adv.mean()) / std
        buffer.advantages[k] = adv


def ppo_update(agent: AgentRunner, buffer: RolloutBuffer, k: int,
               ppo: PPOConfig, rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO over chunked recurrent minibatches.

    Chunks replay from the stored state snapshots; episode boundaries
    inside a chunk re-zero the state exactly as the rollout did. A
    non-finite loss aborts the update before any parameter step.
    """
    T, E = buffer.T, buffer.E
    chunk = ppo.chunk_length
    chunks = [(e, start) for e in range(E) for start in range(0, T, chunk)]
    per_batch = max(1, ppo.batch_size // chunk)
    cell = agent.core.cell_size
    stats = {"policy_loss": [], "value_loss": [], "entropy": []}

    for _ in range(ppo.epochs):
        order = rng.permutation(len(chunks))
        for lo in range(0, len(order), per_batch):
            sel = [chunks[i] for i in order[lo:lo + per_batch]]
            B = len(sel)
            n_samples = B * chunk
            obs = np.stack([buffer.obs[k][s:s + chunk, e] for e, s in sel], axis=1)
            pose = np.stack([buffer.pose[k][s:s + chunk, e] for e, s in sel], axis=1)
            acts = np.stack([buffer.actions[k][s:s + chunk, e] for e, s in sel], axis=1)
            old_logp = np.stack([buffer.log_probs[k][s:s + chunk, e] for e, s in sel], axis=1)
            adv = np.stack([buffer.advantages[k][s:s + chunk, e] for e, s in sel], axis=1)
            rets = np.stack([buffer.returns[k][s:s + chunk, e] for e, s in sel], axis=1)
            resets = np.stack([buffer.reset_mask[s:s + chunk, e] for e, s in sel], axis=1)
            h0 = np.stack([buffer.h0[k][s, e] for e, s in sel])
            c0 = np.stack([buffer.c0[k][s, e] for e, s in sel])

            with nm.Tape():
                state = agent.core.initial_state(B)
                state.h, state.c = Tensor(h0), Tensor(c0)
                surr_sum = None
                value_sum = None
                ent_sum = None
                for t in range(chunk):
                    if t > 0 and resets[t].any():
                        keep = np.repeat((1.0 - resets[t])[:, None], cell, axis=1)
                        state.h = nm.mul(state.h, Tensor(keep))
                        state.c = nm.mul(state.c, Tensor(keep))
                    logits, value, _, state = agent.core.agent_step(
                        obs[t], pose[t], state)
                    logp_all = nm.log_softmax(logits)
                    logp_a = nm.gather_last(logp_all, acts[t])
                    ratio = nm.exp(logp_a - Tensor(old_logp[t]))
                    clipped = nm.clip(ratio, 1.0 - ppo.clip_ratio,
                                      1.0 + ppo.clip_ratio)
                    adv_t = Tensor(adv[t])
                    surr = nm.minimum(nm.mul(ratio, adv_t), nm.mul(clipped, adv_t))
                    diff = value - Tensor(rets[t])
                    probs = nm.softmax(logits)
                    s_t = nm.sum_all(surr)
                    v_t = nm.sum_all(nm.mul(diff, diff))
                    e_t = nm.sum_all(nm.mul(probs, logp_all))
                    surr_sum = s_t if surr_sum is None else surr_sum + s_t
                    value_sum = v_t if value_sum is None else value_sum + v_t
                    ent_sum = e_t if ent_sum is None else ent_sum + e_t
                policy_loss = nm.scale(surr_sum, -1.0 / n_samples)
                value_loss = nm.scale(value_sum, 1.0 / n_samples)
                neg_entropy = nm.scale(ent_sum, 1.0 / n_samples)
                loss = policy_loss + nm.scale(value_loss, ppo.value_coef) \
                    + nm.scale(neg_entropy, ppo.entropy_coef)
                if not np.isfinite(loss.data).all():
                    return {"aborted": True,
                            "reason": f"non-finite loss {loss.item()!r}",
                            "policy_loss": None, "value_loss": None,
                            "entropy": None}
                nm.backward(loss)
            grads = {}
            for name, p in agent.core.params.items():
                grads[name] = p.grad if p.grad is not None \
                    else np.zeros_like(p.data)
            nm.adam_update(agent.core.params, grads, agent.adam)
            for p in agent.core.params.values():
                p.zero_grad()
            stats["policy_loss"].append(policy_loss.item())
            stats["value_loss"].append(value_loss.item())
            stats["entropy"].append(-neg_entropy.item())
    return {"aborted": False,
            "policy_loss": float(np.mean(stats["policy_loss"])),
            "value_loss": float(np.mean(stats["value_loss"])),
            "entropy": float(np.mean(stats["entropy"]))}


# ---------------------------------------------------------------------------
# evaluation

def _pairwise_divergence(maps: dict, incentive: IncentiveConfig,
                         logits: dict | None = None) -> float:
    keys = sorted(maps)
    total, count = 0.0, 0
    for i in range(len(keys)):
        for j in range(len(keys)):
            if i == j:
                continue
            if incentive.metric == "kl":
                total += kl_divergence(maps[keys[i]], maps[keys[j]])
            elif incentive.metric == "clipped_jsd" and logits is not None:
                total += clipped_jsd(logits[keys[i]], logits[keys[j]],
                                     incentive.clip_threshold)
            else:
                total += jsd(maps[keys[i]], maps[keys[j]])
            count += 1
    return total / count


def evaluate(agents: list, kind: str, variant: str, config, episodes: int,
             seed: int, incentive: IncentiveConfig | None = None,
             mode: str = "greedy") -> dict:
    """Decentralized evaluation rollouts; no learning, no bonus in the reward.

    The default mode is greedy execution. Reports mean collective
    environment reward, success rate (episodes that terminate before the
    step cap), mean episode length, and the mean pairwise divergence of the
    map-producing agents.
    """
    incentive = incentive or IncentiveConfig()
    rng = np.random.default_rng(agent_seed(seed, 4_000_000)) \
        if mode == "sample" else None
    collective = []
    successes = 0
    lengths = []
    div_values = []
    for ep in range(episodes):
        ep_seed = int(np.random.SeedSequence([seed, ep]).generate_state(1)[0])
        state, obs = reset(kind, variant, seed=ep_seed, config=config)
        rec = [a.core.initial_state(1) for a in agents]
        ep_return = np.zeros(config.agent_count)
        while not state.done:
            grid = observation_array(obs[0][0])[None]
            actions = np.zeros(config.agent_count, dtype=np.int64)
            step_maps, step_logits = {}, {}
            for k, agent in enumerate(agents):
                pose = pose_vector(*obs[k][1])[None]
                logits, _, maps, rec[k] = agent.core.agent_step(
                    grid, pose, rec[k])
                rec[k] = rec[k].detach()
                a, _ = act(logits, mode, rng)
                actions[k] = a[0]
                if maps is not None:
                    step_maps[k] = maps.mean_map[0]
                    step_logits[k] = maps.head_logits[0].mean(axis=0)
            if len(step_maps) >= 2:
                div_values.append(_pairwise_divergence(
                    step_maps, incentive, step_logits))
            state, outcome, obs = step(state, actions)
            ep_return += outcome.rewards
        collective.append(float(ep_return.sum()))
        lengths.append(state.step_count)
        if state.step_count < config.episode_cap:
            successes += 1
    return {
        "episodes": episodes,
        "mean_collective_reward": float(np.mean(collective)),
        "success_rate": successes / episodes,
        "mean_episode_length": float(np.mean(lengths)),
        "mean_pairwise_jsd": float(np.mean(div_values)) if div_values else None,
    }


def generalization_eval(agents: list, kind: str, variants: list,
                        base_config, episodes: int = 30, seed: int = 0) -> dict:
    """Zero-shot greedy evaluation across environment variants."""
    out = {}
    for variant in variants:
        config = make_config(kind, variant,
                             interior=base_config.interior,
                             agent_count=base_config.agent_count,
                             episode_cap=base_config.episode_cap)
        out[variant] = evaluate(agents, kind, variant, config, episodes, seed)
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str, agents: list, global_step: int,
                    episodes: int, config_hash: str = "") -> None:
    os.makedirs(path, exist_ok=True)
    meta = {
        "encoding_version": ENCODING_VERSION,
        "global_step": global_step,
        "episodes": episodes,
        "config_hash": config_hash,
        "agents": [],
    }
    for k, agent in enumerate(agents):
        nm.save_params(os.path.join(path, f"agent{k}.blob"),
                       os.path.join(path, f"agent{k}.json"),
                       agent.core.params)
        entry = {"variant": agent.variant, "adam_step": None}
        if agent.adam is not None:
            moments = {}
            for name in agent.core.params:
                moments[f"m/{name}"] = agent.adam.m[name]
                moments[f"v/{name}"] = agent.adam.v[name]
            nm.save_params(os.path.join(path, f"agent{k}_adam.blob"),
                           os.path.join(path, f"agent{k}_adam.json"), moments)
            entry["adam_step"] = agent.adam.step
        meta["agents"].append(entry)
    with open(os.path.join(path, "checkpoint.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_agent_params(path: str, k: int) -> dict:
    return nm.load_params(os.path.join(path, f"agent{k}.blob"),
                          os.path.join(path, f"agent{k}.json"))


def set_agent_params(core: AgentCore, loaded: dict) -> None:
    for name, p in core.params.items():
        if name not in loaded:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = loaded[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape "
                             f"{arr.shape}, expected {p.data.shape}")
        p.data[...] = arr


def load_checkpoint(path: str, agents: list) -> dict:
    """Restore parameters and optimizer moments in place; returns the meta."""
    with open(os.path.join(path, "checkpoint.json")) as f:
        meta = json.load(f)
    if meta.get("encoding_version") != ENCODING_VERSION:
        raise ValueError(
            f"checkpoint encoding version {meta.get('encoding_version')!r} "
            f"does not match this build ({ENCODING_VERSION!r})")
    if len(meta["agents"]) != len(agents):
        raise ValueError("checkpoint population size does not match")
    for k, agent in enumerate(agents):
        set_agent_params(agent.core, load_agent_params(path, k))
        if agent.adam is not None and meta["agents"][k]["adam_step"] is not None:
            moments = nm.load_params(os.path.join(path, f"agent{k}_adam.blob"),
                                     os.path.join(path, f"agent{k}_adam.json"))
            for name in agent.core.params:
                agent.adam.m[name][...] = moments[f"m/{name}"]
                agent.adam.v[name][...] = moments[f"v/{name}"]
            agent.adam.step = meta["agents"][k]["adam_step"]
    return meta


# ---------------------------------------------------------------------------
# the training loop

class Trainer:
    """Owns the environment set, the population, and the update loop.

    Single-threaded and fully deterministic for a fixed (config, seed):
    every random draw comes from generators derived from the run seed.
    """

    def __init__(self, kind: str, env_variant: str, population: PopulationSpec,
                 ppo: PPOConfig | None = None, seed: int = 0,
                 env_overrides: dict | None = None):
        self.kind = kind
        self.env_variant = env_variant
        self.population = population
        self.ppo = ppo or PPOConfig()
        self.incentive = population.incentive
        self.seed = seed
        overrides = dict(env_overrides or {})
        overrides["agent_count"] = len(population.agents)
        self.env_config = make_config(kind, env_variant, **overrides)
        self.envset = EnvSet(kind, env_variant, self.env_config,
                             self.ppo.n_envs, agent_seed(seed, 1_000_001))
        size = self.env_config.interior + 2
        self.agents = build_population(population, size, size, self.ppo, seed)
        self.rec_states = [a.core.initial_state(self.ppo.n_envs)
                           for a in self.agents]
        self.pending_reset = np.zeros(self.ppo.n_envs, dtype=bool)
        self.rng_act = np.random.default_rng(agent_seed(seed, 1_000_002))
        self.rng_update = [np.random.default_rng(agent_seed(seed, 2_000_000 + k))
                           for k in range(len(self.agents))]
        self.global_step = 0
        self.eval_count = 0

    @property
    def episodes(self) -> int:
        return self.envset.completed_episodes

    def collect_segment(self) -> RolloutBuffer:
        buf, self.pending_reset = collect_rollouts(
            self.envset, self.agents, self.incentive, self.ppo,
            self.rec_states, self.pending_reset, self.rng_act,
            self.global_step)
        return buf

    def update_from(self, buf: RolloutBuffer) -> dict:
        compute_advantages(buf, self.agents, self.incentive, self.ppo)
        merged = {"policy_loss": [], "value_loss": [], "entropy": [],
                  "aborted": 0}
        for k, agent in enumerate(self.agents):
            if not agent.trainable:
                continue
            s = ppo_update(agent, buf, k, self.ppo, self.rng_update[k])
            if s["aborted"]:
                merged["aborted"] += 1
                continue
            for key in ("policy_loss", "value_loss", "entropy"):
                merged[key].append(s[key])
        return {key: (float(np.mean(vals)) if vals else None)
                for key, vals in merged.items() if key != "aborted"} | \
            {"aborted_updates": merged["aborted"]}

    def evaluate_now(self, episodes: int = 10) -> dict:
        self.eval_count += 1
        return evaluate(self.agents, self.kind, self.env_variant,
                        self.env_config, episodes,
                        agent_seed(self.seed, 3_000_000 + self.eval_count),
                        self.incentive)

    def run(self, max_env_steps: int | None = None,
            total_episodes: int | None = None, eval_interval: int = 3000,
            eval_episodes: int = 10, on_record=None, on_checkpoint=None,
            stop_when=None) -> dict:
        """Alternate collect/update until a budget is reached.

        ``on_record`` receives one metrics dict per update and per
        evaluation; ``on_checkpoint`` is called after each evaluation;
        ``stop_when(eval_summary)`` may end the run early.
        """
        if max_env_steps is None and total_episodes is None:
            raise ValueError("need max_env_steps or total_episodes")
        next_eval = (self.episodes // eval_interval + 1) * eval_interval
        last_eval = None
        steps_per_segment = self.ppo.segment_length * self.ppo.n_envs
        while True:
            if max_env_steps is not None and self.global_step >= max_env_steps:
                break
            if total_episodes is not None and self.episodes >= total_episodes:
                break
            self.envset.segment_episode_returns = []
            buf = self.collect_segment()
            stats = self.update_from(buf)
            self.global_step += steps_per_segment
            seg_returns = self.envset.segment_episode_returns
            beta = beta_schedule(self.global_step, self.incentive)
            n_prod = len(buf.map_agents)
            mean_jsd = None
            if buf.r_ja is not None and n_prod >= 2:
                mean_jsd = float(-buf.r_ja.mean() / (n_prod * (n_prod - 1)))
            record = {
                "event": "update",
                "global_step": self.global_step,
                "episodes": self.episodes,
                "mean_collective_reward":
                    float(np.mean(seg_returns)) if seg_returns else None,
                "mean_pairwise_jsd": mean_jsd,
                "beta": beta,
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "entropy": stats["entropy"],
            }
            if stats["aborted_updates"]:
                record["aborted_updates"] = stats["aborted_updates"]
            if on_record:
                on_record(record)
            while self.episodes >= next_eval:
                last_eval = self.evaluate_now(eval_episodes)
                if on_record:
                    on_record({
                        "event": "eval",
                        "global_step": self.global_step,
                        "episodes": self.episodes,
                        "mean_collective_reward":
                            last_eval["mean_collective_reward"],
                        "mean_pairwise_jsd": last_eval["mean_pairwise_jsd"],
                        "beta": beta,
                        "policy_loss": None,
                        "value_loss": None,
                        "entropy": None,
                        "success_rate": last_eval["success_rate"],
                    })
                if on_checkpoint:
                    on_checkpoint(self)
                next_eval += eval_interval
            if stop_when is not None and last_eval is not None \
                    and stop_when(last_eval):
                break
        final = self.evaluate_now(eval_episodes)
        if on_record:
            on_record({
                "event": "final_eval",
                "global_step": self.global_step,
                "episodes": self.episodes,
                "mean_collective_reward": final["mean_collective_reward"],
                "mean_pairwise_jsd": final["mean_pairwise_jsd"],
                "beta": beta_schedule(self.global_step, self.incentive),
                "policy_loss": None,
                "value_loss": None,
                "entropy": None,
                "success_rate": final["success_rate"],
            })
        return {"global_step": self.global_step, "episodes": self.episodes,
                "final_eval": final}


def social_learning_run(kind: str = "tasklist", n_novices: int = 2,
                        expert_params: dict | None = None,
                        incentive: IncentiveConfig | None = None,
                        ppo: PPOConfig | None = None, seed: int = 0,
                        env_overrides: dict | None = None) -> Trainer:
    """Trainer for novices sharing the grid with one frozen expert.

    With ``expert_params=None`` the comparison arm is built instead: the
    same novices learning alone on matched seeds. The expert (when present)
    is appended after the novices and flagged non-learning in the
    environment, so episode termination tracks the novices only.
    """
    specs = [AgentSpec("joint_attention") for _ in range(n_novices)]
    overrides = dict(env_overrides or {})
    if expert_params is not None:
        specs.append(AgentSpec("frozen_expert", params=expert_params))
        overrides["non_learning"] = (n_novices,)
    pop = PopulationSpec(specs, incentive or IncentiveConfig())
    return Trainer(kind, "default", pop, ppo, seed=seed,
                   env_overrides=overrides)
