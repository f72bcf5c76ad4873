"""Command-line entry point: train, eval, social runs, map rendering.

Commands
    train             run a training experiment from a config file
    eval              evaluate a checkpoint (optionally across variants)
    render-attention  roll out one greedy episode and export attention maps
    social            paired novice runs with and without a frozen expert
    list-envs         show environment kinds, variants, and defaults

Configs are plain text, one ``key = value`` per line with dotted key
sections (see DEFAULT_CONFIG_KEYS); unknown keys are rejected with the
offending line number. A run's output directory receives the effective
config, a manifest that indexes every artifact, line-delimited JSON
metrics, and immutable step-numbered checkpoints. Exit codes: 0 success,
1 runtime failure, 2 usage or config error.
"""

import argparse
import hashlib
import json
import os
import sys
import traceback

import numpy as np

from . import __version__
from .gridworlds import (
    ENCODING_VERSION,
    ENV_KINDS,
    VARIANTS,
    make_config,
)
from .ja_reward import IncentiveConfig, beta_schedule
from .training import (
    AgentSpec,
    PPOConfig,
    PopulationSpec,
    Trainer,
    VARIANTS as AGENT_VARIANTS,
    build_population,
    evaluate,
    generalization_eval,
    load_agent_params,
    load_checkpoint,
    save_checkpoint,
    social_learning_run,
)


class CliError(Exception):
    exit_code = 1


class ConfigError(CliError):
    """Usage or configuration problem (exit code 2)."""
    exit_code = 2


class RunFailure(CliError):
    """Runtime problem in an otherwise valid invocation (exit code 1)."""
    exit_code = 1


# ---------------------------------------------------------------------------
# experiment config: parse / serialize / hash

_ENV_OVERRIDE_KEYS = ("interior", "episode_cap", "landmarks", "coin_colors",
                      "coins_per_color", "berries", "stags",
                      "tasklist_subtasks")
_INCENTIVE_KEYS = ("metric", "clip_threshold", "beta_max", "beta_rampup_steps")
_PPO_KEYS = ("learning_rate", "batch_size", "epochs", "clip_ratio", "gamma",
             "gae_lambda", "entropy_coef", "value_coef", "chunk_length",
             "segment_length", "n_envs")

# full key schema: dotted key -> value type ("int", "float", "str",
# "opt_int", "opt_str", "variants")
DEFAULT_CONFIG_KEYS = {"env.kind": "str", "env.variant": "str",
                       "population.variants": "variants"}
for _k in _ENV_OVERRIDE_KEYS:
    DEFAULT_CONFIG_KEYS[f"env.{_k}"] = "opt_int"
for _k, _t in zip(_INCENTIVE_KEYS, ("str", "float", "float", "int")):
    DEFAULT_CONFIG_KEYS[f"incentive.{_k}"] = _t
for _k in _PPO_KEYS:
    DEFAULT_CONFIG_KEYS[f"ppo.{_k}"] = (
        "int" if _k in ("batch_size", "epochs", "chunk_length",
                        "segment_length", "n_envs") else "float")
DEFAULT_CONFIG_KEYS.update({
    "run.seed": "int",
    "run.eval_interval": "int",
    "run.eval_episodes": "int",
    "run.max_env_steps": "opt_int",
    "run.total_episodes": "opt_int",
    "run.output_dir": "opt_str",
})


class ExperimentConfig:
    """Everything a run needs; round-trips losslessly through text."""

    def __init__(self, env_kind="meetup", env_variant="default",
                 population=("joint_attention", "joint_attention"),
                 incentive=None, ppo=None, env_overrides=None, seed=0,
                 eval_interval=3000, eval_episodes=10, max_env_steps=200_000,
                 total_episodes=None, output_dir=None):
        self.env_kind = env_kind
        self.env_variant = env_variant
        self.population = tuple(population)
        self.incentive = incentive or IncentiveConfig()
        self.ppo = ppo or PPOConfig()
        self.env_overrides = dict(env_overrides or {})
        self.seed = seed
        self.eval_interval = eval_interval
        self.eval_episodes = eval_episodes
        self.max_env_steps = max_env_steps
        self.total_episodes = total_episodes
        self.output_dir = output_dir

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and \
            serialize_config(self) == serialize_config(other)

    def validate(self) -> None:
        if self.env_kind not in ENV_KINDS:
            raise ConfigError(f"env.kind must be one of {ENV_KINDS}, "
                              f"got {self.env_kind!r}")
        if self.env_variant not in VARIANTS \
                or self.env_kind not in VARIANTS[self.env_variant]:
            raise ConfigError(f"env.variant {self.env_variant!r} does not "
                              f"apply to {self.env_kind!r}")
        if not self.population:
            raise ConfigError("population.variants must name at least one agent")
        for v in self.population:
            if v == "frozen_expert":
                raise ConfigError("frozen_expert cannot appear in a train "
                                  "config; use the social command")
            if v not in AGENT_VARIANTS:
                raise ConfigError(f"unknown agent variant {v!r}; pick from "
                                  f"{tuple(AGENT_VARIANTS)}")
        if self.max_env_steps is None and self.total_episodes is None:
            raise ConfigError("set run.max_env_steps or run.total_episodes")
        for name in ("seed", "eval_interval", "eval_episodes"):
            if getattr(self, name) < 0 or (name != "seed"
                                           and getattr(self, name) == 0):
                raise ConfigError(f"run.{name} is out of range")
        try:
            make_config(self.env_kind, self.env_variant, **self.env_overrides)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"environment overrides rejected: {e}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_items(cfg: ExperimentConfig) -> list:
    """The canonical (key, value) sequence behind serialization and hashing."""
    items = [("env.kind", cfg.env_kind), ("env.variant", cfg.env_variant)]
    for k in _ENV_OVERRIDE_KEYS:
        if k in cfg.env_overrides:
            items.append((f"env.{k}", cfg.env_overrides[k]))
    items.append(("population.variants", ", ".join(cfg.population)))
    for k in _INCENTIVE_KEYS:
        items.append((f"incentive.{k}", getattr(cfg.incentive, k)))
    for k in _PPO_KEYS:
        items.append((f"ppo.{k}", getattr(cfg.ppo, k)))
    items += [
        ("run.seed", cfg.seed),
        ("run.eval_interval", cfg.eval_interval),
        ("run.eval_episodes", cfg.eval_episodes),
        ("run.max_env_steps", cfg.max_env_steps),
        ("run.total_episodes", cfg.total_episodes),
        ("run.output_dir", cfg.output_dir),
    ]
    return items


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in config_items(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def _parse_value(key: str, raw: str, where: str):
    kind = DEFAULT_CONFIG_KEYS[key]
    raw = raw.strip()
    try:
        if kind in ("opt_int", "opt_str") and raw == "none":
            return None
        if kind in ("int", "opt_int"):
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "variants":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: bad value {raw!r} for {key}")


def parse_config_text(text: str, source: str = "config") -> ExperimentConfig:
    """Strict parse: unknown or duplicate keys fail with their line number."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}, line {lineno}: expected 'key = "
                              f"value', got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULT_CONFIG_KEYS:
            raise ConfigError(f"{source}, line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}, line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, f"{source}, line {lineno}")
    return build_config(values)


def build_config(values: dict) -> ExperimentConfig:
    """Assemble an ExperimentConfig from a flat dotted-key dict."""
    defaults = ExperimentConfig()

    def get(key, fallback):
        return values.get(key, fallback)

    env_overrides = {k: values[f"env.{k}"] for k in _ENV_OVERRIDE_KEYS
                     if values.get(f"env.{k}") is not None}
    try:
        incentive = IncentiveConfig(**{
            k: get(f"incentive.{k}", getattr(defaults.incentive, k))
            for k in _INCENTIVE_KEYS})
        ppo = PPOConfig(**{k: get(f"ppo.{k}", getattr(defaults.ppo, k))
                           for k in _PPO_KEYS})
    except ValueError as e:
        raise ConfigError(str(e))
    cfg = ExperimentConfig(
        env_kind=get("env.kind", defaults.env_kind),
        env_variant=get("env.variant", defaults.env_variant),
        population=get("population.variants", defaults.population),
        incentive=incentive,
        ppo=ppo,
        env_overrides=env_overrides,
        seed=get("run.seed", defaults.seed),
        eval_interval=get("run.eval_interval", defaults.eval_interval),
        eval_episodes=get("run.eval_episodes", defaults.eval_episodes),
        max_env_steps=get("run.max_env_steps", defaults.max_env_steps),
        total_episodes=get("run.total_episodes", defaults.total_episodes),
        output_dir=get("run.output_dir", defaults.output_dir),
    )
    cfg.validate()
    return cfg


def load_config_file(path: str) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        return parse_config_text(f.read(), source=path)


def apply_overrides(cfg: ExperimentConfig, pairs: list) -> ExperimentConfig:
    """Apply --set key=value pairs on top of a parsed config."""
    values = dict(config_items(cfg))
    values = {k: v for k, v in values.items() if v is not None}
    if "population.variants" in values:
        values["population.variants"] = cfg.population
    for n, pair in enumerate(pairs, start=1):
        if "=" not in pair:
            raise ConfigError(f"--set #{n}: expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in DEFAULT_CONFIG_KEYS:
            raise ConfigError(f"--set #{n}: unknown key {key!r}")
        value = _parse_value(key, raw, f"--set #{n}")
        if value is None:
            values.pop(key, None)
        else:
            values[key] = value
    return build_config(values)


# ---------------------------------------------------------------------------
# output directories, locks, manifests, metrics

def resolve_output_dir(explicit, cfg_value, fallback_name: str) -> str:
    if explicit:
        return explicit
    if cfg_value:
        return cfg_value
    root = os.environ.get("JA_OUTPUT_DIR")
    if root:
        return os.path.join(root, fallback_name)
    raise ConfigError("no output directory: pass --output-dir, set "
                      "run.output_dir, or export JA_OUTPUT_DIR")


class OutputLock:
    """Exclusive ownership of an output directory for one process."""

    def __init__(self, outdir: str):
        self.path = os.path.join(outdir, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunFailure(
                f"output directory is locked by another command ({self.path}); "
                "remove the file if that process is gone")
        os.write(self.fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.remove(self.path)
        return False


class Manifest:
    """Index of every artifact a command leaves in its output directory."""

    def __init__(self, outdir: str, command: str, cfg_hash: str, seeds: list):
        self.outdir = outdir
        self.data = {
            "command": command,
            "config_hash": cfg_hash,
            "code_version": __version__,
            "encoding_version": ENCODING_VERSION,
            "seeds": list(seeds),
            "config_file": None,
            "metrics": [],
            "checkpoints": [],
            "files": [],
        }

    def add(self, kind: str, relpath: str) -> None:
        if kind == "config":
            self.data["config_file"] = relpath
        elif kind in ("metrics", "checkpoints"):
            if relpath not in self.data[kind]:
                self.data[kind].append(relpath)
        else:
            if relpath not in self.data["files"]:
                self.data["files"].append(relpath)
        self.write()

    def set(self, key: str, value) -> None:
        self.data[key] = value
        self.write()

    def write(self) -> None:
        path = os.path.join(self.outdir, "manifest.json")
        with open(path + ".tmp", "w") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(path + ".tmp", path)


class MetricsWriter:
    """Appends one JSON record per line; every line is flushed whole."""

    def __init__(self, path: str):
        self.f = open(path, "a")

    def write(self, record: dict) -> None:
        self.f.write(json.dumps(record) + "\n")
        self.f.flush()

    def close(self) -> None:
        self.f.close()


def _prepare_outdir(outdir: str, resume: bool, marker: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    if not resume and os.path.exists(os.path.join(outdir, marker)):
        raise RunFailure(
            f"output directory {outdir} already holds a run ({marker} "
            "exists); use a fresh directory or --resume")


# ---------------------------------------------------------------------------
# checkpoint helpers

def _checkpoint_steps(ckroot: str) -> list:
    if not os.path.isdir(ckroot):
        return []
    out = []
    for name in os.listdir(ckroot):
        if name.startswith("step") and name[4:].isdigit() \
                and os.path.isfile(os.path.join(ckroot, name,
                                                "checkpoint.json")):
            out.append(name)
    return sorted(out)


def resolve_checkpoint_dir(path: str) -> str:
    """Accept either a checkpoint directory or a run directory."""
    if os.path.isfile(os.path.join(path, "checkpoint.json")):
        return path
    steps = _checkpoint_steps(os.path.join(path, "checkpoints"))
    if steps:
        return os.path.join(path, "checkpoints", steps[-1])
    raise ConfigError(f"no checkpoint found under {path}")


def read_checkpoint_config(ckdir: str) -> ExperimentConfig:
    cfg_path = os.path.join(ckdir, "config.cfg")
    if not os.path.isfile(cfg_path):
        raise ConfigError(f"checkpoint {ckdir} has no config.cfg")
    cfg = load_config_file(cfg_path)
    with open(os.path.join(ckdir, "checkpoint.json")) as f:
        meta = json.load(f)
    recorded = meta.get("config_hash", "")
    if recorded and recorded != config_hash(cfg):
        raise ConfigError(
            f"checkpoint {ckdir}: config.cfg does not match the recorded "
            f"config hash ({recorded[:12]}...); the checkpoint or its config "
            "was altered")
    return cfg


def experiment_env_config(cfg: ExperimentConfig):
    """The environment an experiment trains on: population size wins."""
    return make_config(cfg.env_kind, cfg.env_variant,
                       agent_count=len(cfg.population), **cfg.env_overrides)


def build_agents_from_checkpoint(ckdir: str, cfg: ExperimentConfig) -> list:
    size = experiment_env_config(cfg).interior + 2
    pop = PopulationSpec([AgentSpec(v) for v in cfg.population], cfg.incentive)
    agents = build_population(pop, size, size, cfg.ppo, cfg.seed)
    load_checkpoint(ckdir, agents)
    return agents


def _save_run_checkpoint(trainer: Trainer, outdir: str, cfg: ExperimentConfig,
                         manifest: Manifest) -> str:
    rel = os.path.join("checkpoints", f"step{trainer.global_step:09d}")
    path = os.path.join(outdir, rel)
    if not os.path.isdir(path):
        save_checkpoint(path, trainer.agents, trainer.global_step,
                        trainer.episodes, config_hash(cfg))
        with open(os.path.join(path, "config.cfg"), "w") as f:
            f.write(serialize_config(cfg))
        manifest.add("checkpoints", rel)
    return rel


# ---------------------------------------------------------------------------
# commands

def _start_record(cfg: ExperimentConfig) -> dict:
    return {
        "event": "start",
        "global_step": 0,
        "episodes": 0,
        "mean_collective_reward": None,
        "mean_pairwise_jsd": None,
        "beta": beta_schedule(0, cfg.incentive),
        "policy_loss": None,
        "value_loss": None,
        "entropy": None,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
    }


def cmd_train(args) -> int:
    cfg = load_config_file(args.config)
    cfg = apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        values = {k: v for k, v in config_items(cfg) if v is not None}
        values["population.variants"] = cfg.population
        values["run.seed"] = args.seed
        cfg = build_config(values)
    stem = os.path.splitext(os.path.basename(args.config))[0]
    outdir = resolve_output_dir(args.output_dir, cfg.output_dir,
                                f"{stem}_s{cfg.seed}")
    _prepare_outdir(outdir, args.resume, "metrics.jsonl")
    with OutputLock(outdir):
        manifest = Manifest(outdir, "train", config_hash(cfg), [cfg.seed])
        with open(os.path.join(outdir, "config.cfg"), "w") as f:
            f.write(serialize_config(cfg))
        manifest.add("config", "config.cfg")

        pop = PopulationSpec([AgentSpec(v) for v in cfg.population],
                             cfg.incentive)
        trainer = Trainer(cfg.env_kind, cfg.env_variant, pop, cfg.ppo,
                          seed=cfg.seed, env_overrides=cfg.env_overrides)
        metrics = MetricsWriter(os.path.join(outdir, "metrics.jsonl"))
        manifest.add("metrics", "metrics.jsonl")
        try:
            if args.resume:
                steps = _checkpoint_steps(os.path.join(outdir, "checkpoints"))
                if not steps:
                    raise RunFailure(f"--resume: no checkpoint in {outdir}")
                ckdir = os.path.join(outdir, "checkpoints", steps[-1])
                if read_checkpoint_config(ckdir) != cfg:
                    raise ConfigError("--resume: the directory's checkpoint "
                                      "was trained with a different config")
                meta = load_checkpoint(ckdir, trainer.agents)
                trainer.global_step = meta["global_step"]
                trainer.envset.completed_episodes = meta["episodes"]
                metrics.write({"event": "resume",
                               "global_step": trainer.global_step,
                               "episodes": trainer.episodes,
                               "beta": beta_schedule(trainer.global_step,
                                                     cfg.incentive)})
            else:
                metrics.write(_start_record(cfg))
            summary = trainer.run(
                max_env_steps=cfg.max_env_steps,
                total_episodes=cfg.total_episodes,
                eval_interval=cfg.eval_interval,
                eval_episodes=cfg.eval_episodes,
                on_record=metrics.write,
                on_checkpoint=lambda tr: _save_run_checkpoint(
                    tr, outdir, cfg, manifest))
        finally:
            metrics.close()
        final_rel = _save_run_checkpoint(trainer, outdir, cfg, manifest)
        manifest.set("final_checkpoint", final_rel)
        with open(os.path.join(outdir, "final_summary.json"), "w") as f:
            json.dump(summary["final_eval"], f, indent=2, sort_keys=True)
            f.write("\n")
        manifest.add("files", "final_summary.json")
    print(json.dumps({"output_dir": outdir,
                      "global_step": summary["global_step"],
                      "episodes": summary["episodes"],
                      **summary["final_eval"]}))
    return 0


def cmd_eval(args) -> int:
    ckdir = resolve_checkpoint_dir(args.checkpoint)
    cfg = read_checkpoint_config(ckdir)
    agents = build_agents_from_checkpoint(ckdir, cfg)
    env_config = experiment_env_config(cfg)
    episodes = args.episodes
    if episodes is None:
        episodes = 30 if args.generalize else 10

    if args.generalize:
        applicable = [v for v, kinds in VARIANTS.items()
                      if cfg.env_kind in kinds]
        if args.generalize == "all":
            chosen = applicable
        elif args.generalize in applicable:
            chosen = [args.generalize]
        else:
            raise ConfigError(f"variant {args.generalize!r} does not apply "
                              f"to {cfg.env_kind!r} (choose from "
                              f"{applicable} or 'all')")
        summary = generalization_eval(agents, cfg.env_kind, chosen,
                                      env_config, episodes=episodes,
                                      seed=args.seed)
        for variant, ev in summary.items():
            print(f"{variant:>14}  success={ev['success_rate']:.3f}  "
                  f"collective={ev['mean_collective_reward']:.3f}  "
                  f"length={ev['mean_episode_length']:.1f}  "
                  f"jsd={ev['mean_pairwise_jsd']}")
    else:
        summary = evaluate(agents, cfg.env_kind, cfg.env_variant, env_config,
                           episodes, args.seed, cfg.incentive)
        print(json.dumps(summary))

    if args.output_dir or os.environ.get("JA_OUTPUT_DIR"):
        name = f"eval_{os.path.basename(os.path.normpath(ckdir))}_s{args.seed}"
        outdir = resolve_output_dir(args.output_dir, None, name)
        os.makedirs(outdir, exist_ok=True)
        with OutputLock(outdir):
            manifest = Manifest(outdir, "eval", config_hash(cfg), [args.seed])
            with open(os.path.join(outdir, "summary.json"), "w") as f:
                json.dump(summary, f, indent=2, sort_keys=True)
                f.write("\n")
            manifest.add("files", "summary.json")
            manifest.set("checkpoint_evaluated", os.path.abspath(ckdir))
            manifest.set("episodes", episodes)
    return 0


def _write_pgm(path: str, field: np.ndarray) -> None:
    """Text PGM (P2) heatmap: pixels scale the map by 65535 / max cell."""
    h, w = field.shape
    top = float(field.max())
    pixels = np.rint(field * (65535.0 / top)).astype(np.int64)
    lines = [f"P2\n{w} {h}\n65535\n"]
    for row in pixels:
        lines.append(" ".join(str(int(v)) for v in row) + "\n")
    with open(path, "w") as f:
        f.write("".join(lines))


def mutual_cells(maps: dict, threshold: float) -> list:
    """[x, y] cells where every agent's mean map exceeds the threshold."""
    stacked = np.stack([maps[k] for k in sorted(maps)])
    mask = (stacked > threshold).all(axis=0)
    ys, xs = np.nonzero(mask)
    return [[int(x), int(y)] for x, y in zip(xs, ys)]


def cmd_render_attention(args) -> int:
    ckdir = resolve_checkpoint_dir(args.checkpoint)
    cfg = read_checkpoint_config(ckdir)
    agents = build_agents_from_checkpoint(ckdir, cfg)
    if not any(a.uses_attention for a in agents):
        raise ConfigError("this checkpoint's agents produce no attention "
                          "maps; nothing to render")
    env_config = experiment_env_config(cfg)
    name = f"render_{os.path.basename(os.path.normpath(ckdir))}_s{args.seed}"
    outdir = resolve_output_dir(args.output_dir, None, name)
    os.makedirs(outdir, exist_ok=True)

    from .gridworlds import reset, step
    from .training import observation_array, pose_vector
    from .attention_net import act

    with OutputLock(outdir):
        manifest = Manifest(outdir, "render-attention", config_hash(cfg),
                            [args.seed])
        manifest.set("mutual_threshold", args.mutual_threshold)
        heat_dir = os.path.join(outdir, "heatmaps")
        os.makedirs(heat_dir, exist_ok=True)
        ep_seed = int(np.random.SeedSequence(
            [args.seed, 0]).generate_state(1)[0])
        state, obs = reset(cfg.env_kind, cfg.env_variant, seed=ep_seed,
                           config=env_config)
        rec = [a.core.initial_state(1) for a in agents]
        dump_path = os.path.join(outdir, "maps.jsonl")
        n_files = 0
        with open(dump_path, "w") as dump:
            t = 0
            while not state.done:
                grid_ints = obs[0][0]
                grid = observation_array(grid_ints)[None]
                actions = np.zeros(env_config.agent_count, dtype=np.int64)
                step_maps = {}
                for k, agent in enumerate(agents):
                    pose = pose_vector(*obs[k][1])[None]
                    logits, _, maps, rec[k] = agent.core.agent_step(
                        grid, pose, rec[k])
                    rec[k] = rec[k].detach()
                    a, _ = act(logits, "greedy", None)
                    actions[k] = a[0]
                    if maps is not None:
                        step_maps[k] = maps.mean_map[0]
                dump.write(json.dumps(
                    {"t": t, "grid": np.asarray(grid_ints).tolist()}) + "\n")
                for k, field in step_maps.items():
                    dump.write(json.dumps(
                        {"t": t, "agent": k, "map": field.tolist()}) + "\n")
                    _write_pgm(os.path.join(
                        heat_dir, f"t{t:04d}_agent{k}.pgm"), field)
                    n_files += 1
                dump.write(json.dumps(
                    {"t": t,
                     "mutual": mutual_cells(step_maps,
                                            args.mutual_threshold)}) + "\n")
                state, _, obs = step(state, actions)
                t += 1
        manifest.add("files", "maps.jsonl")
        manifest.add("files", "heatmaps")
        manifest.set("timesteps", t)
        manifest.set("heatmap_files", n_files)
    print(json.dumps({"output_dir": outdir, "timesteps": t,
                      "heatmaps": n_files}))
    return 0


def cmd_social(args) -> int:
    ckdir = resolve_checkpoint_dir(args.expert)
    expert_cfg = read_checkpoint_config(ckdir)
    expert_params = load_agent_params(ckdir, args.expert_index)
    outdir = resolve_output_dir(
        args.output_dir, None,
        f"social_{os.path.basename(os.path.normpath(ckdir))}_s{args.seed}")
    _prepare_outdir(outdir, False, "metrics_with_expert.jsonl")
    max_steps = args.max_env_steps
    if max_steps is None:
        max_steps = expert_cfg.max_env_steps or 150_000

    with OutputLock(outdir):
        manifest = Manifest(outdir, "social", config_hash(expert_cfg),
                            [args.seed])
        manifest.set("expert_checkpoint", os.path.abspath(ckdir))
        manifest.set("novices", args.novices)

        # gate: a weak expert makes the comparison meaningless
        expert_agents = build_agents_from_checkpoint(ckdir, expert_cfg)
        env_config = experiment_env_config(expert_cfg)
        expert_eval = evaluate(expert_agents, expert_cfg.env_kind,
                               expert_cfg.env_variant, env_config,
                               episodes=10, seed=args.seed,
                               incentive=expert_cfg.incentive)
        below = expert_eval["success_rate"] < args.expert_threshold
        manifest.set("expert_success_rate", expert_eval["success_rate"])
        manifest.set("expert_below_threshold", bool(below))
        if below:
            print(f"warning: expert success rate "
                  f"{expert_eval['success_rate']:.2f} is below "
                  f"{args.expert_threshold:.2f}; proceeding anyway",
                  file=sys.stderr)

        results = {}
        for tag, params in (("with_expert", expert_params), ("alone", None)):
            trainer = social_learning_run(
                kind=expert_cfg.env_kind, n_novices=args.novices,
                expert_params=params, incentive=expert_cfg.incentive,
                ppo=expert_cfg.ppo, seed=args.seed,
                env_overrides=expert_cfg.env_overrides)
            rel = f"metrics_{tag}.jsonl"
            metrics = MetricsWriter(os.path.join(outdir, rel))
            manifest.add("metrics", rel)
            start = _start_record(expert_cfg)
            start["seed"] = args.seed
            start["arm"] = tag
            metrics.write(start)
            try:
                summary = trainer.run(
                    max_env_steps=max_steps,
                    eval_interval=expert_cfg.eval_interval,
                    eval_episodes=expert_cfg.eval_episodes,
                    on_record=lambda r, _tag=tag, _m=metrics:
                        _m.write({**r, "arm": _tag}))
            finally:
                metrics.close()
            rel_ck = os.path.join("checkpoints", f"{tag}_final")
            save_checkpoint(os.path.join(outdir, rel_ck), trainer.agents,
                            trainer.global_step, trainer.episodes,
                            config_hash(expert_cfg))
            manifest.add("checkpoints", rel_ck)
            results[tag] = {"global_step": summary["global_step"],
                            "episodes": summary["episodes"],
                            **summary["final_eval"]}
        manifest.set("results", results)
    print(json.dumps({"output_dir": outdir, **results}))
    return 0


def cmd_list_envs(args) -> int:
    for kind in ENV_KINDS:
        variants = [v for v, kinds in VARIANTS.items() if kind in kinds]
        cfg = make_config(kind)
        knobs = {"interior": cfg.interior, "agents": cfg.agent_count,
                 "episode_cap": cfg.episode_cap}
        if kind == "meetup":
            knobs["landmarks"] = cfg.landmarks
        elif kind == "colorgather":
            knobs["coin_colors"] = cfg.coin_colors
            knobs["coins_per_color"] = cfg.coins_per_color
        elif kind == "staghunt":
            knobs["berries"] = cfg.berries
            knobs["stags"] = cfg.stags
        elif kind == "tasklist":
            knobs["subtasks"] = cfg.tasklist_subtasks
        knob_txt = " ".join(f"{k}={v}" for k, v in knobs.items())
        print(f"{kind:>12}  variants: {', '.join(variants)}")
        print(f"{'':>12}  defaults: {knob_txt}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointattn",
        description="Train and inspect joint-attention gridworld agents.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true",
                   help="continue from the directory's newest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint directory (or a run directory)")
    p.add_argument("--episodes", type=int,
                   help="episode count (default 10, or 30 with --generalize)")
    p.add_argument("--generalize", metavar="VARIANT",
                   help="evaluate across variants ('all' or one name)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-attention",
                       help="export one episode's attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mutual-threshold", type=float, default=0.05)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_render_attention)

    p = sub.add_parser("social",
                       help="paired novice runs with/without a frozen expert")
    p.add_argument("--expert", required=True, help="expert checkpoint")
    p.add_argument("--expert-index", type=int, default=0,
                   help="which agent in the expert checkpoint to freeze")
    p.add_argument("--novices", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-env-steps", type=int)
    p.add_argument("--expert-threshold", type=float, default=0.9)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_social)

    p = sub.add_parser("list-envs", help="list kinds, variants, defaults")
    p.set_defaults(func=cmd_list_envs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
