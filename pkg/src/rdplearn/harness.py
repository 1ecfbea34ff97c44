"""The S3M outer loop, experiment configuration, and artifact emission.

One repetition alternates: sample episodes (statistics keyed on the current
state space), cluster the accumulated traces, pick the best model over the
epsilon grid, learn a Mealy machine from the well-backed labels, evaluate the
machine with UCT, then rekey the sampler onto the new product state space.
Samples accumulate across iterations; evaluation episodes never enter the
training set. Every random draw derives from the master seed, so a config
reproduces its CSV bit for bit.
"""

from __future__ import annotations

import csv
import io
import math
import os
import random
from dataclasses import dataclass, field

from . import clustering, mealy_learn, planning, sampling
from .clustering import OutcomeDistribution
from .core import ConfigError, MealyMachine, RdplearnError, serialize_mealy
from .envs import MAZE, EnvConfig, make_env
from .planning import EvalResult, RmaxAgent, RmaxPolicy, UctPolicy
from .seeding import PHASE_BASELINE, PHASE_EVAL, PHASE_SAMPLE, derive_seed

CSV_HEADER = ["repetition", "iteration", "clusters", "mealy_states", "loss",
              "policy_mean", "policy_std", "sampling_avg_reward"]

PURE, SMART = "pure", "smart"


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig
    sampler: str = SMART
    min_samples: int = 50
    epsilons: tuple[float, ...] = (0.2, 0.5, 1.0)
    cluster_penalty: float = 1.0
    max_iterations: int = 15
    episodes_per_iteration: int = 200
    eval_trials: int = 50
    eval_horizon: int = 10
    repetitions: int = 5
    uct_iterations: int = 500
    uct_c: float = math.sqrt(2.0)
    gamma: float = 0.95
    q_alpha: float = 0.1
    q_epsilon: float = 0.1
    rmax_known_threshold: int = 10
    rmax_reward_ceiling: float = 1.0
    rmax_tol: float = 1e-4
    master_seed: int = 0
    output_dir: str = "results"

    def __post_init__(self):
        if self.sampler not in (PURE, SMART):
            raise ConfigError(f"sampler must be pure or smart, got {self.sampler!r}")
        checks = [
            (self.min_samples >= 1, "min_samples must be >= 1"),
            (len(self.epsilons) > 0 and all(e >= 0 for e in self.epsilons),
             "epsilons must be a non-empty list of non-negative reals"),
            (self.cluster_penalty >= 0, "cluster_penalty must be >= 0"),
            (self.max_iterations >= 0, "max_iterations must be >= 0"),
            (self.episodes_per_iteration >= 1, "episodes_per_iteration must be >= 1"),
            (self.eval_trials >= 1, "eval_trials must be >= 1"),
            (self.eval_horizon >= 1, "eval_horizon must be >= 1"),
            (self.repetitions >= 1, "repetitions must be >= 1"),
            (self.uct_iterations >= 1, "uct_iterations must be >= 1"),
            (0.0 < self.gamma < 1.0, "gamma must be in (0, 1)"),
            (0.0 < self.q_alpha <= 1.0, "q_alpha must be in (0, 1]"),
            (0.0 <= self.q_epsilon <= 1.0, "q_epsilon must be in [0, 1]"),
            (self.rmax_known_threshold >= 1, "rmax_known_threshold must be >= 1"),
            (self.rmax_tol > 0, "rmax_tol must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    clusters: int
    mealy_states: int
    loss: float
    policy_mean: float
    policy_std: float
    sampling_avg_reward: float


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    records: list[list[IterationRecord]] = field(default_factory=list)
    machines: list[MealyMachine | None] = field(default_factory=list)
    label_tables: list[dict[int, OutcomeDistribution] | None] = field(default_factory=list)
    final_evals: list[EvalResult | None] = field(default_factory=list)
    diagnostics: list[tuple[int, str]] = field(default_factory=list)

    def summary(self) -> tuple[float, float]:
        """Mean and std (across repetitions) of the final-iteration policy mean."""
        finals = [recs[-1].policy_mean for recs in self.records if recs]
        if not finals:
            return math.nan, math.nan
        mean = sum(finals) / len(finals)
        var = sum((x - mean) ** 2 for x in finals) / len(finals)
        return mean, math.sqrt(var)


def _make_sampler(cfg: ExperimentConfig) -> sampling.Sampler:
    if cfg.sampler == PURE:
        return sampling.PureExplorationSampler()
    return sampling.SmartSampler(alpha=cfg.q_alpha, epsilon=cfg.q_epsilon, gamma=cfg.gamma)


def _run_repetition(cfg: ExperimentConfig, rep: int):
    env = make_env(cfg.env)
    sampler = _make_sampler(cfg)
    sample = sampling.SampleSet()
    obs_space = cfg.env.observation_space()
    records: list[IterationRecord] = []
    machine = None
    label_table = None
    final_eval = None
    for it in range(cfg.max_iterations):
        action_rng = random.Random(derive_seed(cfg.master_seed, rep, PHASE_SAMPLE, it))
        block_reward = 0.0
        block_steps = 0
        for ep in range(cfg.episodes_per_iteration):
            env_seed = derive_seed(cfg.master_seed, rep, PHASE_SAMPLE, it, ep)
            trace = sampler.run_episode(env, cfg.env.episode_horizon, env_seed, action_rng)
            sample.add(trace, env_seed)
            block_reward += trace.total_reward
            block_steps += len(trace)

        bases, rare = clustering.base_distributions(sample, cfg.min_samples)
        model = clustering.select_model(bases, rare, cfg.epsilons, sample,
                                        cfg.cluster_penalty, cfg.min_samples)
        labeled = clustering.label_traces(sample, model, min_weight=cfg.min_samples)
        tree = mealy_learn.build_prefix_tree(labeled, cfg.env.obs_width, cfg.env.num_actions)
        machine = mealy_learn.edsm_learn(tree)
        label_table = {c.id: c.dist for c in model.clusters}

        mdp = planning.build_product_mdp(machine, label_table, obs_space,
                                         terminal_obs=cfg.env.terminal_observations)
        policy = UctPolicy(machine, mdp, cfg.uct_iterations, cfg.uct_c, cfg.gamma)
        result = planning.evaluate_policy(cfg.env, policy, cfg.eval_trials,
                                          cfg.eval_horizon, seed=cfg.master_seed,
                                          seed_path=(rep, PHASE_EVAL, it))
        records.append(IterationRecord(
            it, len(model.clusters), machine.num_states, model.loss,
            result.mean_per_step, result.std,
            block_reward / block_steps if block_steps else 0.0))
        final_eval = result
        sampler.rekey(machine)
    return records, machine, label_table, final_eval


def run_s3m(cfg: ExperimentConfig) -> RunArtifacts:
    """Run the full S3M experiment; failed repetitions are recorded, not fatal."""
    artifacts = RunArtifacts(cfg)
    for rep in range(cfg.repetitions):
        try:
            records, machine, labels, final_eval = _run_repetition(cfg, rep)
        except RdplearnError as err:
            artifacts.records.append([])
            artifacts.machines.append(None)
            artifacts.label_tables.append(None)
            artifacts.final_evals.append(None)
            artifacts.diagnostics.append((rep, f"{type(err).__name__}: {err}"))
            continue
        artifacts.records.append(records)
        artifacts.machines.append(machine)
        artifacts.label_tables.append(labels)
        artifacts.final_evals.append(final_eval)
    return artifacts


def run_baseline_rmax(cfg: ExperimentConfig) -> RunArtifacts:
    """R-max on raw observations with the same sampling budget and seeds."""
    artifacts = RunArtifacts(cfg)
    for rep in range(cfg.repetitions):
        try:
            env = make_env(cfg.env)
            agent = RmaxAgent(cfg.env.num_actions, cfg.rmax_known_threshold,
                              cfg.rmax_reward_ceiling, cfg.gamma, cfg.rmax_tol)
            records: list[IterationRecord] = []
            final_eval = None
            for it in range(cfg.max_iterations):
                block_reward = 0.0
                block_steps = 0
                for ep in range(cfg.episodes_per_iteration):
                    env_seed = derive_seed(cfg.master_seed, rep, PHASE_BASELINE, it, ep)
                    obs = env.reset(env_seed)
                    t = 0
                    while t < cfg.env.episode_horizon and not env.done:
                        action = agent.act(obs)
                        nxt, reward = env.step(action)
                        agent.update(obs, action, reward, nxt)
                        obs = nxt
                        block_reward += reward
                        block_steps += 1
                        t += 1
                result = planning.evaluate_policy(cfg.env, RmaxPolicy(agent),
                                                  cfg.eval_trials, cfg.eval_horizon,
                                                  seed=cfg.master_seed,
                                                  seed_path=(rep, PHASE_EVAL, it))
                records.append(IterationRecord(
                    it, 0, 0, math.nan, result.mean_per_step, result.std,
                    block_reward / block_steps if block_steps else 0.0))
                final_eval = result
            artifacts.records.append(records)
            artifacts.machines.append(None)
            artifacts.label_tables.append(None)
            artifacts.final_evals.append(final_eval)
        except RdplearnError as err:
            artifacts.records.append([])
            artifacts.machines.append(None)
            artifacts.label_tables.append(None)
            artifacts.final_evals.append(None)
            artifacts.diagnostics.append((rep, f"{type(err).__name__}: {err}"))
    return artifacts


# ---------------------------------------------------------------------------
# CSV / plot / file artifacts
# ---------------------------------------------------------------------------

def records_to_csv(artifacts: RunArtifacts) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_HEADER)
    for rep, records in enumerate(artifacts.records):
        for r in records:
            writer.writerow([rep, r.iteration, r.clusters, r.mealy_states, repr(r.loss),
                             repr(r.policy_mean), repr(r.policy_std),
                             repr(r.sampling_avg_reward)])
    return buf.getvalue()


def emit_csv(artifacts: RunArtifacts, path: str):
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(artifacts))


def read_csv(path_or_text: str, is_text: bool = False) -> list[dict]:
    text = path_or_text if is_text else open(path_or_text).read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ConfigError(f"bad results CSV header: {header}")
    rows = []
    for row in reader:
        if not row:
            continue
        rows.append({
            "repetition": int(row[0]), "iteration": int(row[1]),
            "clusters": int(row[2]), "mealy_states": int(row[3]),
            "loss": float(row[4]), "policy_mean": float(row[5]),
            "policy_std": float(row[6]), "sampling_avg_reward": float(row[7]),
        })
    return rows


def emit_plot(rows: list[dict], path: str, optimal: float | None = None):
    """Per-iteration mean policy reward with std error bars, vector output."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_iter: dict[int, list[float]] = {}
    sampling_by_iter: dict[int, list[float]] = {}
    for row in rows:
        by_iter.setdefault(row["iteration"], []).append(row["policy_mean"])
        sampling_by_iter.setdefault(row["iteration"], []).append(row["sampling_avg_reward"])
    iters = sorted(by_iter)
    means = [sum(by_iter[i]) / len(by_iter[i]) for i in iters]
    stds = [math.sqrt(sum((x - m) ** 2 for x in by_iter[i]) / len(by_iter[i]))
            for i, m in zip(iters, means)]
    samp = [sum(sampling_by_iter[i]) / len(sampling_by_iter[i]) for i in iters]

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.errorbar(iters, means, yerr=stds, marker="o", capsize=3, label="policy (UCT)")
    ax.plot(iters, samp, marker="s", linestyle="--", label="sampling avg reward")
    if optimal is not None:
        ax.axhline(optimal, color="black", linestyle=":", label="optimal")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean per-step reward")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def serialize_labels(table: dict[int, OutcomeDistribution], obs_width: int) -> str:
    """Line-oriented label table: id, mask bits, weight, then outcome triples."""
    lines = [f"labels {len(table)} {obs_width}"]
    for label in sorted(table):
        dist = table[label]
        mask_bits = "".join("1" if dist.affected >> i & 1 else "0" for i in range(obs_width))
        outs = " ".join(
            f"{''.join(map(str, assign)) or '-'}:{reward!r}:{prob!r}"
            for (assign, reward), prob in sorted(dist.outcomes.items()))
        lines.append(f"{label} {mask_bits} {dist.weight} {outs}")
    return "\n".join(lines) + "\n"


def parse_labels(text: str) -> dict[int, OutcomeDistribution]:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or not lines[0].startswith("labels "):
        raise ConfigError("missing labels header")
    table: dict[int, OutcomeDistribution] = {}
    for line in lines[1:]:
        parts = line.split()
        if len(parts) < 4:
            raise ConfigError(f"bad label line: {line!r}")
        label = int(parts[0])
        mask = sum(1 << i for i, ch in enumerate(parts[1]) if ch == "1")
        weight = int(parts[2])
        probs = {}
        for triple in parts[3:]:
            assign_s, reward_s, prob_s = triple.split(":")
            assignment = () if assign_s == "-" else tuple(int(c) for c in assign_s)
            probs[(assignment, float(reward_s))] = float(prob_s)
        table[label] = OutcomeDistribution.from_probs(mask, probs, weight=weight)
    return table


def save_artifacts(artifacts: RunArtifacts, outdir: str, prefix: str = "s3m") -> dict[str, str]:
    """Write CSV, per-repetition machine and label files, and a summary."""
    os.makedirs(outdir, exist_ok=True)
    paths = {"csv": os.path.join(outdir, f"{prefix}_results.csv")}
    emit_csv(artifacts, paths["csv"])
    width = artifacts.config.env.obs_width
    for rep, machine in enumerate(artifacts.machines):
        if machine is None:
            continue
        mpath = os.path.join(outdir, f"{prefix}_machine_rep{rep}.mealy")
        with open(mpath, "w") as fh:
            fh.write(serialize_mealy(machine))
        paths[f"machine_rep{rep}"] = mpath
        lpath = os.path.join(outdir, f"{prefix}_labels_rep{rep}.labels")
        with open(lpath, "w") as fh:
            fh.write(serialize_labels(artifacts.label_tables[rep], width))
        paths[f"labels_rep{rep}"] = lpath
    if artifacts.diagnostics:
        dpath = os.path.join(outdir, f"{prefix}_diagnostics.txt")
        with open(dpath, "w") as fh:
            for rep, msg in artifacts.diagnostics:
                fh.write(f"repetition {rep}: {msg}\n")
        paths["diagnostics"] = dpath
    return paths


# ---------------------------------------------------------------------------
# Config file parsing (flat key = value)
# ---------------------------------------------------------------------------

_ENV_KEYS = {
    "domain", "win_probs", "malfunction_k", "cheat_sequence", "grid_size",
    "start", "goal", "slip_prob", "rotate_every", "episode_horizon",
}
_EXPERIMENT_KEYS = {
    "sampler", "min_samples", "epsilons", "cluster_penalty", "max_iterations",
    "episodes_per_iteration", "eval_trials", "eval_horizon", "repetitions",
    "uct_iterations", "uct_c", "gamma", "q_alpha", "q_epsilon",
    "rmax_known_threshold", "rmax_reward_ceiling", "rmax_tol",
    "master_seed", "output_dir",
}


def _parse_pair(value: str) -> tuple[int, int]:
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected 'x,y', got {value!r}")
    return int(parts[0]), int(parts[1])


def parse_experiment_config(text: str) -> ExperimentConfig:
    """Parse the flat key = value config document; unknown keys are errors."""
    entries: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _ENV_KEYS and key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        entries[key] = value

    if "domain" not in entries:
        raise ConfigError("config must set 'domain'")
    kind = entries.pop("domain")
    is_maze = kind == MAZE
    env_kwargs: dict = {"kind": kind}
    env_defaults = {
        "episode_horizon": 15 if is_maze else 10,
    }
    if not is_maze:
        env_kwargs["win_probs"] = (0.9, 0.2)
    try:
        for key in list(entries):
            if key not in _ENV_KEYS:
                continue
            value = entries.pop(key)
            if key == "win_probs":
                env_kwargs["win_probs"] = tuple(float(p) for p in value.split(","))
            elif key == "cheat_sequence":
                env_kwargs["cheat_sequence"] = tuple(int(a) for a in value.split(","))
            elif key in ("start", "goal"):
                env_kwargs[key] = _parse_pair(value)
            elif key == "slip_prob":
                env_kwargs["slip_prob"] = float(value)
            else:
                env_kwargs[key] = int(value)
        for key, default in env_defaults.items():
            env_kwargs.setdefault(key, default)
        env = EnvConfig(**env_kwargs)

        exp_kwargs: dict = {}
        for key, value in entries.items():
            if key == "sampler":
                exp_kwargs[key] = value
            elif key == "output_dir":
                exp_kwargs[key] = value
            elif key == "epsilons":
                exp_kwargs[key] = tuple(float(e) for e in value.split(","))
            elif key in ("min_samples", "max_iterations", "episodes_per_iteration",
                         "eval_trials", "eval_horizon", "repetitions",
                         "uct_iterations", "rmax_known_threshold", "master_seed"):
                exp_kwargs[key] = int(value)
            else:
                exp_kwargs[key] = float(value)
        exp_kwargs.setdefault("episodes_per_iteration", 300 if is_maze else 200)
        exp_kwargs.setdefault("eval_horizon", 15 if is_maze else 10)
        return ExperimentConfig(env=env, **exp_kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def oracle_policy(env_cfg: EnvConfig, gamma: float = 0.95):
    """Ground-truth machine solved by value iteration over its product MDP."""
    from .envs import ground_truth_mealy

    machine, labels = ground_truth_mealy(env_cfg)
    mdp = planning.build_product_mdp(machine, labels, env_cfg.observation_space(),
                                     terminal_obs=env_cfg.terminal_observations)
    return planning.GreedyProductPolicy(machine, mdp, gamma=gamma, tol=1e-8)
