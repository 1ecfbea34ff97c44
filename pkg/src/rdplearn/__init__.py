"""rdplearn: learning and solving Regular Decision Processes from traces.

The pipeline samples interaction traces, clusters history contexts by the KL
divergence of their empirical outcome distributions, learns a Mealy machine
from the cluster labels with EDSM state merging, and plans on the machine's
product MDP with value iteration or UCT. The harness reproduces the benchmark
protocol on four non-Markovian domains with an R-max baseline.
"""

from .core import (Action, InputSymbol, MealyMachine, Observation,
                   PropositionSet, Step, Trace, discounted_return, deserialize_mealy,
                   export_dot, serialize_mealy)
from .envs import EnvConfig, EpisodeOutcome, ground_truth_mealy, make_env
from .harness import ExperimentConfig, run_baseline_rmax, run_s3m

__all__ = [
    "Action", "EnvConfig", "EpisodeOutcome", "ExperimentConfig", "InputSymbol",
    "MealyMachine", "Observation", "PropositionSet", "Step", "Trace",
    "discounted_return", "deserialize_mealy", "export_dot", "ground_truth_mealy",
    "make_env", "run_baseline_rmax", "run_s3m", "serialize_mealy",
]
