"""Bayesian racing of anytime optimisers under a temporal Plackett-Luce model."""

from .trajectories import TimeGrid, Trajectory, Instance, RankingObservation, TiePolicy
from .priors import make_prior, KINDS
from .inference import InferenceConfig, RatingSamples, posterior_update
from .race import RaceConfig, ModelSpec, run_race
from .synth import sample_ground_truth, true_pareto_set, SyntheticBenchmark

__version__ = "0.1.0"

__all__ = ["TimeGrid", "Trajectory", "Instance", "RankingObservation", "TiePolicy", "make_prior",
           "KINDS", "InferenceConfig", "RatingSamples", "posterior_update", "RaceConfig",
           "ModelSpec", "run_race", "sample_ground_truth", "true_pareto_set", "SyntheticBenchmark"]
