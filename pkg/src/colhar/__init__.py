"""Decentralized collaborative learning of activity classifiers.

Each agent owns a private windowed sensor dataset and a small 1-D CNN. Agents
train locally and, after every batch, replace their parameters with a
dataset-size-weighted average of their neighbours' parameters.
"""
from .agent import Agent
from .data import AgentDataset, ChannelStats, SubjectSeries
from .evaluation import ExperimentPlan, run_experiment, summarize
from .metrics import MetricsRecord, macro_f1
from .network import aggregate, build_topology, derive_weights, run_round, run_training
from .nn import AdamState, ModelArchitecture, SensorWindow, init_params

__all__ = [
    "Agent", "AgentDataset", "ChannelStats", "SubjectSeries", "ExperimentPlan",
    "run_experiment", "summarize", "MetricsRecord", "macro_f1", "aggregate",
    "build_topology", "derive_weights", "run_round", "run_training", "AdamState",
    "ModelArchitecture", "SensorWindow", "init_params",
]
__version__ = "0.1.0"
