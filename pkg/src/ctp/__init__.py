"""Cross-graph, tuning-free prompting for few-shot graph classification."""
from .graph import Graph, gen_planted_partition, gen_relational, load_graph, save_graph
from .training import Checkpoint, EvalReport, TrainConfig, ablate, evaluate, sweep_eval, sweep_lambda_p, train

__version__ = "0.1.0"

__all__ = [
    "Graph", "gen_planted_partition", "gen_relational", "load_graph", "save_graph",
    "Checkpoint", "EvalReport", "TrainConfig", "train", "evaluate", "sweep_lambda_p", "sweep_eval", "ablate",
]
