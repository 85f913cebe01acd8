from .analysis import (MultimodalityReport, SweepResult, SweepRow, multimodality_count,
                       occlusion_sweep, sweep_to_csv)
from .metrics import FlowMetrics, chamfer_distance, flow_metrics
from .reports import (EvalReport, aggregate, evaluate_rollouts, oracle_sampler_factory,
                      report_to_csvs)

__all__ = [
    "MultimodalityReport", "SweepResult", "SweepRow", "multimodality_count",
    "occlusion_sweep", "sweep_to_csv",
    "FlowMetrics", "chamfer_distance", "flow_metrics",
    "EvalReport", "aggregate", "evaluate_rollouts", "oracle_sampler_factory",
    "report_to_csvs",
]
