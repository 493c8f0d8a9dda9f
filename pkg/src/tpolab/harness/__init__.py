"""Instance generation, roster runs and reporting."""

from .generate import GeneratedInstance, GenerationError, InstanceSpec, generate_instance, source_gap
from .run import (
    ExperimentConfig,
    Report,
    TrialResult,
    block_frequencies,
    load_run,
    mean_ci,
    run_roster,
    run_trial,
)
from .svg import padded_range, regret_svg, render_svg, selection_svg

__all__ = ["ExperimentConfig", "GeneratedInstance", "GenerationError", "InstanceSpec", "Report", "TrialResult",
           "block_frequencies", "generate_instance", "load_run", "mean_ci", "padded_range", "regret_svg",
           "render_svg", "run_roster", "run_trial", "selection_svg", "source_gap"]
