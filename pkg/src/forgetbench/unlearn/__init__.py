"""Composable erase/repair unlearning pipelines."""
from forgetbench.unlearn.phases import AscentDescent, Descent, Noise, Phase, Reinit, apply_phase, salun_mask
from forgetbench.unlearn.pipeline import PipelineRun, PipelineSpec, RuntimeBudget, run_pipeline, stitch
from forgetbench.unlearn.presets import ALGORITHMS, REFERENCES, make_preset, preset_names

__all__ = [
    "ALGORITHMS",
    "REFERENCES",
    "AscentDescent",
    "Descent",
    "Noise",
    "Phase",
    "PipelineRun",
    "PipelineSpec",
    "Reinit",
    "RuntimeBudget",
    "apply_phase",
    "make_preset",
    "preset_names",
    "run_pipeline",
    "salun_mask",
    "stitch",
]
