"""Benchmark construction, judging, metrics and evaluation protocols."""

from .checklist import classify_intents, decompose_intent
from .metrics import (ensemble_mean, item_accuracy, jsd, krippendorff_alpha, persona_alignment,
                      preference_recovery, proactive_inquiry_ratio, rigid_ratio, scalar_to_100)
from .protocols import EvalReport, profile_memory_update, run_long_horizon_eval, run_single_scenario_eval

__all__ = ["classify_intents", "decompose_intent", "ensemble_mean", "item_accuracy", "jsd", "krippendorff_alpha",
           "persona_alignment", "preference_recovery", "proactive_inquiry_ratio", "rigid_ratio", "scalar_to_100",
           "EvalReport", "profile_memory_update", "run_long_horizon_eval", "run_single_scenario_eval"]
