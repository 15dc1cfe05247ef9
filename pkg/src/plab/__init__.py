"""Clean-label backdoor toolkit: autodiff core, trigger construction, metrics and bounds."""
from .tensor import Tensor, make_rng
from .models import NetworkSpec, build, classify
from .data import Dataset, SynthSpec, synth_clusters, build_poisoned_set
from .triggers import TriggerSet, build_mask, compose_trigger
from .metrics import ConditionReport, eval_accuracy, eval_asr
from .bounds import BoundInputs, clean_bound_rhs, poison_bound_rhs, empirical_rademacher

__version__ = "0.1.0"
