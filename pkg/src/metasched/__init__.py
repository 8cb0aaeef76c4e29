"""Meta-learning with pluggable task schedulers and an adaptive neural scheduler."""

from . import ats, harness, metalearn, numkit, schedulers, taskgen, theoryx

__all__ = ["ats", "harness", "metalearn", "numkit", "schedulers", "taskgen", "theoryx"]
__version__ = "0.1.0"
