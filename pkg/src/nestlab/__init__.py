"""Multi-expert long-tailed classification with collaborative distillation.

A small numpy autodiff core drives MLP experts trained with balanced
cross-entropy, inter- and intra-expert distillation, and partial views over
mined hard categories.
"""

__version__ = "0.1.0"
