"""csnlab: desk-scale metalearning with conditionally shifted neurons.

Networks adapt to each task on the fly: a description pass over a handful
of labeled examples populates a key-value memory with per-layer activation
shifts, and predictions retrieve those shifts by attention over input keys.
"""

__version__ = "0.1.0"

from .autodiff import Parameter, Tape, Tensor, backward, counters, no_grad

__all__ = ["Parameter", "Tape", "Tensor", "backward", "counters", "no_grad", "__version__"]
