"""fabriclab: deterministic Clos-fabric traffic lab.

A fluid discrete-interval fabric simulator, an envelope-bounded online
learning control stack (controller + edge agents), classic load-balancing
and traffic-engineering baselines, and an experiment harness that turns
scenario files into metric reports and plot data.
"""

__version__ = "0.1.0"

from .actions import ActionVector
from .envelope import PolicyEnvelope

__all__ = ["ActionVector", "PolicyEnvelope", "__version__"]
