"""artiflow: articulation-flow prediction for ambiguous articulated objects.

Subpackages: artkin (kinematics + flow oracle), synthgen (procedural data),
flowdiff (history-aware flow diffusion), policy (manipulation policy),
simenv (quasi-static simulator), evalkit (metrics and reports), cli.
"""

__version__ = "0.1.0"
