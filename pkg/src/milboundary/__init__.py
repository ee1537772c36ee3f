"""Weakly supervised semantic boundary detection on synthetic scenes.

Confident label maps derived from class attention maps supply line-segment
bags; a two-branch network is trained on max-aggregated MIL losses, its
outputs are turned into pseudo boundary labels, and a student network is
retrained on them.  Evaluation follows the usual tolerance-matched PR
protocol.
"""

__version__ = "0.1.0"
