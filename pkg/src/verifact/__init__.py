"""Evidence-based fact verification at desk scale.

Pipeline: select evidence sentences from retrieved documents, then classify
each claim as supported, refuted or undecidable with a multi-level attention
model over the selected evidence, and score the result with a strict
label-plus-evidence metric.
"""

__version__ = "0.1.0"
