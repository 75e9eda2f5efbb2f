"""Segment-aware multiple instance learning for weakly supervised bags.

Subpackages by responsibility: ``bag_model`` (data model), ``data_io``
(interchange format, folds, synthetic generator), ``group_features``
(per-segment mean tokens), ``masking`` (instance-masking strategies),
``mil_engine`` (attention-MIL network with hand-derived gradients),
``regularizers`` (pseudo-bag and consistency losses), ``trainer``
(optimization loop), ``metrics`` (AUC / threshold metrics), ``cli``.
"""

__version__ = "0.1.0"
