"""Desk-scale laboratory for masked-conditioning prompt tuning.

A tiny contrastive image/text dual encoder is pretrained from scratch,
frozen, and then adapted with learnable prompt prefixes under several
tuning methods (fixed context, instance-conditioned context, reference-
anchored context, and masked-image conditioning).  Synthetic datasets
stand in for real benchmarks so the whole protocol suite runs on one
CPU core in minutes.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    data,
    encoders,
    evaluation,
    masking,
    numerics,
    objectives,
    prompting,
    training,
)
