"""The tuning loss surface: class probabilities, cross-entropy, the
reference-anchoring distance, and their weighted combination.

Class probabilities are a softmax over cosine similarities divided by
the encoder temperature.  The classification feature is always the
full-image embedding; masking only ever changes the conditioning path
that produced the prompts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DegenerateInputError, DimensionError, InputError
from .numerics import Tensor
from .prompting import ReferenceEmbeddings


@dataclass
class ClassProbabilities:
    """Softmax class distribution plus the similarities that produced it."""

    probs: Tensor  # (C,), entries in (0,1) summing to 1
    sims: Tensor  # (C,) cosine similarities, kept for inspection
    logits: Tensor  # sims / tau, kept for stable log-prob extraction
    tau: float

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]


def class_probabilities(x_emb: Tensor, class_text_embs: Tensor,
                        tau: float) -> ClassProbabilities:
    """Distribution over classes from one image embedding.

    ``class_text_embs`` is the (C, dim) matrix of prompt embeddings; both
    sides are L2-normalized here so cosine similarity is a plain dot
    product.
    """
    if tau <= 0.0:
        raise InputError(f"temperature must be positive, got {tau}")
    if class_text_embs.data.ndim != 2:
        raise DimensionError("class embeddings must be a (C, dim) matrix")
    c, dim = class_text_embs.shape
    if c < 2:
        raise InputError("need at least two classes")
    if x_emb.data.ndim != 1 or x_emb.shape[0] != dim:
        raise DimensionError(
            f"image embedding of length {x_emb.shape} does not match class "
            f"embeddings of width {dim}"
        )
    if float(np.linalg.norm(x_emb.data)) < 1e-12:
        raise DegenerateInputError("zero-norm image embedding")
    if float(np.min(np.linalg.norm(class_text_embs.data, axis=1))) < 1e-12:
        raise DegenerateInputError("zero-norm class embedding")
    sims = nm.matmul(
        nm.l2_normalize(class_text_embs, axis=-1), nm.l2_normalize(x_emb)
    )
    logits = sims * (1.0 / tau)
    return ClassProbabilities(
        probs=nm.softmax(logits, axis=0), sims=sims, logits=logits, tau=tau
    )


def cross_entropy(probs: ClassProbabilities, label: int) -> Tensor:
    """Negative log-probability of the true class, computed stably."""
    if not 0 <= label < probs.n_classes:
        raise InputError(f"label {label} outside [0, {probs.n_classes})")
    log_probs = nm.log_softmax(probs.logits, axis=0)
    return -nm.sum_(nm.narrow(nm.reshape(log_probs, (-1, 1)), 0, label, 1))


def kg_loss(w_learned: Tensor, w_ref: ReferenceEmbeddings | np.ndarray) -> Tensor:
    """Mean squared Euclidean distance to the handcrafted reference embeddings.

    Gradients flow only into ``w_learned``; the reference side is a frozen
    constant.
    """
    ref = w_ref.matrix if isinstance(w_ref, ReferenceEmbeddings) else np.asarray(w_ref)
    if w_learned.data.ndim != 2 or ref.ndim != 2:
        raise DimensionError("expected (C, dim) matrices")
    if w_learned.shape[0] != ref.shape[0]:
        raise InputError(
            f"class count mismatch: {w_learned.shape[0]} != {ref.shape[0]}"
        )
    if w_learned.shape[1] != ref.shape[1]:
        raise DimensionError("embedding dimensions differ")
    diff = w_learned - Tensor(ref)
    return nm.sum_(nm.mul(diff, diff)) / w_learned.shape[0]


@dataclass
class LossBreakdown:
    """The combined objective with its components retained."""

    ce: Tensor
    kg: Tensor
    lam: float
    total: Tensor

    def row(self) -> dict[str, float]:
        return {
            "ce": float(self.ce.data),
            "kg": float(self.kg.data),
            "lambda": self.lam,
            "total": float(self.total.data),
        }


def total_loss(ce: Tensor, kg: Tensor, lam: float) -> LossBreakdown:
    """Combined objective ``ce + lam * kg`` with components retained."""
    if lam < 0.0:
        raise InputError(f"lambda must be nonnegative, got {lam}")
    return LossBreakdown(ce=ce, kg=kg, lam=lam, total=ce + lam * kg)
