"""Learnable context tokens, the conditioning meta-network, and prompt assembly.

A prompt for class ``i`` is M continuous prefix vectors followed by the
class token.  The fixed-context method learns only the prefix; the
conditioned methods add a single image-derived shift vector (the meta
token) to every prefix position, making prompts instance-specific.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from . import vocab
from .encoders import DualEncoder
from .errors import DimensionError, InputError
from .numerics import Tensor

METHODS = ("handcrafted", "coop", "cocoop", "kgcoop", "promim")

PROMPT_CHECKPOINT_FORMAT = "promptmim-prompts"
PROMPT_CHECKPOINT_VERSION = 1

CONTEXT_INIT_STD = 0.02
META_REDUCTION = 4


class ContextTokens:
    """M learnable prefix vectors shared by every class."""

    def __init__(self, tokens: Tensor):
        if tokens.data.ndim != 2:
            raise DimensionError("context tokens must be (M, embed_dim)")
        self.tokens = tokens

    @classmethod
    def init(cls, m: int, embed_dim: int, rng: np.random.Generator) -> "ContextTokens":
        if m < 1:
            raise InputError("need at least one context token")
        return cls(
            Tensor(rng.normal(0.0, CONTEXT_INIT_STD, size=(m, embed_dim)),
                   requires_grad=True)
        )

    @property
    def m(self) -> int:
        return self.tokens.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.tokens]


class MetaNet:
    """Two-layer bottleneck mapping an image embedding to the meta token.

    The second layer starts at zero so the first tuning step is identical
    to the unconditioned method.
    """

    def __init__(self, input_dim: int, embed_dim: int,
                 rng: np.random.Generator, reduction: int = META_REDUCTION):
        hidden = max(1, input_dim // reduction)
        self.w1 = Tensor(rng.normal(0.0, CONTEXT_INIT_STD, size=(input_dim, hidden)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((hidden, embed_dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros(embed_dim), requires_grad=True)
        self.input_dim = input_dim
        self.embed_dim = embed_dim

    @classmethod
    def from_arrays(cls, w1, b1, w2, b2) -> "MetaNet":
        net = cls.__new__(cls)
        net.w1 = Tensor(np.asarray(w1), requires_grad=True)
        net.b1 = Tensor(np.asarray(b1), requires_grad=True)
        net.w2 = Tensor(np.asarray(w2), requires_grad=True)
        net.b2 = Tensor(np.asarray(b2), requires_grad=True)
        net.input_dim = net.w1.shape[0]
        net.embed_dim = net.w2.shape[1]
        return net

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, image_embedding: Tensor) -> Tensor:
        if image_embedding.data.ndim != 1 or image_embedding.shape[0] != self.input_dim:
            raise DimensionError(
                f"meta-net expects a {self.input_dim}-vector, "
                f"got shape {image_embedding.shape}"
            )
        hidden = nm.relu(nm.matmul(image_embedding, self.w1) + self.b1)
        return nm.matmul(hidden, self.w2) + self.b2


def meta_forward(net: MetaNet, image_embedding: Tensor) -> Tensor:
    """Meta token for one image embedding (differentiable in the net)."""
    return net.forward(image_embedding)


@dataclass
class PromptSet:
    """Per-class prompt material: one shared prefix plus class tokens."""

    method: str
    prefix: Tensor  # (M, embed_dim), shared across classes
    class_names: tuple[str, ...]
    class_tokens: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown prompt method {self.method!r}")
        if len(self.class_names) != len(self.class_tokens):
            raise InputError("one token sequence per class is required")

    def __len__(self) -> int:
        return len(self.class_names)


def _class_token_ids(classes: Sequence[str]) -> tuple[tuple[int, ...], ...]:
    return tuple((vocab.token_id(name),) for name in classes)


def assemble_prompts(ctx: ContextTokens, pi: Tensor | None,
                     classes: Sequence[str], method: str = "coop") -> PromptSet:
    """Build the prompt set: prefix is ctx, optionally shifted by the meta token.

    The same ``pi`` is added to every context position; with ``pi`` absent
    (or zero) the result is exactly the fixed-context prompt.
    """
    prefix = ctx.tokens
    if pi is not None:
        if pi.data.ndim != 1 or pi.shape[0] != ctx.tokens.shape[1]:
            raise DimensionError(
                f"meta token must be a {ctx.tokens.shape[1]}-vector, "
                f"got shape {pi.shape}"
            )
        prefix = ctx.tokens + pi
    return PromptSet(
        method=method,
        prefix=prefix,
        class_names=tuple(classes),
        class_tokens=_class_token_ids(classes),
    )


def handcrafted_prompts(encoder: DualEncoder, classes: Sequence[str]) -> PromptSet:
    """Prompt set whose prefix is the embedding-table rows of the template."""
    prefix = encoder.table_rows(vocab.template_prefix_tokens())
    return PromptSet(
        method="handcrafted",
        prefix=prefix,
        class_names=tuple(classes),
        class_tokens=_class_token_ids(classes),
    )


@dataclass(frozen=True)
class ReferenceEmbeddings:
    """Frozen text embeddings of the handcrafted template, one row per class."""

    classes: tuple[str, ...]
    matrix: np.ndarray  # (C, output_dim), unit rows, read-only

    def __post_init__(self):
        self.matrix.setflags(write=False)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


def compute_reference_embeddings(encoder: DualEncoder,
                                 classes: Sequence[str]) -> ReferenceEmbeddings:
    """Encode 'a photo of a <class>' for each class through the frozen encoder."""
    rows = []
    with nm.no_grad():
        for name in classes:
            emb = encoder.text_encode(encoder.embed_template(name))
            rows.append(nm.l2_normalize(emb).data)
    return ReferenceEmbeddings(tuple(classes), np.ascontiguousarray(np.stack(rows)))


def encode_prompt_set(encoder: DualEncoder, ps: PromptSet) -> Tensor:
    """Per-class text embeddings of a prompt set, L2-normalized row-wise.

    Gradients flow back into the prefix (and through it into the context
    tokens and meta-network).
    """
    rows = []
    for tokens in ps.class_tokens:
        emb = encoder.text_encode_soft(ps.prefix, tokens)
        rows.append(nm.l2_normalize(emb))
    return nm.stack_rows(rows)


# -- persistence ---------------------------------------------------------------


def save_prompt_state(path: str | Path, method: str, ctx: ContextTokens,
                      meta: MetaNet | None, classes: Sequence[str],
                      encoder_checksum: str) -> None:
    payload = {
        "format": PROMPT_CHECKPOINT_FORMAT,
        "version": PROMPT_CHECKPOINT_VERSION,
        "method": method,
        "classes": list(classes),
        "context": ctx.tokens.data.tolist(),
        "meta": None
        if meta is None
        else {
            "w1": meta.w1.data.tolist(),
            "b1": meta.b1.data.tolist(),
            "w2": meta.w2.data.tolist(),
            "b2": meta.b2.data.tolist(),
        },
        "encoder_checksum": encoder_checksum,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_prompt_state(path: str | Path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"prompt checkpoint not found: {path}") from None
    if payload.get("format") != PROMPT_CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a prompt checkpoint")
    if payload.get("version") != PROMPT_CHECKPOINT_VERSION:
        raise InputError(f"unsupported prompt checkpoint version")
    return payload
