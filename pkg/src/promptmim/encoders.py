"""Tiny patch-based vision transformer and token-based text transformer.

The pair stands in for a pretrained contrastive dual encoder: it is
trained once with a symmetric InfoNCE loss, then frozen, and prompt
tuning only ever reads from it.  The vision path can run on an arbitrary
subset of patches (plus one summary token), which is what makes masked
conditioning cheap: processing half the patches costs half the tokens.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from . import vocab
from .errors import DegenerateInputError, DimensionError, InputError
from .numerics import Tensor

CHECKPOINT_FORMAT = "promptmim-encoder"
CHECKPOINT_VERSION = 1

# CLIP-style initialization: the learned inverse temperature starts at 14.
INIT_INV_TEMPERATURE = 14.0


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    text_vocab_size: int = vocab.VOCAB_SIZE
    max_text_len: int = 12
    output_dim: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_side % self.patch_size != 0:
            raise DimensionError("image_side must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise DimensionError("embed_dim must be divisible by heads")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2

    def to_dict(self) -> dict:
        return {
            "image_side": self.image_side,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "text_vocab_size": self.text_vocab_size,
            "max_text_len": self.max_text_len,
            "output_dim": self.output_dim,
            "mlp_ratio": self.mlp_ratio,
        }


@dataclass(frozen=True)
class PatchGrid:
    """Row-major non-overlapping patches of one image."""

    patches: np.ndarray  # (n_patches, patch_dim)
    grid_h: int
    grid_w: int

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Cut an image into flattened square patches, row-major."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError("patchify expects a 2-D single-channel image")
    h, w = image.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise DimensionError(
            f"image sides {h}x{w} are not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    patches = (
        image.reshape(gh, patch_size, gw, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(gh * gw, patch_size * patch_size)
    )
    return PatchGrid(np.ascontiguousarray(patches), gh, gw)


def unpatchify(grid: PatchGrid, patch_size: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    gh, gw = grid.grid_h, grid.grid_w
    return (
        grid.patches.reshape(gh, gw, patch_size, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(gh * patch_size, gw * patch_size)
    )


def _init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Seeded parameter table; iteration order is the checkpoint order."""
    std = 0.02
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    params: dict[str, Tensor] = {}

    def normal(name, shape):
        params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    def tower(prefix: str):
        for layer in range(cfg.depth):
            base = f"{prefix}.block{layer}"
            ones(f"{base}.ln1.g", (d,))
            zeros(f"{base}.ln1.b", (d,))
            for proj in ("q", "k", "v", "o"):
                normal(f"{base}.attn.{proj}.w", (d, d))
                zeros(f"{base}.attn.{proj}.b", (d,))
            ones(f"{base}.ln2.g", (d,))
            zeros(f"{base}.ln2.b", (d,))
            normal(f"{base}.mlp.w1", (d, hidden))
            zeros(f"{base}.mlp.b1", (hidden,))
            normal(f"{base}.mlp.w2", (hidden, d))
            zeros(f"{base}.mlp.b2", (d,))
        ones(f"{prefix}.ln_out.g", (d,))
        zeros(f"{prefix}.ln_out.b", (d,))
        normal(f"{prefix}.proj", (d, cfg.output_dim))

    normal("vision.patch_embed.w", (cfg.patch_dim, d))
    zeros("vision.patch_embed.b", (d,))
    normal("vision.cls", (1, d))
    normal("vision.pos", (cfg.n_patches + 1, d))
    tower("vision")

    normal("text.token_table", (cfg.text_vocab_size, d))
    normal("text.pos", (cfg.max_text_len, d))
    tower("text")
    return params


class DualEncoder:
    """Frozen image/text encoder pair with a learned logit temperature.

    ``log_inv_tau`` parameterizes the temperature as tau = exp(-s), so the
    inverse temperature stays positive throughout pretraining.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        self.params = _init_params(cfg, np.random.default_rng(seed))
        self.log_inv_tau = Tensor(np.log(INIT_INV_TEMPERATURE), requires_grad=True)
        self.frozen = False
        self.tokens_processed = 0
        self.last_token_count = 0

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values()) + [self.log_inv_tau]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    @property
    def tau(self) -> float:
        return float(np.exp(-self.log_inv_tau.data))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        h.update(self.log_inv_tau.data.tobytes())
        return h.hexdigest()

    def reset_token_counter(self) -> None:
        self.tokens_processed = 0
        self.last_token_count = 0

    # -- transformer tower ------------------------------------------------------

    def _block(self, x: Tensor, base: str) -> Tensor:
        p = self.params
        cfg = self.cfg
        head_dim = cfg.embed_dim // cfg.heads
        scale = 1.0 / np.sqrt(head_dim)

        h = nm.layer_norm(x, p[f"{base}.ln1.g"], p[f"{base}.ln1.b"])
        q = nm.matmul(h, p[f"{base}.attn.q.w"]) + p[f"{base}.attn.q.b"]
        k = nm.matmul(h, p[f"{base}.attn.k.w"]) + p[f"{base}.attn.k.b"]
        v = nm.matmul(h, p[f"{base}.attn.v.w"]) + p[f"{base}.attn.v.b"]
        heads = []
        for i in range(cfg.heads):
            qi = nm.narrow(q, 1, i * head_dim, head_dim)
            ki = nm.narrow(k, 1, i * head_dim, head_dim)
            vi = nm.narrow(v, 1, i * head_dim, head_dim)
            att = nm.softmax(nm.matmul(qi, ki.T) * scale, axis=1)
            heads.append(nm.matmul(att, vi))
        merged = nm.concat(heads, axis=1)
        x = x + (nm.matmul(merged, p[f"{base}.attn.o.w"]) + p[f"{base}.attn.o.b"])

        h2 = nm.layer_norm(x, p[f"{base}.ln2.g"], p[f"{base}.ln2.b"])
        inner = nm.relu(nm.matmul(h2, p[f"{base}.mlp.w1"]) + p[f"{base}.mlp.b1"])
        return x + (nm.matmul(inner, p[f"{base}.mlp.w2"]) + p[f"{base}.mlp.b2"])

    def _tower(self, tokens: Tensor, prefix: str, pool: str) -> Tensor:
        x = tokens
        for layer in range(self.cfg.depth):
            x = self._block(x, f"{prefix}.block{layer}")
        x = nm.layer_norm(
            x, self.params[f"{prefix}.ln_out.g"], self.params[f"{prefix}.ln_out.b"]
        )
        if pool == "mean":
            pooled = nm.mean_(x, axis=0)
        else:  # "last": the class-token position of the caption
            pooled = nm.reshape(
                nm.narrow(x, 0, x.shape[0] - 1, 1), (self.cfg.embed_dim,)
            )
        return nm.matmul(pooled, self.params[f"{prefix}.proj"])

    # -- vision path ------------------------------------------------------------

    def vision_encode(self, grid: PatchGrid, visible: Sequence[int]) -> Tensor:
        """Encode only the visible patches plus the summary token.

        The processed token count (``|visible| + 1``) is recorded on the
        encoder for compute accounting.
        """
        if grid.n_patches != self.cfg.n_patches:
            raise DimensionError(
                f"grid has {grid.n_patches} patches, encoder expects "
                f"{self.cfg.n_patches}"
            )
        idx = sorted(int(i) for i in visible)
        if not idx:
            raise DegenerateInputError("visible patch set is empty")
        if idx[0] < 0 or idx[-1] >= grid.n_patches or len(set(idx)) != len(idx):
            raise InputError("visible indices must be unique and in range")

        # Standardize over the visible pixels only, so the masked path never
        # reads a masked patch; with full visibility this is the usual
        # per-image normalization.
        pix = grid.patches[idx]
        pix = (pix - pix.mean()) / max(float(pix.std()), 1e-6)
        tok = nm.matmul(Tensor(pix), self.params["vision.patch_embed.w"])
        tok = tok + self.params["vision.patch_embed.b"]
        seq = nm.concat([self.params["vision.cls"], tok], axis=0)
        # Positions are gathered for the surviving tokens only (row 0 = summary).
        pos = nm.take_rows(self.params["vision.pos"], [0] + [i + 1 for i in idx])
        seq = seq + pos

        self.last_token_count = len(idx) + 1
        self.tokens_processed += self.last_token_count
        return self._tower(seq, "vision", pool="mean")

    def encode_image(self, image: np.ndarray, visible: Sequence[int] | None = None) -> Tensor:
        grid = patchify(image, self.cfg.patch_size)
        if visible is None:
            visible = range(grid.n_patches)
        return self.vision_encode(grid, visible)

    # -- text path ----------------------------------------------------------------

    def _text_forward(self, rows: Tensor) -> Tensor:
        n = rows.shape[0]
        if not 1 <= n <= self.cfg.max_text_len:
            raise DimensionError(
                f"text length {n} outside [1, {self.cfg.max_text_len}]"
            )
        seq = rows + nm.take_rows(self.params["text.pos"], list(range(n)))
        return self._tower(seq, "text", pool="last")

    def text_encode(self, tokens: Sequence[int]) -> Tensor:
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise DimensionError("token sequence is empty")
        if any(t < 0 or t >= self.cfg.text_vocab_size for t in tokens):
            raise InputError("token id outside the vocabulary")
        rows = nm.take_rows(self.params["text.token_table"], tokens)
        return self._text_forward(rows)

    def text_encode_soft(self, prefix: Tensor, class_tokens: Sequence[int]) -> Tensor:
        """Text encoding whose first rows bypass the token table.

        With ``prefix`` equal to the table rows of real tokens this is
        bitwise identical to :meth:`text_encode`; gradients flow into the
        prefix vectors.
        """
        if prefix.data.ndim != 2 or prefix.shape[1] != self.cfg.embed_dim:
            raise DimensionError(
                f"prefix must be (M, {self.cfg.embed_dim}), got {prefix.shape}"
            )
        class_tokens = [int(t) for t in class_tokens]
        if not class_tokens:
            raise DimensionError("class token sequence is empty")
        if any(t < 0 or t >= self.cfg.text_vocab_size for t in class_tokens):
            raise InputError("token id outside the vocabulary")
        rows = nm.concat(
            [prefix, nm.take_rows(self.params["text.token_table"], class_tokens)],
            axis=0,
        )
        return self._text_forward(rows)

    def embed_template(self, class_name: str) -> list[int]:
        """Token ids of the fixed caption for one class."""
        return vocab.template_tokens(class_name)

    def table_rows(self, tokens: Sequence[int]) -> Tensor:
        """Embedding-table rows for given token ids (graph-connected)."""
        return nm.take_rows(self.params["text.token_table"], [int(t) for t in tokens])

    # -- persistence -----------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "frozen": self.frozen,
            "log_inv_tau": float(self.log_inv_tau.data),
            "params": {k: v.data.tolist() for k, v in self.params.items()},
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DualEncoder":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"encoder checkpoint not found: {path}") from None
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{path} is not an encoder checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"unsupported checkpoint version {payload.get('version')}")
        enc = cls(EncoderConfig(**payload["config"]))
        stored = payload["params"]
        if set(stored) != set(enc.params):
            raise InputError("checkpoint parameter table does not match the config")
        for name, p in enc.params.items():
            arr = np.asarray(stored[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise InputError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{arr.shape} != {p.data.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise InputError(f"checkpoint parameter {name} is not finite")
            p.data = np.ascontiguousarray(arr)
        enc.log_inv_tau.data = np.asarray(float(payload["log_inv_tau"]))
        if payload.get("frozen"):
            enc.freeze()
        return enc


def contrastive_pretrain_loss(image_embs: Tensor, text_embs: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE over the N x N cosine-similarity matrix.

    Inputs are L2-normalized (N, dim) batches whose rows are paired;
    the loss averages the image-to-text and text-to-image cross-entropies
    of the matched diagonal.  ``tau`` may be a float or a scalar tensor
    so pretraining can learn the temperature.
    """
    if image_embs.data.ndim != 2 or text_embs.data.ndim != 2:
        raise DimensionError("contrastive loss expects (N, dim) batches")
    n = image_embs.shape[0]
    if n != text_embs.shape[0]:
        raise DimensionError("image and text batch sizes differ")
    if n < 2:
        raise DegenerateInputError("contrastive loss needs at least 2 pairs")
    logits = nm.matmul(image_embs, text_embs.T) / tau
    eye = Tensor(np.eye(n))
    i2t = -nm.sum_(nm.mul(nm.log_softmax(logits, axis=1), eye)) / n
    t2i = -nm.sum_(nm.mul(nm.log_softmax(logits.T, axis=1), eye)) / n
    return (i2t + t2i) * 0.5
