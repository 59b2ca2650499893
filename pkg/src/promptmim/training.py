"""Contrastive pretraining of the dual encoder and prompt tuning on top of it.

Pretraining is the one phase that updates encoder weights; it ends by
freezing them.  Tuning then learns only the context tokens (and, for the
conditioned methods, the meta-network) with plain SGD at batch size 1.
All randomness flows through named, seed-derived streams so that two
runs with the same configuration and seed are bitwise identical, and so
that methods which ignore a stream (e.g. the mask stream) do not desync
the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import Dataset, SplitPlan, SyntheticDatasetSpec, generate_dataset
from .encoders import DualEncoder, EncoderConfig, contrastive_pretrain_loss, patchify
from .errors import InputError, NonFiniteError, TrainingError
from .masking import MaskSpec, rng_from, sample_mask
from .numerics import Tensor
from .objectives import LossBreakdown, class_probabilities, cross_entropy, kg_loss, total_loss
from .prompting import (
    ContextTokens,
    MetaNet,
    ReferenceEmbeddings,
    assemble_prompts,
    compute_reference_embeddings,
    encode_prompt_set,
    meta_forward,
)

TUNE_METHODS = ("coop", "cocoop", "kgcoop", "promim")

LOG_COLUMNS = ("epoch", "step", "ce", "kg", "lambda", "total", "tokens_processed")

PRETRAIN_LR = 0.003
PRETRAIN_STEPS = 2400
PRETRAIN_BATCH = 8


@dataclass(frozen=True)
class TuneConfig:
    """Prompt-tuning hyperparameters.

    The fixed-context methods force the anchor weight to zero; the
    reference-anchored method ignores masking entirely; only the
    masked-conditioning method consumes the mask spec.
    """

    method: str = "promim"
    epochs: int = 10
    lr: float = 0.02
    batch_size: int = 1
    context_len: int = 4
    lam: float = 2.0
    mask: MaskSpec = field(default_factory=MaskSpec)
    k: int = 16
    seeds: tuple[int, ...] = (0, 1, 2)
    split_seed: int = 0
    eval_per_class: int = 32
    eval_mask: str = "per_sample"

    def __post_init__(self):
        if self.method not in TUNE_METHODS:
            raise InputError(f"unknown tuning method {self.method!r}")
        if self.lam < 0.0:
            raise InputError("lambda must be nonnegative")
        if self.eval_mask not in ("per_sample", "none"):
            raise InputError(f"unknown eval_mask policy {self.eval_mask!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.k < 1:
            raise InputError("epochs, batch_size and k must be positive")

    @property
    def uses_meta(self) -> bool:
        return self.method in ("cocoop", "promim")

    @property
    def uses_mask(self) -> bool:
        return self.method == "promim"

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.method in ("kgcoop", "promim") else 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "context_len": self.context_len,
            "lambda": self.lam,
            "mask": self.mask.to_dict(),
            "k": self.k,
            "seeds": list(self.seeds),
            "split_seed": self.split_seed,
            "eval_per_class": self.eval_per_class,
            "eval_mask": self.eval_mask,
        }


@dataclass
class PromptState:
    """Everything the tuned model consists of: prompts plus frozen anchors."""

    method: str
    class_names: tuple[str, ...]
    ctx: ContextTokens
    meta: MetaNet | None
    reference: ReferenceEmbeddings | None
    update_meta: bool = True

    def parameters(self) -> list[Tensor]:
        params = list(self.ctx.parameters())
        if self.meta is not None and self.update_meta:
            params.extend(self.meta.parameters())
        return params


def init_prompt_state(encoder: DualEncoder, class_names: Sequence[str],
                      cfg: TuneConfig, seed: int) -> PromptState:
    """Seeded prompt state; the context and meta streams are independent,
    so methods without a meta-network still draw identical context tokens."""
    ctx = ContextTokens.init(
        cfg.context_len, encoder.cfg.embed_dim, rng_from(seed, "ctx")
    )
    meta = None
    if cfg.uses_meta:
        meta = MetaNet(
            encoder.cfg.output_dim, encoder.cfg.embed_dim, rng_from(seed, "meta")
        )
    reference = None
    if cfg.effective_lambda > 0.0:
        reference = compute_reference_embeddings(encoder, class_names)
    return PromptState(
        method=cfg.method,
        class_names=tuple(class_names),
        ctx=ctx,
        meta=meta,
        reference=reference,
    )


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """Plain gradient-descent update ``p <- p - lr * grad``; grads cleared after."""
    params = list(params)
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise TrainingError("gradient shape does not match parameter")
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError("non-finite gradient")
        p.data = p.data - lr * p.grad
        if not np.all(np.isfinite(p.data)):
            raise TrainingError("parameter update overflowed")
    for p in params:
        p.grad = None


def conditioning_embedding(encoder: DualEncoder, image: np.ndarray,
                           visible: Sequence[int] | None) -> np.ndarray:
    """Normalized image embedding of the visible patches, as a constant.

    The encoder is frozen, so conditioning never needs a graph; the
    result feeds the meta-network as plain data.
    """
    with nm.no_grad():
        emb = encoder.encode_image(image, visible)
        return nm.l2_normalize(emb).data


def step_loss(encoder: DualEncoder, state: PromptState, x_full: np.ndarray,
              cond: np.ndarray | None, label_index: int,
              class_names: Sequence[str], lam: float) -> LossBreakdown:
    """One sample's loss under the current prompt state.

    ``x_full`` is the (normalized) full-image classification feature;
    ``cond`` is the conditioning embedding, or None for the fixed-context
    methods.  The anchor term is computed only when ``lam`` is positive.
    """
    pi = None
    if state.meta is not None:
        if cond is None:
            raise InputError("conditioned method requires a conditioning embedding")
        pi = meta_forward(state.meta, Tensor(cond))
    ps = assemble_prompts(state.ctx, pi, class_names, method=state.method)
    w = encode_prompt_set(encoder, ps)
    cp = class_probabilities(Tensor(x_full), w, encoder.tau)
    ce = cross_entropy(cp, label_index)
    if lam > 0.0:
        if state.reference is None:
            raise InputError("anchored loss requires reference embeddings")
        kg = kg_loss(w, state.reference)
    else:
        kg = Tensor(0.0)
    return total_loss(ce, kg, lam)


@dataclass
class TuneResult:
    state: PromptState
    log_rows: list[dict]
    encoder_checksum_before: str
    encoder_checksum_after: str
    tokens_processed: int
    samples_seen: tuple[int, ...]


def tune(encoder: DualEncoder, dataset: Dataset, split: SplitPlan,
         cfg: TuneConfig, seed: int,
         state: PromptState | None = None) -> TuneResult:
    """Prompt-tune on the K-shot base-class samples of one split.

    Per step: (masked-conditioning) sample a fresh mask, encode the
    visible patches, derive the meta token, assemble and encode prompts,
    score against the full-image feature, and apply one SGD update to
    the context tokens (and meta-network).  Encoder weights are frozen
    throughout; the conditioning token count is logged per step, and the
    ids of every sample that influenced an update are returned for
    auditing.  A pre-built ``state`` may be supplied for diagnostics.
    """
    if not encoder.frozen:
        raise InputError("encoder must be frozen before tuning")
    base_names = tuple(dataset.class_names[c] for c in split.base_classes)
    if state is None:
        state = init_prompt_state(encoder, base_names, cfg, seed)
    label_index = {c: i for i, c in enumerate(split.base_classes)}
    lam = cfg.effective_lambda

    mask_rng = rng_from(seed, "mask", cfg.mask.seed)
    shuffle_rng = rng_from(seed, "shuffle")
    grid_side = encoder.cfg.grid_side
    full_cache: dict[int, np.ndarray] = {}
    grids = {}

    def grid_of(sid: int):
        if sid not in grids:
            grids[sid] = patchify(dataset.images[sid], encoder.cfg.patch_size)
        return grids[sid]

    def full_embedding(sid: int) -> np.ndarray:
        if sid not in full_cache:
            with nm.no_grad():
                emb = encoder.vision_encode(
                    grid_of(sid), range(encoder.cfg.n_patches)
                )
                full_cache[sid] = nm.l2_normalize(emb).data
        return full_cache[sid]

    checksum_before = encoder.checksum()
    tokens_before = encoder.tokens_processed
    train_ids = list(split.train_ids)
    log_rows: list[dict] = []
    samples_seen: list[int] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_ids))
        for start in range(0, len(train_ids), cfg.batch_size):
            batch = [train_ids[i] for i in order[start : start + cfg.batch_size]]
            samples_seen.extend(batch)
            ces, kgs, step_tokens = [], [], 0
            try:
                for sid in batch:
                    sample = dataset.sample(sid)
                    x_full = full_embedding(sid)
                    cond = None
                    if cfg.method == "promim":
                        mask = sample_mask(cfg.mask, grid_side, grid_side, mask_rng)
                        cond = conditioning_embedding(
                            encoder, sample.image, mask.visible
                        )
                        step_tokens += encoder.last_token_count
                    elif cfg.method == "cocoop":
                        cond = full_embedding(sid)
                        step_tokens += encoder.cfg.n_patches + 1
                    breakdown = step_loss(
                        encoder, state, x_full, cond,
                        label_index[sample.label], base_names, lam,
                    )
                    ces.append(breakdown.ce)
                    kgs.append(breakdown.kg)
                ce = ces[0] if len(ces) == 1 else nm.mean_(nm.concat(
                    [nm.reshape(c, (1,)) for c in ces]))
                kg = kgs[0] if len(kgs) == 1 else nm.mean_(nm.concat(
                    [nm.reshape(k, (1,)) for k in kgs]))
                breakdown = total_loss(ce, kg, lam)
                nm.backward(breakdown.total)
            except NonFiniteError as exc:
                raise TrainingError(f"tuning diverged: {exc}", step=step) from exc
            sgd_step(state.parameters(), cfg.lr)
            log_rows.append({
                "epoch": epoch,
                "step": step,
                "ce": float(breakdown.ce.data),
                "kg": float(breakdown.kg.data),
                "lambda": lam,
                "total": float(breakdown.total.data),
                "tokens_processed": step_tokens,
            })
            step += 1
    return TuneResult(
        state=state,
        log_rows=log_rows,
        encoder_checksum_before=checksum_before,
        encoder_checksum_after=encoder.checksum(),
        tokens_processed=encoder.tokens_processed - tokens_before,
        samples_seen=tuple(samples_seen),
    )


def pretrain(cfg: EncoderConfig, corpus_specs: Sequence[SyntheticDatasetSpec],
             steps: int, seed: int, lr: float = PRETRAIN_LR,
             batch_size: int = PRETRAIN_BATCH) -> DualEncoder:
    """Contrastively train the dual encoder on (image, caption) pairs, then freeze.

    Captions are the handcrafted template of each sample's class.  The
    corpus draws its pixel noise from a dedicated stream so benchmark
    samples remain unseen.  Divergence (a non-finite loss) aborts with
    the failing step index.
    """
    corpus = [generate_dataset(spec, noise_tag="pretrain") for spec in corpus_specs]
    class_pool = [
        (d, c) for d in corpus for c in range(d.spec.n_classes)
    ]
    if len(class_pool) < 2:
        raise InputError("pretraining corpus needs at least 2 classes")
    batch_size = min(batch_size, len(class_pool))

    encoder = DualEncoder(cfg, seed=seed)
    rng = rng_from(seed, "pretrain")
    caption_cache = {
        (id(d), c): encoder.embed_template(d.class_names[c]) for d, c in class_pool
    }
    for step in range(steps):
        picks = rng.choice(len(class_pool), size=batch_size, replace=False)
        img_rows, txt_rows = [], []
        try:
            for p in picks:
                d, c = class_pool[int(p)]
                sid = d.class_sample_ids(c)[int(rng.integers(0, d.spec.samples_per_class))]
                img_rows.append(nm.l2_normalize(encoder.encode_image(d.images[sid])))
                txt_rows.append(
                    nm.l2_normalize(encoder.text_encode(caption_cache[(id(d), c)]))
                )
            tau = nm.exp(nm.neg(encoder.log_inv_tau))
            loss = contrastive_pretrain_loss(
                nm.stack_rows(img_rows), nm.stack_rows(txt_rows), tau
            )
            nm.backward(loss)
        except NonFiniteError as exc:
            raise TrainingError(f"pretraining diverged: {exc}", step=step) from exc
        sgd_step(encoder.parameters(), lr)
    encoder.freeze()
    return encoder


def pretrain_loss_probe(encoder: DualEncoder,
                        corpus_specs: Sequence[SyntheticDatasetSpec],
                        seed: int, batch_size: int = PRETRAIN_BATCH) -> float:
    """Contrastive loss of one deterministic probe batch (no update).

    Used to compare encoder quality before and after pretraining.
    """
    corpus = [generate_dataset(spec, noise_tag="pretrain") for spec in corpus_specs]
    class_pool = [(d, c) for d in corpus for c in range(d.spec.n_classes)]
    rng = rng_from(seed, "pretrain-probe")
    picks = rng.choice(len(class_pool), size=min(batch_size, len(class_pool)),
                       replace=False)
    img_rows, txt_rows = [], []
    with nm.no_grad():
        for p in picks:
            d, c = class_pool[int(p)]
            sid = d.class_sample_ids(c)[int(rng.integers(0, d.spec.samples_per_class))]
            img_rows.append(nm.l2_normalize(encoder.encode_image(d.images[sid])))
            txt_rows.append(
                nm.l2_normalize(encoder.text_encode(
                    encoder.embed_template(d.class_names[c])
                ))
            )
        loss = contrastive_pretrain_loss(
            nm.stack_rows(img_rows), nm.stack_rows(txt_rows), encoder.tau
        )
    return float(loss.data)
