"""Accuracy metrics, the three experimental protocols, and sweep grids.

Protocols: train-on-half / test-on-both-halves generalization, transfer
to disjoint synthetic families, and robustness to fixed pixel shifts.
Aggregation over seeds averages the two accuracies first and recomputes
the harmonic mean from the averages; per-seed harmonic means are also
reported for the alternative aggregation.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nm
from . import vocab
from .data import Dataset, SplitPlan, apply_shift, make_split
from .encoders import DualEncoder, patchify
from .errors import ContractError, InputError
from .masking import rng_from, sample_mask
from .numerics import Tensor
from .objectives import class_probabilities
from .prompting import ContextTokens, assemble_prompts, encode_prompt_set, meta_forward
from .training import PromptState, TuneConfig, conditioning_embedding, tune

RESULT_COLUMNS = ("method", "family", "axis", "value", "seed",
                  "base", "new", "h", "tokens")

SWEEP_AXES = ("mask_ratio", "lambda", "K", "strategy")


def harmonic_mean(base: float, new: float) -> float:
    """``2 * base * new / (base + new)``, the headline seen/unseen balance."""
    if base <= 0.0 or new <= 0.0:
        raise InputError("harmonic mean requires positive accuracies")
    return 2.0 * base * new / (base + new)


@dataclass
class MetricRecord:
    """One protocol outcome; ``h`` is always recomputable from base/new."""

    base_acc: float
    new_acc: float
    h: float
    seed: int | str
    tokens: int
    per_dataset: dict = None

    def to_row(self, method: str, family, axis: str = "", value="") -> dict:
        return {
            "method": method,
            "family": family,
            "axis": axis,
            "value": value,
            "seed": self.seed,
            "base": self.base_acc,
            "new": self.new_acc,
            "h": self.h,
            "tokens": self.tokens,
        }


def predict(encoder: DualEncoder, state: PromptState, image: np.ndarray,
            class_names: Sequence[str], visible: Sequence[int] | None,
            fixed_embs: np.ndarray | None = None) -> int:
    """Argmax class index for one image under the current prompts."""
    with nm.no_grad():
        grid = patchify(image, encoder.cfg.patch_size)
        x_full = nm.l2_normalize(
            encoder.vision_encode(grid, range(grid.n_patches))
        )
        if fixed_embs is not None:
            w = Tensor(fixed_embs)
        else:
            pi = None
            if state.meta is not None:
                cond = conditioning_embedding(encoder, image, visible)
                pi = meta_forward(state.meta, Tensor(cond))
            ps = assemble_prompts(state.ctx, pi, class_names, method=state.method)
            w = encode_prompt_set(encoder, ps)
        cp = class_probabilities(x_full, w, encoder.tau)
        return int(np.argmax(cp.probs.data))


def _fixed_prompt_embeddings(encoder: DualEncoder, state: PromptState,
                             class_names: Sequence[str]) -> np.ndarray | None:
    """Precompute prompt embeddings when they do not depend on the image."""
    if state.meta is not None:
        return None
    with nm.no_grad():
        ps = assemble_prompts(state.ctx, None, class_names, method=state.method)
        return encode_prompt_set(encoder, ps).data


def accuracy(encoder: DualEncoder, state: PromptState, dataset: Dataset,
             sample_ids: Sequence[int], class_ids: Sequence[int],
             cfg: TuneConfig, *, seed: int, split_tag: str) -> float:
    """Percent of argmax-correct predictions over an evaluation set.

    The masked-conditioning method applies a deterministic per-sample
    mask derived from (seed, split tag, sample id) when the eval-mask
    policy asks for one; every other method sees the full image.
    """
    ids = list(sample_ids)
    if not ids:
        raise InputError("evaluation set is empty")
    class_ids = list(class_ids)
    names = [dataset.class_names[c] for c in class_ids]
    fixed = _fixed_prompt_embeddings(encoder, state, names)
    grid_side = encoder.cfg.grid_side
    use_eval_mask = state.method == "promim" and cfg.eval_mask == "per_sample"
    correct = 0
    for sid in ids:
        sample = dataset.sample(sid)
        visible = None
        if use_eval_mask:
            mask = sample_mask(
                cfg.mask, grid_side, grid_side,
                rng_from(seed, "eval-mask", split_tag, sid),
            )
            visible = mask.visible
        pred = predict(encoder, state, sample.image, names, visible, fixed)
        if class_ids[pred] == sample.label:
            correct += 1
    return 100.0 * correct / len(ids)


def zero_shot_state(encoder: DualEncoder, class_names: Sequence[str]) -> PromptState:
    """Handcrafted-template prompts; no learnable state at all."""
    prefix = Tensor(
        encoder.table_rows(vocab.template_prefix_tokens()).data
    )
    return PromptState(
        method="coop",  # fixed-context forward path
        class_names=tuple(class_names),
        ctx=ContextTokens(prefix),
        meta=None,
        reference=None,
    )


def zero_shot_accuracy(encoder: DualEncoder, dataset: Dataset,
                       sample_ids: Sequence[int], class_ids: Sequence[int]) -> float:
    """Template-prompt accuracy; deterministic and training-free."""
    state = zero_shot_state(
        encoder, [dataset.class_names[c] for c in class_ids]
    )
    cfg = TuneConfig(method="coop", epochs=0)
    return accuracy(encoder, state, dataset, sample_ids, class_ids, cfg,
                    seed=0, split_tag="zero-shot")


def _audit_base_only(dataset: Dataset, split: SplitPlan, samples_seen) -> None:
    """No sample of a held-out class may ever reach a parameter update."""
    new_classes = set(split.new_classes)
    for sid in samples_seen:
        if int(dataset.labels[sid]) in new_classes:
            raise ContractError(
                f"training touched held-out-class sample {sid}"
            )


def base_to_new(encoder: DualEncoder, dataset: Dataset,
                cfg: TuneConfig) -> dict:
    """Tune on base K-shot samples, evaluate both halves, per seed and averaged."""
    split = make_split(dataset, cfg.k, cfg.split_seed, cfg.eval_per_class)
    records: list[MetricRecord] = []
    logs: dict[int, list[dict]] = {}
    for seed in cfg.seeds:
        tokens_before = encoder.tokens_processed
        result = tune(encoder, dataset, split, cfg, seed)
        _audit_base_only(dataset, split, result.samples_seen)
        base_acc = accuracy(
            encoder, result.state, dataset, split.base_eval_ids,
            split.base_classes, cfg, seed=seed, split_tag="base",
        )
        new_acc = accuracy(
            encoder, result.state, dataset, split.new_eval_ids,
            split.new_classes, cfg, seed=seed, split_tag="new",
        )
        records.append(MetricRecord(
            base_acc=base_acc,
            new_acc=new_acc,
            h=harmonic_mean(base_acc, new_acc),
            seed=seed,
            tokens=encoder.tokens_processed - tokens_before,
        ))
        logs[seed] = result.log_rows
    mean = aggregate_records(records)
    return {"records": records, "mean": mean, "split": split, "logs": logs}


def aggregate_records(records: Sequence[MetricRecord]) -> MetricRecord:
    """Average base and new over seeds first, then recompute the harmonic mean.

    The mean of per-seed harmonic means is kept alongside under
    ``per_dataset['h_of_means' / 'mean_of_hs']`` for the alternative
    aggregation order.
    """
    base = float(np.mean([r.base_acc for r in records]))
    new = float(np.mean([r.new_acc for r in records]))
    h = harmonic_mean(base, new)
    return MetricRecord(
        base_acc=base,
        new_acc=new,
        h=h,
        seed="mean",
        tokens=int(sum(r.tokens for r in records)),
        per_dataset={
            "h_of_means": h,
            "mean_of_hs": float(np.mean([r.h for r in records])),
        },
    )


def suite_base_to_new(encoder: DualEncoder, datasets: Sequence[Dataset],
                      cfg: TuneConfig) -> dict:
    """Base-to-new over a family suite, averaged family-first then overall."""
    per_family = {}
    for ds in datasets:
        per_family[ds.spec.family_id] = base_to_new(encoder, ds, cfg)
    base = float(np.mean([r["mean"].base_acc for r in per_family.values()]))
    new = float(np.mean([r["mean"].new_acc for r in per_family.values()]))
    return {
        "per_family": per_family,
        "base": base,
        "new": new,
        "h": harmonic_mean(base, new),
    }


def _transfer_split(dataset: Dataset, cfg: TuneConfig) -> SplitPlan:
    """All classes serve as base; eval ids are each class's held-out tail."""
    spec = dataset.spec
    if cfg.k + cfg.eval_per_class > spec.samples_per_class:
        raise InputError(
            f"K={cfg.k} with eval_per_class={cfg.eval_per_class} does not "
            f"fit in {spec.samples_per_class} samples per class"
        )
    all_classes = tuple(range(spec.n_classes))
    train_ids: list[int] = []
    eval_ids: list[int] = []
    for c in all_classes:
        ids = np.asarray(dataset.class_sample_ids(c))
        perm = rng_from(cfg.split_seed, "samples", spec.family_id, c
                        ).permutation(len(ids))
        ordered = ids[perm]
        train_ids.extend(int(i) for i in ordered[: cfg.k])
        eval_ids.extend(int(i) for i in ordered[-cfg.eval_per_class :])
    return SplitPlan(all_classes, (), cfg.k, tuple(train_ids),
                     tuple(eval_ids), ())


def cross_dataset(encoder: DualEncoder, source: Dataset,
                  targets: Sequence[Dataset], cfg: TuneConfig) -> dict:
    """Tune once on the source family, evaluate the tuned prompts elsewhere.

    Targets must be distinct families; the source's in-domain accuracy is
    reported in its own column, as is the per-target average.
    """
    target_families = [t.spec.family_id for t in targets]
    if source.spec.family_id in target_families:
        raise InputError("target families must be distinct from the source")
    if len(set(target_families)) != len(target_families):
        raise InputError("duplicate target family")
    split = _transfer_split(source, cfg)
    all_classes = split.base_classes
    per_seed = {"source": [], "targets": {f: [] for f in target_families}}
    for seed in cfg.seeds:
        result = tune(encoder, source, split, cfg, seed)
        per_seed["source"].append(accuracy(
            encoder, result.state, source, split.base_eval_ids, all_classes,
            cfg, seed=seed, split_tag="source",
        ))
        for t in targets:
            t_split = _transfer_split(t, cfg)
            t_classes = tuple(range(t.spec.n_classes))
            per_seed["targets"][t.spec.family_id].append(accuracy(
                encoder, result.state, t, t_split.base_eval_ids, t_classes,
                cfg, seed=seed, split_tag=f"target-{t.spec.family_id}",
            ))
    source_acc = float(np.mean(per_seed["source"]))
    target_acc = {f: float(np.mean(v)) for f, v in per_seed["targets"].items()}
    return {
        "source": source_acc,
        "targets": target_acc,
        "average": float(np.mean(list(target_acc.values()))),
        "per_seed": per_seed,
    }


def domain_shift(encoder: DualEncoder, source: Dataset,
                 shifts: Sequence[tuple[str, float]], cfg: TuneConfig) -> dict:
    """Tune on the unshifted source, evaluate on pixel-shifted copies."""
    if not shifts:
        raise InputError("shift list is empty")
    split = _transfer_split(source, cfg)
    all_classes = split.base_classes
    shifted = [(kind, mag, apply_shift(source, kind, mag)) for kind, mag in shifts]
    per_seed = {"source": [], "shifts": {i: [] for i in range(len(shifts))}}
    for seed in cfg.seeds:
        result = tune(encoder, source, split, cfg, seed)
        per_seed["source"].append(accuracy(
            encoder, result.state, source, split.base_eval_ids, all_classes,
            cfg, seed=seed, split_tag="source",
        ))
        for i, (kind, mag, ds) in enumerate(shifted):
            per_seed["shifts"][i].append(accuracy(
                encoder, result.state, ds, split.base_eval_ids, all_classes,
                cfg, seed=seed, split_tag="source",
            ))
    shift_acc = {
        f"{kind}:{mag}": float(np.mean(per_seed["shifts"][i]))
        for i, (kind, mag, _) in enumerate(shifted)
    }
    return {
        "source": float(np.mean(per_seed["source"])),
        "shifts": shift_acc,
        "average": float(np.mean(list(shift_acc.values()))),
        "per_seed": per_seed,
    }


def _apply_axis(cfg: TuneConfig, axis: str, value) -> TuneConfig:
    if axis == "mask_ratio":
        return replace(cfg, mask=replace(cfg.mask, ratio=float(value)))
    if axis == "lambda":
        return replace(cfg, lam=float(value))
    if axis == "K":
        return replace(cfg, k=int(value))
    if axis == "strategy":
        return replace(cfg, mask=replace(cfg.mask, strategy=str(value)))
    raise InputError(f"unknown sweep axis {axis!r}")


def _sweep_cell(args) -> list[dict]:
    encoder, datasets, axis, value, cfg = args
    cell_cfg = _apply_axis(cfg, axis, value)
    rows = []
    for ds in datasets:
        out = base_to_new(encoder, ds, cell_cfg)
        for rec in out["records"] + [out["mean"]]:
            rows.append(rec.to_row(cell_cfg.method, ds.spec.family_id, axis, value))
    return rows


def sweep(encoder: DualEncoder, datasets: Sequence[Dataset], axis: str,
          values: Sequence, cfg: TuneConfig, parallel: int = 1) -> dict:
    """One base-to-new record per grid value, emitted as result rows.

    ``parallel`` > 1 runs grid values in separate processes; results are
    assembled in grid order, so the output is identical to serial
    execution.
    """
    if axis not in SWEEP_AXES:
        raise InputError(f"unknown sweep axis {axis!r} (have {SWEEP_AXES})")
    if not values:
        raise InputError("sweep value list is empty")
    cells = [(encoder, list(datasets), axis, v, cfg) for v in values]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    rows = [row for cell_rows in results for row in cell_rows]
    plot_points = []
    for v in values:
        hs = [r["h"] for r in rows
              if r["value"] == v and r["seed"] == "mean"]
        plot_points.append((v, float(np.mean(hs))))
    return {"rows": rows, "plot": plot_points, "axis": axis}


def results_csv(rows: Sequence[dict]) -> str:
    """Render result rows with a stable float format (repr round-trips)."""
    lines = [",".join(RESULT_COLUMNS)]
    for row in rows:
        rendered = []
        for col in RESULT_COLUMNS:
            val = row.get(col, "")
            rendered.append(repr(val) if isinstance(val, float) else str(val))
        lines.append(",".join(rendered))
    return "\n".join(lines) + "\n"


def training_log_csv(rows: Sequence[dict]) -> str:
    from .training import LOG_COLUMNS

    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        rendered = []
        for col in LOG_COLUMNS:
            val = row[col]
            rendered.append(repr(val) if isinstance(val, float) else str(val))
        lines.append(",".join(rendered))
    return "\n".join(lines) + "\n"
