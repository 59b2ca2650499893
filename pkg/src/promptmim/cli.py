"""Command-line entry point: pretrain, tune, eval, sweep, report.

Configuration is strict JSON: unknown sections or keys are rejected, and
the fully-resolved configuration (defaults applied, overrides folded in)
is embedded in each run's manifest.  A manifest can itself be passed as
the config of a later invocation, which reproduces the run's metrics
byte-for-byte.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, plots, vocab
from .data import SyntheticDatasetSpec, generate_dataset
from .encoders import DualEncoder, EncoderConfig
from .errors import ConfigError, InputError, PromptMimError
from .evaluation import (
    MetricRecord,
    aggregate_records,
    base_to_new,
    cross_dataset,
    domain_shift,
    harmonic_mean,
    results_csv,
    suite_base_to_new,
    sweep,
    training_log_csv,
    zero_shot_accuracy,
)
from .masking import MaskSpec
from .numerics import Tensor
from .prompting import (
    ContextTokens,
    MetaNet,
    load_prompt_state,
    save_prompt_state,
)
from .training import (
    PRETRAIN_BATCH,
    PRETRAIN_LR,
    PRETRAIN_STEPS,
    PromptState,
    TuneConfig,
    pretrain,
    tune,
)
from .data import make_split

MANIFEST_FORMAT = "promptmim-run-manifest"
MANIFEST_VERSION = 1

OUTPUT_ROOT_ENV = "PROMPTMIM_RUNS_ROOT"

COMMANDS = ("pretrain", "tune", "eval", "sweep", "report")

DEFAULT_SHIFTS = [["brightness", 0.2], ["noise", 0.1], ["noise", 0.3], ["invert", 0.0]]

CONFIG_DEFAULTS: dict[str, dict] = {
    "encoder": {
        "image_side": 16,
        "patch_size": 4,
        "embed_dim": 32,
        "depth": 2,
        "heads": 2,
        "text_vocab_size": vocab.VOCAB_SIZE,
        "max_text_len": 12,
        "output_dim": 32,
        "mlp_ratio": 2,
        "checkpoint": None,
        "pretrain_steps": PRETRAIN_STEPS,
        "pretrain_lr": PRETRAIN_LR,
        "pretrain_batch": PRETRAIN_BATCH,
        "pretrain_seed": 0,
    },
    "data": {
        "families": 6,
        "n_classes": 8,
        "samples_per_class": 64,
        "noise_std": 0.18,
        "prototypes_seed": 0,
        "family": 0,
    },
    "tune": {
        "method": "promim",
        "epochs": 10,
        "lr": 0.02,
        "batch_size": 1,
        "context_len": 4,
        "lambda": 2.0,
        "mask_strategy": "random",
        "mask_ratio": 0.75,
        "mask_seed": 0,
        "k": 16,
        "seeds": [0, 1, 2],
        "split_seed": 0,
        "eval_per_class": 32,
        "eval_mask": "per_sample",
    },
    "eval": {
        "protocol": "base_to_new",
        "suite": False,
        "methods": None,
        "prompts_run": None,
        "source_family": 0,
        "target_families": [1, 2, 3, 4, 5],
        "shifts": DEFAULT_SHIFTS,
    },
    "sweep": {
        "axis": "lambda",
        "values": [0.0, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0],
        "parallel": 1,
    },
    "output": {
        "root": "runs",
        "run_id": None,
    },
}


# -- configuration -----------------------------------------------------------


def _check_type(section: str, key: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool) != isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{section}.{key}: expected a list")
        return value
    if not isinstance(value, type(default)):
        raise ConfigError(
            f"{section}.{key}: expected {type(default).__name__}, "
            f"got {type(value).__name__}"
        )
    return value


def resolve_config(user: dict) -> dict:
    """Apply defaults, reject unknown keys, and normalize types."""
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(user) - set(CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    resolved: dict[str, dict] = {}
    for section, defaults in CONFIG_DEFAULTS.items():
        given = user.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        bad = set(given) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
        out = {}
        for key, default in defaults.items():
            value = given.get(key, default)
            out[key] = _check_type(section, key, default, value)
        resolved[section] = out
    return resolved


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Read a config (or manifest) file and fold in --set overrides."""
    user: dict = {}
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if isinstance(payload, dict) and payload.get("format") == MANIFEST_FORMAT:
            user = payload["config"]  # re-run an existing manifest
        else:
            user = payload
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        user.setdefault(section, {})[key] = value
    return resolve_config(user)


def tune_config_from(cfg: dict) -> TuneConfig:
    t = cfg["tune"]
    return TuneConfig(
        method=t["method"],
        epochs=t["epochs"],
        lr=t["lr"],
        batch_size=t["batch_size"],
        context_len=t["context_len"],
        lam=t["lambda"],
        mask=MaskSpec(strategy=t["mask_strategy"], ratio=t["mask_ratio"],
                      seed=t["mask_seed"]),
        k=t["k"],
        seeds=tuple(t["seeds"]),
        split_seed=t["split_seed"],
        eval_per_class=t["eval_per_class"],
        eval_mask=t["eval_mask"],
    )


def encoder_config_from(cfg: dict) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(
        image_side=e["image_side"],
        patch_size=e["patch_size"],
        embed_dim=e["embed_dim"],
        depth=e["depth"],
        heads=e["heads"],
        text_vocab_size=e["text_vocab_size"],
        max_text_len=e["max_text_len"],
        output_dim=e["output_dim"],
        mlp_ratio=e["mlp_ratio"],
    )


def dataset_specs_from(cfg: dict) -> list[SyntheticDatasetSpec]:
    d = cfg["data"]
    return [
        SyntheticDatasetSpec(
            n_classes=d["n_classes"],
            prototypes_seed=d["prototypes_seed"],
            samples_per_class=d["samples_per_class"],
            noise_std=d["noise_std"],
            family_id=f,
            image_side=cfg["encoder"]["image_side"],
        )
        for f in range(d["families"])
    ]


# -- run directory management ---------------------------------------------------


def output_root(cfg: dict, cli_root: str | None) -> Path:
    if cli_root:
        return Path(cli_root)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    if env:
        return Path(env)
    return Path(cfg["output"]["root"])


def derive_run_id(command: str, cfg: dict) -> str:
    if cfg["output"]["run_id"]:
        return cfg["output"]["run_id"]
    digest = hashlib.sha256(
        json.dumps({"command": command, "config": cfg}, sort_keys=True).encode()
    ).hexdigest()
    return f"{command}-{digest[:10]}"


def write_manifest(run_dir: Path, manifest: dict) -> None:
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2), encoding="utf-8"
    )


def load_encoder(cfg: dict) -> DualEncoder:
    path = cfg["encoder"]["checkpoint"]
    if not path:
        raise InputError(
            "encoder.checkpoint is required (run the pretrain command first)"
        )
    encoder = DualEncoder.load(path)
    if not encoder.frozen:
        raise InputError(f"encoder checkpoint {path} is not frozen")
    return encoder


# -- commands ------------------------------------------------------------------


def cmd_pretrain(cfg: dict, run_dir: Path) -> dict:
    enc_cfg = encoder_config_from(cfg)
    specs = dataset_specs_from(cfg)
    e = cfg["encoder"]
    encoder = pretrain(enc_cfg, specs, steps=e["pretrain_steps"],
                       seed=e["pretrain_seed"], lr=e["pretrain_lr"],
                       batch_size=e["pretrain_batch"])
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt = ckpt_dir / "encoder.json"
    encoder.save(ckpt)

    rows = []
    cfg_tune = tune_config_from(cfg)
    for spec in specs:
        ds = generate_dataset(spec)
        split = make_split(ds, cfg_tune.k, cfg_tune.split_seed,
                           cfg_tune.eval_per_class)
        base = zero_shot_accuracy(encoder, ds, split.base_eval_ids,
                                  split.base_classes)
        new = zero_shot_accuracy(encoder, ds, split.new_eval_ids,
                                 split.new_classes)
        rows.append({
            "method": "zero_shot", "family": spec.family_id, "axis": "",
            "value": "", "seed": 0, "base": base, "new": new,
            "h": harmonic_mean(base, new), "tokens": 0,
        })
    return {
        "rows": rows,
        "encoder_checksum": encoder.checksum(),
        "dataset_manifests": [generate_dataset(s).manifest() for s in specs],
        "outputs": {"checkpoints": ["checkpoints/encoder.json"], "plots": []},
    }


def cmd_tune(cfg: dict, run_dir: Path) -> dict:
    encoder = load_encoder(cfg)
    tcfg = tune_config_from(cfg)
    spec = dataset_specs_from(cfg)[cfg["data"]["family"]]
    dataset = generate_dataset(spec)
    split = make_split(dataset, tcfg.k, tcfg.split_seed, tcfg.eval_per_class)

    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    plots_dir = run_dir / "plots"
    rows, records, checkpoints, train_logs, figures = [], [], [], [], []
    for seed in tcfg.seeds:
        tokens_before = encoder.tokens_processed
        result = tune(encoder, dataset, split, tcfg, seed)
        base = evaluation.accuracy(
            encoder, result.state, dataset, split.base_eval_ids,
            split.base_classes, tcfg, seed=seed, split_tag="base",
        )
        new = evaluation.accuracy(
            encoder, result.state, dataset, split.new_eval_ids,
            split.new_classes, tcfg, seed=seed, split_tag="new",
        )
        record = MetricRecord(
            base_acc=base, new_acc=new, h=harmonic_mean(base, new),
            seed=seed, tokens=encoder.tokens_processed - tokens_before,
        )
        records.append(record)
        rows.append(record.to_row(tcfg.method, spec.family_id))

        ckpt = ckpt_dir / f"prompts_seed{seed}.json"
        save_prompt_state(ckpt, tcfg.method, result.state.ctx,
                          result.state.meta, result.state.class_names,
                          encoder.checksum())
        checkpoints.append(str(ckpt.relative_to(run_dir)))
        log_name = f"train_log_seed{seed}.csv"
        (run_dir / log_name).write_text(training_log_csv(result.log_rows),
                                        encoding="utf-8")
        train_logs.append(log_name)
        fig = plots.training_curve_figure(
            result.log_rows, plots_dir / f"{run_dir.name}_loss_seed{seed}.svg",
            title=f"{tcfg.method} seed {seed}",
        )
        figures.append(str(fig.relative_to(run_dir)))
    rows.append(aggregate_records(records).to_row(tcfg.method, spec.family_id))
    return {
        "rows": rows,
        "encoder_checksum": encoder.checksum(),
        "dataset_manifests": [dataset.manifest()],
        "outputs": {"checkpoints": checkpoints, "plots": figures,
                    "train_logs": train_logs},
    }


def _safe_h(a: float, b: float) -> float:
    """Harmonic mean for report rows; zero accuracies render as 0 not an error."""
    return harmonic_mean(a, b) if a > 0.0 and b > 0.0 else 0.0


def _eval_checkpoint_rows(cfg: dict, encoder: DualEncoder, tcfg: TuneConfig,
                          dataset, split) -> list[dict]:
    run = cfg["eval"]["prompts_run"]
    if not run:
        raise InputError("eval.prompts_run is required for protocol=checkpoint")
    run = Path(run)
    ckpt = run if run.is_file() else run / "checkpoints" / f"prompts_seed{tcfg.seeds[0]}.json"
    payload = load_prompt_state(ckpt)
    if payload["encoder_checksum"] != encoder.checksum():
        raise InputError("prompt checkpoint was tuned against a different encoder")
    meta = None
    if payload["meta"] is not None:
        meta = MetaNet.from_arrays(**payload["meta"])
    state = PromptState(
        method=payload["method"],
        class_names=tuple(payload["classes"]),
        ctx=ContextTokens(Tensor(np.asarray(payload["context"]),
                                 requires_grad=True)),
        meta=meta,
        reference=None,
    )
    seed = tcfg.seeds[0]
    base = evaluation.accuracy(encoder, state, dataset, split.base_eval_ids,
                               split.base_classes, tcfg, seed=seed,
                               split_tag="base")
    new = evaluation.accuracy(encoder, state, dataset, split.new_eval_ids,
                              split.new_classes, tcfg, seed=seed,
                              split_tag="new")
    record = MetricRecord(base_acc=base, new_acc=new,
                          h=harmonic_mean(base, new), seed=seed, tokens=0)
    return [record.to_row(payload["method"], dataset.spec.family_id,
                          axis="checkpoint", value=str(ckpt.name))]


def cmd_eval(cfg: dict, run_dir: Path) -> dict:
    encoder = load_encoder(cfg)
    tcfg = tune_config_from(cfg)
    specs = dataset_specs_from(cfg)
    ev = cfg["eval"]
    protocol = ev["protocol"]
    rows: list[dict] = []
    figures: list[str] = []
    plots_dir = run_dir / "plots"

    if protocol == "zero_shot":
        for spec in specs if ev["suite"] else [specs[cfg["data"]["family"]]]:
            ds = generate_dataset(spec)
            split = make_split(ds, tcfg.k, tcfg.split_seed, tcfg.eval_per_class)
            base = zero_shot_accuracy(encoder, ds, split.base_eval_ids,
                                      split.base_classes)
            new = zero_shot_accuracy(encoder, ds, split.new_eval_ids,
                                     split.new_classes)
            rows.append({
                "method": "zero_shot", "family": spec.family_id, "axis": "",
                "value": "", "seed": 0, "base": base, "new": new,
                "h": harmonic_mean(base, new), "tokens": 0,
            })
    elif protocol == "checkpoint":
        spec = specs[cfg["data"]["family"]]
        ds = generate_dataset(spec)
        split = make_split(ds, tcfg.k, tcfg.split_seed, tcfg.eval_per_class)
        rows.extend(_eval_checkpoint_rows(cfg, encoder, tcfg, ds, split))
    elif protocol == "base_to_new":
        methods = ev["methods"] or [tcfg.method]
        per_method: dict[str, dict] = {}
        datasets = [generate_dataset(s) for s in specs] if ev["suite"] else [
            generate_dataset(specs[cfg["data"]["family"]])
        ]
        from dataclasses import replace as dc_replace

        for method in methods:
            mcfg = dc_replace(tcfg, method=method)
            if len(datasets) > 1:
                out = suite_base_to_new(encoder, datasets, mcfg)
                per_method[method] = out
                for fam, fam_out in out["per_family"].items():
                    for rec in fam_out["records"] + [fam_out["mean"]]:
                        rows.append(rec.to_row(method, fam))
                rows.append({
                    "method": method, "family": "suite", "axis": "", "value": "",
                    "seed": "mean", "base": out["base"], "new": out["new"],
                    "h": out["h"], "tokens": 0,
                })
            else:
                out = base_to_new(encoder, datasets[0], mcfg)
                per_method[method] = {
                    "per_family": {datasets[0].spec.family_id: out}
                }
                for rec in out["records"] + [out["mean"]]:
                    rows.append(rec.to_row(method, datasets[0].spec.family_id))
        if len(methods) == 2:
            fams = sorted(per_method[methods[0]]["per_family"])
            baseline = [per_method[methods[0]]["per_family"][f]["mean"].new_acc
                        for f in fams]
            candidate = [per_method[methods[1]]["per_family"][f]["mean"].new_acc
                         for f in fams]
            fig = plots.method_gain_figure(
                fams, baseline, candidate, "new accuracy",
                methods[0], methods[1],
                plots_dir / f"{run_dir.name}_new_gain.svg",
            )
            figures.append(str(fig.relative_to(run_dir)))
    elif protocol == "cross_dataset":
        source = generate_dataset(specs[ev["source_family"]])
        targets = [generate_dataset(specs[f]) for f in ev["target_families"]]
        out = cross_dataset(encoder, source, targets, tcfg)
        for fam, acc in sorted(out["targets"].items()):
            rows.append({
                "method": tcfg.method, "family": fam, "axis": "cross_dataset",
                "value": ev["source_family"], "seed": "mean",
                "base": out["source"], "new": acc,
                "h": _safe_h(out["source"], acc), "tokens": 0,
            })
        rows.append({
            "method": tcfg.method, "family": "avg", "axis": "cross_dataset",
            "value": ev["source_family"], "seed": "mean",
            "base": out["source"], "new": out["average"],
            "h": _safe_h(out["source"], out["average"]), "tokens": 0,
        })
    elif protocol == "domain_shift":
        source = generate_dataset(specs[ev["source_family"]])
        shifts = [(k, float(m)) for k, m in ev["shifts"]]
        out = domain_shift(encoder, source, shifts, tcfg)
        for label, acc in out["shifts"].items():
            rows.append({
                "method": tcfg.method, "family": ev["source_family"],
                "axis": "shift", "value": label, "seed": "mean",
                "base": out["source"], "new": acc,
                "h": _safe_h(out["source"], acc), "tokens": 0,
            })
        rows.append({
            "method": tcfg.method, "family": ev["source_family"],
            "axis": "shift", "value": "avg", "seed": "mean",
            "base": out["source"], "new": out["average"],
            "h": _safe_h(out["source"], out["average"]), "tokens": 0,
        })
    else:
        raise ConfigError(f"unknown eval protocol {protocol!r}")

    encoder_checksum = encoder.checksum()
    return {
        "rows": rows,
        "encoder_checksum": encoder_checksum,
        "dataset_manifests": [],
        "outputs": {"checkpoints": [], "plots": figures},
    }


def cmd_sweep(cfg: dict, run_dir: Path, parallel: int | None) -> dict:
    encoder = load_encoder(cfg)
    tcfg = tune_config_from(cfg)
    specs = dataset_specs_from(cfg)
    datasets = ([generate_dataset(s) for s in specs] if cfg["eval"]["suite"]
                else [generate_dataset(specs[cfg["data"]["family"]])])
    sw = cfg["sweep"]
    workers = parallel if parallel is not None else sw["parallel"]
    out = sweep(encoder, datasets, sw["axis"], sw["values"], tcfg,
                parallel=workers)
    fig = plots.sweep_figure(
        out["plot"], sw["axis"],
        run_dir / "plots" / f"{run_dir.name}_sweep_{sw['axis']}.svg",
        title=f"{tcfg.method}: {sw['axis']} sweep",
    )
    return {
        "rows": out["rows"],
        "encoder_checksum": encoder.checksum(),
        "dataset_manifests": [d.manifest() for d in datasets],
        "outputs": {"checkpoints": [],
                    "plots": [str(fig.relative_to(run_dir))]},
        "plot_points": [[v, h] for v, h in out["plot"]],
    }


def cmd_report(run_dirs: list[str]) -> int:
    """Re-render metrics.csv and figures from existing manifests, idempotently."""
    manifests = []
    for d in run_dirs:
        path = Path(d) / "manifest.json"
        if not path.exists():
            raise InputError(f"no manifest found in {d}")
        manifests.append((Path(d), json.loads(path.read_text(encoding="utf-8"))))
    for run_dir, manifest in manifests:
        rows = manifest["rows"]
        (run_dir / "metrics.csv").write_text(results_csv(rows), encoding="utf-8")
        plots_dir = run_dir / "plots"
        if manifest.get("plot_points"):
            axis = manifest["config"]["sweep"]["axis"]
            plots.sweep_figure(
                [(v, h) for v, h in manifest["plot_points"]], axis,
                plots_dir / f"{run_dir.name}_sweep_{axis}.svg",
                title=f"{manifest['config']['tune']['method']}: {axis} sweep",
            )
        for log_name in manifest.get("outputs", {}).get("train_logs", []):
            log_path = run_dir / log_name
            if log_path.exists():
                rows_log = _read_log_csv(log_path)
                seed = log_name.replace("train_log_seed", "").replace(".csv", "")
                plots.training_curve_figure(
                    rows_log,
                    plots_dir / f"{run_dir.name}_loss_seed{seed}.svg",
                    title=f"{manifest['config']['tune']['method']} seed {seed}",
                )
    return 0


def _read_log_csv(path: Path) -> list[dict]:
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        values = line.split(",")
        row = {}
        for key, val in zip(header, values):
            row[key] = int(val) if key in ("epoch", "step", "tokens_processed") else float(val)
        rows.append(row)
    return rows


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptmim",
        description="Masked-conditioning prompt-tuning laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "tune", "eval", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", default=None,
                       help="JSON config file (or a run manifest to re-run)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", default=None, help="output root directory")
        p.add_argument("--run-id", default=None, help="run directory name")
        if name == "sweep":
            p.add_argument("--parallel", type=int, default=None,
                           help="run sweep cells in N worker processes")
    p = sub.add_parser("report")
    p.add_argument("--runs", nargs="+", required=True,
                   help="run directories to re-render")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    try:
        if args.command == "report":
            return cmd_report(args.runs)

        cfg = load_config(args.config, args.overrides)
        if args.run_id:
            cfg["output"]["run_id"] = args.run_id
        root = output_root(cfg, args.out)
        run_id = derive_run_id(args.command, cfg)

        started = time.monotonic()
        if args.command == "pretrain":
            run_dir = root / run_id
            run_dir.mkdir(parents=True, exist_ok=True)
            result = cmd_pretrain(cfg, run_dir)
        elif args.command == "tune":
            # Validate inputs before creating any output.
            load_encoder(cfg)
            run_dir = root / run_id
            run_dir.mkdir(parents=True, exist_ok=True)
            result = cmd_tune(cfg, run_dir)
        elif args.command == "eval":
            load_encoder(cfg)
            if cfg["eval"]["protocol"] == "checkpoint":
                # Fail before producing outputs when the checkpoint is absent.
                run = cfg["eval"]["prompts_run"]
                if not run:
                    raise InputError("eval.prompts_run is required")
                probe = Path(run)
                ckpt = probe if probe.is_file() else (
                    probe / "checkpoints" /
                    f"prompts_seed{cfg['tune']['seeds'][0]}.json"
                )
                if not ckpt.exists():
                    raise InputError(f"prompt checkpoint not found: {ckpt}")
            run_dir = root / run_id
            run_dir.mkdir(parents=True, exist_ok=True)
            result = cmd_eval(cfg, run_dir)
        elif args.command == "sweep":
            load_encoder(cfg)
            run_dir = root / run_id
            run_dir.mkdir(parents=True, exist_ok=True)
            result = cmd_sweep(cfg, run_dir, args.parallel)
        else:  # pragma: no cover - argparse restricts choices
            raise ConfigError(f"unknown command {args.command!r}")

        (run_dir / "metrics.csv").write_text(results_csv(result["rows"]),
                                             encoding="utf-8")
        manifest = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "run_id": run_id,
            "command": args.command,
            "config": cfg,
            "encoder_checksum": result.get("encoder_checksum"),
            "dataset_manifests": result.get("dataset_manifests", []),
            "rows": result["rows"],
            "outputs": dict(result.get("outputs", {}), metrics_csv="metrics.csv"),
            "plot_points": result.get("plot_points"),
            "tokens_processed": sum(
                r["tokens"] for r in result["rows"] if isinstance(r["tokens"], int)
            ),
            "wall_clock_s": time.monotonic() - started,
        }
        write_manifest(run_dir, manifest)
        print(f"run {run_id} complete: {run_dir / 'metrics.csv'}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PromptMimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
