"""Command-line entry point wiring all modules together.

Subcommands: ingest, synth, sample, train, eval, ablate, gradcheck.

Config resolution is layered: built-in defaults, then a JSON config
file (--config), then explicit flags. Every run writes the resolved
config plus its fingerprint next to its outputs, so a result can always
be traced to the exact settings that produced it.

Determinism: (package version, resolved config, input data, the single
--seed flag, embedder identity) fix all outputs bitwise. The one
exception is the training log, whose records carry wall-clock times.

Exit codes: 0 success, 2 configuration errors (including bad flags),
3 data errors, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoints import json_fingerprint, load_checkpoint
from .context_sampler import SamplerConfig, sample_context, seed_rows_for_task
from .errors import ConfigError, DataError, NumericError
from .relational_store import (
    BOOLEAN,
    DATETIME,
    NUMERIC,
    TEXT,
    format_datetime,
    load_database,
    load_task,
)
from .rt_model import ModelConfig
from . import reporting

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_SPEC_ALIASES = {
    "copy": "copy_parent_feature",
    "entity": "entity_constant_label",
    "seasonal": "seasonal_label",
}

# defaults per subcommand; config files and flags override in that order
_DEFAULTS: dict[str, dict] = {
    "ingest": {"schema": None, "data": None, "task": None, "out": None,
               "seed": 0},
    "synth": {"spec": None, "out": None, "entities": 60,
              "rows_per_entity": None, "noise": 0.0, "seed": 0},
    "sample": {"schema": None, "data": None, "task": None, "split": "train",
               "count": 8, "length": 256, "width": 8, "seed": 0,
               "out": None},
    "train": {"schema": None, "data": None, "task": None, "out": None,
              "steps": 2000, "batch": 32, "lr": 1e-3, "warmup": 0.2,
              "weight_decay": 0.1, "mask_prob": 0.0, "val_every": 0,
              "checkpoint_every": 0, "grad_clip": 1.0,
              "layers": 4, "d": 64, "heads": 4, "d_text": 384,
              "mlp_ratio": 4, "pre_norm": False, "ablate": None,
              "length": 256, "width": 8, "seed": 0,
              "init_from": None, "fine_tune": False, "workers": 1},
    "eval": {"schema": None, "data": None, "task": None, "ckpt": None,
             "split": "test", "length": 256, "width": 8, "seed": 0,
             "out": None, "workers": 1},
    "ablate": {"schema": None, "data": None, "task": None, "ckpt": None,
               "split": "test", "context": None, "length": 256, "width": 8,
               "seed": 0, "out": None, "workers": 1},
    "gradcheck": {"layers": 2, "d": 32, "heads": 4, "d_text": 48,
                  "mlp_ratio": 4, "epsilon": 1e-4, "coords": 200,
                  "tolerance": 1e-5, "length": 64, "width": 6,
                  "seed": 0, "out": None},
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="relcell",
        description="Relational transformer: ingest, sample, train, "
                    "evaluate, and ablate over multi-table databases.")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", metavar="FILE",
                        help="JSON file of flag defaults (flags still win)")
        sp.add_argument("--seed", type=int, help="single rng seed; every "
                        "random choice in the run derives from it")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        return sp

    sp = add("ingest", "load and validate a database, write a summary")
    sp.add_argument("--schema", metavar="FILE", help="schema descriptor file")
    sp.add_argument("--data", metavar="DIR", help="directory of table files")
    sp.add_argument("--task", help="also load this task's label file")

    sp = add("synth", "generate a synthetic benchmark dataset")
    sp.add_argument("--spec", help="generator: copy_parent_feature | "
                    "entity_constant_label | seasonal_label (or short "
                    "alias copy | entity | seasonal)")
    sp.add_argument("--entities", type=int, help="number of entities")
    sp.add_argument("--rows-per-entity", type=int, dest="rows_per_entity")
    sp.add_argument("--noise", type=float, help="label noise level")

    sp = add("sample", "dump context windows as one token per line")
    sp.add_argument("--schema", metavar="FILE")
    sp.add_argument("--data", metavar="DIR")
    sp.add_argument("--task", help="task whose seed rows to sample from")
    sp.add_argument("--split", choices=["train", "val", "test"])
    sp.add_argument("--count", type=int, help="number of windows")
    sp.add_argument("--length", type=int, help="context length bound L")
    sp.add_argument("--width", type=int, help="children kept per row (w)")

    sp = add("train", "masked-token-prediction training")
    sp.add_argument("--schema", metavar="FILE")
    sp.add_argument("--data", metavar="DIR")
    sp.add_argument("--task", action="append",
                    help="task name; repeat for multi-task training")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float, help="peak learning rate")
    sp.add_argument("--warmup", type=float, help="warmup fraction of steps")
    sp.add_argument("--weight-decay", type=float, dest="weight_decay")
    sp.add_argument("--mask-prob", type=float, dest="mask_prob",
                    help="extra masking probability P(mask)")
    sp.add_argument("--val-every", type=int, dest="val_every")
    sp.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    sp.add_argument("--grad-clip", type=float, dest="grad_clip")
    sp.add_argument("--layers", type=int)
    sp.add_argument("--d", type=int, help="model width")
    sp.add_argument("--heads", type=int)
    sp.add_argument("--d-text", type=int, dest="d_text")
    sp.add_argument("--mlp-ratio", type=int, dest="mlp_ratio")
    sp.add_argument("--pre-norm", action="store_true", default=None,
                    dest="pre_norm")
    sp.add_argument("--ablate", action="append",
                    choices=["column", "feature", "neighbor", "full"],
                    help="attention stage to remove; repeatable")
    sp.add_argument("--length", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--init-from", dest="init_from", metavar="CKPT",
                    help="checkpoint to start from")
    sp.add_argument("--fine-tune", action="store_true", default=None,
                    dest="fine_tune",
                    help="constant-lr fine-tuning preset (needs --init-from)")
    sp.add_argument("--workers", type=int, help="batch workers; default 1 "
                    "for reproducibility")

    sp = add("eval", "score a checkpoint on one task split")
    sp.add_argument("--schema", metavar="FILE")
    sp.add_argument("--data", metavar="DIR")
    sp.add_argument("--task")
    sp.add_argument("--ckpt", metavar="FILE")
    sp.add_argument("--split", choices=["train", "val", "test"])
    sp.add_argument("--length", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--workers", type=int)

    sp = add("ablate", "context ablations + baseline, side by side")
    sp.add_argument("--schema", metavar="FILE")
    sp.add_argument("--data", metavar="DIR")
    sp.add_argument("--task")
    sp.add_argument("--ckpt", metavar="FILE")
    sp.add_argument("--split", choices=["train", "val", "test"])
    sp.add_argument("--context", action="append",
                    choices=["shuffle_names", "drop_self_labels",
                             "drop_other_labels"],
                    help="context ablation to add; repeatable; default all")
    sp.add_argument("--length", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--workers", type=int)

    sp = add("gradcheck", "finite-difference audit of the full model")
    sp.add_argument("--layers", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--d-text", type=int, dest="d_text")
    sp.add_argument("--mlp-ratio", type=int, dest="mlp_ratio")
    sp.add_argument("--epsilon", type=float, help="central-difference step")
    sp.add_argument("--coords", type=int, help="coordinates to probe")
    sp.add_argument("--tolerance", type=float,
                    help="max relative error allowed (exit 4 beyond it)")
    sp.add_argument("--length", type=int)
    sp.add_argument("--width", type=int)
    return p


def _resolve(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    sub = args.subcommand
    resolved = dict(_DEFAULTS[sub])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config}: invalid JSON ({e})")
        unknown = set(loaded) - set(resolved)
        if unknown:
            raise ConfigError(
                f"config file keys not valid for {sub!r}: {sorted(unknown)}")
        resolved.update(loaded)
    for key in resolved:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg[k] in (None, []):
            raise ConfigError(f"missing required setting --{k.replace('_', '-')}")


def _write_resolved(out_dir: Path, sub: str, cfg: dict) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"subcommand": sub, "config": cfg}
    fp = json_fingerprint(payload)
    with open(out_dir / "resolved-config.json", "w", encoding="utf-8") as f:
        json.dump({**payload, "fingerprint": fp}, f, indent=2, sort_keys=True)
        f.write("\n")
    return fp


def _load(cfg: dict, attach: bool):
    db = load_database(cfg["schema"], cfg["data"])
    if cfg.get("task") is None:
        return db, None, None
    task = load_task(db, cfg["task"], cfg["data"])
    if attach:
        return db.attach_task_table(task), db, task
    return db, None, task


def _sampler(cfg: dict) -> SamplerConfig:
    return SamplerConfig(context_length=cfg["length"],
                         width_bound=cfg["width"], rng_seed=cfg["seed"])


# ---------------------------------------------------------- subcommands

def _cmd_ingest(cfg: dict) -> int:
    _require(cfg, "schema", "data", "out")
    out = Path(cfg["out"])
    db, _, task = _load(cfg, attach=False)
    rows = []
    for t in db.tables:
        rows.append({
            "table": t.schema.name, "rows": t.n_rows,
            "columns": len(t.schema.columns),
            "features": len(t.schema.feature_columns),
            "links": len(t.schema.fk_columns),
        })
    summary = {"tables": rows, "tasks": []}
    if task is not None:
        summary["tasks"].append({
            "task": task.spec.name, "rows": len(task),
            "label": task.spec.label_column, "kind": task.spec.label_tag,
            "train": len(task.rows_in_split("train")),
            "val": len(task.rows_in_split("val")),
            "test": len(task.rows_in_split("test")),
        })
    fp = _write_resolved(out, "ingest", cfg)
    with open(out / "ingest.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(reporting.format_table(rows))
    if summary["tasks"]:
        print()
        print(reporting.format_table(summary["tasks"]))
    print(f"\nok: {len(db.tables)} tables validated (config {fp})")
    return EXIT_OK


def _cmd_synth(cfg: dict) -> int:
    from .synth_data import SyntheticSpec, generate_synthetic, write_dataset

    _require(cfg, "spec", "out")
    gen = _SPEC_ALIASES.get(cfg["spec"], cfg["spec"])
    spec = SyntheticSpec(generator=gen, n_entities=cfg["entities"],
                         rows_per_entity=cfg["rows_per_entity"],
                         noise=cfg["noise"], rng_seed=cfg["seed"])
    db, task = generate_synthetic(spec)
    out = Path(cfg["out"])
    fp = _write_resolved(out, "synth", cfg)
    write_dataset(out, db, task)
    files = sorted(p.name for p in out.iterdir())
    print(f"wrote {gen} dataset ({len(task)} task rows) to {out} "
          f"(config {fp})")
    for name in files:
        print(f"  {name}")
    return EXIT_OK


def _token_value(tok, db) -> str:
    if tok.is_masked:
        return ""
    if tok.tag == TEXT:
        return str(tok.value)
    if tok.tag == DATETIME:
        return format_datetime(float(tok.value))
    if tok.tag == BOOLEAN:
        return "1" if tok.value else "0"
    return repr(float(tok.value))


def _cmd_sample(cfg: dict) -> int:
    _require(cfg, "schema", "data", "task", "out")
    att, _, task = _load(cfg, attach=True)
    seeds = seed_rows_for_task(att, cfg["split"])
    if not seeds:
        raise DataError(f"split {cfg['split']!r} has no rows")
    seeds = seeds[: cfg["count"]]
    scfg = _sampler(cfg)
    out = Path(cfg["out"])
    fp = _write_resolved(out, "sample", cfg)
    lines = []
    for i, seed in enumerate(seeds):
        w = sample_context(att, seed, scfg)
        seed_table = att.tables[seed.table_id]
        lines.append(f"# window {i} seed={seed_table.schema.name}:"
                     f"{seed_table.pk_values[seed.row_index]} "
                     f"t={format_datetime(w.seed_timestamp)} "
                     f"tokens={len(w)}")
        for tok in w.tokens:
            td = att.tables[tok.table_id]
            col = att.columns[tok.column_id]
            lines.append("\t".join([
                td.schema.name, col.name,
                td.pk_values[tok.row_ref.row_index],
                _token_value(tok, att),
                "masked" if tok.is_masked else "visible",
            ]))
        lines.append("")
    (out / "windows.txt").write_text("\n".join(lines), encoding="utf-8")
    print(f"wrote {len(seeds)} windows to {out / 'windows.txt'} (config {fp})")
    return EXIT_OK


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(layers=cfg["layers"], d=cfg["d"], heads=cfg["heads"],
                       d_text=cfg["d_text"], mlp_ratio=cfg["mlp_ratio"],
                       pre_norm=bool(cfg.get("pre_norm", False)),
                       ablate=tuple(cfg.get("ablate") or ()))


def _cmd_train(cfg: dict) -> int:
    from .trainer import TrainConfig, fine_tune_config, train

    _require(cfg, "schema", "data", "task", "out")
    if cfg["workers"] != 1:
        raise ConfigError(
            "training builds batches serially for bitwise determinism; "
            "--workers must be 1 here (eval and ablate honor it)")
    task_names = cfg["task"] if isinstance(cfg["task"], list) else [cfg["task"]]
    db = load_database(cfg["schema"], cfg["data"])
    tasks = [load_task(db, name, cfg["data"]) for name in task_names]
    out = Path(cfg["out"])
    fp = _write_resolved(out, "train", cfg)

    init_from = None
    model_cfg = _model_config(cfg)
    if cfg["init_from"]:
        init_from = load_checkpoint(cfg["init_from"])
        model_cfg = None  # architecture comes from the checkpoint
    if cfg["fine_tune"]:
        if init_from is None:
            raise ConfigError("--fine-tune needs --init-from")
        tcfg = fine_tune_config(
            steps=cfg["steps"], batch_size=cfg["batch"],
            rng_seed=cfg["seed"], val_every=cfg["val_every"],
            checkpoint_every=cfg["checkpoint_every"],
            grad_clip=cfg["grad_clip"], mask_probability=cfg["mask_prob"])
    else:
        tcfg = TrainConfig(
            steps=cfg["steps"], batch_size=cfg["batch"],
            peak_lr=cfg["lr"], warmup_fraction=cfg["warmup"],
            weight_decay=cfg["weight_decay"],
            mask_probability=cfg["mask_prob"], rng_seed=cfg["seed"],
            val_every=cfg["val_every"],
            checkpoint_every=cfg["checkpoint_every"],
            grad_clip=cfg["grad_clip"])

    result = train(db, tasks, model_cfg, tcfg, _sampler(cfg), out_dir=out,
                   init_from=init_from)
    reporting.write_jsonl(out / "log.jsonl", result.log)
    if result.log:
        reporting.render_loss_curve(result.log, out / "loss.png")
    if result.diverged:
        print(f"DIVERGED at step {len(result.log)}; restored step "
              f"{result.restored_step}")
    last = result.checkpoint_paths[-1] if result.checkpoint_paths else None
    print(f"trained {len(result.log)} steps on {', '.join(task_names)} "
          f"(config {fp})")
    if last:
        print(f"checkpoint: {last}")
    for name, b in result.best.items():
        where = f" ({b['path']})" if b["path"] else ""
        print(f"best {name}: {b['metric']}={b['value']:.4f} "
              f"at step {b['step']}{where}")
    return EXIT_NUMERIC if result.diverged else EXIT_OK


def _eval_rows(cfg: dict, variants) -> tuple[list[dict], dict]:
    """Run score_split once per variant; returns (report rows, extras
    keyed by variant name with scores/labels for figures)."""
    from .eval_bench import report_from_scores, score_split

    db, _, task = _load(cfg, attach=False)
    ckpt = load_checkpoint(cfg["ckpt"])
    scfg = _sampler(cfg)
    rows, extras = [], {}
    for name, ablation in variants:
        scores, labels, train_mean = score_split(
            ckpt, db, task, cfg["split"], scfg, ablation,
            workers=cfg["workers"])
        rep = report_from_scores(ckpt, task, cfg["split"], scfg, ablation,
                                 scores, labels, train_mean)
        row = {"variant": name, **rep.to_json()}
        rows.append(row)
        extras[name] = (scores, labels, train_mean, task.spec.label_tag)
    return rows, extras


def _cmd_eval(cfg: dict) -> int:
    _require(cfg, "schema", "data", "task", "ckpt", "out")
    out = Path(cfg["out"])
    fp = _write_resolved(out, "eval", cfg)
    rows, extras = _eval_rows(cfg, [("model", None)])
    scores, labels, _, label_tag = extras["model"]
    reporting.write_jsonl(out / "report.jsonl", rows)
    reporting.write_delimited(out / "report.tsv", rows)
    if label_tag == BOOLEAN:
        reporting.render_roc(scores, labels, out / "roc.png")
        reporting.render_score_histogram(scores, labels, out / "scores.png")
    else:
        reporting.render_pred_scatter(scores, labels, out / "scatter.png")
    print(reporting.format_table(rows))
    print(f"\nreport written to {out} (config {fp})")
    return EXIT_OK


def _cmd_ablate(cfg: dict) -> int:
    from .eval_bench import AblationSpec, evaluate_entity_mean

    _require(cfg, "schema", "data", "task", "ckpt", "out")
    out = Path(cfg["out"])
    fp = _write_resolved(out, "ablate", cfg)
    names = cfg["context"] or ["shuffle_names", "drop_self_labels",
                               "drop_other_labels"]
    variants = [("none", None)]
    variants += [(n, AblationSpec(context=(n,), shuffle_seed=cfg["seed"]))
                 for n in names]
    rows, _ = _eval_rows(cfg, variants)
    db, _, task = _load(cfg, attach=False)
    base_rep = evaluate_entity_mean(db, task, cfg["split"], _sampler(cfg))
    rows.append({"variant": "entity-mean", **base_rep.to_json()})
    reporting.write_jsonl(out / "report.jsonl", rows)
    reporting.write_delimited(out / "report.tsv", rows)
    reporting.render_metric_bars(rows, out / "ablations.png")
    print(reporting.format_table(rows))
    print(f"\nablation report written to {out} (config {fp})")
    return EXIT_OK


def _cmd_gradcheck(cfg: dict) -> int:
    import torch

    from .cell_codec import NgramHashEmbedder
    from .rt_model import build_model, prepare_batch
    from .synth_data import SyntheticSpec, generate_synthetic
    from .trainer import (
        TrainConfig,
        encode_mixed,
        gradient_check,
        make_batch,
        prepare_task,
    )

    _require(cfg, "out")
    out = Path(cfg["out"])
    fp = _write_resolved(out, "gradcheck", cfg)
    model = build_model(_model_config({**cfg, "pre_norm": False,
                                       "ablate": None}), seed=cfg["seed"])
    db, task = generate_synthetic(SyntheticSpec(
        generator="entity_constant_label", n_entities=12,
        rng_seed=cfg["seed"]))
    embedder = NgramHashEmbedder(dim=cfg["d_text"])
    rt = prepare_task(db, task, embedder)
    tcfg = TrainConfig(steps=1, batch_size=4, mask_probability=0.25,
                       rng_seed=cfg["seed"])
    windows, rt_idx = make_batch([rt], _sampler(cfg), tcfg, step=0)
    batch = prepare_batch(encode_mixed(windows, rt_idx, [rt], embedder),
                          dtype=torch.float64)
    report = gradient_check(model, batch, epsilon=cfg["epsilon"],
                            n_coords=cfg["coords"], rng_seed=cfg["seed"])
    rows = [{"parameter": name, "max_rel_err": err}
            for name, err in sorted(report.per_param.items())]
    with open(out / "gradcheck.json", "w", encoding="utf-8") as f:
        json.dump({"max_rel_err": report.max_rel_err,
                   "worst": list(report.worst),
                   "coords": len(report.entries),
                   "per_param": report.per_param}, f, indent=2, sort_keys=True)
        f.write("\n")
    print(reporting.format_table(rows))
    print(f"\nmax relative error {report.max_rel_err:.3e} over "
          f"{len(report.entries)} coordinates (config {fp})")
    if report.max_rel_err > cfg["tolerance"]:
        raise NumericError(
            f"gradient check failed: {report.max_rel_err:.3e} exceeds "
            f"tolerance {cfg['tolerance']:.1e} at {report.worst}")
    print("gradient check passed")
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "sample": _cmd_sample,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help exits 0; bad flags exit 2
        return int(e.code or 0)
    try:
        cfg = _resolve(args)
        return _COMMANDS[args.subcommand](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
