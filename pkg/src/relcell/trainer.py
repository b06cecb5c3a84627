"""Masked-cell training loop, LR schedule, and gradient checker.

One step: draw a task per batch item (uniform over active tasks), a
seed row per item (uniform over that task's train split), sample each
item's context window, mask the target plus extra eligible cells with
probability P(mask), and take one AdamW step on the mixed-datatype
masked-cell loss.  All randomness flows from keyed substreams of the
run seed, so a rerun reproduces every batch and every update bit for
bit.  Batch items could be sampled by concurrent workers; gradients
reduce in item order either way, which is what keeps reruns identical.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .cell_codec import (
    EncodedBatch,
    NgramHashEmbedder,
    NormStats,
    PAD_CODE,
    TextEmbedder,
    encode_windows,
    fit_norm_stats,
    schema_phrases,
)
from .checkpoints import (
    Checkpoint,
    checkpoint_from,
    restore_model,
    restore_optimizer,
    apply_state,
    save_checkpoint,
)
from .context_sampler import (
    ContextWindow,
    SamplerConfig,
    sample_context,
    seed_rows_for_task,
)
from .errors import ConfigError, DataError, NumericError
from .relational_store import (
    BOOLEAN,
    NUMERIC,
    RelationalDatabase,
    TaskTable,
)
from .rt_model import (
    ModelConfig,
    RTModel,
    build_model,
    forward,
    loss,
    predict_probability,
    predict_values,
    prepare_batch,
)
from .streams import mix, substream

SCHEDULES = ("linear-warmup-decay", "constant")

# substream tags: one per independent randomness consumer
_PICK_TAG = 0xB172    # task + seed row choice per step
_WINDOW_TAG = 0x319D  # context sampling per (step, item)
_MASK_TAG = 0x3A5C    # extra masking per (step, item)
_VAL_TAG = 0xE7A1     # validation window sampling


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.2
    weight_decay: float = 0.1
    schedule: str = "linear-warmup-decay"
    mask_probability: float = 0.0  # extra masking beyond the target cell
    rng_seed: int = 0
    checkpoint_every: int = 0      # 0: only the final checkpoint
    val_every: int = 0             # 0: no validation passes
    grad_clip: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if not 0.0 <= self.mask_probability < 1.0:
            raise ConfigError("mask_probability must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


def fine_tune_config(steps: int, **overrides) -> TrainConfig:
    """Fine-tuning preset: constant small LR, no decay, target-only
    masking. Resumes are expected to start from a fresh optimizer."""
    base = dict(steps=steps, peak_lr=1e-4, schedule="constant",
                weight_decay=0.0, mask_probability=0.0)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based `step`: zero at step 0, peak once
    warmup_fraction of the run has passed, then linear decay to zero."""
    if cfg.schedule == "constant":
        return cfg.peak_lr
    w = cfg.warmup_fraction * cfg.steps
    if w > 0 and step < w:
        return cfg.peak_lr * step / w
    return cfg.peak_lr * (cfg.steps - step) / max(cfg.steps - w, 1.0)


def param_groups(model: RTModel, weight_decay: float) -> list[dict]:
    """Decoupled weight decay on projection weights only; biases, norm
    gains and mask vectors are scale-free and stay unregularized."""
    decay, exempt = [], []
    for name, p in model.named_parameters():
        if name.endswith(".bias") or name.endswith(".gain") or ".m_" in name:
            exempt.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": exempt, "weight_decay": 0.0}]


def make_optimizer(model: RTModel, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        param_groups(model, cfg.weight_decay), lr=cfg.peak_lr,
        betas=cfg.adam_betas, eps=cfg.adam_eps)


@dataclass
class TaskRuntime:
    """Everything train/eval needs for one attached task."""

    name: str
    db: RelationalDatabase         # base db with this task attached
    task: TaskTable
    stats: NormStats
    phrases: np.ndarray
    train_seeds: list
    val_seeds: list
    label_tag: str


def prepare_task(
    base_db: RelationalDatabase,
    task: TaskTable,
    embedder: TextEmbedder,
    name_map: Optional[dict[str, str]] = None,
) -> TaskRuntime:
    db = base_db.attach_task_table(task)
    stats = fit_norm_stats(db, task.spec.train_cutoff)
    phrases = schema_phrases(db, embedder, name_map=name_map)
    return TaskRuntime(
        name=task.spec.name,
        db=db,
        task=task,
        stats=stats,
        phrases=phrases,
        train_seeds=seed_rows_for_task(db, "train"),
        val_seeds=seed_rows_for_task(db, "val"),
        label_tag=task.spec.label_tag,
    )


def extra_mask(window: ContextWindow, p: float, rng) -> ContextWindow:
    """Mask each eligible unmasked numeric/boolean cell independently
    with probability p. Cell values stay on the tokens, so the loss
    targets are the pre-masking values."""
    if p <= 0.0:
        return window
    toks = []
    for tok in window.tokens:
        if (not tok.is_masked and tok.tag in (NUMERIC, BOOLEAN)
                and rng.random() < p):
            tok = replace(tok, is_masked=True)
        toks.append(tok)
    return ContextWindow(tuple(toks), window.seed, window.seed_timestamp)


def make_batch(
    runtimes: list[TaskRuntime],
    scfg: SamplerConfig,
    tcfg: TrainConfig,
    step: int,
) -> tuple[list[ContextWindow], list[int]]:
    """Windows for one training step plus each item's task index."""
    for rt in runtimes:
        if not rt.train_seeds:
            raise DataError(f"task {rt.name!r} has an empty train split")
    pick = substream(tcfg.rng_seed, _PICK_TAG, step)
    windows, rt_idx = [], []
    for item in range(tcfg.batch_size):
        k = int(pick.integers(len(runtimes)))
        rt = runtimes[k]
        seed = rt.train_seeds[int(pick.integers(len(rt.train_seeds)))]
        item_cfg = replace(
            scfg, rng_seed=mix(tcfg.rng_seed, _WINDOW_TAG, step, item))
        win = sample_context(rt.db, seed, item_cfg)
        if tcfg.mask_probability > 0.0:
            mrng = substream(tcfg.rng_seed, _MASK_TAG, step, item)
            win = extra_mask(win, tcfg.mask_probability, mrng)
        windows.append(win)
        rt_idx.append(k)
    return windows, rt_idx


def encode_mixed(
    windows: list[ContextWindow],
    rt_idx: list[int],
    runtimes: list[TaskRuntime],
    embedder: TextEmbedder,
):
    """Encode a batch whose items may come from different tasks, each
    with its own stats and phrase table, into one padded EncodedBatch.
    Item order is preserved."""
    groups: dict[int, list[int]] = {}
    for i, k in enumerate(rt_idx):
        groups.setdefault(k, []).append(i)
    if len(groups) == 1:
        k = next(iter(groups))
        return encode_windows(windows, runtimes[k].stats, embedder,
                              runtimes[k].phrases)
    B = len(windows)
    N = max(len(w) for w in windows)
    d_text = runtimes[0].phrases.shape[1]
    tag = np.full((B, N), PAD_CODE, dtype=np.int8)
    r_scalar = np.zeros((B, N), dtype=np.float32)
    r_text = np.zeros((B, N, d_text), dtype=np.float32)
    masked = np.zeros((B, N), dtype=bool)
    phrase = np.zeros((B, N, d_text), dtype=np.float32)
    pad = np.ones((B, N), dtype=bool)
    col_ids = np.full((B, N), -1, dtype=np.int64)
    targets = []
    for k in sorted(groups):
        items = groups[k]
        part = encode_windows([windows[i] for i in items],
                              runtimes[k].stats, embedder,
                              runtimes[k].phrases)
        n = part.tag.shape[1]
        rows = np.array(items)
        tag[rows, :n] = part.tag
        r_scalar[rows, :n] = part.r_scalar
        r_text[rows, :n] = part.r_text
        masked[rows, :n] = part.masked
        phrase[rows, :n] = part.phrase
        pad[rows, :n] = part.pad
        col_ids[rows, :n] = part.col_ids
        targets.extend(replace(t, item=items[t.item]) for t in part.targets)
    targets.sort(key=lambda t: (t.item, t.pos))
    return EncodedBatch(tag, r_scalar, r_text, masked, phrase, pad,
                        col_ids, targets, list(windows))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: RTModel
    runtimes: list[TaskRuntime]
    log: list[dict]
    diverged: bool
    restored_step: Optional[int]
    checkpoint_paths: list[Path]
    best: dict[str, dict]   # task -> {"step", "value", "metric", "path"}


def train(
    base_db: RelationalDatabase,
    tasks: list[TaskTable],
    model_cfg: Optional[ModelConfig],
    train_cfg: TrainConfig,
    sampler_cfg: SamplerConfig,
    out_dir=None,
    init_from: Optional[Checkpoint] = None,
    embedder: Optional[TextEmbedder] = None,
    log_fn=None,
) -> TrainResult:
    """Run the loop; returns the final state (or the last good state if
    the loss went non-finite).

    `init_from` fine-tunes a previous checkpoint: weights are restored,
    the optimizer starts fresh. Checkpoints land under
    `<out_dir>/run-<seed>/step-<n>.ckpt`.
    """
    if not tasks:
        raise ConfigError("train needs at least one task")
    torch.set_num_threads(1)
    if init_from is not None:
        model = restore_model(init_from)
        if model_cfg is not None and model_cfg.config_hash() != model.cfg.config_hash():
            raise ConfigError(
                "model config does not match the fine-tuning checkpoint")
    elif model_cfg is not None:
        model = build_model(model_cfg, seed=train_cfg.rng_seed)
    else:
        raise ConfigError("either model_cfg or init_from is required")
    if embedder is None:
        embedder = NgramHashEmbedder(dim=model.cfg.d_text)
    if embedder.dim != model.cfg.d_text:
        raise ConfigError(
            f"embedder dim {embedder.dim} does not match d_text {model.cfg.d_text}")
    runtimes = [prepare_task(base_db, t, embedder) for t in tasks]
    names = [rt.name for rt in runtimes]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate task names in training set")

    optimizer = make_optimizer(model, train_cfg)
    run_dir = Path(out_dir) / f"run-{train_cfg.rng_seed}" if out_dir else None

    # fixed validation windows: one per val seed, sampled once
    val_batches = []
    if train_cfg.val_every:
        vcfg = replace(sampler_cfg,
                       rng_seed=mix(train_cfg.rng_seed, _VAL_TAG))
        for rt in runtimes:
            if not rt.val_seeds:
                val_batches.append(None)
                continue
            wins = [sample_context(rt.db, s, vcfg) for s in rt.val_seeds]
            enc = encode_windows(wins, rt.stats, embedder, rt.phrases)
            val_batches.append((prepare_batch(enc),
                                rt.task.labels[[s.row_index for s in rt.val_seeds]]))

    def snapshot(step):
        return checkpoint_from(model, runtimes[0].stats, step,
                               embedder.identity, optimizer)

    last_good = snapshot(0)
    log: list[dict] = []
    paths: list[Path] = []
    best: dict[str, dict] = {}
    diverged = False
    restored_step: Optional[int] = None
    t0 = time.monotonic()

    for step in range(train_cfg.steps):
        windows, rt_idx = make_batch(runtimes, sampler_cfg, train_cfg, step)
        enc = encode_mixed(windows, rt_idx, runtimes, embedder)
        lr = lr_at(step, train_cfg)
        try:
            out = forward(model, prepare_batch(enc))
            step_loss = loss(out, model.cfg.huber_delta)
            finite = bool(torch.isfinite(step_loss))
        except NumericError:
            finite = False
        if not finite:
            diverged = True
            restored_step = last_good.step
            apply_state(model, last_good)
            optimizer = make_optimizer(model, train_cfg)
            restore_optimizer(optimizer, model, last_good)
            break
        optimizer.zero_grad(set_to_none=True)
        step_loss.backward()
        if train_cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(),
                                           train_cfg.grad_clip)
        for g in optimizer.param_groups:
            g["lr"] = lr
        optimizer.step()
        rec = {"step": step, "loss": float(step_loss.item()), "lr": lr,
               "wall_time": time.monotonic() - t0}

        done = step + 1 == train_cfg.steps
        if train_cfg.val_every and ((step + 1) % train_cfg.val_every == 0 or done):
            from .eval_bench import auroc, r2

            vals = {}
            for rt, vb in zip(runtimes, val_batches):
                if vb is None:
                    continue
                vbatch, vlabels = vb
                with torch.no_grad():
                    vout = forward(model, vbatch)
                if rt.label_tag == BOOLEAN:
                    value = auroc(predict_probability(vout),
                                  vlabels.astype(int))
                    metric = "AUROC"
                else:
                    lc = rt.db.task_label_col_id()
                    preds = predict_values(vout, rt.stats.col_mean[lc],
                                           rt.stats.col_std[lc])
                    value = r2(preds, vlabels,
                               train_mean=rt.stats.col_mean[lc])
                    metric = "R2"
                vals[rt.name] = value
                prev = best.get(rt.name)
                if prev is None or value > prev["value"]:
                    best[rt.name] = {"step": step + 1, "value": value,
                                     "metric": metric, "path": None}
            rec["val"] = vals
        log.append(rec)
        if log_fn:
            log_fn(rec)

        at_cadence = (train_cfg.checkpoint_every
                      and (step + 1) % train_cfg.checkpoint_every == 0)
        if at_cadence or done:
            last_good = snapshot(step + 1)
            if run_dir is not None:
                p = run_dir / f"step-{step + 1}.ckpt"
                save_checkpoint(p, last_good)
                paths.append(p)
                for b in best.values():
                    if b["step"] == step + 1:
                        b["path"] = p

    final = last_good if diverged else snapshot(train_cfg.steps)
    if diverged and run_dir is not None:
        p = run_dir / f"step-{final.step}.ckpt"
        if not paths or paths[-1] != p:
            save_checkpoint(p, final)
            paths.append(p)
    return TrainResult(final, model, runtimes, log, diverged,
                       restored_step, paths, best)


# ------------------------------------------------------------ gradients

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple[str, int]
    per_param: dict[str, float]
    entries: list[dict] = field(repr=False, default_factory=list)


def gradient_check(
    model: RTModel,
    batch,
    epsilon: float = 1e-4,
    n_coords: int = 200,
    rng_seed: int = 0,
    tamper: Optional[tuple[str, int, float]] = None,
) -> GradCheckReport:
    """Compare backprop gradients against central finite differences on
    a float64 copy of the model.

    Samples at least one coordinate from every parameter tensor, then
    spreads the remaining budget over all coordinates. The error is
    |analytic - numeric| / max(|analytic|, |numeric|, 0.01); the floor
    turns the test absolute for near-zero gradients, where a pure ratio
    only amplifies finite-difference noise.  `tamper` adds an offset to
    one analytic gradient entry so tests can confirm the check catches
    a wrong derivative at exactly that coordinate.
    """
    model = copy.deepcopy(model).double()
    batch = batch.to(torch.float64)

    def loss_value() -> float:
        return float(loss(forward(model, batch), model.cfg.huber_delta).item())

    model.zero_grad(set_to_none=True)
    loss(forward(model, batch), model.cfg.huber_delta).backward()
    grads = {n: p.grad.detach().clone().reshape(-1)
             for n, p in model.named_parameters()}
    if tamper is not None:
        name, idx, delta = tamper
        grads[name][idx] += delta

    params = dict(model.named_parameters())
    rng = substream(rng_seed, 0x96AD)
    coords: list[tuple[str, int]] = []
    seen = set()
    for name, p in params.items():
        i = int(rng.integers(p.numel()))
        coords.append((name, i))
        seen.add((name, i))
    names = list(params)
    sizes = np.array([params[n].numel() for n in names], dtype=np.int64)
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    while len(coords) < n_coords and len(seen) < total:
        flat = int(rng.integers(total))
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        c = (names[k], flat - int(offsets[k]))
        if c in seen:
            continue
        seen.add(c)
        coords.append(c)
    if tamper is not None and (tamper[0], tamper[1]) not in seen:
        coords.append((tamper[0], tamper[1]))

    entries = []
    per_param: dict[str, float] = {}
    worst = ("", -1)
    max_err = 0.0
    with torch.no_grad():
        for name, i in coords:
            flat = params[name].view(-1)
            keep = flat[i].item()
            flat[i] = keep + epsilon
            up = loss_value()
            flat[i] = keep - epsilon
            down = loss_value()
            flat[i] = keep
            numeric = (up - down) / (2.0 * epsilon)
            analytic = float(grads[name][i].item())
            err = abs(analytic - numeric) / max(abs(analytic),
                                                abs(numeric), 1e-2)
            entries.append({"param": name, "index": i, "analytic": analytic,
                            "numeric": numeric, "rel_err": err})
            per_param[name] = max(per_param.get(name, 0.0), err)
            if err > max_err:
                max_err = err
                worst = (name, i)
    return GradCheckReport(max_err, worst, per_param, entries)
