"""Training loop, schedule, masking policy, checkpoints, gradcheck."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from relcell import relational_store as rs
from relcell import trainer as tr
from relcell.cell_codec import (
    NgramHashEmbedder,
    encode_windows,
    fit_norm_stats,
    schema_phrases,
)
from relcell.checkpoints import (
    apply_state,
    checkpoint_from,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from relcell.context_sampler import (
    SamplerConfig,
    autocomplete_seeds,
    sample_context,
    seed_rows_for_task,
)
from relcell.errors import ConfigError, DataError
from relcell.relational_store import BOOLEAN, NUMERIC
from relcell.rt_model import ModelConfig, build_model, forward, loss, prepare_batch
from relcell.streams import substream
from relcell.trainer import (
    GradCheckReport,
    TrainConfig,
    extra_mask,
    fine_tune_config,
    gradient_check,
    lr_at,
    make_batch,
    make_optimizer,
    param_groups,
    prepare_task,
    train,
)

from conftest import T0, DAY
from test_rt_model import MIXED_SCHEMA, mixed_db  # noqa: F401  (fixture)


def tiny_model_cfg(**kw):
    base = dict(layers=1, d=16, heads=2, d_text=24, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


# -------------------------------------------------------------- config

def test_config_rejects_full_masking():
    with pytest.raises(ConfigError, match="mask_probability"):
        TrainConfig(mask_probability=1.0)


def test_config_rejects_bad_schedule():
    with pytest.raises(ConfigError, match="schedule"):
        TrainConfig(schedule="cosine")


def test_fine_tune_preset():
    cfg = fine_tune_config(steps=50)
    assert cfg.schedule == "constant"
    assert cfg.peak_lr == 1e-4
    assert cfg.weight_decay == 0.0
    assert cfg.mask_probability == 0.0


# ------------------------------------------------------------ schedule

def test_lr_schedule_endpoints_and_peak():
    cfg = TrainConfig(steps=10, peak_lr=1e-3, warmup_fraction=0.2)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1, cfg) == pytest.approx(0.5e-3)
    assert lr_at(2, cfg) == pytest.approx(1e-3)  # 20% of steps: peak
    assert lr_at(6, cfg) == pytest.approx(1e-3 * 4 / 8)
    assert lr_at(9, cfg) == pytest.approx(1e-3 / 8)  # final step ~ 0
    assert all(0.0 <= lr_at(s, cfg) <= cfg.peak_lr for s in range(10))


def test_lr_schedule_no_warmup_starts_at_peak():
    cfg = TrainConfig(steps=10, peak_lr=2e-3, warmup_fraction=0.0)
    assert lr_at(0, cfg) == pytest.approx(2e-3)


def test_lr_schedule_constant():
    cfg = TrainConfig(steps=10, peak_lr=1e-4, schedule="constant")
    assert all(lr_at(s, cfg) == 1e-4 for s in range(10))


# -------------------------------------------------------- param groups

def test_param_groups_exempt_scale_free_tensors():
    model = build_model(tiny_model_cfg(), seed=0)
    groups = param_groups(model, 0.1)
    assert groups[0]["weight_decay"] == 0.1
    assert groups[1]["weight_decay"] == 0.0
    exempt_ids = {id(p) for p in groups[1]["params"]}
    decay_ids = {id(p) for p in groups[0]["params"]}
    for name, p in model.named_parameters():
        expect_exempt = (name.endswith(".bias") or name.endswith(".gain")
                         or ".m_" in name)
        assert (id(p) in exempt_ids) == expect_exempt, name
        assert (id(p) in decay_ids) == (not expect_exempt), name
    assert len(exempt_ids) + len(decay_ids) == len(list(model.parameters()))
    assert exempt_ids and decay_ids


# --------------------------------------------------------- make_batch

def embedder24():
    return NgramHashEmbedder(dim=24)


def test_batch_masks_exactly_target_when_p_zero(mixed_db):
    rt = prepare_task(mixed_db.base_db, mixed_db.task, embedder24())
    scfg = SamplerConfig(context_length=20, width_bound=4, rng_seed=1)
    tcfg = TrainConfig(steps=1, batch_size=8, rng_seed=3)
    windows, rt_idx = make_batch([rt], scfg, tcfg, step=0)
    assert rt_idx == [0] * 8
    for w in windows:
        masked = [t for t in w.tokens if t.is_masked]
        assert len(masked) == 1
        assert masked[0].row_ref == w.seed


def test_batch_deterministic_and_step_sensitive(mixed_db):
    rt = prepare_task(mixed_db.base_db, mixed_db.task, embedder24())
    scfg = SamplerConfig(context_length=20, width_bound=4, rng_seed=1)
    tcfg = TrainConfig(steps=5, batch_size=6, rng_seed=3,
                       mask_probability=0.3)
    a, _ = make_batch([rt], scfg, tcfg, step=2)
    b, _ = make_batch([rt], scfg, tcfg, step=2)
    c, _ = make_batch([rt], scfg, tcfg, step=3)
    assert [w.tokens for w in a] == [w.tokens for w in b]
    assert [w.tokens for w in a] != [w.tokens for w in c]


def test_batch_empty_train_split_rejected(mixed_db):
    spec = mixed_db.schema.task("visits")
    # every row beyond the train cutoff
    task = rs.TaskTable(
        spec,
        np.array([0, 1], dtype=np.int64),
        np.array([T0 + 70 * DAY, T0 + 75 * DAY]),
        np.array([1.0, 0.0]),
    )
    rt = prepare_task(mixed_db.base_db, task, embedder24())
    with pytest.raises(DataError, match="empty train split"):
        make_batch([rt], SamplerConfig(rng_seed=0),
                   TrainConfig(steps=1, batch_size=2), step=0)


def test_extra_mask_binomial_moments(mixed_db):
    """Monte Carlo: the number of extra masked cells over a fixed window
    follows Binomial(n_eligible, p); the empirical mean over 10^4 draws
    must sit within 3 standard errors of n*p."""
    rt = prepare_task(mixed_db.base_db, mixed_db.task, embedder24())
    scfg = SamplerConfig(context_length=20, width_bound=4, rng_seed=7)
    win = sample_context(rt.db, rt.train_seeds[-1], scfg)
    eligible = sum(
        1 for t in win.tokens
        if not t.is_masked and t.tag in (NUMERIC, BOOLEAN))
    assert eligible >= 4
    p = 0.4
    draws = 10_000
    counts = np.empty(draws)
    for i in range(draws):
        masked_win = extra_mask(win, p, substream(99, i))
        counts[i] = sum(t.is_masked for t in masked_win.tokens) - 1
    se = math.sqrt(eligible * p * (1 - p) / draws)
    assert abs(counts.mean() - eligible * p) < 3 * se
    # every draw keeps the target cell masked on top of the extras
    assert counts.min() >= 0


def test_extra_mask_never_touches_datetime_or_text(mixed_db):
    rt = prepare_task(mixed_db.base_db, mixed_db.task, embedder24())
    scfg = SamplerConfig(context_length=24, width_bound=4, rng_seed=7)
    win = sample_context(rt.db, rt.train_seeds[-1], scfg)
    masked_win = extra_mask(win, 0.999, substream(1, 2))
    for t in masked_win.tokens:
        if t.tag not in (NUMERIC, BOOLEAN):
            assert not t.is_masked


def test_task_mixing_uniform(users_orders_db, churn_task):
    spend_spec = rs.TaskSpec(
        name="spend", entity_column="user_id", entity_table="users",
        timestamp_column="cutoff_at", label_column="total",
        label_tag=NUMERIC,
        train_cutoff=rs.parse_datetime("2024-02-16T00:00:00"),
        val_cutoff=rs.parse_datetime("2024-02-24T00:00:00"))
    n = 9
    spend = rs.TaskTable(
        spend_spec, np.array([i % 3 for i in range(n)]),
        np.array([T0 + 10 * DAY + i * 4 * DAY for i in range(n)]),
        np.array([float(10 * i) for i in range(n)]))
    emb = embedder24()
    rts = [prepare_task(users_orders_db, churn_task, emb),
           prepare_task(users_orders_db, spend, emb)]
    tcfg = TrainConfig(steps=1, batch_size=400, rng_seed=11)
    _, rt_idx = make_batch(rts, SamplerConfig(context_length=12, rng_seed=0),
                           tcfg, step=0)
    share = np.mean(np.array(rt_idx) == 0)
    # binomial 3 sigma around 1/2 at n=400
    assert abs(share - 0.5) < 3 * math.sqrt(0.25 / 400)


def test_encode_mixed_two_tasks_matches_single_encoding(users_orders_db, churn_task):
    """Per-item arrays in a mixed-task batch equal those from encoding
    each window alone with its own task runtime."""
    spend_spec = rs.TaskSpec(
        name="spend", entity_column="user_id", entity_table="users",
        timestamp_column="cutoff_at", label_column="total",
        label_tag=NUMERIC,
        train_cutoff=rs.parse_datetime("2024-02-16T00:00:00"),
        val_cutoff=rs.parse_datetime("2024-02-24T00:00:00"))
    spend = rs.TaskTable(
        spend_spec, np.array([0, 1, 2, 0]),
        np.array([T0 + 12 * DAY, T0 + 14 * DAY, T0 + 16 * DAY, T0 + 18 * DAY]),
        np.array([5.0, 7.0, 9.0, 11.0]))
    emb = embedder24()
    rts = [prepare_task(users_orders_db, churn_task, emb),
           prepare_task(users_orders_db, spend, emb)]
    scfg = SamplerConfig(context_length=16, width_bound=4, rng_seed=2)
    wins = [sample_context(rts[0].db, rts[0].train_seeds[0], scfg),
            sample_context(rts[1].db, rts[1].train_seeds[1], scfg),
            sample_context(rts[0].db, rts[0].train_seeds[2], scfg)]
    rt_idx = [0, 1, 0]
    merged = tr.encode_mixed(wins, rt_idx, rts, emb)
    for i, (w, k) in enumerate(zip(wins, rt_idx)):
        solo = encode_windows([w], rts[k].stats, emb, rts[k].phrases)
        n = solo.tag.shape[1]
        np.testing.assert_array_equal(merged.tag[i, :n], solo.tag[0])
        np.testing.assert_array_equal(merged.r_scalar[i, :n], solo.r_scalar[0])
        np.testing.assert_array_equal(merged.phrase[i, :n], solo.phrase[0])
        assert np.all(merged.tag[i, n:] == -1)
    # targets sorted by (item, pos) and remapped to batch positions
    items = [t.item for t in merged.targets]
    assert items == sorted(items)
    assert set(items) == {0, 1, 2}


# ------------------------------------------------------------ training

def small_run(mixed_db, tmp_path=None, **cfg_kw):
    base, task = mixed_db.base_db, mixed_db.task
    defaults = dict(steps=6, batch_size=4, rng_seed=5, peak_lr=1e-3)
    defaults.update(cfg_kw)
    tcfg = TrainConfig(**defaults)
    scfg = SamplerConfig(context_length=16, width_bound=4, rng_seed=1)
    return train(base, [task], tiny_model_cfg(), tcfg, scfg,
                 out_dir=tmp_path)


def test_train_produces_log_and_checkpoint(mixed_db, tmp_path):
    res = small_run(mixed_db, tmp_path)
    assert len(res.log) == 6
    assert [r["step"] for r in res.log] == list(range(6))
    for r in res.log:
        assert math.isfinite(r["loss"])
        assert r["lr"] == lr_at(r["step"], TrainConfig(steps=6, batch_size=4,
                                                       rng_seed=5))
        assert r["wall_time"] >= 0
    assert res.checkpoint.step == 6
    assert not res.diverged
    assert res.checkpoint_paths == [tmp_path / "run-5" / "step-6.ckpt"]
    assert res.checkpoint_paths[0].exists()


def test_train_bitwise_deterministic(mixed_db, tmp_path):
    r1 = small_run(mixed_db, tmp_path / "a")
    r2 = small_run(mixed_db, tmp_path / "b")
    assert [r["loss"] for r in r1.log] == [r["loss"] for r in r2.log]
    for k, t in r1.checkpoint.model_state.items():
        assert torch.equal(t, r2.checkpoint.model_state[k]), k
    b1 = (tmp_path / "a" / "run-5" / "step-6.ckpt").read_bytes()
    b2 = (tmp_path / "b" / "run-5" / "step-6.ckpt").read_bytes()
    assert b1 == b2


def test_train_loss_decreases(mixed_db):
    res = small_run(mixed_db, steps=150, batch_size=8, peak_lr=3e-3)
    losses = [r["loss"] for r in res.log]
    assert np.mean(losses[-25:]) < np.mean(losses[:25])


def test_train_divergence_restores_last_checkpoint(mixed_db, tmp_path, monkeypatch):
    real_loss = tr.loss
    calls = {"n": 0}

    def wobbly(out, delta=1.0):
        calls["n"] += 1
        if calls["n"] > 5:  # steps 0..4 fine, step 5 explodes
            val = real_loss(out, delta)
            return val * float("nan")
        return real_loss(out, delta)

    monkeypatch.setattr(tr, "loss", wobbly)
    base, task = mixed_db.base_db, mixed_db.task
    tcfg = TrainConfig(steps=8, batch_size=4, rng_seed=5,
                       checkpoint_every=2)
    scfg = SamplerConfig(context_length=16, width_bound=4, rng_seed=1)
    res = train(base, [task], tiny_model_cfg(), tcfg, scfg, out_dir=tmp_path)
    assert res.diverged
    assert res.restored_step == 4
    assert res.checkpoint.step == 4
    assert len(res.log) == 5  # steps 0..4 completed
    saved = load_checkpoint(tmp_path / "run-5" / "step-4.ckpt")
    for k, t in saved.model_state.items():
        assert torch.equal(t, res.checkpoint.model_state[k]), k
    # live model weights were rolled back too
    live = dict(res.model.state_dict())
    for k, t in saved.model_state.items():
        assert torch.equal(t, live[k]), k


def test_train_divergence_without_progress_keeps_init(mixed_db, monkeypatch):
    monkeypatch.setattr(
        tr, "loss",
        lambda out, delta=1.0: torch.tensor(float("inf"), requires_grad=True))
    res = small_run(mixed_db)
    assert res.diverged and res.checkpoint.step == 0 and res.log == []


def test_fine_tune_resumes_weights_resets_moments(mixed_db, tmp_path):
    res = small_run(mixed_db, tmp_path)
    assert res.checkpoint.opt_state  # pretraining saved moments
    base, task = mixed_db.base_db, mixed_db.task
    ft = train(base, [task], None, fine_tune_config(steps=2, rng_seed=6),
               SamplerConfig(context_length=16, width_bound=4, rng_seed=1),
               init_from=res.checkpoint)
    assert ft.checkpoint.step == 2
    with pytest.raises(ConfigError, match="config"):
        train(base, [task], tiny_model_cfg(d=32, heads=4),
              fine_tune_config(steps=1),
              SamplerConfig(context_length=8), init_from=res.checkpoint)


def test_train_rejects_empty_task_list(mixed_db):
    with pytest.raises(ConfigError, match="at least one task"):
        train(mixed_db.base_db, [], tiny_model_cfg(),
              TrainConfig(steps=1), SamplerConfig())


# --------------------------------------------------------- checkpoints

def trained_snapshot(mixed_db):
    res = small_run(mixed_db, steps=3, batch_size=4)
    return res


def test_checkpoint_round_trip_bit_exact(mixed_db, tmp_path):
    res = trained_snapshot(mixed_db)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, res.checkpoint)
    back = load_checkpoint(p)
    assert back.step == res.checkpoint.step
    assert back.embedder == res.checkpoint.embedder
    assert back.config == res.checkpoint.config
    assert back.stats == res.checkpoint.stats
    for k, t in res.checkpoint.model_state.items():
        assert torch.equal(back.model_state[k], t), k
    for k, t in res.checkpoint.opt_state.items():
        assert torch.equal(back.opt_state[k], t), k


def test_checkpoint_save_load_save_idempotent(mixed_db, tmp_path):
    res = trained_snapshot(mixed_db)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, res.checkpoint)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_version_mismatch(mixed_db, tmp_path):
    res = trained_snapshot(mixed_db)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, res.checkpoint)
    raw = bytearray(p.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version 99"):
        load_checkpoint(p)


def test_checkpoint_truncation(mixed_db, tmp_path):
    res = trained_snapshot(mixed_db)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, res.checkpoint)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 40])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(p)


def test_checkpoint_embedder_mismatch(mixed_db, tmp_path):
    res = trained_snapshot(mixed_db)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, res.checkpoint)
    with pytest.raises(ConfigError, match="embedder"):
        load_checkpoint(p, expect_embedder="other-embedder/1")
    ok = load_checkpoint(p, expect_embedder=res.checkpoint.embedder)
    assert ok.step == res.checkpoint.step


def test_checkpoint_shape_mismatch_names_first_tensor(mixed_db):
    res = trained_snapshot(mixed_db)
    wide = build_model(tiny_model_cfg(d=32, heads=4), seed=0)
    with pytest.raises(ConfigError, match=r"encoder\.w_numeric"):
        apply_state(wide, res.checkpoint)


def test_restore_optimizer_reinstalls_moments(mixed_db):
    res = trained_snapshot(mixed_db)
    model = restore_model(res.checkpoint)
    opt = make_optimizer(model, TrainConfig(steps=1))
    restore_optimizer(opt, model, res.checkpoint)
    named = dict(model.named_parameters())
    some = 0
    for name, p in named.items():
        if p in opt.state and "exp_avg" in opt.state[p]:
            key = f"{name}.exp_avg"
            assert torch.equal(opt.state[p]["exp_avg"],
                               res.checkpoint.opt_state[key])
            some += 1
    assert some > 0


# ------------------------------------------------------ gradient check

def numeric_batch(mixed_db, d_text=24, n=3):
    emb = NgramHashEmbedder(dim=d_text)
    stats = fit_norm_stats(mixed_db, mixed_db.schema.tasks[0].train_cutoff)
    phrases = schema_phrases(mixed_db, emb)
    scfg = SamplerConfig(context_length=12, width_bound=3, rng_seed=2)
    seeds = seed_rows_for_task(mixed_db, "train")[:n]
    rating = [s for s in autocomplete_seeds(mixed_db, "shops", "rating")][:2]
    wins = [sample_context(mixed_db, s, scfg) for s in seeds]
    wins += [sample_context(mixed_db, ref, scfg, mask_col_id=c)
             for ref, c in rating]
    return prepare_batch(encode_windows(wins, stats, emb, phrases))


def test_gradcheck_full_small_model(mixed_db):
    model = build_model(tiny_model_cfg(layers=2, d=32, heads=4), seed=3)
    report = gradient_check(model, numeric_batch(mixed_db), epsilon=1e-4,
                            n_coords=60, rng_seed=0)
    assert report.max_rel_err < 1e-5, report.worst
    assert set(report.per_param) == {n for n, _ in model.named_parameters()}


def test_gradcheck_linear_decoder_near_exact(mixed_db):
    """With the block stack zeroed the loss is quadratic in every live
    parameter, so central differences are exact up to rounding."""
    model = build_model(tiny_model_cfg(huber_delta=25.0), seed=3)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("blocks."):
                p.zero_()
    emb = NgramHashEmbedder(dim=24)
    stats = fit_norm_stats(mixed_db, mixed_db.schema.tasks[0].train_cutoff)
    phrases = schema_phrases(mixed_db, emb)
    scfg = SamplerConfig(context_length=10, width_bound=3, rng_seed=2)
    rating = autocomplete_seeds(mixed_db, "shops", "rating")
    wins = [sample_context(mixed_db, ref, scfg, mask_col_id=c)
            for ref, c in rating]
    batch = prepare_batch(encode_windows(wins, stats, emb, phrases))
    assert all(t.tag == NUMERIC for t in batch.targets)
    report = gradient_check(model, batch, epsilon=1e-4, n_coords=40,
                            rng_seed=1)
    assert report.max_rel_err < 1e-7


def test_gradcheck_detects_corrupted_gradient(mixed_db):
    model = build_model(tiny_model_cfg(), seed=3)
    batch = numeric_batch(mixed_db)
    clean = gradient_check(model, batch, n_coords=30, rng_seed=0)
    name, idx = "encoder.w_schema", 7
    dirty = gradient_check(model, batch, n_coords=30, rng_seed=0,
                           tamper=(name, idx, 0.5))
    assert dirty.worst == (name, idx)
    assert dirty.max_rel_err > 100 * max(clean.max_rel_err, 1e-12)
