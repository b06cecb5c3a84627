"""Synthetic relational datasets with known-answer structure.

Three generators, each isolating one information pathway:

* ``copy_parent_feature``: the label copies a boolean feature on the
  row's linked parent. One task row per entity by default, so context
  windows carry no labels at all; only the relational feature pathway
  can solve it, and with zero noise the Bayes AUROC is 1.
* ``entity_constant_label``: the label is a constant per entity, drawn
  independently of every feature. Past task rows of the same entity
  (self labels) are the only signal; entities share group parents, so
  other entities' labels also appear in windows as decoys.
* ``seasonal_label``: numeric label = per-entity level (exposed as a
  feature on the entity) + global sinusoid of the row timestamp +
  Gaussian noise, giving a regression task with a closed-form noise
  floor: best R2 = 1 - sigma^2 / Var(label).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from . import relational_store as rs
from .relational_store import (
    BOOLEAN,
    DATETIME,
    NUMERIC,
    TEXT,
    RelationalDatabase,
    TaskTable,
    format_datetime,
    parse_datetime,
    parse_schema,
)
from .streams import substream

GENERATORS = ("copy_parent_feature", "entity_constant_label", "seasonal_label")

_T0 = parse_datetime("2024-01-01T00:00:00")
_DAY = 86400.0
_DEFAULT_ROWS = {"copy_parent_feature": 1,
                 "entity_constant_label": 5,
                 "seasonal_label": 8}


@dataclass(frozen=True)
class SyntheticSpec:
    generator: str
    n_entities: int = 60
    rows_per_entity: Optional[int] = None  # None: generator default
    noise: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(
                f"unknown generator {self.generator!r}; "
                f"choose from {GENERATORS}")
        if self.n_entities < 2:
            raise ConfigError("n_entities must be >= 2")
        if self.rows_per_entity is not None and self.rows_per_entity < 1:
            raise ConfigError("rows_per_entity must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @property
    def rows(self) -> int:
        if self.rows_per_entity is not None:
            return self.rows_per_entity
        return _DEFAULT_ROWS[self.generator]


def generate_synthetic(spec: SyntheticSpec) -> tuple[RelationalDatabase, TaskTable]:
    if spec.generator == "copy_parent_feature":
        return _copy_parent_feature(spec)
    if spec.generator == "entity_constant_label":
        return _entity_constant_label(spec)
    return _seasonal_label(spec)


def _quantile_cutoffs(ts: np.ndarray) -> tuple[float, float]:
    """Split timestamps 60/20/20 by value order."""
    s = np.sort(ts)
    n = len(s)
    train = s[max(0, math.ceil(0.6 * n) - 1)]
    val = s[max(0, math.ceil(0.8 * n) - 1)]
    return float(train), float(val)


def _balanced_bits(n: int, rng) -> np.ndarray:
    """Half zeros, half ones, in seeded random order."""
    bits = (rng.permutation(n) % 2).astype(np.float64)
    return bits


def _join_times(n: int) -> list[float]:
    """Creation times for dimension rows, spread over the first 20 days.
    Task events start on day 30 at the earliest, so these rows predate
    every seed time at any n; the visit-time guard never hides a parent."""
    step = 20 * _DAY / max(n, 1)
    return [_T0 + step * (i + 1) for i in range(n)]


_COPY_SCHEMA = """\
table regions
  region_id pk
  blip boolean

table customers
  customer_id pk
  region_id fk -> regions
  joined_at datetime timestamp
  flag boolean
  x1 numeric
  x2 numeric

task copy
  entity customer_id -> customers
  timestamp at
  label outcome boolean
  split train <= {train}
  split val <= {val}
"""


def _copy_parent_feature(spec: SyntheticSpec):
    rng = substream(spec.rng_seed, 0xC0B1)
    n = spec.n_entities
    rpe = spec.rows
    n_regions = max(2, n // 20)
    flags = _balanced_bits(n, rng)
    regions = [
        {"region_id": f"r{i}", "blip": bool(rng.integers(2))}
        for i in range(n_regions)
    ]
    joins = _join_times(n)
    customers = [
        {
            "customer_id": f"c{i}",
            "region_id": f"r{int(rng.integers(n_regions))}",
            "joined_at": joins[i],
            "flag": bool(flags[i]),
            "x1": float(rng.normal()),
            "x2": float(rng.normal()),
        }
        for i in range(n)
    ]
    ent = np.repeat(np.arange(n, dtype=np.int64), rpe)
    k = np.tile(np.arange(rpe, dtype=np.int64), n)
    # distinct, interleaved timestamps: entities spread inside each round
    ts = _T0 + 40 * _DAY + k * _DAY + ent * 60.0
    labels = flags[ent].copy()
    if spec.noise > 0:
        flip = rng.random(len(labels)) < spec.noise
        labels[flip] = 1.0 - labels[flip]
    train_cut, val_cut = _quantile_cutoffs(ts)
    schema = parse_schema(_COPY_SCHEMA.format(
        train=format_datetime(train_cut), val=format_datetime(val_cut)))
    db = RelationalDatabase.from_rows(
        schema, {"regions": regions, "customers": customers})
    task = TaskTable(schema.task("copy"), ent, ts.astype(np.float64), labels)
    return db, task


_ENTITY_SCHEMA = """\
table groups
  group_id pk
  g1 numeric

table members
  member_id pk
  group_id fk -> groups
  joined_at datetime timestamp
  m1 numeric

task visit
  entity member_id -> members
  timestamp at
  label busy boolean
  split train <= {train}
  split val <= {val}
"""


def _entity_constant_label(spec: SyntheticSpec):
    rng = substream(spec.rng_seed, 0xE57A)
    n = spec.n_entities
    rpe = spec.rows
    if rpe < 3:
        raise ConfigError(
            "entity_constant_label needs rows_per_entity >= 3 "
            "(train history plus val and test rows)")
    n_groups = max(2, n // 6)
    groups = [
        {"group_id": f"g{i}", "g1": float(rng.normal())}
        for i in range(n_groups)
    ]
    joins = _join_times(n)
    members = [
        {
            "member_id": f"m{i}",
            "group_id": f"g{int(rng.integers(n_groups))}",
            "joined_at": joins[i],
            "m1": float(rng.normal()),
        }
        for i in range(n)
    ]
    bits = _balanced_bits(n, rng)
    ent = np.repeat(np.arange(n, dtype=np.int64), rpe)
    k = np.tile(np.arange(rpe, dtype=np.int64), n)
    # shared weekly grid: rows of different entities share timestamps, so
    # sibling labels (other entities in the same group) stay reachable
    grid = _T0 + 30 * _DAY + 7 * _DAY * np.arange(rpe)
    ts = grid[k]
    labels = bits[ent].copy()
    if spec.noise > 0:
        flip = rng.random(len(labels)) < spec.noise
        labels[flip] = 1.0 - labels[flip]
    # last grid line is test, the one before is val, the rest train
    schema = parse_schema(_ENTITY_SCHEMA.format(
        train=format_datetime(float(grid[rpe - 3])),
        val=format_datetime(float(grid[rpe - 2]))))
    db = RelationalDatabase.from_rows(
        schema, {"groups": groups, "members": members})
    task = TaskTable(schema.task("visit"), ent, ts.astype(np.float64), labels)
    return db, task


_SEASONAL_SCHEMA = """\
table sensors
  sensor_id pk
  calib numeric

task reading
  entity sensor_id -> sensors
  timestamp at
  label value numeric
  split train <= {train}
  split val <= {val}
"""

SEASON_PERIOD = 28 * _DAY
SEASON_AMPLITUDE = 1.0


def seasonal_truth(level: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Noise-free label surface of the seasonal generator."""
    phase = 2.0 * math.pi * (ts - _T0) / SEASON_PERIOD
    return level + SEASON_AMPLITUDE * np.sin(phase)


def _seasonal_label(spec: SyntheticSpec):
    rng = substream(spec.rng_seed, 0x5EA5)
    n = spec.n_entities
    rpe = spec.rows
    level = rng.normal(size=n)
    sensors = [
        {"sensor_id": f"s{i}", "calib": float(level[i])}
        for i in range(n)
    ]
    ent = np.repeat(np.arange(n, dtype=np.int64), rpe)
    k = np.tile(np.arange(rpe, dtype=np.int64), n)
    step = round(SEASON_PERIOD / rpe)
    ts = _T0 + 30 * _DAY + k * float(step) + ent * 60.0
    labels = seasonal_truth(level[ent], ts) + spec.noise * rng.normal(size=len(ts))
    train_cut, val_cut = _quantile_cutoffs(ts)
    schema = parse_schema(_SEASONAL_SCHEMA.format(
        train=format_datetime(train_cut), val=format_datetime(val_cut)))
    db = RelationalDatabase.from_rows(schema, {"sensors": sensors})
    task = TaskTable(schema.task("reading"), ent, ts.astype(np.float64),
                     labels.astype(np.float64))
    return db, task


# ------------------------------------------------------------- writers

def _format_cell(td: rs.TableData, col: rs.ColumnSpec, pos: int, row: int) -> str:
    tag = col.datatype.tag
    if tag in (NUMERIC, BOOLEAN, DATETIME):
        if td.feat_missing[row, pos]:
            return ""
        v = float(td.feat_scalar[row, pos])
        if tag == DATETIME:
            return format_datetime(v)
        if tag == BOOLEAN:
            return "1" if v else "0"
        return repr(v)
    text = td.feat_text[pos][row]
    return "" if text is None else text


def write_dataset(out_dir, db: RelationalDatabase,
                  task: Optional[TaskTable] = None) -> Path:
    """Write schema + one CSV per table (and task) in the layout that
    `load_database` / `load_task` read back."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "schema.txt").write_text(rs.format_schema(db.schema))
    for td in db.tables:
        if db.task is not None and td.table_id == db.task_table_id:
            continue
        _write_table_csv(out / f"{td.schema.name}.csv", db, td)
    if task is not None:
        _write_task_csv(out, db, task)
    return out


def _write_table_csv(path: Path, db: RelationalDatabase, td: rs.TableData):
    import csv

    header = [c.name for c in td.schema.columns]
    feature_pos = {c.name: i for i, c in enumerate(td.schema.feature_columns)}
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(header)
        for row in range(td.n_rows):
            rec = []
            for c in td.schema.columns:
                if c.datatype.tag == rs.PRIMARY_KEY:
                    rec.append(td.pk_values[row])
                elif c.datatype.tag == rs.FOREIGN_KEY:
                    parent = td.fk_parent[c.name][row]
                    if parent < 0:
                        rec.append("")
                    else:
                        ptd = db.tables[db.table_id[c.datatype.ref_table]]
                        rec.append(ptd.pk_values[parent])
                else:
                    rec.append(_format_cell(td, c, feature_pos[c.name], row))
            wr.writerow(rec)


def _write_task_csv(out: Path, db: RelationalDatabase, task: TaskTable):
    import csv

    spec = task.spec
    ent_td = db.tables[db.table_id[spec.entity_table]]
    with open(out / f"{spec.name}.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow([spec.entity_column, spec.timestamp_column,
                     spec.label_column])
        for i in range(len(task)):
            label = task.labels[i]
            label_s = ("1" if label else "0") if spec.label_tag == BOOLEAN \
                else repr(float(label))
            wr.writerow([
                ent_td.pk_values[int(task.entity_rows[i])],
                format_datetime(float(task.timestamps[i])),
                label_s,
            ])
