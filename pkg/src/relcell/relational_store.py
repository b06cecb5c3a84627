"""Schemas, relational databases, task tables, and link traversal.

A database is a set of tables linked by foreign keys.  Rows referenced
by a foreign key are the row's parents (F->P links); the reverse edges
(P->F) are materialized in an inverted index so child traversal is
cheap.  Databases are immutable after load: attaching a task table
returns a new database value sharing the base tables.

Storage layout is column-oriented numpy arrays per table, with feature
cells (everything that is not a key) held in a dense value/missing
matrix so the sampler can enumerate a row's cells without touching
Python object graphs.
"""

from __future__ import annotations

import csv
import math
import datetime as _dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError

# Datatype tags. The first four are feature datatypes and index into
# per-datatype arrays; keys never become cells.
NUMERIC = "numeric"
BOOLEAN = "boolean"
DATETIME = "datetime"
TEXT = "text"
PRIMARY_KEY = "primary_key"
FOREIGN_KEY = "foreign_key"

FEATURE_TAGS = (NUMERIC, BOOLEAN, DATETIME, TEXT)
TAG_INDEX = {t: i for i, t in enumerate(FEATURE_TAGS)}
MASKABLE_TAGS = (NUMERIC, BOOLEAN)

_MINUS_INF = float("-inf")


@dataclass(frozen=True)
class Datatype:
    """One of numeric/boolean/datetime/text/primary_key/foreign_key;
    foreign keys carry the referenced table name."""

    tag: str
    ref_table: Optional[str] = None

    def __post_init__(self):
        if self.tag not in FEATURE_TAGS + (PRIMARY_KEY, FOREIGN_KEY):
            raise ConfigError(f"unknown datatype tag {self.tag!r}")
        if (self.tag == FOREIGN_KEY) != (self.ref_table is not None):
            raise ConfigError("ref_table is set iff tag is foreign_key")

    @property
    def is_feature(self) -> bool:
        return self.tag in FEATURE_TAGS


def foreign_key(ref_table: str) -> Datatype:
    return Datatype(FOREIGN_KEY, ref_table)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    datatype: Datatype
    is_timestamp: bool = False  # designated row-timestamp column


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[ColumnSpec, ...]
    implicit_pk: bool = False  # task tables identify rows by position

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"table {self.name!r}: duplicate column names")
        pks = [c for c in self.columns if c.datatype.tag == PRIMARY_KEY]
        if not self.implicit_pk and len(pks) != 1:
            raise DataError(
                f"table {self.name!r}: exactly one primary key required, got {len(pks)}"
            )
        ts = [c for c in self.columns if c.is_timestamp]
        if len(ts) > 1:
            raise DataError(f"table {self.name!r}: more than one timestamp column")
        if ts and ts[0].datatype.tag != DATETIME:
            raise DataError(f"table {self.name!r}: timestamp column must be datetime")

    @property
    def pk_column(self) -> Optional[ColumnSpec]:
        for c in self.columns:
            if c.datatype.tag == PRIMARY_KEY:
                return c
        return None

    @property
    def fk_columns(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.datatype.tag == FOREIGN_KEY)

    @property
    def feature_columns(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.datatype.is_feature)

    @property
    def timestamp_column(self) -> Optional[ColumnSpec]:
        for c in self.columns:
            if c.is_timestamp:
                return c
        return None

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise DataError(f"table {self.name!r}: no column {name!r}")


@dataclass(frozen=True)
class TaskSpec:
    """Declaration of a forecasting task: an entity link, a cutoff
    timestamp per row, a label column, and the split cutoffs."""

    name: str
    entity_column: str
    entity_table: str
    timestamp_column: str
    label_column: str
    label_tag: str  # numeric or boolean
    train_cutoff: float
    val_cutoff: float

    def __post_init__(self):
        if self.label_tag not in MASKABLE_TAGS:
            raise DataError(
                f"task {self.name!r}: label datatype must be numeric or boolean"
            )
        if not (self.train_cutoff <= self.val_cutoff):
            raise DataError(f"task {self.name!r}: split cutoffs must be monotone")

    def as_table_schema(self) -> TableSchema:
        return TableSchema(
            self.name,
            (
                ColumnSpec(self.entity_column, foreign_key(self.entity_table)),
                ColumnSpec(self.timestamp_column, Datatype(DATETIME), is_timestamp=True),
                ColumnSpec(self.label_column, Datatype(self.label_tag)),
            ),
            implicit_pk=True,
        )


@dataclass(frozen=True)
class SchemaDescriptor:
    tables: tuple[TableSchema, ...]
    tasks: tuple[TaskSpec, ...] = ()

    def __post_init__(self):
        names = [t.name for t in self.tables] + [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise DataError("duplicate table/task names in schema")
        by_name = {t.name: t for t in self.tables}
        for t in self.tables:
            for c in t.fk_columns:
                if c.datatype.ref_table not in by_name:
                    raise DataError(
                        f"table {t.name!r}: foreign key {c.name!r} references "
                        f"unknown table {c.datatype.ref_table!r}"
                    )
        for task in self.tasks:
            if task.entity_table not in by_name:
                raise DataError(
                    f"task {task.name!r}: entity table {task.entity_table!r} unknown"
                )

    def table(self, name: str) -> TableSchema:
        for t in self.tables:
            if t.name == name:
                return t
        raise DataError(f"no table named {name!r}")

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise DataError(f"no task named {name!r}")


class RowRef(NamedTuple):
    table_id: int
    row_index: int


@dataclass(frozen=True)
class ColumnInfo:
    """Global registry entry; col_id is unique across the database."""

    col_id: int
    table_id: int
    table_name: str
    name: str
    datatype: Datatype
    is_timestamp: bool


CellValue = Union[float, bool, str, _dt.datetime, None]


def to_epoch_seconds(value) -> float:
    if isinstance(value, _dt.datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=_dt.timezone.utc)
        return value.timestamp()
    return float(value)


class TableData:
    """Column store for one table. Internal; reached through the
    database's traversal and cell accessors."""

    def __init__(self, schema: TableSchema, table_id: int, n_rows: int):
        self.schema = schema
        self.table_id = table_id
        self.n_rows = n_rows
        self.pk_values: list[str] = []
        self.pk_index: dict[str, int] = {}
        # (column name, target table name) -> parent row index, -1 missing
        self.fk_parent: dict[str, np.ndarray] = {}
        self.fk_targets: dict[str, str] = {}
        # feature matrix: one column per feature ColumnSpec, schema order
        nf = len(schema.feature_columns)
        self.feat_missing = np.ones((n_rows, nf), dtype=bool)
        self.feat_scalar = np.full((n_rows, nf), np.nan, dtype=np.float64)
        self.feat_text: dict[int, list] = {}  # feature col position -> object list
        self.feat_tags = np.array(
            [TAG_INDEX[c.datatype.tag] for c in schema.feature_columns], dtype=np.int8
        )
        self.timestamps = np.full(n_rows, _MINUS_INF, dtype=np.float64)
        # filled in by the database once col_ids are assigned
        self.feat_col_ids = np.zeros(nf, dtype=np.int64)
        # parent links grouped per fk column, resolved after all tables load
        self._fk_target_tid: dict[str, int] = {}

    def feature_position(self, column_name: str) -> int:
        for i, c in enumerate(self.schema.feature_columns):
            if c.name == column_name:
                return i
        raise DataError(f"table {self.schema.name!r}: no feature column {column_name!r}")

    def text_value(self, feat_pos: int, row: int) -> str:
        return self.feat_text[feat_pos][row]


class TaskTable:
    """A task attached to a database: task rows with one entity link,
    one cutoff timestamp, one label, partitioned into train/val/test."""

    def __init__(
        self,
        spec: TaskSpec,
        entity_rows: np.ndarray,
        timestamps: np.ndarray,
        labels: np.ndarray,
    ):
        n = len(labels)
        if not (len(entity_rows) == len(timestamps) == n):
            raise DataError(f"task {spec.name!r}: ragged task rows")
        if np.any(entity_rows < 0):
            raise DataError(f"task {spec.name!r}: every row needs an entity link")
        if not np.all(np.isfinite(timestamps)):
            raise DataError(f"task {spec.name!r}: every row needs a timestamp")
        if not np.all(np.isfinite(labels)):
            raise DataError(f"task {spec.name!r}: every row needs a label")
        self.spec = spec
        self.entity_rows = entity_rows.astype(np.int64)
        self.timestamps = timestamps.astype(np.float64)
        self.labels = labels.astype(np.float64)
        self.split = np.where(
            timestamps <= spec.train_cutoff,
            0,
            np.where(timestamps <= spec.val_cutoff, 1, 2),
        ).astype(np.int8)

    def __len__(self) -> int:
        return len(self.labels)

    def rows_in_split(self, split: str) -> np.ndarray:
        try:
            code = {"train": 0, "val": 1, "test": 2}[split]
        except KeyError:
            raise ConfigError(f"unknown split {split!r}") from None
        return np.flatnonzero(self.split == code)


class RelationalDatabase:
    """Immutable row store with link indexes.

    Construction goes through `from_rows` (in-memory) or `load_database`
    (files). `attach_task_table` returns a new database that includes the
    task rows as an ordinary table for traversal purposes.
    """

    def __init__(self, schema: SchemaDescriptor, tables: list[TableData],
                 task: Optional[TaskTable] = None):
        self.schema = schema
        self.tables = tables
        self.task = task
        self.base_db: Optional["RelationalDatabase"] = None
        self.table_id = {t.schema.name: t.table_id for t in tables}
        self.columns: list[ColumnInfo] = []
        for t in tables:
            for c in t.schema.columns:
                if not c.datatype.is_feature:
                    continue
                info = ColumnInfo(
                    col_id=len(self.columns),
                    table_id=t.table_id,
                    table_name=t.schema.name,
                    name=c.name,
                    datatype=c.datatype,
                    is_timestamp=c.is_timestamp,
                )
                self.columns.append(info)
        pos = 0
        for t in tables:
            nf = len(t.schema.feature_columns)
            t.feat_col_ids = np.arange(pos, pos + nf, dtype=np.int64)
            pos += nf
        self._build_link_index()

    # -- link indexes -------------------------------------------------

    def _build_link_index(self):
        # per table: parents as [(target_tid, parent_row_array)], and a
        # CSR inverted index of children (child table id, child row)
        self.parents: list[list[tuple[int, np.ndarray]]] = []
        for t in self.tables:
            plist = []
            for col in t.schema.fk_columns:
                tid = self.table_id[col.datatype.ref_table]
                plist.append((tid, t.fk_parent[col.name]))
            self.parents.append(plist)

        counts = [np.zeros(t.n_rows, dtype=np.int64) for t in self.tables]
        for t in self.tables:
            for tid, arr in self.parents[t.table_id]:
                live = arr[arr >= 0]
                np.add.at(counts[tid], live, 1)
        self.child_offsets = [np.zeros(t.n_rows + 1, dtype=np.int64) for t in self.tables]
        self.child_tab: list[np.ndarray] = []
        self.child_row: list[np.ndarray] = []
        for tid, t in enumerate(self.tables):
            off = self.child_offsets[tid]
            np.cumsum(counts[tid], out=off[1:])
            self.child_tab.append(np.zeros(off[-1], dtype=np.int64))
            self.child_row.append(np.zeros(off[-1], dtype=np.int64))
        cursor = [off[:-1].copy() for off in self.child_offsets]
        # deterministic child order: child tables in id order, rows ascending
        for t in self.tables:
            for tid, arr in self.parents[t.table_id]:
                for child_row in range(t.n_rows):
                    p = arr[child_row]
                    if p < 0:
                        continue
                    k = cursor[tid][p]
                    self.child_tab[tid][k] = t.table_id
                    self.child_row[tid][k] = child_row
                    cursor[tid][p] += 1

    # -- traversal ----------------------------------------------------

    def _check_ref(self, r: RowRef):
        if not (0 <= r.table_id < len(self.tables)):
            raise DataError(f"invalid row ref: no table id {r.table_id}")
        if not (0 <= r.row_index < self.tables[r.table_id].n_rows):
            raise DataError(
                f"invalid row ref: table {self.tables[r.table_id].schema.name!r} "
                f"has no row {r.row_index}"
            )

    def out_links(self, r: RowRef) -> set[RowRef]:
        """Rows referenced by r's non-missing foreign keys."""
        self._check_ref(r)
        out = set()
        for tid, arr in self.parents[r.table_id]:
            p = arr[r.row_index]
            if p >= 0:
                out.add(RowRef(tid, int(p)))
        return out

    def in_links(self, r: RowRef) -> set[RowRef]:
        """All rows q with r in out_links(q)."""
        self._check_ref(r)
        off = self.child_offsets[r.table_id]
        lo, hi = off[r.row_index], off[r.row_index + 1]
        tabs = self.child_tab[r.table_id][lo:hi]
        rows = self.child_row[r.table_id][lo:hi]
        return {RowRef(int(t), int(i)) for t, i in zip(tabs, rows)}

    def row_timestamp(self, r: RowRef) -> float:
        return float(self.tables[r.table_id].timestamps[r.row_index])

    @property
    def n_rows(self) -> int:
        return sum(t.n_rows for t in self.tables)

    @property
    def n_links(self) -> int:
        return sum(int((arr >= 0).sum()) for plist in self.parents for _, arr in plist)

    def column_by_name(self, table_name: str, column_name: str) -> ColumnInfo:
        for info in self.columns:
            if info.table_name == table_name and info.name == column_name:
                return info
        raise DataError(f"no feature column {table_name}.{column_name}")

    # -- construction -------------------------------------------------

    @staticmethod
    def from_rows(
        schema: SchemaDescriptor,
        rows_by_table: dict[str, Sequence[dict]],
    ) -> "RelationalDatabase":
        """Build a database from python values.

        Row dicts map column name -> value; None means missing. Keys are
        strings; datetimes may be datetime objects or epoch seconds.
        """
        tables: list[TableData] = []
        for table_id, tschema in enumerate(schema.tables):
            rows = rows_by_table.get(tschema.name, [])
            tables.append(_build_table(tschema, table_id, rows))
        _resolve_foreign_keys(schema, tables)
        return RelationalDatabase(schema, tables)

    def attach_task_table(self, task: TaskTable) -> "RelationalDatabase":
        """Return a new database where the task rows participate in link
        traversal like ordinary rows. Only one task may be active."""
        if self.task is not None:
            raise ConfigError(
                f"task {self.task.spec.name!r} already active; only one task "
                "table is active at a time"
            )
        spec = task.spec
        if spec.entity_table not in self.table_id:
            raise DataError(f"task {spec.name!r}: entity table {spec.entity_table!r} unknown")
        ent_tid = self.table_id[spec.entity_table]
        n_ent = self.tables[ent_tid].n_rows
        if len(task) and task.entity_rows.max(initial=-1) >= n_ent:
            raise DataError(f"task {spec.name!r}: entity link out of range")

        tschema = spec.as_table_schema()
        td = TableData(tschema, len(self.tables), len(task))
        td.pk_values = [str(i) for i in range(len(task))]
        td.pk_index = {v: i for i, v in enumerate(td.pk_values)}
        td.fk_parent[spec.entity_column] = task.entity_rows.copy()
        td.fk_targets[spec.entity_column] = spec.entity_table
        td.timestamps = task.timestamps.copy()
        # feature cells: timestamp (datetime) and label, both never missing
        td.feat_missing[:, 0] = False
        td.feat_scalar[:, 0] = task.timestamps
        td.feat_missing[:, 1] = False
        td.feat_scalar[:, 1] = task.labels
        base = [_shallow_copy_table(t) for t in self.tables]
        out = RelationalDatabase(self.schema, base + [td], task=task)
        out.base_db = self
        return out

    @property
    def task_table_id(self) -> int:
        if self.task is None:
            raise ConfigError("no task attached")
        return len(self.tables) - 1

    def task_label_col_id(self) -> int:
        tid = self.task_table_id
        td = self.tables[tid]
        return int(td.feat_col_ids[td.feature_position(self.task.spec.label_column)])


def _shallow_copy_table(t: TableData) -> TableData:
    new = TableData.__new__(TableData)
    new.__dict__.update(t.__dict__)
    return new


def _build_table(tschema: TableSchema, table_id: int, rows: Sequence[dict]) -> TableData:
    td = TableData(tschema, table_id, len(rows))
    pk_col = tschema.pk_column
    feat_cols = tschema.feature_columns
    for pos, c in enumerate(feat_cols):
        if c.datatype.tag == TEXT:
            td.feat_text[pos] = [None] * len(rows)
    fk_raw: dict[str, list] = {c.name: [] for c in tschema.fk_columns}
    for i, row in enumerate(rows):
        where = f"table {tschema.name!r} row {i + 1}"
        extra = set(row) - {c.name for c in tschema.columns}
        if extra:
            raise DataError(f"{where}: unknown columns {sorted(extra)}")
        if pk_col is not None:
            pk = row.get(pk_col.name)
            if pk is None:
                raise DataError(f"{where}: missing primary key")
            pk = str(pk)
            if pk in td.pk_index:
                raise DataError(f"{where}: duplicate primary key {pk!r}")
            td.pk_index[pk] = i
            td.pk_values.append(pk)
        for c in tschema.fk_columns:
            v = row.get(c.name)
            fk_raw[c.name].append(None if v is None else str(v))
        for pos, c in enumerate(feat_cols):
            v = row.get(c.name)
            if v is None:
                continue
            td.feat_missing[i, pos] = False
            if c.datatype.tag == TEXT:
                if not isinstance(v, str):
                    raise DataError(f"{where}: column {c.name!r} expects text")
                td.feat_text[pos][i] = v
            elif c.datatype.tag == DATETIME:
                td.feat_scalar[i, pos] = to_epoch_seconds(v)
            elif c.datatype.tag == BOOLEAN:
                td.feat_scalar[i, pos] = 1.0 if v else 0.0
            else:
                f = float(v)
                if not math.isfinite(f):
                    raise DataError(f"{where}: column {c.name!r} is not finite")
                td.feat_scalar[i, pos] = f
            if c.is_timestamp:
                td.timestamps[i] = td.feat_scalar[i, pos]
    td._fk_raw = fk_raw  # resolved once all tables exist
    if pk_col is None:
        td.pk_values = [str(i) for i in range(len(rows))]
        td.pk_index = {v: i for i, v in enumerate(td.pk_values)}
    return td


def _resolve_foreign_keys(schema: SchemaDescriptor, tables: list[TableData]):
    by_name = {t.schema.name: t for t in tables}
    for td in tables:
        for c in td.schema.fk_columns:
            target = by_name[c.datatype.ref_table]
            raw = td._fk_raw[c.name]
            arr = np.full(td.n_rows, -1, dtype=np.int64)
            for i, v in enumerate(raw):
                if v is None:
                    continue
                j = target.pk_index.get(v)
                if j is None:
                    raise DataError(
                        f"table {td.schema.name!r} row {i + 1}: dangling foreign "
                        f"key {c.name}={v!r} (no such {c.datatype.ref_table!r} row)"
                    )
                arr[i] = j
            td.fk_parent[c.name] = arr
            td.fk_targets[c.name] = c.datatype.ref_table
        del td._fk_raw


# -- schema descriptor text format ------------------------------------

def parse_schema(text: str) -> SchemaDescriptor:
    """Parse the schema descriptor grammar.

    Blocks start with `table <name>` or `task <name>`; indented lines
    declare columns (`<name> numeric|boolean|datetime|text`, `<name> pk`,
    `<name> fk -> <table>`, optional trailing `timestamp` marker on a
    datetime column) or task fields (`entity <col> -> <table>`,
    `timestamp <col>`, `label <col> <numeric|boolean>`,
    `split train|val <= <iso-datetime>`). `#` starts a comment.
    """
    tables: list[TableSchema] = []
    tasks: list[TaskSpec] = []
    block: Optional[tuple[str, str]] = None
    cols: list[ColumnSpec] = []
    task_fields: dict = {}

    def close_block():
        nonlocal cols, task_fields
        if block is None:
            return
        kind, name = block
        if kind == "table":
            tables.append(TableSchema(name, tuple(cols)))
        else:
            missing = {"entity", "timestamp", "label", "train_cutoff", "val_cutoff"} - set(task_fields)
            if missing:
                raise DataError(f"task {name!r}: missing {sorted(missing)}")
            tasks.append(TaskSpec(
                name=name,
                entity_column=task_fields["entity"][0],
                entity_table=task_fields["entity"][1],
                timestamp_column=task_fields["timestamp"],
                label_column=task_fields["label"][0],
                label_tag=task_fields["label"][1],
                train_cutoff=task_fields["train_cutoff"],
                val_cutoff=task_fields["val_cutoff"],
            ))
        cols = []
        task_fields = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        where = f"schema line {lineno}"
        if tok[0] in ("table", "task"):
            if len(tok) != 2:
                raise DataError(f"{where}: expected '{tok[0]} <name>'")
            close_block()
            block = (tok[0], tok[1])
            continue
        if block is None:
            raise DataError(f"{where}: declaration outside a table/task block")
        if block[0] == "table":
            cols.append(_parse_column_line(tok, where))
        else:
            _parse_task_line(tok, task_fields, where)
    close_block()
    return SchemaDescriptor(tuple(tables), tuple(tasks))


def _parse_column_line(tok: list[str], where: str) -> ColumnSpec:
    if len(tok) < 2:
        raise DataError(f"{where}: expected '<column> <datatype>'")
    name, kind = tok[0], tok[1]
    rest = tok[2:]
    if kind == "pk":
        if rest:
            raise DataError(f"{where}: trailing tokens after pk")
        return ColumnSpec(name, Datatype(PRIMARY_KEY))
    if kind == "fk":
        if len(rest) != 2 or rest[0] != "->":
            raise DataError(f"{where}: expected 'fk -> <table>'")
        return ColumnSpec(name, foreign_key(rest[1]))
    if kind not in FEATURE_TAGS:
        raise DataError(f"{where}: unknown datatype {kind!r}")
    is_ts = False
    if rest == ["timestamp"]:
        is_ts = True
    elif rest:
        raise DataError(f"{where}: unexpected tokens {rest}")
    return ColumnSpec(name, Datatype(kind), is_timestamp=is_ts)


def _parse_task_line(tok: list[str], fields: dict, where: str):
    key = tok[0]
    if key == "entity":
        if len(tok) != 4 or tok[2] != "->":
            raise DataError(f"{where}: expected 'entity <col> -> <table>'")
        fields["entity"] = (tok[1], tok[3])
    elif key == "timestamp":
        if len(tok) != 2:
            raise DataError(f"{where}: expected 'timestamp <col>'")
        fields["timestamp"] = tok[1]
    elif key == "label":
        if len(tok) != 3 or tok[2] not in MASKABLE_TAGS:
            raise DataError(f"{where}: expected 'label <col> <numeric|boolean>'")
        fields["label"] = (tok[1], tok[2])
    elif key == "split":
        if len(tok) != 4 or tok[1] not in ("train", "val") or tok[2] != "<=":
            raise DataError(f"{where}: expected 'split train|val <= <datetime>'")
        fields[f"{tok[1]}_cutoff"] = parse_datetime(tok[3], where)
    else:
        raise DataError(f"{where}: unknown task field {key!r}")


def format_schema(schema: SchemaDescriptor) -> str:
    """Inverse of parse_schema, up to comments and blank lines."""
    out = []
    for t in schema.tables:
        out.append(f"table {t.name}")
        for c in t.columns:
            if c.datatype.tag == PRIMARY_KEY:
                out.append(f"  {c.name} pk")
            elif c.datatype.tag == FOREIGN_KEY:
                out.append(f"  {c.name} fk -> {c.datatype.ref_table}")
            else:
                ts = " timestamp" if c.is_timestamp else ""
                out.append(f"  {c.name} {c.datatype.tag}{ts}")
        out.append("")
    for task in schema.tasks:
        out.append(f"task {task.name}")
        out.append(f"  entity {task.entity_column} -> {task.entity_table}")
        out.append(f"  timestamp {task.timestamp_column}")
        out.append(f"  label {task.label_column} {task.label_tag}")
        out.append(f"  split train <= {format_datetime(task.train_cutoff)}")
        out.append(f"  split val <= {format_datetime(task.val_cutoff)}")
        out.append("")
    return "\n".join(out)


def parse_datetime(s: str, where: str = "value") -> float:
    try:
        if s.endswith("Z"):
            s = s[:-1] + "+00:00"
        return to_epoch_seconds(_dt.datetime.fromisoformat(s))
    except ValueError:
        raise DataError(f"{where}: invalid ISO-8601 datetime {s!r}") from None


def format_datetime(epoch_seconds: float) -> str:
    dt = _dt.datetime.fromtimestamp(epoch_seconds, tz=_dt.timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S")


# -- file loading ------------------------------------------------------

def _coerce(cell: str, col: ColumnSpec, where: str):
    if cell == "":
        return None
    tag = col.datatype.tag
    if tag in (PRIMARY_KEY, FOREIGN_KEY, TEXT):
        return cell
    if tag == NUMERIC:
        try:
            return float(cell)
        except ValueError:
            raise DataError(f"{where}: column {col.name!r} is not numeric: {cell!r}") from None
    if tag == BOOLEAN:
        low = cell.strip().lower()
        if low in ("true", "1"):
            return True
        if low in ("false", "0"):
            return False
        raise DataError(f"{where}: column {col.name!r} is not boolean: {cell!r}")
    return parse_datetime(cell, where)


def _read_table_file(path: Path, tschema: TableSchema) -> list[dict]:
    if not path.exists():
        raise DataError(f"missing data file {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path.name}: empty file, header required") from None
        expected = [c.name for c in tschema.columns]
        if sorted(header) != sorted(expected):
            raise DataError(
                f"{path.name}: header {header} does not match schema columns {expected}"
            )
        col_by_name = {c.name: c for c in tschema.columns}
        for i, rec in enumerate(reader):
            where = f"table {tschema.name!r} row {i + 1}"
            if len(rec) != len(header):
                raise DataError(f"{where}: expected {len(header)} fields, got {len(rec)}")
            row = {}
            for name, cell in zip(header, rec):
                v = _coerce(cell, col_by_name[name], where)
                if v is not None:
                    row[name] = v
            rows.append(row)
    return rows


def load_database(schema_file, data_dir) -> RelationalDatabase:
    """Load a database from a schema descriptor and one CSV per table.

    Tasks declared in the schema are parsed but not attached; use
    `load_task` + `attach_task_table`.
    """
    schema_file = Path(schema_file)
    data_dir = Path(data_dir)
    if not schema_file.exists():
        raise DataError(f"missing schema file {schema_file}")
    schema = parse_schema(schema_file.read_text(encoding="utf-8"))
    rows_by_table = {
        t.name: _read_table_file(data_dir / f"{t.name}.csv", t) for t in schema.tables
    }
    return RelationalDatabase.from_rows(schema, rows_by_table)


def load_task(db: RelationalDatabase, task_name: str, data_dir) -> TaskTable:
    """Read `<task>.csv` and resolve entity keys against the database."""
    spec = db.schema.task(task_name)
    tschema = spec.as_table_schema()
    rows = _read_table_file(Path(data_dir) / f"{spec.name}.csv", tschema)
    ent = db.tables[db.table_id[spec.entity_table]]
    n = len(rows)
    entity_rows = np.full(n, -1, dtype=np.int64)
    timestamps = np.full(n, np.nan)
    labels = np.full(n, np.nan)
    for i, row in enumerate(rows):
        where = f"task {spec.name!r} row {i + 1}"
        key = row.get(spec.entity_column)
        if key is None:
            raise DataError(f"{where}: missing entity key")
        j = ent.pk_index.get(str(key))
        if j is None:
            raise DataError(
                f"{where}: dangling foreign key {spec.entity_column}={key!r}"
            )
        entity_rows[i] = j
        ts = row.get(spec.timestamp_column)
        if ts is None:
            raise DataError(f"{where}: missing timestamp")
        timestamps[i] = to_epoch_seconds(ts)
        label = row.get(spec.label_column)
        if label is None:
            raise DataError(f"{where}: missing label")
        labels[i] = float(label) if spec.label_tag == NUMERIC else (1.0 if label else 0.0)
    return TaskTable(spec, entity_rows, timestamps, labels)
