"""Randomized database/task builders shared by property tests."""

import numpy as np

from relcell import relational_store as rs

_WORDS = [
    "amount", "status", "score", "note", "size", "rating", "weight",
    "color", "count", "level", "title", "zone", "grade", "phase",
]


def random_schema(rng: np.random.Generator) -> rs.SchemaDescriptor:
    n_tables = int(rng.integers(2, 6))
    tables = []
    for ti in range(n_tables):
        name = f"t{ti}"
        cols = [rs.ColumnSpec(f"{name}_id", rs.Datatype(rs.PRIMARY_KEY))]
        # foreign keys only to earlier tables keeps the schema acyclic
        if ti > 0:
            n_fk = int(rng.integers(0, 3))
            for k in range(n_fk):
                target = f"t{int(rng.integers(0, ti))}"
                cols.append(rs.ColumnSpec(f"fk{k}_{target}", rs.foreign_key(target)))
        tags = [rs.NUMERIC, rs.BOOLEAN, rs.DATETIME, rs.TEXT]
        n_feat = int(rng.integers(1, 5))
        has_ts = bool(rng.random() < 0.6)
        for k in range(n_feat):
            tag = tags[int(rng.integers(0, len(tags)))]
            cols.append(rs.ColumnSpec(f"{_WORDS[int(rng.integers(0, len(_WORDS)))]}_{k}",
                                      rs.Datatype(tag)))
        if has_ts:
            cols.append(rs.ColumnSpec("created_at", rs.Datatype(rs.DATETIME),
                                      is_timestamp=True))
        tables.append(rs.TableSchema(name, tuple(cols)))
    return rs.SchemaDescriptor(tuple(tables))


def random_database(rng: np.random.Generator, max_rows: int = 30) -> rs.RelationalDatabase:
    schema = random_schema(rng)
    rows_by_table = {}
    pks = {}
    for t in schema.tables:
        n = int(rng.integers(3, max_rows + 1))
        pks[t.name] = [f"{t.name}_r{i}" for i in range(n)]
        rows = []
        for i in range(n):
            row = {t.pk_column.name: pks[t.name][i]}
            for c in t.fk_columns:
                if rng.random() < 0.1:
                    continue  # missing fk
                target_pks = pks[c.datatype.ref_table]
                row[c.name] = target_pks[int(rng.integers(0, len(target_pks)))]
            for c in t.feature_columns:
                if not c.is_timestamp and rng.random() < 0.15:
                    continue  # missing feature
                tag = c.datatype.tag
                if tag == rs.NUMERIC:
                    row[c.name] = float(np.round(rng.normal(), 3))
                elif tag == rs.BOOLEAN:
                    row[c.name] = bool(rng.random() < 0.5)
                elif tag == rs.DATETIME:
                    row[c.name] = float(1.6e9 + rng.integers(0, 10**7))
                else:
                    row[c.name] = "w" + str(int(rng.integers(0, 1000)))
            rows.append(row)
        rows_by_table[t.name] = rows
    return rs.RelationalDatabase.from_rows(schema, rows_by_table)


def random_task(db: rs.RelationalDatabase, rng: np.random.Generator,
                boolean: bool = True, n_rows: int = 20) -> rs.TaskTable:
    ent_table = db.schema.tables[int(rng.integers(0, len(db.schema.tables)))]
    ent_tid = db.table_id[ent_table.name]
    n_ent = db.tables[ent_tid].n_rows
    ts = 1.6e9 + rng.integers(0, 10**7, size=n_rows).astype(np.float64)
    cut1, cut2 = np.quantile(ts, [0.6, 0.8])
    spec = rs.TaskSpec(
        name="probe",
        entity_column="ent",
        entity_table=ent_table.name,
        timestamp_column="cutoff_at",
        label_column="target",
        label_tag=rs.BOOLEAN if boolean else rs.NUMERIC,
        train_cutoff=float(cut1),
        val_cutoff=float(cut2),
    )
    labels = (rng.random(n_rows) < 0.5).astype(np.float64) if boolean \
        else rng.normal(size=n_rows)
    ent_rows = rng.integers(0, n_ent, size=n_rows).astype(np.int64)
    return rs.TaskTable(spec, ent_rows, ts, labels)


def brute_force_in_links(db: rs.RelationalDatabase, r: rs.RowRef) -> set:
    """Independent oracle: scan every row's out_links."""
    found = set()
    for t in db.tables:
        for i in range(t.n_rows):
            q = rs.RowRef(t.table_id, i)
            if r in db.out_links(q):
                found.add(q)
    return found
