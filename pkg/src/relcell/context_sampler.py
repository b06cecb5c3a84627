"""Bounded-width BFS context sampling around a seed row.

The walk starts at the seed, follows foreign keys in both directions,
and gathers the non-missing feature cells of each visited row until the
cell budget L is met.  Three rules shape the traversal:

  * parent rows reached through a foreign key (F->P) are explored before
    anything else; among several pending parents the choice is uniform;
  * otherwise a uniformly random frontier row at minimal hop distance
    from the seed is explored next;
  * children (P->F) with a timestamp after the seed's are never
    followed, and the remaining children of one row are subsampled
    uniformly down to the width bound w.

Rows timestamped after the seed are additionally skipped at visit time,
so no future cell can enter the window through any path.  Keys are never
tokenized; the linkage they encode lives in the attention masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .relational_store import RelationalDatabase, RowRef, TEXT
from .streams import substream


@dataclass(frozen=True)
class SamplerConfig:
    context_length: int = 256  # L, in cells
    width_bound: int = 8       # w, children kept per visited row
    rng_seed: int = 0

    def __post_init__(self):
        if self.context_length < 1:
            raise ConfigError("context_length must be >= 1")
        if self.width_bound < 1:
            raise ConfigError("width_bound must be >= 1")


@dataclass(frozen=True)
class CellToken:
    value: object            # float for numeric/boolean/datetime, str for text
    column_id: int
    table_id: int
    row_ref: RowRef
    out_link_rows: tuple     # rows referenced by this token's row, sorted
    is_masked: bool
    tag: str                 # datatype tag of the column


@dataclass(frozen=True)
class ContextWindow:
    tokens: tuple[CellToken, ...]
    seed: RowRef
    seed_timestamp: float

    def __len__(self) -> int:
        return len(self.tokens)


def sample_context(
    db: RelationalDatabase,
    seed: RowRef,
    cfg: SamplerConfig,
    mask_col_id: Optional[int] = None,
    audit: Optional[dict] = None,
) -> ContextWindow:
    """Sample one context window around `seed`.

    `mask_col_id` marks which of the seed row's cells is the masked
    prediction target; when omitted and the seed is a task row, the
    task's label column is used. `audit`, if given, is filled with
    traversal internals (visit order, children kept per row, priority
    violations) for white-box property tests.
    """
    db._check_ref(seed)
    t_seed = db.row_timestamp(seed)
    if mask_col_id is None and db.task is not None and seed.table_id == db.task_table_id:
        mask_col_id = db.task_label_col_id()

    L = cfg.context_length
    w = cfg.width_bound
    rng = substream(cfg.rng_seed, seed.table_id, seed.row_index)

    # frontier entries: (hop, added_via_fp, row); duplicates allowed,
    # resolved by the visited check after popping
    frontier: list[tuple[int, bool, RowRef]] = [(0, False, seed)]
    visited: set[RowRef] = set()
    cells: list[CellToken] = []
    if audit is not None:
        audit.update(visits=[], children_kept={}, nonfp_picked_while_fp_pending=0)

    while len(cells) < L and frontier:
        fp_idx = [i for i, e in enumerate(frontier) if e[1]]
        if fp_idx:
            pick = fp_idx[int(rng.integers(len(fp_idx)))]
        else:
            min_hop = min(e[0] for e in frontier)
            cand = [i for i, e in enumerate(frontier) if e[0] == min_hop]
            pick = cand[int(rng.integers(len(cand)))]
        hop, via_fp, row = frontier.pop(pick)
        if audit is not None and not via_fp and any(e[1] for e in frontier):
            audit["nonfp_picked_while_fp_pending"] += 1
        if row in visited:
            continue
        visited.add(row)
        if db.row_timestamp(row) > t_seed:
            continue  # future row: contribute no cells, follow no links
        if audit is not None:
            audit["visits"].append(row)

        td = db.tables[row.table_id]
        i = row.row_index
        out_rows = tuple(sorted(db.out_links(row)))
        for pos, col in enumerate(td.schema.feature_columns):
            if td.feat_missing[i, pos]:
                continue
            value = td.text_value(pos, i) if col.datatype.tag == TEXT \
                else float(td.feat_scalar[i, pos])
            col_id = int(td.feat_col_ids[pos])
            cells.append(CellToken(
                value=value,
                column_id=col_id,
                table_id=row.table_id,
                row_ref=row,
                out_link_rows=out_rows,
                is_masked=(row == seed and col_id == mask_col_id),
                tag=col.datatype.tag,
            ))

        # parents join the frontier unfiltered and take priority
        for tid, arr in db.parents[row.table_id]:
            p = arr[i]
            if p >= 0:
                frontier.append((hop + 1, True, RowRef(tid, int(p))))

        # children: temporal filter, then uniform subsample down to w
        off = db.child_offsets[row.table_id]
        lo, hi = off[i], off[i + 1]
        tabs = db.child_tab[row.table_id][lo:hi]
        rows_ = db.child_row[row.table_id][lo:hi]
        valid = [
            RowRef(int(t), int(j))
            for t, j in zip(tabs, rows_)
            if db.tables[t].timestamps[j] <= t_seed
        ]
        if len(valid) > w:
            keep = rng.choice(len(valid), size=w, replace=False)
            valid = [valid[k] for k in sorted(keep)]
        if audit is not None:
            audit["children_kept"][row] = len(valid)
        for child in valid:
            frontier.append((hop + 1, False, child))

    return ContextWindow(tuple(cells[:L]), seed, t_seed)


def seed_rows_for_task(db: RelationalDatabase, split: str) -> list[RowRef]:
    """The task rows of one split, in task-table order. Each, when used
    as a sampling seed, gets its label cell masked (see sample_context)."""
    if db.task is None:
        raise ConfigError("no task attached")
    tid = db.task_table_id
    return [RowRef(tid, int(i)) for i in db.task.rows_in_split(split)]


def autocomplete_seeds(db: RelationalDatabase, table_name: str,
                       column_name: str) -> list[tuple[RowRef, int]]:
    """Seeds for masking an existing feature column: every row of
    `table_name` with a non-missing value in `column_name`, paired with
    the column id to mask."""
    info = db.column_by_name(table_name, column_name)
    td = db.tables[info.table_id]
    pos = td.feature_position(column_name)
    return [
        (RowRef(info.table_id, i), info.col_id)
        for i in range(td.n_rows)
        if not td.feat_missing[i, pos]
    ]


@dataclass(frozen=True)
class LabelStats:
    """Aggregate of in-context label counts across windows."""

    self_mean: float
    self_sd: float
    other_mean: float
    other_sd: float
    entities_mean: float
    entities_sd: float


def context_label_stats(windows: list[ContextWindow], target_col_id: int) -> LabelStats:
    """Count unmasked target-column cells per window, split into cells of
    the seed's entity vs other entities, plus distinct contributing
    entities. The entity of a target cell is the row set its owning row
    points to (for task rows: the single linked entity row)."""
    selfs, others, ents = [], [], []
    for win in windows:
        seed_entity = None
        for tok in win.tokens:
            if tok.row_ref == win.seed:
                seed_entity = tok.out_link_rows
                break
        n_self = n_other = 0
        seen = set()
        for tok in win.tokens:
            if tok.is_masked or tok.column_id != target_col_id:
                continue
            if tok.row_ref == win.seed:
                continue  # the seed's own unmasked cells are not labels
            seen.add(tok.out_link_rows)
            if seed_entity is not None and tok.out_link_rows == seed_entity:
                n_self += 1
            else:
                n_other += 1
        selfs.append(n_self)
        others.append(n_other)
        ents.append(len(seen))
    def _ms(xs):
        a = np.asarray(xs, dtype=np.float64)
        return (float(a.mean()), float(a.std())) if len(a) else (0.0, 0.0)
    sm, ss = _ms(selfs)
    om, osd = _ms(others)
    em, es = _ms(ents)
    return LabelStats(sm, ss, om, osd, em, es)
