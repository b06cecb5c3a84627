"""Cell tokens to vectors: value encoding, schema phrases, mask vectors.

A cell embedding is W_d r + W e, where r is the datatype-specific raw
representation of the value (z-scored scalar for numeric/boolean/
datetime, a frozen text embedding for text), e is the embedding of the
schema phrase "<column> of <table>", W_d is a per-datatype projection
and W is shared.  Masked cells skip the value path entirely and use a
learned per-datatype mask vector instead, so the embedding carries no
information about the hidden value.

There is no positional encoding anywhere: what a token "is" comes only
from (value, column, table, masked flag); where it sits in the window
is irrelevant.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
import torch
from torch import nn

from .context_sampler import CellToken, ContextWindow
from .errors import ConfigError, DataError
from .relational_store import (
    BOOLEAN,
    DATETIME,
    NUMERIC,
    TEXT,
    MASKABLE_TAGS,
    RelationalDatabase,
)

SIGMA_FLOOR = 1e-6
CLIP = 20.0  # z-scores are clipped to [-CLIP, CLIP] before projection


@dataclass(frozen=True)
class NormStats:
    """Train-split normalization statistics, frozen after fitting.

    Scalar columns (numeric and boolean) carry a per-column mean/std;
    datetime cells share one global pair, pooled over every datetime
    cell visible in the training split (row timestamps included, since
    timestamp columns are ordinary datetime cells).
    """

    col_mean: dict[int, float]
    col_std: dict[int, float]
    dt_mean: float
    dt_std: float

    def normalize(self, col_id: int, tag: str, value: float) -> float:
        if tag == DATETIME:
            mu, sd = self.dt_mean, self.dt_std
        elif tag in MASKABLE_TAGS:
            try:
                mu, sd = self.col_mean[col_id], self.col_std[col_id]
            except KeyError:
                raise DataError(f"no normalization stats for column id {col_id}") from None
        else:
            raise DataError(f"no scalar normalization for datatype {tag!r}")
        return (float(value) - mu) / max(sd, SIGMA_FLOOR)


def fit_norm_stats(db: RelationalDatabase, train_cutoff: float) -> NormStats:
    """Population mean/std per numeric/boolean column over the rows
    visible at `train_cutoff` (timestamp <= cutoff, or no timestamp);
    a single global pair over all train-visible datetime cells.

    Columns with zero non-missing training values get (0, 1) and a
    warning; they carry no usable scale.
    """
    col_mean: dict[int, float] = {}
    col_std: dict[int, float] = {}
    dt_values = []
    has_dt_columns = any(
        c.datatype.tag == DATETIME
        for td in db.tables for c in td.schema.feature_columns
    )
    for td in db.tables:
        in_train = td.timestamps <= train_cutoff  # -inf rows always pass
        for pos, col in enumerate(td.schema.feature_columns):
            tag = col.datatype.tag
            if tag == TEXT:
                continue
            live = in_train & ~td.feat_missing[:, pos]
            vals = td.feat_scalar[live, pos]
            if tag == DATETIME:
                dt_values.append(vals)
                continue
            col_id = int(td.feat_col_ids[pos])
            if len(vals) == 0:
                warnings.warn(
                    f"column {td.schema.name}.{col.name}: no training values, "
                    "stats default to (0, 1)"
                )
                col_mean[col_id], col_std[col_id] = 0.0, 1.0
            else:
                col_mean[col_id] = float(vals.mean())
                col_std[col_id] = float(vals.std())  # population std
    pooled = np.concatenate(dt_values) if dt_values else np.zeros(0)
    if len(pooled) == 0:
        if has_dt_columns:
            warnings.warn("no training datetime cells, stats default to (0, 1)")
        dt_mean, dt_std = 0.0, 1.0
    else:
        dt_mean, dt_std = float(pooled.mean()), float(pooled.std())
    return NormStats(col_mean, col_std, dt_mean, dt_std)


# -- text embedding -----------------------------------------------------

class TextEmbedder(Protocol):
    name: str
    dim: int

    def __call__(self, text: str) -> np.ndarray: ...

    @property
    def identity(self) -> str: ...


class NgramHashEmbedder:
    """Deterministic frozen text embedder: character 3-grams hashed
    into `dim` signed buckets (blake2b), then L2-normalized.

    Identical across platforms and processes; strings shorter than one
    3-gram (after '#' boundary padding) map to the zero vector.
    """

    name = "ngram-hash-v1"

    def __init__(self, dim: int = 384):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    @property
    def identity(self) -> str:
        return f"{self.name}/{self.dim}"

    def __call__(self, text: str) -> np.ndarray:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        s = "#" + " ".join(str(text).lower().split()) + "#"
        acc = np.zeros(self.dim, dtype=np.float64)
        for i in range(len(s) - 2):
            gram = s[i:i + 3].encode("utf-8")
            digest = hashlib.blake2b(gram, digest_size=9).digest()
            bucket = int.from_bytes(digest[:8], "little") % self.dim
            sign = 1.0 if digest[8] & 1 else -1.0
            acc[bucket] += sign
        norm = np.linalg.norm(acc)
        if norm > 0:
            acc /= norm
        vec = acc.astype(np.float32)
        vec.flags.writeable = False
        self._cache[text] = vec
        return vec


def schema_phrase(column_name: str, table_name: str) -> str:
    return f"{column_name} of {table_name}"


def schema_phrases(
    db: RelationalDatabase,
    embedder: TextEmbedder,
    name_map: Optional[dict[str, str]] = None,
) -> np.ndarray:
    """Phrase embedding per column id, shape [n_columns, d_text].

    `name_map` substitutes column/table names before embedding; it is
    how name-shuffling ablations corrupt the schema semantics without
    touching mask structure.
    """
    def rename(n: str) -> str:
        return name_map.get(n, n) if name_map else n

    out = np.zeros((len(db.columns), embedder.dim), dtype=np.float32)
    for info in db.columns:
        phrase = schema_phrase(rename(info.name), rename(info.table_name))
        out[info.col_id] = embedder(phrase)
    return out


# -- value encoding -----------------------------------------------------

def encode_value(token: CellToken, stats: NormStats, embedder: TextEmbedder):
    """Raw representation r for one token: clipped z-score scalar for
    numeric/boolean/datetime, an embedding vector for text, or None for
    a masked token (the mask-vector path carries no value)."""
    if token.is_masked:
        return None
    if token.tag == TEXT:
        return embedder(token.value)
    r = stats.normalize(token.column_id, token.tag, token.value)
    return float(np.clip(r, -CLIP, CLIP))


# -- learned codec weights (torch) --------------------------------------

TAG_TO_CODE = {NUMERIC: 0, BOOLEAN: 1, DATETIME: 2, TEXT: 3}
PAD_CODE = -1


class CellEncoder(nn.Module):
    """CodecWeights: per-datatype value projections W_d, the shared
    schema projection W, and per-maskable-datatype mask vectors m_d."""

    def __init__(self, d: int, d_text: int):
        super().__init__()
        self.d = d
        self.d_text = d_text
        init = lambda *shape: nn.Parameter(torch.randn(*shape) * 0.02)
        self.w_numeric = init(d)
        self.w_boolean = init(d)
        self.w_datetime = init(d)
        self.w_text = init(d_text, d)
        self.w_schema = init(d_text, d)
        self.m_numeric = init(d)
        self.m_boolean = init(d)

    def forward(self, tag: torch.Tensor, r_scalar: torch.Tensor,
                r_text: torch.Tensor, masked: torch.Tensor,
                phrase: torch.Tensor) -> torch.Tensor:
        """Embed a padded token batch.

        tag [B,N] int (PAD_CODE for padding), r_scalar [B,N], r_text
        [B,N,d_text], masked [B,N] bool, phrase [B,N,d_text]. Padding
        slots must come in as zeros in r_*/phrase, which keeps their
        embeddings exactly zero.
        """
        unmasked = ~masked
        scalar_w = {0: self.w_numeric, 1: self.w_boolean, 2: self.w_datetime}
        x = phrase @ self.w_schema
        for code, w in scalar_w.items():
            sel = (tag == code) & unmasked
            x = x + torch.where(sel[..., None], r_scalar[..., None] * w, 0.0)
        text_sel = (tag == TAG_TO_CODE[TEXT]) & unmasked
        x = x + torch.where(text_sel[..., None], r_text @ self.w_text, 0.0)
        for code, m in ((0, self.m_numeric), (1, self.m_boolean)):
            sel = (tag == code) & masked
            x = x + torch.where(sel[..., None], m, 0.0)
        return x


def embed_token(token: CellToken, r, phrase_vec: np.ndarray,
                encoder: CellEncoder) -> np.ndarray:
    """Single-token embedding through the same path as batch encoding:
    W_d r + W e for unmasked tokens, m_d + W e for masked ones."""
    code = TAG_TO_CODE[token.tag]
    tag = torch.tensor([[code]])
    masked = torch.tensor([[token.is_masked]])
    r_scalar = torch.zeros(1, 1)
    r_text = torch.zeros(1, 1, encoder.d_text)
    if not token.is_masked:
        if token.tag == TEXT:
            r_text[0, 0] = torch.from_numpy(np.asarray(r, dtype=np.float32))
        else:
            r_scalar[0, 0] = float(r)
    elif token.tag not in MASKABLE_TAGS:
        raise DataError(f"masked token of unmaskable datatype {token.tag!r}")
    phrase = torch.from_numpy(np.asarray(phrase_vec, dtype=np.float32)).view(1, 1, -1)
    with torch.no_grad():
        out = encoder(tag, r_scalar, r_text, masked, phrase)
    return out[0, 0].numpy()


# -- batched window encoding --------------------------------------------

@dataclass
class EncodedBatch:
    """Dense padded arrays for a batch of windows, ready for tensors.

    Target bookkeeping: one record per masked cell, in (item, position)
    order: (item, pos, tag code, normalized target r, is_seed_target).
    """

    tag: np.ndarray        # [B,N] int8, PAD_CODE on padding
    r_scalar: np.ndarray   # [B,N] float32
    r_text: np.ndarray     # [B,N,d_text] float32
    masked: np.ndarray     # [B,N] bool
    phrase: np.ndarray     # [B,N,d_text] float32
    pad: np.ndarray        # [B,N] bool, True where padding
    col_ids: np.ndarray    # [B,N] int64, -1 on padding
    targets: list          # list of TargetRecord
    windows: list          # the source windows, same order


@dataclass(frozen=True)
class TargetRecord:
    item: int
    pos: int
    tag: str
    r: float               # normalized target value
    is_seed_target: bool   # the seed row's masked label cell


def encode_windows(
    windows: list[ContextWindow],
    stats: NormStats,
    embedder: TextEmbedder,
    phrases: np.ndarray,
) -> EncodedBatch:
    """Encode windows into padded arrays. Values of masked cells are
    never read for the value path; they only become loss targets."""
    B = len(windows)
    N = max((len(w) for w in windows), default=1)
    N = max(N, 1)
    d_text = phrases.shape[1]
    tag = np.full((B, N), PAD_CODE, dtype=np.int8)
    r_scalar = np.zeros((B, N), dtype=np.float32)
    r_text = np.zeros((B, N, d_text), dtype=np.float32)
    masked = np.zeros((B, N), dtype=bool)
    phrase = np.zeros((B, N, d_text), dtype=np.float32)
    pad = np.ones((B, N), dtype=bool)
    col_ids = np.full((B, N), -1, dtype=np.int64)
    targets: list[TargetRecord] = []
    for b, win in enumerate(windows):
        for p, tok in enumerate(win.tokens):
            tag[b, p] = TAG_TO_CODE[tok.tag]
            pad[b, p] = False
            col_ids[b, p] = tok.column_id
            phrase[b, p] = phrases[tok.column_id]
            if tok.is_masked:
                if tok.tag not in MASKABLE_TAGS:
                    raise DataError(
                        f"masked token of unmaskable datatype {tok.tag!r}"
                    )
                masked[b, p] = True
                r = stats.normalize(tok.column_id, tok.tag, tok.value)
                targets.append(TargetRecord(
                    item=b, pos=p, tag=tok.tag, r=float(r),
                    is_seed_target=(tok.row_ref == win.seed),
                ))
                continue
            r = encode_value(tok, stats, embedder)
            if tok.tag == TEXT:
                r_text[b, p] = r
            else:
                r_scalar[b, p] = r
    return EncodedBatch(tag, r_scalar, r_text, masked, phrase, pad,
                        col_ids, targets, list(windows))
