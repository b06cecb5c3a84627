"""The four relational visibility masks and the masked transformer block.

For a window of n cell tokens, visibility is derived purely from token
metadata (column, row, out-links):

  column:   k visible to q iff Col(k) == Col(q)
  feature:  k visible to q iff Row(k) == Row(q) or Row(k) in OutLinks(q)
  neighbor: k visible to q iff Row(q) in OutLinks(k)
  full:     everything visible

Masking is realized as -inf logits, so hidden keys receive exactly zero
attention weight.  A query with no visible keys at all (a childless
row's neighbor mask) outputs the zero vector; the residual path carries
its state through the block unchanged.

The block applies the four attentions in a fixed order, each followed
by a normalize-then-add residual, then a gated MLP sublayer:

    X <- X + Norm(MHA(X; M_column))
    X <- X + Norm(MHA(X; M_feature))
    X <- X + Norm(MHA(X; M_neighbor))
    X <- X + Norm(MHA(X; M_full))
    X <- X + Norm(MLP(X))

Norm is RMS normalization with a learned gain.  Normalizing the
sublayer output (post-norm-into-residual) is intentional; a pre-norm
variant is available behind a config switch for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .context_sampler import ContextWindow
from .errors import NumericError

ATTENTION_KINDS = ("column", "feature", "neighbor", "full")

_ROW_SHIFT = 40  # row uid = table_id << 40 | row_index


@dataclass(frozen=True)
class MaskSet:
    """Boolean visibility matrices [n, n]; entry [q, k] means key k is
    visible to query q."""

    column: np.ndarray
    feature: np.ndarray
    neighbor: np.ndarray
    full: np.ndarray

    def by_kind(self, kind: str) -> np.ndarray:
        return getattr(self, kind)

    def stacked(self) -> np.ndarray:
        return np.stack([self.column, self.feature, self.neighbor, self.full])


def _row_uid(ref) -> int:
    return (ref.table_id << _ROW_SHIFT) | ref.row_index


def build_masks(window: ContextWindow) -> MaskSet:
    """Evaluate the four set-membership definitions on a window."""
    n = len(window.tokens)
    cols = np.fromiter((t.column_id for t in window.tokens), dtype=np.int64, count=n)
    rows = np.fromiter((_row_uid(t.row_ref) for t in window.tokens), dtype=np.int64, count=n)
    k_max = max((len(t.out_link_rows) for t in window.tokens), default=0)
    out = np.full((n, max(k_max, 1)), -1, dtype=np.int64)
    for i, t in enumerate(window.tokens):
        for j, ref in enumerate(t.out_link_rows):
            out[i, j] = _row_uid(ref)

    same_col = cols[:, None] == cols[None, :]
    same_row = rows[:, None] == rows[None, :]
    # link[q, k] = Row(k) in OutLinks(q)
    link = (out[:, None, :] == rows[None, :, None]).any(-1)
    return MaskSet(
        column=same_col,
        feature=same_row | link,
        neighbor=link.T.copy(),
        full=np.ones((n, n), dtype=bool),
    )


def masks_to_tensor(mask_sets: list[MaskSet], n_pad: int) -> torch.Tensor:
    """Stack per-window masks into [B, 4, n_pad, n_pad]; padding rows and
    columns are all-hidden."""
    B = len(mask_sets)
    out = torch.zeros(B, 4, n_pad, n_pad, dtype=torch.bool)
    for b, ms in enumerate(mask_sets):
        n = ms.column.shape[0]
        out[b, :, :n, :n] = torch.from_numpy(ms.stacked())
    return out


def mask_grid_text(mask: np.ndarray) -> str:
    """Portable text rendering of one mask, for golden tests and debug
    dumps: '#' visible, '.' hidden, one query row per line."""
    return "\n".join("".join("#" if v else "." for v in row) for row in mask)


class MaskedMultiHeadAttention(nn.Module):
    """Scaled dot-product attention over visible keys only.

    Projections carry no biases: zero input rows (padding) produce zero
    outputs bitwise, and hidden keys cannot contribute even at zero.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError("model dim must be divisible by head count")
        self.d = d
        self.heads = heads
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """x: [B, n, d]; mask: [B, n, n] bool. All-hidden query rows get
        the zero vector (they are temporarily pointed at themselves so
        the softmax stays finite, then zeroed exactly)."""
        B, n, d = x.shape
        hd = d // self.heads
        q = self.q_proj(x).view(B, n, self.heads, hd).transpose(1, 2)
        k = self.k_proj(x).view(B, n, self.heads, hd).transpose(1, 2)
        v = self.v_proj(x).view(B, n, self.heads, hd).transpose(1, 2)
        m = mask[:, None, :, :]  # broadcast over heads
        any_visible = m.any(-1, keepdim=True)
        eye = torch.eye(n, dtype=torch.bool, device=x.device).view(1, 1, n, n)
        safe = m | (~any_visible & eye)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=safe)
        y = torch.where(any_visible, y, 0.0)
        y = y.transpose(1, 2).reshape(B, n, d)
        return self.o_proj(y)


def masked_attention(x: torch.Tensor, params: MaskedMultiHeadAttention,
                     mask: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Single-window convenience: x [n, d], mask [n, n] -> [n, d]."""
    if not torch.isfinite(x).all():
        raise NumericError("non-finite attention input")
    m = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    return params(x[None], m[None])[0]


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * scale * self.gain


class GatedMLP(nn.Module):
    """SiLU-gated MLP, hidden width 4d, no biases."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.w_gate = nn.Linear(d, hidden, bias=False)
        self.w_up = nn.Linear(d, hidden, bias=False)
        self.w_down = nn.Linear(hidden, d, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class TransformerBlock(nn.Module):
    """One block: the (possibly ablated) attention sublayers in fixed
    order, then the MLP sublayer. `kinds` lists the attention types this
    block runs; removing one drops its parameters and its norm."""

    def __init__(self, d: int, heads: int, mlp_ratio: int = 4,
                 kinds: tuple[str, ...] = ATTENTION_KINDS,
                 pre_norm: bool = False):
        super().__init__()
        unknown = set(kinds) - set(ATTENTION_KINDS)
        if unknown:
            raise ValueError(f"unknown attention kinds {sorted(unknown)}")
        self.kinds = tuple(k for k in ATTENTION_KINDS if k in kinds)
        self.pre_norm = pre_norm
        self.attn = nn.ModuleDict(
            {k: MaskedMultiHeadAttention(d, heads) for k in self.kinds}
        )
        self.attn_norm = nn.ModuleDict({k: RMSNorm(d) for k in self.kinds})
        self.mlp = GatedMLP(d, mlp_ratio * d)
        self.mlp_norm = RMSNorm(d)

    def forward(self, x: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """x: [B, n, d]; masks: [B, 4, n, n] indexed in ATTENTION_KINDS
        order regardless of which kinds this block keeps."""
        for kind in self.kinds:
            m = masks[:, ATTENTION_KINDS.index(kind)]
            if self.pre_norm:
                x = x + self.attn[kind](self.attn_norm[kind](x), m)
            else:
                x = x + self.attn_norm[kind](self.attn[kind](x, m))
        if self.pre_norm:
            x = x + self.mlp(self.mlp_norm(x))
        else:
            x = x + self.mlp_norm(self.mlp(x))
        return x


def transformer_block(x: torch.Tensor, block: TransformerBlock,
                      masks: MaskSet) -> torch.Tensor:
    """Single-window convenience: x [n, d], MaskSet -> [n, d]."""
    if not torch.isfinite(x).all():
        raise NumericError("non-finite block input")
    m = torch.from_numpy(masks.stacked())[None]
    out = block(x[None], m)[0]
    if not torch.isfinite(out).all():
        raise NumericError("non-finite block activations")
    return out
