"""End-to-end model: cell embeddings, masked-attention blocks, decoders.

The forward pass embeds every cell of a window, runs the block stack,
reads the hidden state at each masked position, and decodes it with the
head matching the column's datatype: numeric cells get a scalar in
normalized target space, boolean cells get a logit.  Training minimizes
Huber loss (numeric) and binary cross-entropy against 1{r > 0}
(boolean), averaged over all masked cells of the batch in one mean.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .cell_codec import CellEncoder, EncodedBatch
from .errors import ConfigError, DataError, NumericError
from .relational_attention import (
    ATTENTION_KINDS,
    TransformerBlock,
    build_masks,
    masks_to_tensor,
)
from .relational_store import BOOLEAN, NUMERIC
from .streams import mix


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    d: int = 64
    heads: int = 4
    d_text: int = 384
    mlp_ratio: int = 4
    pre_norm: bool = False
    ablate: tuple[str, ...] = ()  # attention kinds removed from every block
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.d % self.heads:
            raise ConfigError("model dim must be divisible by head count")
        unknown = set(self.ablate) - set(ATTENTION_KINDS)
        if unknown:
            raise ConfigError(f"unknown ablation kinds {sorted(unknown)}")
        object.__setattr__(self, "ablate", tuple(sorted(self.ablate)))

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(k for k in ATTENTION_KINDS if k not in self.ablate)

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if "ablate" in d:
            d["ablate"] = tuple(d["ablate"])
        return ModelConfig(**d)


class RTModel(nn.Module):
    """All trainable state: codec weights, block stack, decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = CellEncoder(cfg.d, cfg.d_text)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d, cfg.heads, cfg.mlp_ratio,
                             kinds=cfg.kinds, pre_norm=cfg.pre_norm)
            for _ in range(cfg.layers)
        )
        self.decoders = nn.ModuleDict({
            NUMERIC: nn.Linear(cfg.d, 1, bias=True),
            BOOLEAN: nn.Linear(cfg.d, 1, bias=True),
        })
        for dec in self.decoders.values():
            nn.init.normal_(dec.weight, std=0.02)
            nn.init.zeros_(dec.bias)

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: ModelConfig, seed: int = 0) -> RTModel:
    """Construct a model with weights drawn from a stream keyed by the
    seed, independent of global torch RNG state."""
    gen_state = torch.get_rng_state()
    torch.manual_seed(mix(seed, 0xC0DEC) % (2**63))
    model = RTModel(cfg)
    torch.set_rng_state(gen_state)
    return model


@dataclass
class TensorBatch:
    """Padded torch views of an EncodedBatch plus the stacked masks."""

    tag: torch.Tensor       # [B,N] long
    r_scalar: torch.Tensor  # [B,N]
    r_text: torch.Tensor    # [B,N,d_text]
    masked: torch.Tensor    # [B,N] bool
    phrase: torch.Tensor    # [B,N,d_text]
    masks: torch.Tensor     # [B,4,N,N] bool
    targets: list           # TargetRecord, batch order

    def to(self, dtype: torch.dtype) -> "TensorBatch":
        return TensorBatch(self.tag, self.r_scalar.to(dtype),
                           self.r_text.to(dtype), self.masked,
                           self.phrase.to(dtype), self.masks, self.targets)


def prepare_batch(encoded: EncodedBatch, dtype: torch.dtype = torch.float32) -> TensorBatch:
    mask_sets = [build_masks(w) for w in encoded.windows]
    n_pad = encoded.tag.shape[1]
    return TensorBatch(
        tag=torch.from_numpy(encoded.tag.astype(np.int64)),
        r_scalar=torch.from_numpy(encoded.r_scalar).to(dtype),
        r_text=torch.from_numpy(encoded.r_text).to(dtype),
        masked=torch.from_numpy(encoded.masked),
        phrase=torch.from_numpy(encoded.phrase).to(dtype),
        masks=masks_to_tensor(mask_sets, n_pad),
        targets=list(encoded.targets),
    )


@dataclass
class PredictionOutput:
    """Decoder output per masked cell, aligned with `targets`.

    Boolean entries are logits; numeric entries live in normalized
    target space until de-normalized for reporting.
    """

    values: torch.Tensor       # [M]
    targets: list              # [M] TargetRecord


def forward(model: RTModel, batch: TensorBatch) -> PredictionOutput:
    """Run the stack and decode every masked cell."""
    x = model.encoder(batch.tag, batch.r_scalar, batch.r_text,
                      batch.masked, batch.phrase)
    for block in model.blocks:
        x = block(x, batch.masks)
    if not torch.isfinite(x).all():
        raise NumericError("non-finite activations in forward pass")
    if not batch.targets:
        return PredictionOutput(x.new_zeros(0), [])
    items = torch.tensor([t.item for t in batch.targets])
    positions = torch.tensor([t.pos for t in batch.targets])
    h = x[items, positions]  # [M, d]
    num = model.decoders[NUMERIC](h).squeeze(-1)
    boo = model.decoders[BOOLEAN](h).squeeze(-1)
    is_num = torch.tensor([t.tag == NUMERIC for t in batch.targets])
    values = torch.where(is_num, num, boo)
    return PredictionOutput(values, list(batch.targets))


def loss(outputs: PredictionOutput, huber_delta: float = 1.0) -> torch.Tensor:
    """Mean over all masked cells: Huber (numeric) / BCE-with-logits on
    the label 1{r > 0} (boolean)."""
    if not outputs.targets:
        raise DataError("empty masked set: nothing to score")
    values = outputs.values
    r = values.new_tensor([t.r for t in outputs.targets])
    is_num = torch.tensor([t.tag == NUMERIC for t in outputs.targets])
    huber = F.huber_loss(values, r, delta=huber_delta, reduction="none")
    bce = F.binary_cross_entropy_with_logits(
        values, (r > 0).to(values.dtype), reduction="none")
    per_cell = torch.where(is_num, huber, bce)
    return per_cell.mean()


def predict_probability(outputs: PredictionOutput) -> np.ndarray:
    """Per-seed probability for a boolean task: sigmoid of the logit at
    each window's seed-target cell, ordered by batch item."""
    recs = [(t.item, i) for i, t in enumerate(outputs.targets) if t.is_seed_target]
    if any(outputs.targets[i].tag != BOOLEAN for _, i in recs):
        raise ConfigError("predict_probability requires a boolean task")
    recs.sort()
    idx = torch.tensor([i for _, i in recs], dtype=torch.long)
    return torch.sigmoid(outputs.values.detach()[idx]).cpu().numpy()


def predict_values(outputs: PredictionOutput, mean: float, std: float) -> np.ndarray:
    """Per-seed de-normalized numeric prediction: r' * max(std, floor) + mean."""
    from .cell_codec import SIGMA_FLOOR

    recs = [(t.item, i) for i, t in enumerate(outputs.targets) if t.is_seed_target]
    if any(outputs.targets[i].tag != NUMERIC for _, i in recs):
        raise ConfigError("predict_values requires a numeric task")
    recs.sort()
    idx = torch.tensor([i for _, i in recs], dtype=torch.long)
    r = outputs.values.detach()[idx].cpu().numpy()
    return r * max(std, SIGMA_FLOOR) + mean
