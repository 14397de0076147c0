"""Cross-modal affinity alignment: view averaging, affinity matrix, contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CLASS_NAMES, MODALITIES
from .errors import DimensionError, ValidationError

AFF_MODES = ("instance", "class")


def average_views(orig: Mapping[str, Tensor], deg: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Elementwise midpoint of original and degraded embeddings, per modality."""
    if deg is None:
        return dict(orig)
    if set(deg) != set(orig):
        raise ValidationError(
            f"degraded view covers {sorted(deg)} but original covers {sorted(orig)}")
    out = {}
    for m, e in orig.items():
        d = deg[m]
        if e.shape != d.shape:
            raise DimensionError(f"average_views[{m}]", e.shape, d.shape)
        out[m] = ad.scale(ad.add(e, d), 0.5)
    return out


def stack_modalities(embeddings: Mapping[str, Tensor], order: Sequence[str] | None = None) -> Tensor:
    """Interleave per-modality (B x d) blocks into a (B*m x d) matrix; row b*m + i is modality i of sample b."""
    order = [m for m in (order or MODALITIES) if m in embeddings]
    if not order:
        raise ValidationError("no modality embeddings to stack")
    blocks = [embeddings[m] for m in order]
    B, d = blocks[0].shape
    for m, e in zip(order, blocks):
        if e.shape != (B, d):
            raise DimensionError(f"stack[{m}]", (B, d), e.shape)
    return ad.reshape(ad.concat(blocks, axis=1), (B * len(order), d))


@dataclass
class AffinityMatrix:
    values: Tensor
    batch_size: int
    n_modalities: int
    modalities: tuple[str, ...] = MODALITIES

    @property
    def array(self) -> np.ndarray:
        return self.values.data

    def block(self, b1, b2) -> np.ndarray:
        m = self.n_modalities
        return self.array[b1 * m:(b1 + 1) * m, b2 * m:(b2 + 1) * m]


def affinity(stacked: Tensor, batch_size=None, modalities: Sequence[str] = MODALITIES) -> AffinityMatrix:
    """(1 + cosine) / 2 between every pair of stacked rows."""
    stacked = ad.as_tensor(stacked)
    if stacked.data.ndim != 2:
        raise DimensionError("affinity", stacked.shape, detail="expected (B*m, d)")
    n = stacked.shape[0]
    if batch_size is None:
        batch_size = n // len(modalities)
    m = n // batch_size if batch_size else 0
    if batch_size < 1 or m * batch_size != n:
        raise DimensionError("affinity", stacked.shape, (batch_size, len(modalities)),
                             detail="rows must equal batch_size * n_modalities")
    normed = ad.l2_normalize(stacked)
    gram = normed @ ad.transpose(normed)
    # rounding can push unit-vector dot products a hair outside [-1, 1]
    values = ad.clip(ad.add(ad.scale(gram, 0.5), 0.5), 0.0, 1.0)
    names = tuple(modalities) if len(modalities) == m else tuple(f"M{i}" for i in range(m))
    return AffinityMatrix(values, batch_size, m, names)


def pair_masks(batch_size, n_modalities, labels=None, mode="instance"):
    """Boolean (positive, negative) masks over the stacked affinity matrix.

    Only cross-modality entries (i != j) participate.  ``instance`` pairs
    the modalities of one activity as positives and everything across
    activities as negatives; ``class`` treats same-label activities as positives.
    """
    if mode not in AFF_MODES:
        raise ValidationError(f"aff-mode must be one of {AFF_MODES}, got {mode!r}")
    m = n_modalities
    sample = np.repeat(np.arange(batch_size), m)
    modality = np.tile(np.arange(m), batch_size)
    cross_mod = modality[:, None] != modality[None, :]
    if mode == "instance":
        same = sample[:, None] == sample[None, :]
    else:
        if labels is None:
            raise ValidationError("class-mode affinity loss needs labels")
        lab = np.repeat(np.asarray(labels), m)
        same = lab[:, None] == lab[None, :]
    return same & cross_mod, ~same & cross_mod


def contrastive_loss(A: AffinityMatrix, batch_size=None, labels=None, mode="instance") -> Tensor:
    """(1/B) * [sum over positives (1 - A)^2 + sum over negatives A^2], ordered pairs."""
    B = A.batch_size if batch_size is None else batch_size
    m = A.n_modalities
    if A.values.shape != (B * m, B * m):
        raise DimensionError("contrastive_loss", A.values.shape, (B * m, B * m))
    pos, neg = pair_masks(B, m, labels, mode)
    pull = ad.mul(ad.square(ad.sub(1.0, A.values)), pos.astype(np.float64))
    push = ad.mul(ad.square(A.values), neg.astype(np.float64))
    return ad.scale(ad.sum_(ad.add(pull, push)), 1.0 / B)


def alignment_loss(embeddings: Mapping[str, Tensor], labels=None, mode="instance") -> tuple[Tensor, AffinityMatrix]:
    order = [m for m in MODALITIES if m in embeddings]
    B = embeddings[order[0]].shape[0]
    A = affinity(stack_modalities(embeddings, order), B, order)
    return contrastive_loss(A, B, labels, mode), A


@dataclass
class LossBreakdown:
    l_ce: float
    l_aff: float
    l_total: float
    alpha: float
    total: Tensor | None = None


def total_loss(l_ce, l_aff, alpha=0.25) -> LossBreakdown:
    """Joint objective l_ce + alpha * l_aff; keeps the differentiable total when given tensors."""
    if alpha < 0:
        raise ValidationError(f"alpha must be non-negative, got {alpha}")
    is_tensor = isinstance(l_ce, Tensor) or isinstance(l_aff, Tensor)
    if is_tensor:
        ce = ad.as_tensor(l_ce)
        aff = ad.as_tensor(l_aff)
        total = ce if alpha == 0 else ad.add(ce, ad.scale(aff, alpha))
        return LossBreakdown(ce.item(), aff.item(), total.item(), alpha, total)
    ce, aff = float(l_ce), float(l_aff)
    return LossBreakdown(ce, aff, ce + alpha * aff, alpha)


# ---------------------------------------------------------------- trajectory snapshots

def modality_pairs(modalities=MODALITIES):
    return list(combinations(modalities, 2))


def affinity_snapshot(A: AffinityMatrix, labels, modalities: Sequence[str] | None = None) -> list[dict]:
    """Mean intra-activity affinity for each unordered modality pair, per class group and overall."""
    labels = np.asarray(labels)
    B, m = A.batch_size, A.n_modalities
    if labels.shape != (B,):
        raise DimensionError("affinity_snapshot", (B,), labels.shape)
    mods = tuple(modalities or A.modalities)
    arr = A.array
    idx = np.arange(B) * m
    groups = [("all", np.ones(B, dtype=bool))]
    groups += [(CLASS_NAMES[c], labels == c) for c in range(len(CLASS_NAMES))]
    rows = []
    for name, sel in groups:
        if not sel.any():
            continue
        for (i, mi), (j, mj) in combinations(enumerate(mods), 2):
            vals = arr[idx[sel] + i, idx[sel] + j]
            rows.append({"class_group": name, "modality_pair": f"{mi}-{mj}",
                         "mean_affinity": float(vals.mean()), "count": int(sel.sum())})
    return rows


def mean_positive_affinity(A: AffinityMatrix) -> float:
    pos, _ = pair_masks(A.batch_size, A.n_modalities)
    return float(A.array[pos].mean())
