"""Reconstruction and contrastive losses.

All reconstruction terms are computed per image and averaged over the batch.
Contrastive losses average over the anchors that could be formed; anchors the
memory bank cannot serve are counted as skipped instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .bank import MemoryBank


@dataclass
class ReconLossWeights:
    alpha: float = 6.0  # invalid (hole) L1
    beta: float = 0.05  # perceptual
    gamma: float = 1.0  # style on the raw output
    delta: float = 1.0  # style on the composite
    eta: float = 0.1  # total variation

    def validate(self) -> None:
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


@dataclass
class ContrastConfig:
    tau: float = 0.1
    n_negatives: int = 16
    w1: float = 0.002  # intra-contrastive weight
    w2: float = 0.001  # inter-contrastive weight

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be at least 1")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("contrastive weights must be non-negative")


def _check_binary(mask: torch.Tensor) -> None:
    if bool(((mask != 0) & (mask != 1)).any()):
        raise ValueError("mask must be binary")


def valid_l1(gt, out, mask):
    return ((mask * (out - gt)).abs().sum(dim=(1, 2, 3)) / gt[0].numel()).mean()


def invalid_l1(gt, out, mask):
    return (((1 - mask) * (out - gt)).abs().sum(dim=(1, 2, 3)) / gt[0].numel()).mean()


def composite(gt, out, mask):
    return mask * gt + (1 - mask) * out


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    b, c, h, w = feat.shape
    phi = feat.reshape(b, c, h * w)
    return phi @ phi.transpose(1, 2) / (c * h * w)


def perceptual_loss(feats_out, feats_comp, feats_gt):
    total = 0.0
    for fo, fc, fg in zip(feats_out, feats_comp, feats_gt):
        n = fg[0].numel()
        total = total + ((fo - fg).abs().sum(dim=(1, 2, 3)) + (fc - fg).abs().sum(dim=(1, 2, 3))) / n
    return total.mean()


def style_loss(feats_x, feats_gt):
    total = 0.0
    for fx, fg in zip(feats_x, feats_gt):
        c = fg.shape[1]
        total = total + (gram_matrix(fx) - gram_matrix(fg)).abs().sum(dim=(1, 2)) / c**2
    return total.mean()


def hole_region(mask: torch.Tensor) -> torch.Tensor:
    """Holes dilated by one pixel (3x3 neighbourhood)."""
    return (F.max_pool2d(1 - mask, 3, stride=1, padding=1) > 0).to(mask.dtype)


def tv_loss(comp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Total variation of ``comp`` over pixel pairs lying inside the dilated hole region."""
    region = hole_region(mask)
    ph = region[..., :, 1:] * region[..., :, :-1]
    pv = region[..., 1:, :] * region[..., :-1, :]
    dh = (comp[..., :, 1:] - comp[..., :, :-1]).abs()
    dv = (comp[..., 1:, :] - comp[..., :-1, :]).abs()
    th = (ph * dh).sum(dim=(1, 2, 3)) / ph.sum(dim=(1, 2, 3)).clamp(min=1.0)
    tv = (pv * dv).sum(dim=(1, 2, 3)) / pv.sum(dim=(1, 2, 3)).clamp(min=1.0)
    return (th + tv).mean()


def recon_loss(
    gt: torch.Tensor,
    out: torch.Tensor,
    mask: torch.Tensor,
    weights: ReconLossWeights,
    extractor: Callable[[torch.Tensor], Sequence[torch.Tensor]],
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Six-term inpainting loss on ``(B, 1, H, W)`` tensors. Returns the total and each term."""
    if gt.shape != out.shape or gt.shape != mask.shape:
        raise ValueError("gt, out and mask must share a shape")
    _check_binary(mask)
    comp = composite(gt, out, mask)
    f_out, f_comp = extractor(out), extractor(comp)
    with torch.no_grad():
        f_gt = [f.detach() for f in extractor(gt)]
    parts = {
        "valid": valid_l1(gt, out, mask),
        "invalid": invalid_l1(gt, out, mask),
        "perceptual": perceptual_loss(f_out, f_comp, f_gt),
        "style_out": style_loss(f_out, f_gt),
        "style_comp": style_loss(f_comp, f_gt),
        "tv": tv_loss(comp, mask),
    }
    total = (
        parts["valid"]
        + weights.alpha * parts["invalid"]
        + weights.beta * parts["perceptual"]
        + weights.gamma * parts["style_out"]
        + weights.delta * parts["style_comp"]
        + weights.eta * parts["tv"]
    )
    return total, parts


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis (broadcasting). Zero vectors are an error."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("zero-norm vector in contrastive loss")
    return (a * b).sum(dim=-1) / (na * nb)


def nt_xent(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """NT-Xent with the positive included in the denominator.

    ``anchor`` and ``positive`` are ``(A, D)`` (or ``(D,)``), ``negatives`` ``(A, N, D)``
    (or ``(N, D)``). Returns one loss per anchor.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s_pos = cosine(anchor, positive) / tau
    s_neg = cosine(anchor.unsqueeze(-2), negatives) / tau
    logits = torch.cat([s_pos.unsqueeze(-1), s_neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - s_pos


def intra_contrastive_loss(
    z_i: torch.Tensor,
    z_j: torch.Tensor,
    ids: Sequence[int],
    bank: MemoryBank,
    project: Callable[[torch.Tensor], torch.Tensor],
    cfg: ContrastConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, int]:
    """Two views of each image form the positive pair; negatives come from the bank.

    Each ordering (i->j, j->i) draws its own ``N`` negatives, excluding entries of
    the anchor's own image. Returns ``(loss, skipped_images)``.
    """
    anchors, positives, negs, skipped = [], [], [], 0
    for b, image_id in enumerate(ids):
        draws = []
        for _ in range(2):
            sample, complete = bank.sample_negatives(lambda e, i=image_id: e.image_id != i, cfg.n_negatives, rng)
            if not complete:
                break
            draws.append(sample)
        if len(draws) < 2:
            skipped += 1
            continue
        anchors += [z_i[b], z_j[b]]
        positives += [z_j[b], z_i[b]]
        negs += draws
    if not anchors:
        return z_i.new_zeros(()), skipped
    neg_z = project(torch.stack([torch.stack(d) for d in negs]).to(z_i.dtype))
    loss = nt_xent(torch.stack(anchors), torch.stack(positives), neg_z, cfg.tau)
    return loss.mean(), skipped


def inter_contrastive_loss(
    z: torch.Tensor,
    ids: Sequence[int],
    labels: Sequence[int | None],
    bank: MemoryBank,
    project: Callable[[torch.Tensor], torch.Tensor],
    cfg: ContrastConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, int]:
    """Cluster-guided NT-Xent: positive shares the anchor's cluster, negatives do not.

    Anchors without a label, without a same-cluster partner in the bank, or with
    fewer than ``N`` cross-cluster entries available are skipped.
    """
    anchors, pos, negs, skipped = [], [], [], 0
    for b, (image_id, label) in enumerate(zip(ids, labels)):
        if label is None:
            skipped += 1
            continue
        p, ok_p = bank.sample_negatives(
            lambda e, i=image_id, c=label: e.label == c and e.image_id != i, 1, rng
        )
        n, ok_n = bank.sample_negatives(lambda e, c=label: e.label is not None and e.label != c, cfg.n_negatives, rng)
        if not (ok_p and ok_n):
            skipped += 1
            continue
        anchors.append(z[b])
        pos.append(p[0])
        negs.append(torch.stack(n))
    if not anchors:
        return z.new_zeros(()), skipped
    pos_z = project(torch.stack(pos).to(z.dtype))
    neg_z = project(torch.stack(negs).to(z.dtype))
    loss = nt_xent(torch.stack(anchors), pos_z, neg_z, cfg.tau)
    return loss.mean(), skipped


def combined_loss(recon, intra, inter, w1: float, w2: float):
    return recon + w1 * intra + w2 * inter
