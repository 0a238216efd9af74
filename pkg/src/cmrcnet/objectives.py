"""Contrastive, reconstruction and total losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .model import ForwardOutputs, ModelConfig
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class LossBreakdown:
    loss_c: Tensor
    loss_r: Tensor | None
    loss_total: Tensor
    target_matrix: np.ndarray
    recon_target: np.ndarray | None = None

    def values(self) -> dict[str, float]:
        return {
            "loss_c": self.loss_c.item(),
            "loss_r": None if self.loss_r is None else self.loss_r.item(),
            "loss_total": self.loss_total.item(),
        }


def similarity_block(f_img, f_gene) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Raw dot-product similarities ``(img.img^T, gene.gene^T, img.gene^T, gene.img^T)``."""
    f_img, f_gene = tc.as_tensor(f_img), tc.as_tensor(f_gene)
    if f_img.shape != f_gene.shape or f_img.ndim != 2:
        raise ShapeError(f"similarity_block: {f_img.shape} vs {f_gene.shape}")
    sim_ii = tc.matmul(f_img, tc.transpose(f_img))
    sim_gg = tc.matmul(f_gene, tc.transpose(f_gene))
    sim_ig = tc.matmul(f_img, tc.transpose(f_gene))
    sim_gi = tc.transpose(sim_ig)
    return sim_ii, sim_gg, sim_ig, sim_gi


def contrastive_target(sim_ii, sim_gg, tau: float = 1.0) -> np.ndarray:
    """Soft labels: row softmax of the averaged intra-modal similarities times tau.

    Returned as a plain array; the target carries no gradient.
    """
    a = sim_ii.data if isinstance(sim_ii, Tensor) else np.asarray(sim_ii)
    b = sim_gg.data if isinstance(sim_gg, Tensor) else np.asarray(sim_gg)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"contrastive_target: {a.shape} vs {b.shape}")
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    return tc.softmax(Tensor((a + b) / 2.0 * tau), axis=-1).data


def _cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    logp = tc.log_softmax(logits, axis=-1)
    per_row = tc.sum_axis(tc.mul(logp, Tensor(target.astype(logits.dtype))), axis=-1)
    return tc.scale(tc.mean(per_row), -1.0)


def soft_cross_entropy(logits, target) -> Tensor:
    """Mean over rows of ``-sum_j target[i, j] * log_softmax(logits[i])[j]``."""
    logits = tc.as_tensor(logits)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.shape != target.shape:
        raise ShapeError(f"soft_cross_entropy: logits {logits.shape} vs target {target.shape}")
    row_sums = target.sum(axis=-1)
    if np.any(target < 0) or np.any(np.abs(row_sums - 1.0) > 1e-4):
        raise ContractError("target rows must be probability distributions")
    return _cross_entropy(logits, target)


def contrastive_loss(f_img, f_gene, tau: float = 1.0, target: np.ndarray | None = None):
    """``CE(img.gene^T, target) + CE(gene.img^T, target^T)``.

    Rows of ``target^T`` are columns of a row-stochastic matrix and need not
    sum to one, so the second term skips the distribution check.

    Returns ``(loss, target)``.  A precomputed ``target`` may be passed in to
    hold the labels fixed (finite-difference checks do this).
    """
    sim_ii, sim_gg, sim_ig, sim_gi = similarity_block(f_img, f_gene)
    if target is None:
        target = contrastive_target(sim_ii, sim_gg, tau)
    loss = tc.add(soft_cross_entropy(sim_ig, target), _cross_entropy(sim_gi, target.T))
    return loss, target


def reconstruction_loss(f_r, target, kind: str = "mse") -> Tensor:
    f_r, target = tc.as_tensor(f_r), tc.as_tensor(target)
    if f_r.shape != target.shape:
        raise ShapeError(f"reconstruction_loss: {f_r.shape} vs {target.shape}")
    if kind == "mse":
        return tc.mse(f_r, target)
    if kind == "cosine":
        cos = tc.sum_axis(tc.mul(tc.l2_normalize(f_r), tc.l2_normalize(target)), axis=-1)
        return tc.mean(tc.sub(Tensor(np.ones(cos.shape, cos.dtype)), cos))
    raise ContractError(f"unknown reconstruction loss {kind!r}")


def reconstruction_target(outputs: ForwardOutputs, which: str = "image", detach: bool = False) -> Tensor:
    if which == "image":
        t = outputs.f_img_proj
    elif which == "gene":
        t = outputs.f_gene
    else:
        raise ContractError(f"unknown reconstruction target {which!r}")
    return tc.stop_gradient(t) if detach else t


def total_loss(loss_c, loss_r=None) -> Tensor:
    """``log(1 + loss_c) + log(1 + loss_r)``; the second term is dropped when
    ``loss_r`` is None (contrastive-only training)."""
    loss_c = tc.as_tensor(loss_c)
    if loss_c.item() < 0:
        raise ContractError(f"loss_c must be nonnegative, got {loss_c.item()}")
    out = tc.log1p(loss_c)
    if loss_r is None:
        return out
    loss_r = tc.as_tensor(loss_r)
    # cosine form can dip a few ulps below zero at perfect reconstruction
    if loss_r.item() < -1e-6:
        raise ContractError(f"loss_r must be nonnegative, got {loss_r.item()}")
    return tc.add(out, tc.log1p(loss_r))


def compute_losses(
    outputs: ForwardOutputs,
    cfg: ModelConfig,
    tau: float = 1.0,
    frozen_target: np.ndarray | None = None,
    frozen_recon_target: np.ndarray | None = None,
) -> LossBreakdown:
    """All three losses for one forward pass.

    ``frozen_*`` substitute fixed values for the stop-gradient quantities
    (contrastive labels, detached reconstruction target).
    """
    loss_c, target = contrastive_loss(outputs.f_img_proj, outputs.f_gene, tau, frozen_target)
    if not cfg.recon_enabled:
        return LossBreakdown(loss_c, None, total_loss(loss_c), target)
    if frozen_recon_target is not None:
        rt = Tensor(frozen_recon_target)
    else:
        rt = reconstruction_target(outputs, cfg.recon_target, cfg.detach_recon_target)
    loss_r = reconstruction_loss(outputs.f_r, rt, cfg.recon_loss)
    return LossBreakdown(loss_c, loss_r, total_loss(loss_c, loss_r), target, rt.data)

