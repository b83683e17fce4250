"""Variational query generation and the denoising loss.

Noisy ground-truth boxes are embedded into a per-query latent Gaussian
(mu, log sigma^2); queries are drawn with the reparameterization trick so the
gradient of the reconstruction loss reaches the embedding through mu and
log_var but never through the noise sample. The deterministic mode short-
circuits sampling to mu and drops the KL term, which is the conventional
denoising baseline the variational scheme is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import math
import numpy as np

from . import numerics as nm
from .geometry import AnchorBox6D, GroundTruthObject
from .losses import LossWeights, PredictionRows, component_loss
from .numerics import Tensor

VARIATIONAL = "variational"
DETERMINISTIC = "deterministic"

DEPTH_FEATURE_SCALE = 50.0  # keeps the raw depth feature O(1)


@dataclass
class LatentDistribution:
    """Per-noisy-query Gaussian parameters, each (K, D); log_var pre-clamped."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.data.shape != self.log_var.data.shape:
            raise nm.ShapeError(
                f"latent shapes differ: {self.mu.data.shape} vs {self.log_var.data.shape}")
        if not (np.isfinite(self.mu.data).all() and np.isfinite(self.log_var.data).all()):
            raise FloatingPointError("latent distribution has non-finite entries")


@dataclass(frozen=True)
class DenoisingConfig:
    """KL weight and the variational/deterministic mode switch."""

    beta: float = 0.1
    mode: str = VARIATIONAL

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.mode not in (VARIATIONAL, DETERMINISTIC):
            raise ValueError(f"unknown denoising mode {self.mode!r}")


class VariationalQueryGenerator:
    """Box embedding acting as the encoder of the denoising VAE.

    The noisy category goes through a learned table; the anchor box and the
    continuous noisy attributes go through a linear embedding. Both feed a
    hidden layer with two output heads for mu and log_var (clamped to
    [-10, 10]).
    """

    LOG_VAR_CLAMP = 10.0

    def __init__(self, store: nm.ParameterStore, num_classes: int, width: int,
                 class_embed_dim: int | None = None, prefix: str = "vqg"):
        self.num_classes = num_classes
        self.width = width
        ce = class_embed_dim if class_embed_dim is not None else min(width, 16)
        self.class_embed_dim = ce
        cont = 12  # anchor (6) + dims (3) + sin/cos yaw (2) + scaled depth (1)
        self.class_table = store.param(f"{prefix}.class_table", (num_classes, ce))
        self.w_in = store.param(f"{prefix}.in.w", (ce + cont, width), scale=0.1)
        self.b_in = store.param(f"{prefix}.in.b", (width,), scale=0.0)
        self.w_mu = store.param(f"{prefix}.mu.w", (width, width), scale=0.1)
        self.b_mu = store.param(f"{prefix}.mu.b", (width,), scale=0.0)
        self.w_lv = store.param(f"{prefix}.lv.w", (width, width), scale=0.1)
        self.b_lv = store.param(f"{prefix}.lv.b", (width,), scale=0.0)

    def encode(self, anchors: Sequence[AnchorBox6D],
               noisy3d: Sequence[tuple]) -> LatentDistribution:
        """Embed K noisy boxes into a (K, D) latent distribution."""
        if len(anchors) != len(noisy3d):
            raise ValueError(f"{len(anchors)} anchors vs {len(noisy3d)} noisy tuples")
        classes = []
        cont = np.zeros((len(anchors), 12))
        for i, (a, nz) in enumerate(zip(anchors, noisy3d)):
            c, l3d, w3d, h3d, theta, d = nz
            if not 0 <= int(c) < self.num_classes:
                raise IndexError(f"noisy category {c} out of range")
            classes.append(int(c))
            cont[i] = [a.x_c, a.y_c, a.l, a.r, a.t, a.b,
                       l3d, w3d, h3d, math.sin(theta), math.cos(theta),
                       d / DEPTH_FEATURE_SCALE]
        class_rows = nm.gather_rows(self.class_table, classes)
        feats = nm.concat_cols([class_rows, nm.Tensor(cont)])
        hidden = nm.relu(nm.linear(feats, self.w_in, self.b_in))
        mu = nm.linear(hidden, self.w_mu, self.b_mu)
        log_var = nm.clamp(nm.linear(hidden, self.w_lv, self.b_lv),
                           -self.LOG_VAR_CLAMP, self.LOG_VAR_CLAMP)
        return LatentDistribution(mu=mu, log_var=log_var)


def sample_reparameterized(dist: LatentDistribution, rng: np.random.Generator,
                           mode: str = VARIATIONAL,
                           eps: np.ndarray | None = None) -> Tensor:
    """Draw z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).

    Gradients flow to mu and log_var only; eps stays off the tape. In
    deterministic mode the sample is mu itself and no noise is drawn. ``eps``
    can be supplied explicitly (tests, finite-difference probes).
    """
    if mode == DETERMINISTIC:
        return dist.mu
    if eps is None:
        eps = rng.standard_normal(dist.mu.data.shape)
    elif eps.shape != dist.mu.data.shape:
        raise nm.ShapeError(f"eps shape {eps.shape} vs mu {dist.mu.data.shape}")
    return dist.mu + nm.exp(dist.log_var * 0.5) * nm.Tensor(eps)


@dataclass
class DenoisingLoss:
    total: Tensor
    reconstruction: Tensor
    kl: Tensor


def denoising_loss(per_layer_blocks: list[list[tuple[PredictionRows, list[GroundTruthObject]]]],
                   dist: LatentDistribution | None, cfg: DenoisingConfig,
                   weights: LossWeights, beta_scale: float = 1.0) -> DenoisingLoss:
    """Reconstruction loss over noisy-query predictions plus the KL term.

    ``per_layer_blocks`` groups the noisy blocks by decoder layer; each block
    pairs one PredictionRows (all rows positive, by construction) with its
    source ground truths. Reconstruction averages over the blocks of a layer
    and sums over layers, mirroring deep supervision. The KL term is computed
    once from the latent distribution, skipped in deterministic mode.
    """
    zero = nm.Tensor(0.0)
    recon = zero
    for blocks in per_layer_blocks:
        if not blocks:
            continue
        layer_sum = None
        for pred, targets in blocks:
            if pred.rows != len(targets):
                raise ValueError(f"block has {pred.rows} rows but {len(targets)} targets")
            term = component_loss(pred, list(range(pred.rows)), targets, weights)
            layer_sum = term if layer_sum is None else layer_sum + term
        recon = recon + layer_sum * (1.0 / len(blocks))

    if cfg.mode == DETERMINISTIC or dist is None:
        kl = zero
        total = recon
    else:
        kl = nm.gaussian_kl(dist.mu, dist.log_var)
        total = recon + kl * (cfg.beta * beta_scale)
    return DenoisingLoss(total=total, reconstruction=recon, kl=kl)
