"""Pluggable source-free adaptation losses.

A loss object exposes ``refresh(model, target_data)`` to rebuild any internal
state (pseudo-labels) once per epoch, and ``compute(model, inputs, indices)``
returning a differentiable scalar. Neither ever reads labels.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .data import DomainDataset
from .models import ClassifierModel

_EPS = 1e-8


def softmax_entropy(logits: torch.Tensor) -> torch.Tensor:
    """Per-sample entropy of softmax(logits)."""
    p = torch.softmax(logits, dim=-1)
    return -(p * torch.log_softmax(logits, dim=-1)).sum(dim=-1)


class SfdaLoss:
    """Interface; subclasses must be label-blind and finite on valid outputs."""

    name = "abstract"

    def refresh(self, model: ClassifierModel, target_data: DomainDataset) -> None:
        raise NotImplementedError

    def compute(
        self, model: ClassifierModel, inputs: torch.Tensor, indices: torch.Tensor | None = None
    ) -> torch.Tensor:
        raise NotImplementedError


class EntropyOnlyLoss(SfdaLoss):
    """Mean prediction entropy; stateless baseline, mostly for interface tests."""

    name = "entropy_only"

    def refresh(self, model: ClassifierModel, target_data: DomainDataset) -> None:
        pass

    def compute(self, model, inputs, indices=None):
        if inputs.shape[0] == 0:
            raise ValueError("empty batch")
        return softmax_entropy(model(inputs)).mean()


class NullSfdaLoss(SfdaLoss):
    """Constant zero; used by the stage ablation's unlearn-only phases."""

    name = "none"

    def refresh(self, model, target_data):
        pass

    def compute(self, model, inputs, indices=None):
        return torch.zeros((), dtype=torch.float32)


class ShotLikeLoss(SfdaLoss):
    """Information maximization with self-supervised pseudo-labels.

    compute = mean entropy - beta * diversity + pseudo_weight * CE(pseudo),
    where diversity is the entropy of the batch-mean prediction and pseudo
    labels come from argmax predictions refined once against softmax-weighted
    class centroids in feature space.
    """

    name = "shot_like"

    def __init__(self, beta: float = 1.0, pseudo_weight: float = 0.3):
        self.beta = float(beta)
        self.pseudo_weight = float(pseudo_weight)
        self._pseudo: torch.Tensor | None = None

    @torch.no_grad()
    def refresh(self, model: ClassifierModel, target_data: DomainDataset) -> None:
        """Rebuild pseudo-labels for the whole adaptation view (call once per epoch)."""
        x = torch.as_tensor(target_data.inputs)
        feats = model.features(x)
        probs = torch.softmax(model.head(feats), dim=-1)
        # softmax-weighted class centroids, then one nearest-centroid round
        weights = probs.sum(dim=0).clamp_min(_EPS)
        centroids = (probs.T @ feats) / weights.unsqueeze(1)
        dists = torch.cdist(feats, centroids)
        self._pseudo = dists.argmin(dim=1)

    def compute(self, model, inputs, indices=None):
        if inputs.shape[0] == 0:
            raise ValueError("empty batch")
        if self._pseudo is None:
            raise RuntimeError("refresh() must run before compute()")
        logits = model(inputs)
        ent = softmax_entropy(logits).mean()
        mean_p = torch.softmax(logits, dim=-1).mean(dim=0)
        diversity = -(mean_p * torch.log(mean_p + _EPS)).sum()
        loss = ent - self.beta * diversity
        if self.pseudo_weight > 0:
            if indices is None:
                raise ValueError("shot_like needs batch indices into the refreshed view")
            loss = loss + self.pseudo_weight * F.cross_entropy(logits, self._pseudo[indices])
        return loss

    @torch.no_grad()
    def pseudo_labels(self) -> np.ndarray:
        if self._pseudo is None:
            raise RuntimeError("refresh() has not run")
        return self._pseudo.numpy().copy()


def make_sfda_loss(name: str, beta: float = 1.0, pseudo_weight: float = 0.3) -> SfdaLoss:
    if name == "shot_like":
        return ShotLikeLoss(beta=beta, pseudo_weight=pseudo_weight)
    if name == "entropy_only":
        return EntropyOnlyLoss()
    if name == "none":
        return NullSfdaLoss()
    raise ValueError(f"unknown sfda loss {name!r}")
