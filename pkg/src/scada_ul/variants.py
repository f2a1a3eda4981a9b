"""Unknown-class and continual unlearning variants.

UC: rank classes by accumulated softmax mass over the unlabeled target set
and unlearn the bottom R * n_forget; classes absent from the target get
almost no mass. Continual: disjoint forget requests arrive in sequence; the
first runs the full pipeline, later ones run on a data subset with a reduced
epoch budget since the model is already adapted.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .data import DomainDataset
from .models import ClassifierModel
from .sfda import SfdaLoss
from .unlearn import TraceWriter, UnlearnConfig, run_scada_ul

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GammaVector:
    """Per-class accumulated softmax mass over a target pass."""

    accumulation: np.ndarray
    num_samples_seen: int

    def __post_init__(self):
        g = np.asarray(self.accumulation, dtype=np.float64)
        if g.ndim != 1 or g.min() < 0:
            raise ValueError("gamma must be a non-negative vector")
        if abs(g.sum() - self.num_samples_seen) > 1e-6 * max(1, self.num_samples_seen):
            raise ValueError("gamma entries must sum to the number of samples seen")
        g.setflags(write=False)
        object.__setattr__(self, "accumulation", g)


def estimate_gamma(model: ClassifierModel, target_data: DomainDataset) -> GammaVector:
    """Sum the softmax output over every target sample (label-free pass)."""
    target_data.require_label_free("gamma estimation")
    if len(target_data) == 0:
        raise ValueError("empty target dataset")
    with torch.no_grad():
        probs = model.predict_proba(target_data.inputs).double()
    gamma = probs.sum(dim=0).numpy()
    # renormalize the float32 accumulation drift so the sum invariant is exact
    gamma = gamma * (len(target_data) / gamma.sum())
    return GammaVector(gamma, len(target_data))


def predict_forget_classes(gamma: GammaVector, num_forget: int, rank_factor: int) -> tuple[int, ...]:
    """The rank_factor * num_forget classes with smallest gamma, stable ties."""
    if num_forget < 1 or rank_factor < 1:
        raise ValueError("num_forget and rank_factor must be >= 1")
    d = gamma.accumulation.shape[0]
    k = rank_factor * num_forget
    if k >= d:
        raise ValueError(f"would select {k} of {d} classes; nothing would remain")
    order = np.argsort(gamma.accumulation, kind="stable")
    return tuple(int(c) for c in order[:k])


def run_uc_scada(
    source_model: ClassifierModel,
    target_train: DomainDataset,
    num_forget: int,
    sfda: SfdaLoss,
    cfg: UnlearnConfig,
    rank_factor: int = 3,
    trace: TraceWriter | None = None,
) -> tuple[ClassifierModel, tuple[int, ...]]:
    """Estimate forget classes from the source model, then unlearn them.

    Returns (model, predicted_forget_classes); the prediction happens before
    any adaptation, against the source model.
    """
    gamma = estimate_gamma(source_model, target_train)
    predicted = predict_forget_classes(gamma, num_forget, rank_factor)
    log.info("uc-scada predicted forget classes %s", predicted)
    model = run_scada_ul(source_model, target_train, predicted, sfda, cfg, trace=trace)
    return model, predicted


@dataclass(frozen=True)
class ForgetRequestSequence:
    """Ordered disjoint forget-class requests with continual-run budgets."""

    requests: tuple[tuple[int, ...], ...]
    subset_fraction: float = 0.25
    epochs_after_first: int | None = None  # default: max(cfg.epochs // 2, 1)

    def __post_init__(self):
        reqs = tuple(tuple(int(c) for c in r) for r in self.requests)
        if not reqs or any(not r for r in reqs):
            raise ValueError("requests must be a non-empty list of non-empty class sets")
        seen: set[int] = set()
        for r in reqs:
            if seen & set(r) or len(set(r)) != len(r):
                raise ValueError("overlapping forget requests")
            seen |= set(r)
        if not (0.0 < self.subset_fraction <= 1.0):
            raise ValueError("subset_fraction must be in (0, 1]")
        object.__setattr__(self, "requests", reqs)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for r in self.requests for c in r)


def run_c_scada(
    source_model: ClassifierModel,
    target_train: DomainDataset,
    seq: ForgetRequestSequence,
    sfda: SfdaLoss,
    cfg: UnlearnConfig,
    on_stage: Callable[[int, ClassifierModel, tuple[int, ...]], None] | None = None,
) -> ClassifierModel:
    """Sequential unlearning; later requests resume from the adapted model.

    ``on_stage(stage_index, model, cumulative_forget)`` is invoked after each
    request so callers can evaluate per-stage reports (T1, T2, ...).
    """
    target_train.require_label_free("adaptation")
    model = source_model
    cumulative: list[int] = []
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC5CADA]))
    for i, request in enumerate(seq.requests):
        if i == 0:
            stage_data = target_train
            stage_cfg = cfg
        else:
            n = max(1, int(round(seq.subset_fraction * len(target_train))))
            idx = rng.choice(len(target_train), size=n, replace=False)
            stage_data = target_train.subset(np.sort(idx))
            epochs = seq.epochs_after_first
            if epochs is None:
                epochs = max(cfg.epochs // 2, 1)
            stage_cfg = dataclasses.replace(cfg, epochs=epochs)
        model = run_scada_ul(model, stage_data, request, sfda, stage_cfg)
        cumulative.extend(request)
        if on_stage is not None:
            on_stage(i, model, tuple(cumulative))
    return model
