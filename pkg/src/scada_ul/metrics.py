"""Evaluation battery: accuracies, unlearn score, entropy MIA, FNR/FPR, ECE.

Everything here is a pure function of a frozen model plus data (plus an
explicit seed where an attack model is fitted); repeated calls agree bitwise.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split as _sk_split

from .data import DomainDataset
from .models import ClassifierModel
from .unlearn import AdversarialBank


def accuracy(model: ClassifierModel, labeled_eval: DomainDataset) -> float:
    """Top-1 accuracy in percent."""
    if len(labeled_eval) == 0:
        raise ValueError("empty evaluation set")
    labels = labeled_eval.require_labels()
    preds = model.predict(labeled_eval.inputs).numpy()
    return float((preds == labels).mean() * 100.0)


def unlearn_score(retain_acc: float, forget_acc: float) -> float:
    """retain_acc / (100 + forget_acc), both in percent."""
    if not (0.0 <= retain_acc <= 100.0 and 0.0 <= forget_acc <= 100.0):
        raise ValueError("accuracies must be percentages in [0, 100]")
    return retain_acc / (100.0 + forget_acc)


def prediction_entropy(model: ClassifierModel, inputs: np.ndarray) -> np.ndarray:
    p = model.predict_proba(inputs).numpy().astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


@dataclass(frozen=True)
class MiaResult:
    pct: float
    degenerate: bool = False


def mia_accuracy(
    model: ClassifierModel,
    retain_eval: DomainDataset,
    ood_eval: DomainDataset,
    forget_eval: DomainDataset,
    seed: int = 0,
) -> MiaResult:
    """Entropy-threshold membership attack, adapted to class-level unlearning.

    A logistic regression on prediction entropy is fit to discriminate
    retain (member) from OOD (non-member) samples on a 50/50 train split;
    the reported percentage is how many forget samples the attacker calls
    member. Lower means the forget class looks like unseen data.
    """
    for name, ds in (("retain", retain_eval), ("ood", ood_eval), ("forget", forget_eval)):
        if len(ds) == 0:
            raise ValueError(f"empty {name} set")
    ent_r = prediction_entropy(model, retain_eval.inputs)
    ent_o = prediction_entropy(model, ood_eval.inputs)
    ent_f = prediction_entropy(model, forget_eval.inputs)
    X = np.concatenate([ent_r, ent_o]).reshape(-1, 1)
    y = np.concatenate([np.ones(len(ent_r)), np.zeros(len(ent_o))])
    X_tr, _, y_tr, _ = _sk_split(X, y, train_size=0.5, random_state=seed, stratify=y)
    degenerate = bool(np.ptp(X_tr) < 1e-12)
    clf = LogisticRegression()
    clf.fit(X_tr, y_tr)
    member = clf.predict(ent_f.reshape(-1, 1))
    return MiaResult(pct=float(member.mean() * 100.0), degenerate=degenerate)


def fnr_fpr_sweep(
    model: ClassifierModel,
    forget_eval: DomainDataset,
    retain_eval: DomainDataset,
    thresholds: Sequence[float],
) -> tuple[dict[float, float], dict[float, float]]:
    """Confidence-threshold sweep.

    A sample is "forget-classified" when its max softmax score falls below
    the threshold k. FNR(k) = share of forget samples not forget-classified;
    FPR(k) = share of retain samples forget-classified.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("empty threshold list")
    conf_f = model.predict_proba(forget_eval.inputs).numpy().max(axis=1)
    conf_r = model.predict_proba(retain_eval.inputs).numpy().max(axis=1)
    fnr, fpr = {}, {}
    for k in thresholds:
        k = float(k)
        fnr[k] = float((conf_f >= k).mean())
        fpr[k] = float((conf_r < k).mean())
    return fnr, fpr


def ece(model: ClassifierModel, labeled_eval: DomainDataset, num_bins: int = 15) -> float:
    """Expected calibration error over equal-width max-confidence bins."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if len(labeled_eval) == 0:
        raise ValueError("empty evaluation set")
    labels = labeled_eval.require_labels()
    probs = model.predict_proba(labeled_eval.inputs).numpy()
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    which = np.clip(np.digitize(conf, edges) - 1, 0, num_bins - 1)
    total = 0.0
    n = len(labeled_eval)
    for b in range(num_bins):
        mask = which == b
        if mask.any():
            total += (mask.sum() / n) * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def _mean_pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    a = torch.nn.functional.normalize(a, dim=1, eps=1e-12)
    b = torch.nn.functional.normalize(b, dim=1, eps=1e-12)
    return float((a @ b.T).mean())


def adversarial_cosine_report(
    model: ClassifierModel,
    bank: AdversarialBank,
    source_eval: DomainDataset,
    target_eval: DomainDataset,
    forget_classes: Sequence[int],
) -> dict[str, float]:
    """Mean pairwise cosine of bank features vs the four real-feature groups."""
    if not bank.samples:
        raise ValueError("empty adversarial bank")
    forget = set(int(c) for c in forget_classes)
    adv_feats = bank.all_features(model)
    out: dict[str, float] = {}
    for name, ds in (("source", source_eval), ("target", target_eval)):
        labels = ds.require_labels()
        mask_f = np.isin(labels, list(forget))
        with torch.no_grad():
            feats = model.features(torch.as_tensor(ds.inputs))
        for suffix, mask in (("forget", mask_f), ("retain", ~mask_f)):
            if not mask.any():
                raise ValueError(f"{name} eval has no {suffix} samples")
            out[f"{name}_{suffix}"] = _mean_pairwise_cosine(adv_feats, feats[torch.as_tensor(mask)])
    return out


CSV_COLUMNS = (
    "method",
    "seed",
    "retain_acc",
    "forget_acc",
    "score",
    "mia_pct",
    "ece_retain",
    "ece_forget",
    "wall_time_s",
)


@dataclass(frozen=True)
class MetricsReport:
    """One evaluated model; unlearn_score is re-derived and checked on build."""

    retain_acc: float
    forget_acc: float
    unlearn_score: float
    mia_pct: float
    fnr_curve: dict[float, float]
    fpr_curve: dict[float, float]
    ece_retain: float
    ece_forget: float
    wall_time_s: float
    mia_degenerate: bool = False
    per_class_forget_acc: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("retain_acc", "forget_acc", "mia_pct"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"{name}={v} outside [0, 100]")
        expected = unlearn_score(self.retain_acc, self.forget_acc)
        if abs(self.unlearn_score - expected) > 1e-9:
            raise ValueError("unlearn_score inconsistent with its closed form")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["fnr_curve"] = {repr(k): v for k, v in self.fnr_curve.items()}
        d["fpr_curve"] = {repr(k): v for k, v in self.fpr_curve.items()}
        d["per_class_forget_acc"] = {str(k): v for k, v in self.per_class_forget_acc.items()}
        return json.dumps(d, indent=2)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        d = json.loads(text)
        d["fnr_curve"] = {float(k): v for k, v in d["fnr_curve"].items()}
        d["fpr_curve"] = {float(k): v for k, v in d["fpr_curve"].items()}
        d["per_class_forget_acc"] = {int(k): v for k, v in d.get("per_class_forget_acc", {}).items()}
        return MetricsReport(**d)

    def csv_row(self, method: str, seed: int) -> list:
        return [
            method,
            seed,
            f"{self.retain_acc:.4f}",
            f"{self.forget_acc:.4f}",
            f"{self.unlearn_score:.6f}",
            f"{self.mia_pct:.4f}",
            f"{self.ece_retain:.6f}",
            f"{self.ece_forget:.6f}",
            f"{self.wall_time_s:.3f}",
        ]


def default_thresholds(n: int = 101) -> list[float]:
    return [float(k) for k in np.linspace(0.0, 1.0, n)]


def build_report(
    model: ClassifierModel,
    target_retain_eval: DomainDataset,
    target_forget_eval: DomainDataset,
    ood_eval: DomainDataset,
    wall_time_s: float,
    num_bins: int = 15,
    thresholds: Sequence[float] | None = None,
    mia_seed: int = 0,
) -> MetricsReport:
    """Assemble the full report for one frozen model."""
    thresholds = default_thresholds() if thresholds is None else thresholds
    retain_acc = accuracy(model, target_retain_eval)
    forget_acc = accuracy(model, target_forget_eval)
    mia = mia_accuracy(model, target_retain_eval, ood_eval, target_forget_eval, seed=mia_seed)
    fnr, fpr = fnr_fpr_sweep(model, target_forget_eval, target_retain_eval, thresholds)
    per_class = {}
    forget_labels = target_forget_eval.require_labels()
    for c in sorted(set(int(v) for v in forget_labels)):
        per_class[c] = accuracy(model, target_forget_eval.subset(np.flatnonzero(forget_labels == c)))
    return MetricsReport(
        retain_acc=retain_acc,
        forget_acc=forget_acc,
        unlearn_score=unlearn_score(retain_acc, forget_acc),
        mia_pct=mia.pct,
        fnr_curve=fnr,
        fpr_curve=fpr,
        ece_retain=ece(model, target_retain_eval, num_bins),
        ece_forget=ece(model, target_forget_eval, num_bins),
        wall_time_s=float(wall_time_s),
        mia_degenerate=mia.degenerate,
        per_class_forget_acc=per_class,
    )
