"""Small differentiable classifiers: MLP feature extractor plus linear head.

The head keeps one weight row (and bias entry) per source class for the life
of the model; forgetting is behavioral, never structural. All training here
is single-threaded, CPU, and deterministic for a fixed (arch, seed, data).
"""

from __future__ import annotations

import base64
import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DomainDataset

log = logging.getLogger(__name__)


class NanLossError(RuntimeError):
    """Raised when a training loss turns NaN; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass(frozen=True)
class LabelSpace:
    """Total class set plus the forget subset; retain is the complement."""

    num_classes: int
    forget_classes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        fc = tuple(int(c) for c in self.forget_classes)
        if len(set(fc)) != len(fc):
            raise ValueError("duplicate forget classes")
        for c in fc:
            if not 0 <= c < self.num_classes:
                raise ValueError(f"forget class {c} outside [0, {self.num_classes})")
        if len(fc) >= self.num_classes:
            raise ValueError("nothing to retain")
        object.__setattr__(self, "forget_classes", fc)

    @property
    def retain_classes(self) -> tuple[int, ...]:
        forget = set(self.forget_classes)
        return tuple(c for c in range(self.num_classes) if c not in forget)


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    # matches the default Linear bound U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    # but drawn from an explicit generator so init is a pure function of seed
    fan_in = layer.in_features
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen) * 2 - 1) * bound)
        layer.bias.copy_((torch.rand(layer.bias.shape, generator=gen) * 2 - 1) * bound)


class ClassifierModel(nn.Module):
    """MLP feature extractor composed with a per-class linear head.

    ``forward`` returns logits; ``predict_proba`` the softmax distribution.
    """

    def __init__(self, arch: Sequence[int], num_classes: int, seed: int):
        super().__init__()
        arch = [int(a) for a in arch]
        if len(arch) < 1 or any(a < 1 for a in arch):
            raise ValueError("arch_spec must be a non-empty list of positive sizes")
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.arch = tuple(arch)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        gen = torch.Generator().manual_seed(int(seed))
        layers: list[nn.Module] = []
        for fan_in, fan_out in zip(arch[:-1], arch[1:]):
            lin = nn.Linear(fan_in, fan_out)
            _init_linear(lin, gen)
            layers += [lin, nn.ReLU()]
        self.feature_extractor = nn.Sequential(*layers)
        self.head = nn.Linear(arch[-1], num_classes)
        _init_linear(self.head, gen)

    @property
    def input_dim(self) -> int:
        return self.arch[0]

    @property
    def feature_dim(self) -> int:
        return self.arch[-1]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor | np.ndarray) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
        return torch.softmax(self.forward(x), dim=-1)

    @torch.no_grad()
    def predict(self, x: torch.Tensor | np.ndarray) -> torch.Tensor:
        return self.predict_proba(x).argmax(dim=-1)

    def clone(self) -> "ClassifierModel":
        return copy.deepcopy(self)


def init_model(arch_spec: Sequence[int], num_classes: int, seed: int) -> ClassifierModel:
    """Deterministic model construction; same (arch, seed) gives identical params."""
    return ClassifierModel(arch_spec, num_classes, seed)


def decayed_lr(base_lr: float, step: int, gamma: float = 1e-3, decay: float = 0.9) -> float:
    """lr(t) = lr0 * (1 + gamma * t) ** (-decay)."""
    return base_lr * (1.0 + gamma * step) ** (-decay)


@dataclass
class OptimSettings:
    """SGD settings shared by source training and adaptation."""

    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    nesterov: bool = True
    lr_gamma: float = 1e-3
    lr_decay: float = 0.9

    def build(self, params) -> torch.optim.Optimizer:
        return torch.optim.SGD(
            params,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            nesterov=self.nesterov and self.momentum > 0,
        )

    def apply_schedule(self, optimizer: torch.optim.Optimizer, step: int) -> None:
        lr = decayed_lr(self.lr, step, self.lr_gamma, self.lr_decay)
        for group in optimizer.param_groups:
            group["lr"] = lr


def iterate_batches(
    n: int, batch_size: int, rng: np.random.Generator, epochs: int = 1
):
    """Yield index arrays, reshuffled every epoch."""
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def train_source(
    model: ClassifierModel,
    labeled_source: DomainDataset,
    epochs: int,
    smoothing: float = 0.1,
    optim: OptimSettings | None = None,
    batch_size: int = 32,
    seed: int = 0,
) -> ClassifierModel:
    """Supervised source training with label smoothing; returns the model.

    Labels must lie in [0, num_classes). A NaN loss aborts with a diagnostic
    rather than training through garbage.
    """
    labels = labeled_source.require_labels()
    if len(labeled_source) == 0:
        raise ValueError("empty source dataset")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("label out of range for this model")
    if not (0.0 <= smoothing < 1.0):
        raise ValueError("smoothing must be in [0, 1)")
    optim = optim or OptimSettings()
    opt = optim.build(model.parameters())
    x_all = torch.as_tensor(labeled_source.inputs)
    y_all = torch.as_tensor(labels)
    rng = np.random.default_rng(seed)
    step = 0
    model.train()
    for idx in iterate_batches(len(labeled_source), batch_size, rng, epochs):
        bidx = torch.as_tensor(idx)
        loss = F.cross_entropy(model(x_all[bidx]), y_all[bidx], label_smoothing=smoothing)
        if not torch.isfinite(loss):
            raise NanLossError(
                "NaN/inf loss during source training",
                {"step": step, "loss": float(loss)},
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        optim.apply_schedule(opt, step)
    model.eval()
    return model


def per_class_head_grad_norms(
    model: ClassifierModel, loss_value: torch.Tensor
) -> dict[int, float]:
    """L2 norm of d(loss)/d(head row c), bias folded into its row, per class."""
    if loss_value.grad_fn is None:
        raise RuntimeError("loss has no live computation graph; run a differentiable forward pass")
    gw, gb = torch.autograd.grad(
        loss_value, [model.head.weight, model.head.bias], retain_graph=True, allow_unused=True
    )
    if gw is None or gb is None:
        zeros = torch.zeros(model.num_classes)
        gw = zeros.unsqueeze(1).expand(model.num_classes, model.feature_dim) if gw is None else gw
        gb = zeros if gb is None else gb
    rows = torch.cat([gw, gb.unsqueeze(1)], dim=1)
    norms = rows.norm(dim=1)
    return {c: float(norms[c]) for c in range(model.num_classes)}


CHECKPOINT_VERSION = 1


def _encode(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().numpy()
    return {
        "shape": list(arr.shape),
        "dtype": str(arr.dtype),
        "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii"),
    }


def _decode(spec: dict) -> torch.Tensor:
    arr = np.frombuffer(base64.b64decode(spec["data"]), dtype=np.dtype(spec["dtype"]))
    return torch.as_tensor(arr.reshape(spec["shape"]).copy())


def save_checkpoint(
    model: ClassifierModel,
    path: str | Path,
    label_space: LabelSpace | None = None,
    provenance: str = "source-only",
    seed: int | None = None,
    config_hash: str | None = None,
) -> None:
    """Versioned JSON checkpoint: exact parameter bytes plus metadata."""
    if provenance not in ("source-only", "adapted", "unlearned"):
        raise ValueError(f"unknown provenance {provenance!r}")
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": list(model.arch),
        "num_classes": model.num_classes,
        "params": {name: _encode(p) for name, p in model.state_dict().items()},
        "metadata": {
            "label_space": None
            if label_space is None
            else {
                "num_classes": label_space.num_classes,
                "forget_classes": list(label_space.forget_classes),
            },
            "provenance": provenance,
            "seed": seed,
            "config_hash": config_hash,
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[ClassifierModel, dict]:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    model = ClassifierModel(payload["arch"], payload["num_classes"], seed=0)
    state = {name: _decode(spec) for name, spec in payload["params"].items()}
    model.load_state_dict(state)
    model.eval()
    return model, payload["metadata"]
