"""Unlearn-while-adapting engine.

The model never sees real forget-class data. Instead, for each forget class
we keep a bank of synthetic inputs optimized to be confidently classified as
that class, and alternate per step between
  (1) one SGD step on the model minimizing  sfda_loss + alpha * mu_loss,
      where mu_loss is cross-entropy against rescaled labels (forget entry
      zeroed, remainder renormalized, treated as a constant target), and
  (2) one plain gradient step on the bank inputs minimizing cross-entropy
      toward the forget class, so the samples track the adapting model.

Multi-class forgetting round-robins the forget classes inside each epoch,
giving each class steps_per_epoch // n_forget consecutive steps.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DomainDataset
from .models import ClassifierModel, NanLossError, OptimSettings
from .sfda import SfdaLoss

log = logging.getLogger(__name__)

LABELING_STRATEGIES = ("rescaled", "uniform", "random")


@dataclass(frozen=True)
class UnlearnConfig:
    """Hyperparameters of the alternating unlearn-and-adapt loop.

    alpha            trade-off multiplying the unlearning loss
    eta1             model learning rate (SGD)
    eta2             step size for the per-iteration bank updates
    eta_init, t_init step size / iteration count for initial bank synthesis
    epochs           adaptation epochs (M)
    steps_per_epoch  combined steps per epoch (N), shared across forget classes
    n_adv            synthetic samples per forget class
    """

    alpha: float = 10.0
    eta1: float = 1e-2
    eta2: float = 0.05
    eta_init: float = 0.5
    t_init: int = 300
    epochs: int = 5
    steps_per_epoch: int = 200
    n_adv: int = 4
    seed: int = 0
    batch_size: int = 32
    labeling: str = "rescaled"
    confidence_threshold: float = 0.99
    clamp_box: tuple[float, float] | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-3
    nesterov: bool = True
    lr_gamma: float = 1e-3
    lr_decay: float = 0.9
    audit_every: int = 10

    def __post_init__(self):
        for name in ("alpha",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("eta1", "eta2", "eta_init"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("t_init", "epochs", "steps_per_epoch", "n_adv", "batch_size"):
            if getattr(self, name) < 0 or (name in ("n_adv", "batch_size") and getattr(self, name) == 0):
                raise ValueError(f"{name} out of range")
        if self.labeling not in LABELING_STRATEGIES:
            raise ValueError(f"labeling must be one of {LABELING_STRATEGIES}")

    def optim_settings(self) -> OptimSettings:
        return OptimSettings(
            lr=self.eta1,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            nesterov=self.nesterov,
            lr_gamma=self.lr_gamma,
            lr_decay=self.lr_decay,
        )


@dataclass(frozen=True)
class RescaledLabel:
    """Probability vector with the forget entry exactly zero."""

    probabilities: np.ndarray
    forget_class: int

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("RescaledLabel holds a single distribution")
        if p[self.forget_class] != 0.0:
            raise ValueError("forget-class probability must be exactly 0")
        if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("not a probability vector")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)


def rescale_labels(y: np.ndarray | torch.Tensor, c_f: int) -> RescaledLabel:
    """Zero the forget-class entry and renormalize the rest proportionally.

    The result is a constant training target; no gradient ever flows through
    it. Raises on the degenerate y[c_f] == 1 case (callers fall back to
    uniform-over-retain and log).
    """
    y = np.asarray(torch.as_tensor(y).detach().numpy() if isinstance(y, torch.Tensor) else y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("rescale_labels expects a single probability vector")
    if not (0 <= c_f < y.shape[0]):
        raise ValueError("forget class out of range")
    if y.min() < -1e-9 or abs(y.sum() - 1.0) > 1e-6:
        raise ValueError("input is not a probability vector")
    rest = y.sum() - y[c_f]
    if rest <= 0.0:
        raise ValueError("degenerate forget confidence: y[c_f] = 1 exactly")
    out = y.copy()
    out[c_f] = 0.0
    out = out / out.sum()
    out[c_f] = 0.0
    return RescaledLabel(out, c_f)


def uniform_over_retain(num_classes: int, c_f: int) -> RescaledLabel:
    p = np.full(num_classes, 1.0 / (num_classes - 1), dtype=np.float64)
    p[c_f] = 0.0
    return RescaledLabel(p, c_f)


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-sample CE between softmax(logits) and fixed target distributions."""
    return -(targets * torch.log_softmax(logits, dim=-1)).sum(dim=-1)


def adv_loss(model: ClassifierModel, x_hat: torch.Tensor, c_f: int) -> torch.Tensor:
    """Cross-entropy of model(x_hat) toward the forget class (scalar, mean)."""
    if not (0 <= c_f < model.num_classes):
        raise ValueError("forget class out of range")
    x = x_hat if x_hat.ndim == 2 else x_hat.unsqueeze(0)
    target = torch.full((x.shape[0],), c_f, dtype=torch.long)
    return F.cross_entropy(model(x), target)


def mu_loss(
    model: ClassifierModel,
    x_hat: torch.Tensor,
    y_rescaled: RescaledLabel | np.ndarray | torch.Tensor,
) -> torch.Tensor:
    """Cross-entropy against rescaled labels, averaged over the bank samples."""
    x = x_hat if x_hat.ndim == 2 else x_hat.unsqueeze(0)
    if isinstance(y_rescaled, RescaledLabel):
        t = torch.as_tensor(y_rescaled.probabilities, dtype=torch.float32)
    else:
        t = torch.as_tensor(np.asarray(y_rescaled), dtype=torch.float32)
    if t.ndim == 1:
        t = t.unsqueeze(0).expand(x.shape[0], -1)
    return soft_cross_entropy(model(x), t).mean()


@dataclass
class AdversarialBank:
    """Per forget class: n_adv synthetic inputs plus an update-step counter."""

    samples: dict[int, torch.Tensor] = field(default_factory=dict)
    steps: dict[int, int] = field(default_factory=dict)

    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.samples))

    def check(self, input_dim: int, forget_classes: Sequence[int]) -> None:
        if set(self.samples) != set(int(c) for c in forget_classes):
            raise ValueError("bank keys do not match the active forget set")
        for c, x in self.samples.items():
            if x.ndim != 2 or x.shape[1] != input_dim:
                raise ValueError(f"bank entry for class {c} has wrong shape {tuple(x.shape)}")

    def all_features(self, model: ClassifierModel) -> torch.Tensor:
        with torch.no_grad():
            return torch.cat([model.features(x) for _, x in sorted(self.samples.items())])


def init_adversarial_samples(
    model: ClassifierModel, c_f: int, cfg: UnlearnConfig
) -> torch.Tensor:
    """Synthesize n_adv inputs the model assigns to c_f with high confidence.

    Random init (one sub-seed per sample), then t_init plain gradient steps
    on the inputs minimizing adv_loss. If the confidence threshold is unmet
    afterwards the samples are returned anyway and a warning logged; no
    convergence criterion is enforced.
    """
    if not (0 <= c_f < model.num_classes):
        raise ValueError("forget class out of range")
    dim = model.input_dim
    rows = []
    for i in range(cfg.n_adv):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, c_f, i]))
        rows.append(rng.normal(size=dim))
    x = torch.as_tensor(np.stack(rows), dtype=torch.float32)
    target = torch.full((cfg.n_adv,), c_f, dtype=torch.long)
    for _ in range(cfg.t_init):
        x = x.detach().requires_grad_(True)
        loss = F.cross_entropy(model(x), target, reduction="sum")
        (grad,) = torch.autograd.grad(loss, x)
        x = (x - cfg.eta_init * grad).detach()
        if cfg.clamp_box is not None:
            x = x.clamp(*cfg.clamp_box)
    with torch.no_grad():
        conf = torch.softmax(model(x), dim=-1)[:, c_f]
    if bool((conf < cfg.confidence_threshold).any()):
        log.warning(
            "bank init for class %d below confidence %.3f (min %.4f) after %d steps",
            c_f, cfg.confidence_threshold, float(conf.min()), cfg.t_init,
        )
    return x


class TraceWriter:
    """JSON-lines sink for per-step records."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = self.path.open("w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()


class _BatchCycler:
    """Deterministic epoch-reshuffled minibatches of (inputs, indices)."""

    def __init__(self, inputs: torch.Tensor, batch_size: int, rng: np.random.Generator):
        self.inputs = inputs
        self.batch_size = min(batch_size, inputs.shape[0])
        self.rng = rng
        self._order = rng.permutation(inputs.shape[0])
        self._pos = 0

    def next(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.inputs.shape[0])
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        t_idx = torch.as_tensor(idx)
        return self.inputs[t_idx], t_idx


class ScadaTrainer:
    """Owns the model, bank, optimizer and step counter for one run.

    Single-threaded by design; nothing here is safe to share across threads
    while a run is in flight.
    """

    def __init__(
        self,
        model: ClassifierModel,
        target_train: DomainDataset,
        forget_classes: Sequence[int],
        sfda: SfdaLoss,
        cfg: UnlearnConfig,
        trace: TraceWriter | None = None,
    ):
        target_train.require_label_free("adaptation")
        forget_classes = tuple(int(c) for c in forget_classes)
        if not forget_classes:
            raise ValueError("forget_classes must be non-empty")
        if len(set(forget_classes)) != len(forget_classes):
            raise ValueError("duplicate forget classes")
        for c in forget_classes:
            if not (0 <= c < model.num_classes):
                raise ValueError(f"forget class {c} out of range")
        if len(forget_classes) >= model.num_classes:
            raise ValueError("cannot forget the whole label space; nothing to retain")
        if len(target_train) == 0:
            raise ValueError("empty adaptation view")
        self.model = model
        self.forget_classes = forget_classes
        self.sfda = sfda
        self.cfg = cfg
        self.trace = trace
        self.optim_settings = cfg.optim_settings()
        self.opt = self.optim_settings.build(model.parameters())
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11]))
        self.cycler = _BatchCycler(torch.as_tensor(target_train.inputs), cfg.batch_size, self.rng)
        self.target_train = target_train
        self.bank = AdversarialBank()
        self.global_step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.audit_failures = 0
        self.degenerate_label_steps = 0

    def init_bank(self) -> None:
        for c in self.forget_classes:
            self.bank.samples[c] = init_adversarial_samples(self.model, c, self.cfg)
            self.bank.steps[c] = 0
        self.bank.check(self.model.input_dim, self.forget_classes)

    def _labels_for(self, y: torch.Tensor, c_f: int) -> torch.Tensor:
        """Per-sample targets under the configured strategy (constant tensors)."""
        d = self.model.num_classes
        out = np.zeros((y.shape[0], d), dtype=np.float64)
        if self.cfg.labeling == "uniform":
            out[:] = uniform_over_retain(d, c_f).probabilities
        elif self.cfg.labeling == "random":
            retain = [c for c in range(d) if c != c_f]
            picks = self.rng.choice(retain, size=y.shape[0])
            out[np.arange(y.shape[0]), picks] = 1.0
        else:
            for i in range(y.shape[0]):
                row = y[i].detach().numpy().astype(np.float64)
                if row[c_f] >= 1.0:
                    self.degenerate_label_steps += 1
                    log.warning("degenerate forget confidence at step %d; using uniform fallback", self.global_step)
                    out[i] = uniform_over_retain(d, c_f).probabilities
                else:
                    out[i] = rescale_labels(row, c_f).probabilities
        return torch.as_tensor(out, dtype=torch.float32)

    def _should_audit(self) -> bool:
        if self.cfg.labeling != "rescaled":
            return False
        if self.trace is not None:
            return True
        return self.cfg.audit_every > 0 and self.global_step % self.cfg.audit_every == 0

    def combined_step(
        self, batch: tuple[torch.Tensor, torch.Tensor], active_cf: int
    ) -> dict:
        """One alternation: model step on sfda + alpha * mu, then bank step."""
        if active_cf not in self.bank.samples:
            raise ValueError(f"bank not initialized for class {active_cf}")
        cfg = self.cfg
        batch_x, batch_idx = batch
        x_hat = self.bank.samples[active_cf]

        with torch.no_grad():
            y = torch.softmax(self.model(x_hat), dim=-1)
        y_hat = self._labels_for(y, active_cf)
        delta = float(y.sum() - y[:, active_cf].sum()) / x_hat.shape[0]

        record = {
            "step": self.global_step,
            "epoch": self.epoch,
            "active_cf": active_cf,
            "delta": delta,
        }
        if self._should_audit():
            from .verify import check_theorem_4_1  # deferred: verify imports this module

            audit = check_theorem_4_1(self.model, x_hat[0], active_cf)
            record.update(
                delta=audit.delta,
                retain_grad_norm=audit.lhs_norm,
                forget_grad_norm=audit.forget_row_norm,
                bound_rhs=audit.rhs_norm,
                theorem_holds=audit.holds,
            )
            if not audit.holds:
                self.audit_failures += 1

        loss_sfda = self.sfda.compute(self.model, batch_x, batch_idx)
        loss_mu = soft_cross_entropy(self.model(x_hat), y_hat).mean()
        phi = loss_sfda + cfg.alpha * loss_mu
        if not torch.isfinite(phi):
            raise NanLossError(
                "NaN/inf in combined objective",
                {**record, "loss_sfda": float(loss_sfda), "loss_mu": float(loss_mu)},
            )
        self.opt.zero_grad()
        phi.backward()
        self.opt.step()
        self.global_step += 1
        self.optim_settings.apply_schedule(self.opt, self.global_step)

        # bank update: per-sample gradient steps toward the forget class
        x = x_hat.clone().requires_grad_(True)
        target = torch.full((x.shape[0],), active_cf, dtype=torch.long)
        per_sample = F.cross_entropy(self.model(x), target, reduction="none")
        (grad,) = torch.autograd.grad(per_sample.sum(), x)
        loss_adv = float(per_sample.mean())
        if not np.isfinite(loss_adv):
            raise NanLossError("NaN/inf in adversarial loss", {**record, "loss_adv": loss_adv})
        new_x = (x - cfg.eta2 * grad).detach()
        if cfg.clamp_box is not None:
            new_x = new_x.clamp(*cfg.clamp_box)
        self.bank.samples[active_cf] = new_x
        self.bank.steps[active_cf] += 1

        record.update(
            loss_sfda=float(loss_sfda),
            loss_mu=float(loss_mu),
            loss_adv=loss_adv,
        )
        self.history.append(record)
        if self.trace is not None:
            self.trace.write(record)
        return record

    def run(self) -> ClassifierModel:
        cfg = self.cfg
        n_forget = len(self.forget_classes)
        steps_per_class = cfg.steps_per_epoch // n_forget
        if cfg.steps_per_epoch % n_forget:
            log.info(
                "steps_per_epoch %d not divisible by %d forget classes; using %d per class",
                cfg.steps_per_epoch, n_forget, steps_per_class,
            )
        if not self.bank.samples:
            self.init_bank()
        for epoch in range(cfg.epochs):
            self.epoch = epoch
            self.sfda.refresh(self.model, self.target_train)
            for c_f in self.forget_classes:
                for _ in range(steps_per_class):
                    self.combined_step(self.cycler.next(), c_f)
        return self.model


def run_scada_ul(
    source_model: ClassifierModel,
    target_train: DomainDataset,
    forget_classes: Sequence[int],
    sfda: SfdaLoss,
    cfg: UnlearnConfig,
    trace: TraceWriter | None = None,
) -> ClassifierModel:
    """Full unlearn-and-adapt run from a source model; returns a new model.

    The bank for every forget class is initialized against the given model
    up front, before any adaptation epoch.
    """
    model = source_model.clone()
    trainer = ScadaTrainer(model, target_train, forget_classes, sfda, cfg, trace=trace)
    if cfg.epochs == 0:
        return model
    trainer.init_bank()
    return trainer.run()


def run_sfda_only(
    source_model: ClassifierModel,
    target_train: DomainDataset,
    sfda: SfdaLoss,
    cfg: UnlearnConfig,
    trace: TraceWriter | None = None,
) -> ClassifierModel:
    """Plain source-free adaptation (no unlearning terms); returns a new model."""
    target_train.require_label_free("adaptation")
    if len(target_train) == 0:
        raise ValueError("empty adaptation view")
    model = source_model.clone()
    settings = cfg.optim_settings()
    opt = settings.build(model.parameters())
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5FDA]))
    cycler = _BatchCycler(torch.as_tensor(target_train.inputs), cfg.batch_size, rng)
    step = 0
    for _ in range(cfg.epochs):
        sfda.refresh(model, target_train)
        for _ in range(cfg.steps_per_epoch):
            batch_x, batch_idx = cycler.next()
            loss = sfda.compute(model, batch_x, batch_idx)
            if not torch.isfinite(loss):
                raise NanLossError("NaN/inf in sfda loss", {"step": step, "loss": float(loss)})
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            settings.apply_schedule(opt, step)
            if trace is not None:
                trace.write({"step": step - 1, "loss_sfda": float(loss)})
    return model
