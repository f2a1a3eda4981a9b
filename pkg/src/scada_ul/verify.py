"""Independent correctness oracles.

Three families live here: the head-gradient audit for the unlearning loss
(closed forms vs autodiff, plus the gradient-flow bound), central
finite-difference checks for every loss, and the labeling/stage ablation
harness.

Audit arithmetic runs in float64 on the head sub-graph so the 1e-6
tolerances are meaningful; float32 end-to-end noise would drown them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .data import DomainDataset
from .models import ClassifierModel
from .sfda import NullSfdaLoss, SfdaLoss
from .unlearn import UnlearnConfig, run_scada_ul, run_sfda_only

log = logging.getLogger(__name__)

AUDIT_SLACK = 1e-6


def cast_inputs(model: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Match an input tensor to the model's parameter dtype (for FD clones)."""
    return x.to(next(model.parameters()).dtype)


@dataclass(frozen=True)
class TheoremAudit:
    """One audited (model, x_hat, forget-class) triple.

    lhs_norm is the measured aggregate gradient norm over retain head rows
    (bias folded in). rhs_norm is (1/delta - 1) times the closed-form
    reference aggregated over the same rows; the bound holds with equality
    up to floating point, so any slack violation flags an implementation
    bug. forget_row_norm is the measured forget-row gradient norm, emitted
    for inspection alongside. max_closed_form_err is the worst per-class
    deviation between autodiff and the closed form phi * (y_c - [c not
    forget] * yhat_c).
    """

    delta: float
    lhs_norm: float
    rhs_norm: float
    forget_row_norm: float
    holds: bool
    max_closed_form_err: float
    per_row_norms: dict[int, float]


def _head_audit_tensors(
    model: ClassifierModel, x_hat: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(features, head weight, head bias) for one input, all float64 leaves."""
    if x_hat.ndim != 1:
        raise ValueError("audit takes a single input vector")
    with torch.no_grad():
        phi = model.features(x_hat.unsqueeze(0)).squeeze(0).double()
    w = model.head.weight.detach().double().clone().requires_grad_(True)
    b = model.head.bias.detach().double().clone().requires_grad_(True)
    return phi, w, b


def closed_form_head_gradients(
    model: ClassifierModel, x_hat: torch.Tensor, c_f: int
) -> np.ndarray:
    """Per-class head gradients of the unlearning loss, from the closed form.

    Row c equals [phi;1] * (y_c - 1[c != c_f] * yhat_c), where y is the
    softmax output on x_hat and yhat its rescaled version.
    """
    phi, w, b = _head_audit_tensors(model, x_hat)
    with torch.no_grad():
        y = torch.softmax(w @ phi + b, dim=0)
    yhat = y.clone()
    yhat[c_f] = 0.0
    rest = yhat.sum()
    if float(rest) <= 0.0:
        raise ValueError("forget mass is 1 exactly; rescaled label undefined")
    yhat = yhat / rest
    coeff = y - yhat
    coeff[c_f] = y[c_f]
    phi_aug = torch.cat([phi, torch.ones(1, dtype=torch.float64)])
    return (coeff.unsqueeze(1) * phi_aug.unsqueeze(0)).numpy()


def check_theorem_4_1(model: ClassifierModel, x_hat: torch.Tensor, c_f: int) -> TheoremAudit:
    """Audit the gradient-flow bound for the rescaled unlearning loss.

    delta is the softmax mass x_hat places on retain classes; it must be
    strictly below 1 (a sample with zero forget mass makes the statement
    vacuous) and the rescaling needs it strictly above 0.
    """
    if not (0 <= c_f < model.num_classes):
        raise ValueError("forget class out of range")
    phi, w, b = _head_audit_tensors(model, x_hat)
    logits = w @ phi + b
    y = torch.softmax(logits, dim=0)
    y_detached = y.detach()
    delta = float(y_detached.sum() - y_detached[c_f])
    if delta >= 1.0:
        raise ValueError("delta = 1: forget-class mass is zero, bound is vacuous")
    if delta <= 0.0:
        raise ValueError("delta = 0: rescaled label undefined (degenerate forget confidence)")

    yhat = y_detached.clone()
    yhat[c_f] = 0.0
    yhat = yhat / yhat.sum()
    loss = -(yhat * torch.log_softmax(logits, dim=0)).sum()
    gw, gb = torch.autograd.grad(loss, [w, b])
    rows = torch.cat([gw, gb.unsqueeze(1)], dim=1)
    per_row = rows.norm(dim=1)
    retain = [c for c in range(model.num_classes) if c != c_f]
    lhs = float(rows[retain].reshape(-1).norm())
    forget_row = float(per_row[c_f])

    # reference side: the proof's forget-row expression ||[phi;1] * y_c||,
    # taken at the same per-row probabilities and aggregated over retain rows
    phi_aug_norm = float(torch.cat([phi, torch.ones(1, dtype=torch.float64)]).norm())
    reference = float((phi_aug_norm * y_detached[retain]).norm())
    rhs = (1.0 / delta - 1.0) * reference
    holds = lhs >= rhs - AUDIT_SLACK

    closed = closed_form_head_gradients(model, x_hat, c_f)
    max_err = float(np.abs(closed - rows.detach().numpy()).max())
    return TheoremAudit(
        delta=delta,
        lhs_norm=lhs,
        rhs_norm=rhs,
        forget_row_norm=forget_row,
        holds=holds,
        max_closed_form_err=max_err,
        per_row_norms={c: float(per_row[c]) for c in range(model.num_classes)},
    )


def finite_difference_param_grads(
    loss_fn: Callable[[ClassifierModel], torch.Tensor],
    model: ClassifierModel,
    eps: float = 1e-4,
) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn over every model parameter.

    Works on a float64 clone so the step size dominates rounding error.
    Intended for nets of at most ~1e4 parameters.
    """
    m64 = model.clone().double()
    grads: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for name, p in m64.named_parameters():
            g = np.zeros(p.numel())
            flat = p.view(-1)
            for i in range(p.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn(m64))
                flat[i] = orig - eps
                down = float(loss_fn(m64))
                flat[i] = orig
                g[i] = (up - down) / (2 * eps)
            grads[name] = g.reshape(tuple(p.shape))
    return grads


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, ||n||_inf); scale-aware single-number summary."""
    denom = max(1.0, float(np.abs(numeric).max()))
    return float(np.abs(analytic - numeric).max()) / denom


def grad_check_loss(
    loss_fn: Callable[[ClassifierModel], torch.Tensor],
    model: ClassifierModel,
    eps: float = 1e-4,
    tol: float = 1e-4,
) -> float:
    """Compare autodiff grads of loss_fn against central finite differences.

    Returns the worst relative error across parameters; raises if above tol.
    """
    m64 = model.clone().double()
    loss = loss_fn(m64)
    params = dict(m64.named_parameters())
    auto = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    numeric = finite_difference_param_grads(loss_fn, model, eps)
    worst = 0.0
    for (name, p), a in zip(params.items(), auto):
        a_np = np.zeros(tuple(p.shape)) if a is None else a.detach().numpy()
        worst = max(worst, relative_grad_error(a_np, numeric[name]))
    if worst > tol:
        raise AssertionError(f"gradient check failed: relative error {worst:.3e} > {tol:.1e}")
    return worst


def finite_difference_input_grad(
    loss_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-4
) -> np.ndarray:
    """Central finite differences wrt a single input vector (float64)."""
    x64 = x.detach().double().clone()
    g = np.zeros(x64.numel())
    flat = x64.view(-1)
    with torch.no_grad():
        for i in range(x64.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(loss_fn(x64))
            flat[i] = orig - eps
            down = float(loss_fn(x64))
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
    return g.reshape(tuple(x.shape))


@dataclass(frozen=True)
class EvalBundle:
    """Labeled evaluation views plus the OOD set, as the metrics layer needs."""

    target_retain_eval: DomainDataset
    target_forget_eval: DomainDataset
    ood_eval: DomainDataset
    source_eval: DomainDataset | None = None
    target_eval: DomainDataset | None = None


def _report_for(model: ClassifierModel, bundle: EvalBundle, wall_time_s: float, mia_seed: int = 0):
    from .metrics import build_report

    return build_report(
        model,
        bundle.target_retain_eval,
        bundle.target_forget_eval,
        bundle.ood_eval,
        wall_time_s=wall_time_s,
        mia_seed=mia_seed,
    )


def labeling_ablation(
    source_model: ClassifierModel,
    target_train: DomainDataset,
    forget_classes: Sequence[int],
    strategies: Iterable[str],
    sfda_factory: Callable[[], SfdaLoss],
    cfg: UnlearnConfig,
    bundle: EvalBundle,
):
    """Run the pipeline once per labeling strategy (shared seed) and report."""
    import dataclasses
    import time

    strategies = list(strategies)
    if not strategies:
        raise ValueError("no strategies given")
    out = {}
    for strategy in strategies:
        run_cfg = dataclasses.replace(cfg, labeling=strategy)
        t0 = time.perf_counter()
        model = run_scada_ul(source_model, target_train, forget_classes, sfda_factory(), run_cfg)
        out[strategy] = _report_for(model, bundle, time.perf_counter() - t0)
    return out


def stage_ablation(
    source_model: ClassifierModel,
    target_train: DomainDataset,
    forget_classes: Sequence[int],
    stage: str,
    sfda_factory: Callable[[], SfdaLoss],
    cfg: UnlearnConfig,
    bundle: EvalBundle,
):
    """Apply unlearning before, during, or after the adaptation phase.

    before: unlearn-only steps against the source model, then plain SFDA.
    during: the combined loop. after: plain SFDA, then unlearn-only steps.
    Unlearn-only means the combined loop with a zero adaptation loss.
    """
    import time

    t0 = time.perf_counter()
    if stage == "during":
        model = run_scada_ul(source_model, target_train, forget_classes, sfda_factory(), cfg)
    elif stage == "before":
        model = run_scada_ul(source_model, target_train, forget_classes, NullSfdaLoss(), cfg)
        model = run_sfda_only(model, target_train, sfda_factory(), cfg)
    elif stage == "after":
        model = run_sfda_only(source_model, target_train, sfda_factory(), cfg)
        model = run_scada_ul(model, target_train, forget_classes, NullSfdaLoss(), cfg)
    else:
        raise ValueError(f"unknown stage {stage!r}; expected before/during/after")
    return _report_for(model, bundle, time.perf_counter() - t0)
