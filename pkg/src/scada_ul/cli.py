"""Command line entry point.

Subcommands: run (one experiment per config), ablate (labeling or stage
ablations), verify (gradient and theorem-audit battery on a fresh synthetic
setup), report (regenerate CSVs and figures from stored per-seed reports).
Exit codes: 0 success, 1 check failure, 2 config error, 3 NaN abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NAN = 3

log = logging.getLogger("scada_ul")


def _load_config(args) -> "ExperimentConfig":
    from .harness import ExperimentConfig

    cfg = ExperimentConfig.from_json_file(args.config)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.trace:
        updates["trace"] = True
    return dataclasses.replace(cfg, **updates) if updates else cfg


def cmd_run(args) -> int:
    from .harness import run_experiment

    cfg = _load_config(args)
    run_experiment(cfg)
    print(f"wrote results to {cfg.out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness import build_seed_data, train_source_model
    from .metrics import CSV_COLUMNS
    from .sfda import make_sfda_loss
    from .verify import labeling_ablation, stage_ablation

    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        data = build_seed_data(cfg, seed)
        source_model = train_source_model(cfg, data, seed)
        ucfg = dataclasses.replace(cfg.unlearn, seed=seed)
        factory = lambda: make_sfda_loss(cfg.sfda.name, cfg.sfda.beta, cfg.sfda.pseudo_weight)
        if args.kind == "labeling":
            reports = labeling_ablation(
                source_model, data.target_adapt, cfg.forget_classes,
                ("rescaled", "uniform", "random"), factory, ucfg, data.bundle,
            )
        else:
            reports = {
                stage: stage_ablation(
                    source_model, data.target_adapt, cfg.forget_classes,
                    stage, factory, ucfg, data.bundle,
                )
                for stage in ("before", "during", "after")
            }
        for name, report in reports.items():
            rows.append(report.csv_row(f"{args.kind}:{name}", seed))
            (out_dir / f"ablation_{args.kind}_{name}_seed{seed}.json").write_text(report.to_json())
    path = out_dir / f"ablation_{args.kind}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    import torch

    from .harness import build_seed_data, train_source_model
    from .sfda import make_sfda_loss
    from .unlearn import (
        ScadaTrainer,
        UnlearnConfig,
        adv_loss,
        mu_loss,
        rescale_labels,
        soft_cross_entropy,
    )
    from .verify import cast_inputs, check_theorem_4_1, grad_check_loss

    cfg = _load_config(args)
    data = build_seed_data(cfg, cfg.seeds[0])
    source_model = train_source_model(cfg, data, cfg.seeds[0])
    ucfg = dataclasses.replace(cfg.unlearn, seed=cfg.seeds[0], epochs=1, steps_per_epoch=60, audit_every=1)
    c_f = cfg.forget_classes[0]
    failures = 0

    def check(name: str, fn) -> None:
        nonlocal failures
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:  # noqa: BLE001 - report any failure uniformly
            failures += 1
            print(f"FAIL {name}: {exc}")

    x_batch = torch.as_tensor(data.target_adapt.inputs[:16])
    sfda = make_sfda_loss(cfg.sfda.name, cfg.sfda.beta, cfg.sfda.pseudo_weight)
    sfda.refresh(source_model, data.target_adapt)
    idx = torch.arange(16)

    check("grad: adversarial loss", lambda: grad_check_loss(
        lambda m: adv_loss(m, cast_inputs(m, x_batch[:4]), c_f), source_model))
    y = source_model.predict_proba(x_batch[:1].numpy())[0].numpy()
    yhat = rescale_labels(y, c_f)
    check("grad: unlearning loss", lambda: grad_check_loss(
        lambda m: mu_loss(m, cast_inputs(m, x_batch[:1]), yhat), source_model))
    check("grad: sfda loss", lambda: grad_check_loss(
        lambda m: sfda.compute(m, cast_inputs(m, x_batch), idx), source_model))
    check("grad: combined objective", lambda: grad_check_loss(
        lambda m: sfda.compute(m, cast_inputs(m, x_batch), idx)
        + ucfg.alpha * mu_loss(m, cast_inputs(m, x_batch[:1]), yhat),
        source_model))

    def run_audited():
        trainer = ScadaTrainer(source_model.clone(), data.target_adapt, (c_f,), sfda, ucfg)
        trainer.init_bank()
        trainer.run()
        audited = [r for r in trainer.history if "theorem_holds" in r]
        if not audited:
            raise AssertionError("no audited steps")
        if trainer.audit_failures:
            raise AssertionError(f"{trainer.audit_failures}/{len(audited)} audited steps failed")
        print(f"     audited {len(audited)} steps, all hold")

    check("theorem audit over a short run", run_audited)

    def single_audit():
        trainer = ScadaTrainer(source_model.clone(), data.target_adapt, (c_f,), sfda, ucfg)
        trainer.init_bank()
        audit = check_theorem_4_1(trainer.model, trainer.bank.samples[c_f][0], c_f)
        if not audit.holds:
            raise AssertionError(f"bound violated: {audit}")
        if audit.max_closed_form_err > 1e-6:
            raise AssertionError(f"closed form mismatch {audit.max_closed_form_err:.2e}")
        print(f"     delta={audit.delta:.4g} closed-form err={audit.max_closed_form_err:.2e}")

    check("theorem audit on a fresh bank", single_audit)
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def cmd_report(args) -> int:
    from . import plots
    from .harness import write_results_csv, write_summary_csv
    from .metrics import MetricsReport

    out_dir = Path(args.out if args.out else ".")
    report_files = sorted(out_dir.glob("report_seed*.json"))
    if not report_files:
        print(f"no report_seed*.json files under {out_dir}", file=sys.stderr)
        return EXIT_CONFIG
    method = "unknown"
    config_path = out_dir / "config.json"
    if config_path.exists():
        method = json.loads(config_path.read_text()).get("method", "unknown")
    rows, reports = [], []
    for path in report_files:
        stem = path.stem  # report_seed<k> or report_seed<k>_T<i>
        parts = stem.replace("report_seed", "").split("_")
        seed = int(parts[0])
        label = method if len(parts) == 1 else f"{method}:{parts[1]}"
        report = MetricsReport.from_json(path.read_text())
        rows.append(report.csv_row(label, seed))
        if len(parts) == 1:
            reports.append(report)
            plots.plot_fnr_fpr(report, out_dir / f"fnr_fpr_seed{seed}.png")
    for trace in sorted(out_dir.glob("trace_seed*.jsonl")):
        seed = trace.stem.replace("trace_seed", "")
        plots.plot_loss_trace(trace, out_dir / f"losses_seed{seed}.png")
    write_results_csv(out_dir / "results.csv", rows)
    if reports:
        write_summary_csv(out_dir / "summary.csv", method, reports)
    print(f"regenerated results.csv, summary.csv and figures in {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scada-ul", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config's seed list")
        p.add_argument("--trace", action="store_true", help="write per-step JSON-lines traces")
        p.add_argument("--out", default=None, help="output directory override")

    common(sub.add_parser("run", help="run the configured experiment over all seeds"))
    ablate = sub.add_parser("ablate", help="labeling or stage ablation")
    common(ablate)
    ablate.add_argument("--kind", choices=("labeling", "stage"), required=True)
    common(sub.add_parser("verify", help="gradient checks and theorem audit"))
    report = sub.add_parser("report", help="regenerate CSVs and figures from stored reports")
    report.add_argument("--out", default=".", help="directory holding report_seed*.json")
    return parser


def main(argv: list[str] | None = None) -> int:
    from .harness import ConfigError
    from .models import NanLossError

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "ablate": cmd_ablate, "verify": cmd_verify, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NanLossError as exc:
        print(f"aborted on NaN loss: {exc}; snapshot: {exc.snapshot}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
