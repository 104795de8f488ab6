"""Command-line interface.

Commands: ``run`` (all seeds of one config), ``ablate`` (component-removal
sweep sharing seeds), ``report`` (aggregate finished run directories into
mean±std tables and accuracy curves), ``synth-preview`` (PNG grids of
generated images from a finished run). Exit codes: 0 success, 1 invalid
configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import run_seeds
from .metrics import RunReport, aggregate_runs, load_report

ABLATION_VARIANTS = ("full", "no_rkd", "no_hkd", "no_chr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfcil",
        description="Data-free class-incremental learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="override a config value")
        p.add_argument("--seeds", type=int, nargs="+", default=None,
                       help="seeds to run (default: from config)")
        p.add_argument("--out", default=None, help="output directory")

    p_run = sub.add_parser("run", help="run every seed of one configuration")
    common(p_run)

    p_abl = sub.add_parser("ablate", help="run full/no_rkd/no_hkd/no_chr variants")
    common(p_abl)

    p_rep = sub.add_parser("report", help="aggregate finished run directories")
    p_rep.add_argument("run_dirs", nargs="+", help="run directories with report.json")
    p_rep.add_argument("--out", default=None, help="directory for table and plot files")

    p_prev = sub.add_parser("synth-preview", help="render generated-image grids")
    p_prev.add_argument("run_dir", help="finished run directory")
    p_prev.add_argument("--out", default=None, help="output directory (default: run dir)")
    p_prev.add_argument("--grid", type=int, default=6, help="grid side length")
    return parser


def _resolve(args) -> ExperimentConfig:
    config = load_config(args.config, args.overrides)
    if args.out is not None:
        config.out_dir = args.out
    return config


def cmd_run(args) -> int:
    config = _resolve(args)
    reports = run_seeds(config, config.out_dir, args.seeds, label="run")
    for report in reports:
        accs = " ".join(f"{a:.4f}" for a in report.accuracies)
        print(f"seed {report.seed}: A_i {accs}  avg {report.average_accuracy:.4f}")
    return 0


def cmd_ablate(args) -> int:
    base = _resolve(args)
    rows = []
    for variant in ABLATION_VARIANTS:
        config = load_config(args.config, args.overrides)
        config.out_dir = base.out_dir
        if variant != "full":
            setattr(config.trainer.ablation, variant, True)
        reports = run_seeds(config, config.out_dir, args.seeds, label=variant)
        rows.append((variant, aggregate_runs(reports)))
    print(f"{'variant':10s} {'A_N':>16s} {'avg':>16s}")
    for variant, agg in rows:
        print(f"{variant:10s} {agg['last_text']:>16s} {agg['average_text']:>16s}")
    return 0


def _collect_reports(run_dirs) -> list[RunReport]:
    reports = []
    for raw in run_dirs:
        path = Path(raw) / "report.json"
        if not path.is_file():
            print(f"warning: {raw} has no report.json, skipping", file=sys.stderr)
            continue
        reports.append(load_report(path))
    return reports


def cmd_report(args) -> int:
    reports = _collect_reports(args.run_dirs)
    if not reports:
        raise RuntimeError("no completed runs among the given directories")
    groups: dict[tuple, list[RunReport]] = {}
    for report in reports:
        groups.setdefault(report.group_key(), []).append(report)

    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = [f"{'group':40s} {'runs':>4s} {'A_N':>16s} {'avg':>16s}"]
    curves = []
    for key in sorted(groups, key=str):
        batch = groups[key]
        agg = aggregate_runs(batch)
        flags = [name for name, on in batch[0].ablation.items() if on]
        label = f"{batch[0].dataset}/{batch[0].protocol}x{batch[0].n_tasks}" \
                + (f"[{','.join(flags)}]" if flags else "[full]")
        lines.append(f"{label:40s} {agg['n_runs']:>4d} {agg['last_text']:>16s} "
                     f"{agg['average_text']:>16s}")
        curves.append((label, [m for m, _ in agg["per_phase"]]))
    table = "\n".join(lines)
    print(table)
    (out_dir / "report.txt").write_text(table + "\n")
    _plot_curves(curves, out_dir / "curves.png")
    print(f"wrote {out_dir / 'report.txt'} and {out_dir / 'curves.png'}")
    return 0


def _plot_curves(curves, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, means in curves:
        phases = list(range(1, len(means) + 1))
        ax.plot(phases, [100 * m for m in means], marker="o", label=label)
    ax.set_xlabel("phase")
    ax.set_ylabel("cumulative accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_synth_preview(args) -> int:
    import torch

    from .training import load_generator

    run_dir = Path(args.run_dir)
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    generator_paths = sorted(run_dir.glob("phase_*/generator"))
    if not generator_paths:
        raise RuntimeError(f"no phase generators found under {run_dir}")
    k = args.grid
    for path in generator_paths:
        generator = load_generator(path)
        rng = torch.Generator().manual_seed(0)
        with torch.no_grad():
            z = torch.randn(k * k, generator.noise_dim, generator=rng)
            images = generator(z)
        # map the normalized pixel domain back to [0, 1] for display
        span = (generator.pixel_hi - generator.pixel_lo).clamp(min=1e-8)
        images = ((images - generator.pixel_lo) / span).clamp(0, 1)
        target = out_dir / f"{path.parent.name}_preview.png"
        _save_grid(images, k, target)
        print(f"wrote {target}")
    return 0


def _save_grid(images, k: int, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(k, k, figsize=(k, k))
    for idx, ax in enumerate(axes.flat):
        ax.imshow(images[idx].permute(1, 2, 0).numpy())
        ax.axis("off")
    fig.tight_layout(pad=0.1)
    fig.savefig(path, dpi=120)
    plt.close(fig)


COMMANDS = {
    "run": cmd_run,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "synth-preview": cmd_synth_preview,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 2


def entrypoint() -> None:
    sys.exit(main())
