"""Command-line interface: a thin layer over the core library.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
import click

from .adapters import AdapterKind, accounted_memory_bytes
from .backbone import NAMED_SPECS, backbone_memory_bytes
from .data import load_image, make_toy_dataset, save_heatmap_png, save_heatmap_raw, scan_dataset
from .exceptions import VALIDATION_ERRORS, AdaptsError, ConfigError
from .metrics import build_memory_report
from .pipeline import (
    ModelBundle,
    TrainConfig,
    evaluate_bundle,
    run_continual,
    run_multiclass,
    run_single,
)
from .quantize import quantize_bundle


@click.group()
def cli():
    """Adapter-based teacher-student anomaly detection."""


@cli.command("make-toy-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--categories", default=3, show_default=True)
@click.option("--train", "n_train", default=40, show_default=True)
@click.option("--test", "n_test", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", "image_size", default=64, show_default=True)
def make_toy_data_cmd(out_dir, categories, n_train, n_test, seed, image_size):
    """Generate a procedural MVTec-layout dataset for desk-scale runs."""
    layout = make_toy_dataset(out_dir, categories, n_train, n_test, seed, image_size)
    click.echo(f"wrote {len(layout.categories)} categories under {layout.root}")
    for cat in layout.categories:
        click.echo(f"  {cat.name}: {len(cat.train_images)} train, {len(cat.test_items)} test")


def _load_config(config_path, seed) -> TrainConfig:
    if config_path is None:
        cfg = TrainConfig()
    else:
        with open(config_path) as f:
            cfg = TrainConfig.from_json(json.load(f))
    if seed is not None:
        cfg = TrainConfig.from_json({**cfg.to_json(), "seed": int(seed)})
    return cfg


@cli.command("train")
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--scenario", type=click.Choice(["single", "multiclass", "continual"]), default="single", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--order", default=None, help="Comma-separated category order (continual only).")
@click.option("--workers", default=1, show_default=True)
def train_cmd(data_root, scenario, out_dir, config_path, seed, order, workers):
    """Train a bundle and write it (with its evaluation report) to --out."""
    layout = scan_dataset(data_root)
    cfg = _load_config(config_path, seed)
    if scenario == "single":
        bundle, report = run_single(layout, cfg, workers=workers)
    elif scenario == "multiclass":
        bundle, report = run_multiclass(layout, cfg, workers=workers)
    else:
        order_list = [s.strip() for s in order.split(",")] if order else None
        bundle, report = run_continual(layout, cfg, order_list)
    bundle.save(out_dir)
    report.save(out_dir)
    agg = report.aggregate
    click.echo(
        f"{scenario}: I-ROC {agg.i_roc:.4f}  P-ROC {agg.p_roc:.4f}  "
        f"P-F1 {agg.p_f1:.4f}  AP {agg.ap:.4f}"
    )
    click.echo(f"bundle written to {out_dir}")


@cli.command("eval")
@click.option("--bundle", "bundle_dir", required=True, type=click.Path())
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--report", "report_dir", type=click.Path(), default=None)
def eval_cmd(bundle_dir, data_root, report_dir):
    """Evaluate a stored bundle on a dataset; prints the CSV report."""
    bundle = ModelBundle.load(bundle_dir)
    layout = scan_dataset(data_root)
    report = evaluate_bundle(bundle, layout)
    if report_dir:
        report.save(report_dir)
    click.echo(report.to_csv_text(), nl=False)


@cli.command("infer")
@click.option("--bundle", "bundle_dir", required=True, type=click.Path())
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--heatmap-out", type=click.Path(), default=None, help="8-bit grayscale PNG.")
@click.option("--heatmap-raw-out", type=click.Path(), default=None, help="Float32 container.")
def infer_cmd(bundle_dir, image_path, heatmap_out, heatmap_raw_out):
    """Route one image, score it, and optionally write its heatmap."""
    bundle = ModelBundle.load(bundle_dir)
    result = bundle.infer(load_image(image_path))
    if heatmap_out:
        save_heatmap_png(result.map, heatmap_out)
    if heatmap_raw_out:
        save_heatmap_raw(result.map, heatmap_raw_out, image_score=result.image_score)
    click.echo(
        json.dumps(
            {
                "task_id": result.task_id,
                "task_name": result.task_name,
                "image_score": result.image_score,
                "distances": result.distances,
                "heatmap": heatmap_out,
            },
            indent=2,
        )
    )


@cli.command("identify")
@click.option("--bundle", "bundle_dir", required=True, type=click.Path())
@click.option("--image", "image_path", required=True, type=click.Path())
def identify_cmd(bundle_dir, image_path):
    """Report which task the router would pick for an image."""
    bundle = ModelBundle.load(bundle_dir)
    task_id, distances = bundle.identify(load_image(image_path))
    click.echo(
        json.dumps(
            {
                "task_id": task_id,
                "task_name": bundle.store.names[task_id],
                "distances": [float(d) for d in distances],
            },
            indent=2,
        )
    )


@cli.command("quantize")
@click.option("--bundle", "bundle_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
def quantize_cmd(bundle_dir, out_dir):
    """INT8-quantize every adapter set of a bundle into a new bundle."""
    bundle = ModelBundle.load(bundle_dir)
    before = bundle.memory_report()
    qb = quantize_bundle(bundle)
    qb.save(out_dir)
    after = qb.memory_report()
    click.echo(f"Additional = {before.as_dict()['additional_mb']} MB -> {after.as_dict()['additional_mb']} MB")
    click.echo(f"quantized bundle written to {out_dir}")


def _mem_report_from_args(arch, kind_name, layers, precision, tasks):
    if arch not in NAMED_SPECS:
        raise ConfigError(f"unknown --arch {arch!r}; have {sorted(NAMED_SPECS)}")
    spec = NAMED_SPECS[arch]
    kind = AdapterKind.parse(kind_name)
    layer_ids = tuple(int(v) for v in layers.split(","))
    if not set(layer_ids) <= set(spec.tap_layers):
        raise ConfigError(f"layers {layer_ids} outside taps {spec.tap_layers} of {arch}")
    channels = {l: spec.stage_channels(l) for l in layer_ids}
    per_task = accounted_memory_bytes(kind, layer_ids, channels, precision)
    components = {f"adapters/task{t:02d}": per_task for t in range(tasks)}
    if tasks > 1:  # routing only exists in multi-task deployments
        components["prototypes"] = tasks * spec.embed_dim * 4
    return build_memory_report(backbone_memory_bytes(spec), components)


@cli.command("mem-report")
@click.option("--bundle", "bundle_dir", type=click.Path(), default=None)
@click.option("--arch", default="wide_resnet50_2", show_default=True)
@click.option("--kind", "kind_name", default="linear", show_default=True)
@click.option("--layers", default="2,3", show_default=True)
@click.option("--precision", type=click.Choice(["f32", "int8"]), default="f32", show_default=True)
@click.option("--tasks", default=1, show_default=True)
def mem_report_cmd(bundle_dir, arch, kind_name, layers, precision, tasks):
    """Memory accounting for a stored bundle or a hypothetical configuration."""
    if bundle_dir:
        report = ModelBundle.load(bundle_dir).memory_report()
    else:
        report = _mem_report_from_args(arch, kind_name, layers, precision, tasks)
    d = report.as_dict()
    click.echo(f"Total = {d['total_mb']} MB")
    click.echo(f"Additional = {d['additional_mb']} MB")
    for name, nbytes in sorted(d["breakdown"].items()):
        click.echo(f"  {name}: {nbytes} B")


@cli.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve_cmd(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


def main(argv: list[str] | None = None) -> int:
    """Entry point with the documented exit-code contract."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        ctx = getattr(exc, "ctx", None)
        if ctx is not None:
            click.echo(ctx.get_usage(), err=True)
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Exit as exc:  # --help
        return int(exc.exit_code)
    except click.Abort:
        return 1
    except VALIDATION_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except AdaptsError as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        click.echo(f"runtime failure: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
