"""Command line front end.

Commands operate directly on a data directory (the same layout the HTTP
service persists to), so a catalog ingested here is immediately servable
and vice versa. `ablate` is the odd one out: it runs the synthetic-world
experiment and touches no data directory.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click
import numpy as np

from .attribution import (
    AttributionModel,
    evaluate,
    load_attribution,
    load_labeled_file,
    save_attribution,
    train_head,
    training_set_from_records,
)
from .catalog import CatalogError, load_catalog, product_to_record
from .compat import DEFAULT_MARGIN, PairingKey
from .nn import TrainConfig
from .service import ServiceError, ServiceState, create_app

DEFAULT_DATA_DIR = "trendgen-data"


def _state(ctx: click.Context) -> ServiceState:
    return ServiceState(data_dir=ctx.obj["data_dir"], seed=ctx.obj["seed"])


def _run(op):
    try:
        return op()
    except (ServiceError, CatalogError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
@click.option("--data-dir", envvar="TRENDGEN_DATA_DIR", default=DEFAULT_DATA_DIR,
              show_default=True, help="State directory (env TRENDGEN_DATA_DIR).")
@click.option("--seed", envvar="TRENDGEN_SEED", type=int, default=42,
              show_default=True, help="Default seed (env TRENDGEN_SEED).")
@click.pass_context
def cli(ctx: click.Context, data_dir: str, seed: int) -> None:
    """Outfit recommendation toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["data_dir"] = data_dir
    ctx.obj["seed"] = seed


@cli.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.pass_context
def ingest(ctx: click.Context, file: Path) -> None:
    """Validate and add product records from a catalog file (all or nothing)."""
    if file.suffix == ".bin":
        records = [product_to_record(p) for p in load_catalog(file)]
    else:
        records = []
        with open(file, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise click.ClickException(
                        f"{file}:{lineno}: not valid JSON ({exc})") from exc
    state = _state(ctx)
    summary = _run(lambda: state.ingest(records))
    click.echo(f"accepted {summary['accepted']} products "
               f"(catalog now {summary['total']})")


@cli.command()
@click.option("--pairing", default=None,
              help="Single pairing like tops:bottoms; omit to train all 15.")
@click.option("--margin", type=float, default=DEFAULT_MARGIN, show_default=True)
@click.option("--seed", type=int, default=None, help="Training seed.")
@click.option("--epochs", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--per-anchor", type=int, default=4, show_default=True,
              help="Negatives sampled per anchor when building triplets.")
@click.pass_context
def train(ctx, pairing, margin, seed, epochs, learning_rate, batch_size,
          per_anchor) -> None:
    """Train compatibility models from the approved outfits on disk."""
    key = None
    if pairing is not None:
        key = _run(lambda: PairingKey.parse(pairing))
    state = _state(ctx)
    summary = _run(lambda: state.train(
        pairing=key, margin=margin, seed=seed, epochs=epochs,
        learning_rate=learning_rate, batch_size=batch_size,
        per_anchor=per_anchor,
    ))
    click.echo(f"trained {len(summary['trained'])} pairing(s); "
               f"registry version {summary['version']}")
    for name in summary["trained"]:
        click.echo(f"  {name}")


@cli.command()
@click.option("--product", required=True, help="Anchor product id.")
@click.option("--count", type=int, default=3, show_default=True)
@click.option("--lambda", "lam", type=float, default=1.0, show_default=True,
              help="Diversity weight.")
@click.option("--json", "as_json", is_flag=True, help="Emit raw JSON.")
@click.pass_context
def recommend(ctx, product, count, lam, as_json) -> None:
    """Generate outfits for an anchor; they are stored as pending review."""
    state = _state(ctx)
    result = _run(lambda: state.recommend(product, count=count, lam=lam))
    if as_json:
        click.echo(json.dumps(result, indent=2))
        return
    for outfit in result["outfits"]:
        flag = " (duplicate fallback)" if outfit["duplicated"] else ""
        click.echo(f"{outfit['outfit_id']}{flag}")
        for item in outfit["items"]:
            marker = "*" if item["product_id"] == product else " "
            click.echo(f"  {marker} {item['product_id']}  "
                       f"{item['division']:<12} {item['color']:<12} {item['title']}")
    click.echo(f"{len(result['outfits'])} outfit(s) pending review")


@cli.command()
@click.option("--grid", default="0,0.25,0.5,1,1.5,2,3", show_default=True,
              help="Comma-separated lambda values.")
@click.option("--anchors", type=int, default=100, show_default=True)
@click.option("--products", type=int, default=None,
              help="Synthetic catalog size (default: standard config).")
@click.option("--seed", type=int, default=None,
              help="World seed (default: standard config).")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path),
              default=None, help="Write the report table here.")
@click.option("--plot", type=click.Path(dir_okay=False, path_type=Path),
              default=None, help="Write plottable x/y pairs here.")
def ablate(grid, anchors, products, seed, out, plot) -> None:
    """Run the lambda sweep against the synthetic oracle world."""
    from .evaluator import (
        ablate_lambda,
        build_pipeline,
        format_report,
        save_plot_data,
        save_report,
        standard_config,
    )
    try:
        values = [float(tok) for tok in grid.split(",") if tok.strip()]
    except ValueError as exc:
        raise click.ClickException(f"bad --grid: {exc}") from exc
    config = standard_config()
    overrides = {}
    if products is not None:
        overrides["n_products"] = products
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        config = dataclasses.replace(config, **overrides)
    click.echo(f"building pipeline: {config.n_products} products, "
               f"seed {config.seed} ...")
    pipeline = _run(lambda: build_pipeline(config))
    click.echo(f"sweeping {len(values)} lambda values over {anchors} anchors ...")
    report = _run(lambda: ablate_lambda(pipeline, values, n_anchors=anchors))
    click.echo(format_report(report))
    if out is not None:
        save_report(report, out)
        click.echo(f"report written to {out}")
    if plot is not None:
        save_plot_data(report, plot)
        click.echo(f"plot data written to {plot}")


@cli.group()
def attribution() -> None:
    """Train or evaluate attribute prediction heads."""


@attribution.command("train")
@click.argument("file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--attribute", "attributes", multiple=True,
              help="Attribute name(s); default: every attribute in the file.")
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--learning-rate", type=float, default=0.1, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=None)
@click.pass_context
def attribution_train(ctx, file, attributes, epochs, learning_rate,
                      batch_size, seed) -> None:
    """Fit one classifier head per attribute from a labeled file."""
    state = _state(ctx)
    if len(state.catalog) == 0:
        raise click.ClickException("catalog is empty; ingest products first")
    records = _run(lambda: load_labeled_file(file))
    names = list(attributes) or sorted({attr for _, attr, _ in records})
    if not names:
        raise click.ClickException(f"{file} holds no labeled records")
    config = TrainConfig(
        learning_rate=learning_rate, epochs=epochs, batch_size=batch_size,
        seed=seed if seed is not None else state.seed,
    )
    model = AttributionModel()
    for name in names:
        X, y, labels = _run(lambda: training_set_from_records(
            state.catalog, records, name))
        head = _run(lambda: train_head((X, y), name, labels, config))
        model.add(head)
        click.echo(f"{name}: {len(y)} examples, {len(labels)} classes, "
                   f"final loss {head.epoch_losses[-1]:.4f}")
    directory = Path(ctx.obj["data_dir"]) / "attribution"
    save_attribution(model, directory)
    click.echo(f"saved {len(model.heads)} head(s) to {directory}")


@attribution.command("eval")
@click.argument("file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.pass_context
def attribution_eval(ctx, file) -> None:
    """Report per-attribute accuracy of the stored heads on a labeled file."""
    state = _state(ctx)
    directory = Path(ctx.obj["data_dir"]) / "attribution"
    if not directory.is_dir():
        raise click.ClickException(f"no trained heads under {directory}")
    model = _run(lambda: load_attribution(directory))
    records = _run(lambda: load_labeled_file(file))
    per_attribute: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, head in model.heads.items():
        index = {label: i for i, label in enumerate(head.class_labels)}
        X, y = [], []
        for pid, attr, label in records:
            if attr != name:
                continue
            if label not in index:
                raise click.ClickException(
                    f"{name}: label {label!r} unseen at training time")
            if pid not in state.catalog:
                raise click.ClickException(f"unknown product {pid!r}")
            X.append(state.catalog.get(pid).concat())
            y.append(index[label])
        if X:
            per_attribute[name] = (
                np.stack(X).astype(np.float64),
                np.asarray(y, dtype=np.int64),
            )
    if not per_attribute:
        raise click.ClickException("file holds no records for any trained head")
    accs, macro = _run(lambda: evaluate(model, per_attribute))
    for name in sorted(accs):
        click.echo(f"{name}: {accs[name]:.4f}")
    click.echo(f"macro: {macro:.4f}")


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
@click.pass_context
def serve(ctx, host, port) -> None:
    """Run the HTTP service over the data directory."""
    import uvicorn

    app = create_app(data_dir=ctx.obj["data_dir"])
    uvicorn.run(app, host=host, port=port)


def main() -> None:
    cli(auto_envvar_prefix="TRENDGEN")


if __name__ == "__main__":
    main()
