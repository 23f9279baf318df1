#!/usr/bin/env python3
"""Populate a data directory the service and CLI can run against.

Writes a synthetic catalog, expert-approved outfits, trained pairing models,
and a labeled attribute file, so `trendgen serve --data-dir DIR` answers
recommendations immediately.
"""

import argparse
import time
from pathlib import Path

from trendgen.attribution import records_from_catalog, save_labeled_file
from trendgen.catalog import append_outfit, product_to_record
from trendgen.evaluator import OracleConfig, curate_outfits, synth_catalog
from trendgen.service import ServiceState


def parse_args() -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data-dir", type=Path, default=Path("trendgen-data"))
    ap.add_argument("--products", type=int, default=500)
    ap.add_argument("--outfits", type=int, default=1200)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--learning-rate", type=float, default=1e-3)
    ap.add_argument("--skip-training", action="store_true",
                    help="only write catalog and outfits")
    return ap.parse_args()


def main() -> None:
    args = parse_args()
    config = OracleConfig(n_products=args.products, seed=args.seed,
                          curated_outfits=args.outfits)
    print(f"synthesizing {args.products} products (seed {args.seed})")
    catalog, oracle = synth_catalog(args.products, args.seed, config)
    outfits = curate_outfits(catalog, oracle, args.outfits, seed=args.seed)

    args.data_dir.mkdir(parents=True, exist_ok=True)
    state = ServiceState(data_dir=args.data_dir, seed=args.seed)
    state.ingest([product_to_record(p) for p in catalog])
    for o in outfits:
        state.outfits[o.outfit_id] = o
        append_outfit(o, args.data_dir / "outfits.jsonl")
    print(f"wrote catalog ({len(catalog)} products) and "
          f"{len(outfits)} approved outfits")

    save_labeled_file(
        records_from_catalog(catalog, "division")
        + records_from_catalog(catalog, "color"),
        args.data_dir / "labels.jsonl",
    )
    print("wrote labels.jsonl (division + color annotations)")

    if not args.skip_training:
        t0 = time.time()
        summary = state.train(epochs=args.epochs,
                              learning_rate=args.learning_rate)
        print(f"trained {len(summary['trained'])} pairings "
              f"in {time.time()-t0:.1f}s (registry v{summary['version']})")
    print(f"ready: trendgen serve --data-dir {args.data_dir}")


if __name__ == "__main__":
    main()
