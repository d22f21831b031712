"""Command line entry point: ``run``, ``attack-one`` and ``inspect-data``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import AttackMode, attack_single, random_image
from .client import compute_client_gradient
from .data import write_panel
from .harness import (CampaignConfig, apply_overrides, build_batches, campaign_model, derive_seed,
                      emit_outputs, load_config, load_dataset, run_campaign)

log = logging.getLogger("gradfb")


def _config_from_args(args) -> CampaignConfig:
    config = load_config(args.config) if args.config else CampaignConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key] = value
    if getattr(args, "seed", None) is not None:
        pairs["run_seed"] = str(args.seed)
    if getattr(args, "out", None):
        pairs["output_dir"] = args.out
    if getattr(args, "modes", None):
        pairs["modes"] = args.modes
    return apply_overrides(config, pairs)


def cmd_run(args) -> int:
    config = _config_from_args(args).validate()
    report = run_campaign(config)
    emit_outputs(report, config.output_dir)
    for s in report.summaries:
        print(f"{s.mode:>12}  {s.successes:4d}/{s.attempts:<4d}  mean iterations {s.mean_iterations:8.2f}"
              f"  mean eval MSE {s.mean_eval_mse:.3e}")
    print(f"outputs written to {config.output_dir}")
    return 0


def cmd_attack_one(args) -> int:
    config = _config_from_args(args).validate()
    dataset = load_dataset(config)
    model = campaign_model(config, dataset)
    batch = build_batches(replace(config, batch_count=args.batch + 1), dataset)[args.batch]
    if not 0 <= args.sample < len(batch):
        raise ValueError(f"sample index {args.sample} outside batch of {len(batch)}")
    image, label = batch.images[args.sample], batch.labels[args.sample]
    target = compute_client_gradient(model, image, label, source_index=args.sample)
    mode = AttackMode.parse(args.mode)
    init = random_image(model.config.input_shape, derive_seed(config.run_seed, 2, args.batch, args.sample))
    result = attack_single(model, target, init, mode, config.lbfgs_options(), config.success_tolerance,
                           seed=derive_seed(config.run_seed, 3, args.batch, args.sample), true_image=image)
    print(f"mode={mode.name} label={label} recovered={result.reconstructed_label} success={result.success} "
          f"iterations={result.iterations_used} matching_loss={result.final_matching_loss:.3e} "
          f"eval_mse={result.eval_mse:.3e} termination={result.termination} wall={result.wall_time:.2f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ext = "pgm" if image.shape[0] == 1 else "ppm"
        path = out / f"attack_{mode.name}_b{args.batch}_s{args.sample}.{ext}"
        write_panel([[image, init, result.reconstructed_image]], path)
        print(f"panel written to {path}")
    return 0 if result.success else 1


def cmd_inspect_data(args) -> int:
    config = _config_from_args(args).validate()
    dataset = load_dataset(config)
    counts = np.bincount(dataset.labels, minlength=dataset.class_count)
    print(f"dataset {dataset.name}: {len(dataset)} images of shape {dataset.image_shape}, "
          f"{dataset.class_count} classes")
    print(f"pixel range [{dataset.images.min():.4f}, {dataset.images.max():.4f}], "
          f"mean {dataset.images.mean():.4f}")
    print("per-class counts: " + " ".join(str(int(c)) for c in counts))
    if args.dump:
        out = Path(args.out or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        n = min(args.dump, len(dataset))
        ext = "pgm" if dataset.image_shape[0] == 1 else "ppm"
        write_panel([[dataset.images[i] for i in range(n)]], out / f"{dataset.name}_first{n}.{ext}")
        print(f"wrote {n} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradfb", description="Gradient inversion attacks with feedback blending.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file with a [campaign] section")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("run", help="run a campaign from a config file")
    common(p)
    p.add_argument("--modes", help="comma-separated modes, e.g. dlg,idlg,dlg-fb,idlg-fb,dlg-fb-nf,idlg-fb-nf")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack-one", help="attack a single image from a random start")
    common(p)
    p.add_argument("--batch", type=int, default=0)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--mode", default="idlg")
    p.set_defaults(func=cmd_attack_one)

    p = sub.add_parser("inspect-data", help="print dataset statistics")
    common(p)
    p.add_argument("--dump", type=int, default=0, help="write the first N images as a panel")
    p.set_defaults(func=cmd_inspect_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"gradfb: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
