"""Batch attack campaigns: paired runs across attack modes, aggregates and CSV output."""

from __future__ import annotations

import configparser
import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import ALL_MODES, AttackMode, attack_single, random_image
from .blending import FeedbackState, next_init, update
from .client import Batch, GradientSet, compute_client_gradient
from .data import (Dataset, load_cifar100, load_mnist_idx, make_correlated_batch,
                   make_synthetic_dataset, write_panel)
from .lbfgs import LbfgsOptions
from .model import ConvSpec, Model, ModelConfig, build_model

log = logging.getLogger(__name__)

ATTACK_COLUMNS = ("mode", "batch_id", "sample_idx", "success", "iterations", "matching_loss",
                  "eval_mse", "wall_ms", "label", "recovered_label", "init", "termination",
                  "cumulative_successes")
SUMMARY_COLUMNS = ("mode", "attempts", "successes", "success_rate", "mean_iterations",
                   "mean_eval_mse", "mean_eval_mse_success", "wall_time_s")


@dataclass
class CampaignConfig:
    dataset: str = "synthetic"
    mnist_images: str = ""
    mnist_labels: str = ""
    cifar_path: str = ""
    synthetic_per_class: int = 40
    synthetic_classes: int = 10
    synthetic_shape: tuple[int, int, int] = (1, 28, 28)
    synthetic_seed: int = 0
    batch_size: int = 8
    batch_count: int = 10
    # "cycle": batch b draws from class b mod classes; "any": no filter; or a class list
    class_filter: str | tuple[int, ...] = "cycle"
    modes: tuple[AttackMode, ...] = ALL_MODES
    alpha: float = 0.5
    success_tolerance: float = 1e-6
    max_iterations: int = 300
    learning_rate: float = 1.0
    history_size: int = 100
    line_search: str = "strong_wolfe"
    refine_step: bool = True
    project_box: bool = True
    conv_layers: tuple[ConvSpec, ...] = (ConvSpec(12, 5, "same"), ConvSpec(12, 5, "same"))
    init_scale: float = 0.5
    model_seed: int = 0
    run_seed: int = 0
    output_dir: str = "campaign_out"
    panels: bool = False
    timing: bool = False
    workers: int = 1

    def validate(self):
        if not self.modes:
            raise ValueError("at least one attack mode is required")
        if self.batch_size < 1 or self.batch_count < 0:
            raise ValueError("batch_size must be >= 1 and batch_count >= 0")
        if self.dataset not in ("synthetic", "mnist", "cifar100"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.dataset == "mnist":
            for p in (self.mnist_images, self.mnist_labels):
                if not p or not Path(p).exists():
                    raise FileNotFoundError(f"MNIST file not found: {p!r}")
        if self.dataset == "cifar100" and (not self.cifar_path or not Path(self.cifar_path).exists()):
            raise FileNotFoundError(f"CIFAR-100 file not found: {self.cifar_path!r}")
        self.lbfgs_options()
        return self

    def lbfgs_options(self) -> LbfgsOptions:
        return LbfgsOptions(learning_rate=self.learning_rate, history_size=self.history_size,
                            max_iterations=self.max_iterations, line_search=self.line_search,
                            refine_step=self.refine_step, project_box=self.project_box)


# ---------------------------------------------------------------- config file


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if name == "modes":
        return tuple(AttackMode.parse(m) for m in raw.replace(",", " ").split())
    if name == "conv_layers":
        return parse_conv_layers(raw)
    if name == "synthetic_shape":
        return tuple(int(v) for v in raw.replace("x", " ").replace(",", " ").split())
    if name == "class_filter":
        if raw in ("cycle", "any"):
            return raw
        return tuple(int(v) for v in raw.replace(",", " ").split())
    default = getattr(CampaignConfig, name, None)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_conv_layers(raw: str) -> tuple[ConvSpec, ...]:
    """``"12x5same, 12x5same"`` -> two 12-channel 5x5 same-padded layers."""
    layers = []
    for item in raw.replace(",", " ").split():
        ch, rest = item.split("x", 1)
        pad = "same" if rest.endswith("same") else "valid" if rest.endswith("valid") else None
        if pad is None:
            raise ValueError(f"conv layer {item!r}: expected e.g. 12x5same or 12x5valid")
        layers.append(ConvSpec(int(ch), int(rest[: -len(pad)]), pad))
    return tuple(layers)


def format_conv_layers(layers) -> str:
    return ", ".join(f"{c.out_channels}x{c.kernel_size}{c.padding}" for c in layers)


_KNOWN = {f.name for f in fields(CampaignConfig)}


def apply_overrides(config: CampaignConfig, pairs: dict[str, str]) -> CampaignConfig:
    updates = {}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key not in _KNOWN:
            raise KeyError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, raw)
    return replace(config, **updates)


def load_config(path) -> CampaignConfig:
    """Read an INI file; all keys live in one ``[campaign]`` section."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        parser.read_file(fh)
    if not parser.has_section("campaign"):
        raise ValueError(f"{path}: missing [campaign] section")
    return apply_overrides(CampaignConfig(), dict(parser.items("campaign")))


def dump_config(config: CampaignConfig) -> str:
    lines = ["[campaign]"]
    for f in fields(CampaignConfig):
        v = getattr(config, f.name)
        if f.name == "modes":
            v = " ".join(m.name for m in v)
        elif f.name == "conv_layers":
            v = format_conv_layers(v)
        elif isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- report


@dataclass
class AttackRow:
    mode: str
    batch_id: int
    sample_idx: int
    success: bool
    iterations: int
    matching_loss: float
    eval_mse: float
    wall_ms: float
    label: int
    recovered_label: int
    init: str
    termination: str


@dataclass
class ModeSummary:
    mode: str
    attempts: int
    successes: int
    success_rate: float
    mean_iterations: float
    mean_eval_mse: float
    mean_eval_mse_success: float
    wall_time_s: float
    cumulative: list[int] = field(repr=False)


@dataclass
class CampaignReport:
    config: CampaignConfig
    rows: list[AttackRow]
    summaries: list[ModeSummary]
    # (mode, batch_id) -> list of (original, init, reconstruction)
    images: dict = field(default_factory=dict, repr=False)


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan


def summarize(rows: Sequence[AttackRow], modes: Sequence[str] | None = None) -> list[ModeSummary]:
    """Aggregate per-attack rows into per-mode figures; a pure function of ``rows``."""
    if modes is None:
        modes = list(dict.fromkeys(r.mode for r in rows))
    out = []
    for mode in modes:
        mine = [r for r in rows if r.mode == mode]
        wins = [r for r in mine if r.success]
        cumulative = np.cumsum([int(r.success) for r in mine]).tolist()
        out.append(ModeSummary(
            mode=mode,
            attempts=len(mine),
            successes=len(wins),
            success_rate=len(wins) / len(mine) if mine else math.nan,
            mean_iterations=_mean(r.iterations for r in wins),
            mean_eval_mse=_mean(r.eval_mse for r in mine),
            mean_eval_mse_success=_mean(r.eval_mse for r in wins),
            wall_time_s=sum(r.wall_ms for r in mine) / 1000.0,
            cumulative=cumulative,
        ))
    return out


# ---------------------------------------------------------------- campaign


def load_dataset(config: CampaignConfig) -> Dataset:
    if config.dataset == "mnist":
        return load_mnist_idx(config.mnist_images, config.mnist_labels)
    if config.dataset == "cifar100":
        return load_cifar100(config.cifar_path)
    return make_synthetic_dataset(per_class=config.synthetic_per_class, num_classes=config.synthetic_classes,
                                  shape=config.synthetic_shape, seed=config.synthetic_seed)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


def build_batches(config: CampaignConfig, dataset: Dataset) -> list[Batch]:
    batches = []
    for b in range(config.batch_count):
        if config.class_filter == "cycle":
            classes = np.unique(dataset.labels)
            cf = int(classes[b % len(classes)])
        elif config.class_filter == "any":
            cf = None
        else:
            cf = config.class_filter
        batches.append(make_correlated_batch(dataset, config.batch_size, cf, derive_seed(config.run_seed, 1, b)))
    return batches


def campaign_model(config: CampaignConfig, dataset: Dataset) -> Model:
    return build_model(ModelConfig(input_shape=dataset.image_shape, conv_layers=config.conv_layers,
                                   num_classes=dataset.class_count, init_seed=config.model_seed,
                                   init_scale=config.init_scale))


def _run_sequence(model: Model, config: CampaignConfig, mode: AttackMode, batch_id: int,
                  batch: Batch, targets: list[GradientSet]):
    """Attack one batch in order under one mode; blending state is local to this call."""
    opts = config.lbfgs_options()
    shape = model.config.input_shape
    state = FeedbackState(alpha=config.alpha, policy="nf" if mode.nf else "fb")
    rows, images = [], []
    for i, (image, label) in enumerate(zip(batch.images, batch.labels)):
        init_seed = derive_seed(config.run_seed, 2, batch_id, i)
        if mode.init == "blended":
            init = next_init(state, init_seed, shape)
            init_kind = "blend" if state.running_blend is not None else "random"
        else:
            init, init_kind = random_image(shape, init_seed), "random"
        result = attack_single(model, targets[i], init, mode, opts, config.success_tolerance,
                               seed=derive_seed(config.run_seed, 3, batch_id, i), true_image=image)
        if mode.init == "blended":
            state = update(state, result)
        rows.append(AttackRow(mode.name, batch_id, i, result.success, result.iterations_used,
                              result.final_matching_loss, result.eval_mse, result.wall_time * 1000.0,
                              label, result.reconstructed_label, init_kind, result.termination))
        images.append((image, np.array(init), result.reconstructed_image))
        log.debug("%s batch %d sample %d: success=%s iters=%d loss=%.3e", mode.name, batch_id, i,
                  result.success, result.iterations_used, result.final_matching_loss)
    return rows, images


def _task(args):
    return _run_sequence(*args)


def run_campaign(config: CampaignConfig) -> CampaignReport:
    config.validate()
    dataset = load_dataset(config)
    model = campaign_model(config, dataset)
    batches = build_batches(config, dataset)
    # one set of victim gradients, shared by every mode
    targets = [[compute_client_gradient(model, img, lbl, source_index=i)
                for i, (img, lbl) in enumerate(zip(b.images, b.labels))] for b in batches]
    tasks = [(model, config, mode, b, batches[b], targets[b])
             for mode in config.modes for b in range(len(batches))]
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(pool.map(_task, tasks))
    else:
        outputs = [_task(t) for t in tasks]
    rows, images = [], {}
    for (_, _, mode, b, _, _), (r, im) in zip(tasks, outputs):
        rows.extend(r)
        images[(mode.name, b)] = im
        log.info("%s batch %d: %d/%d successes", mode.name, b, sum(x.success for x in r), len(r))
    return CampaignReport(config, rows, summarize(rows, [m.name for m in config.modes]), images)


# ---------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def emit_outputs(report: CampaignReport, output_dir) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    timing = report.config.timing

    with open(out / "attacks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTACK_COLUMNS)
        running: dict[str, int] = {}
        for r in report.rows:
            running[r.mode] = running.get(r.mode, 0) + int(r.success)
            d = asdict(r)
            d["wall_ms"] = r.wall_ms if timing else math.nan
            d["cumulative_successes"] = running[r.mode]
            w.writerow([_fmt(d[c]) for c in ATTACK_COLUMNS])

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in report.summaries:
            d = asdict(s)
            d["wall_time_s"] = s.wall_time_s if timing else math.nan
            w.writerow([_fmt(d[c]) for c in SUMMARY_COLUMNS])

    with open(out / "cumulative.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attempt"] + [s.mode for s in report.summaries])
        longest = max((len(s.cumulative) for s in report.summaries), default=0)
        for i in range(longest):
            w.writerow([i + 1] + [s.cumulative[i] if i < len(s.cumulative) else "" for s in report.summaries])

    # wall clock lives apart so the files above stay reproducible byte for byte
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "batch_id", "sample_idx", "wall_ms"])
        for r in report.rows:
            w.writerow([r.mode, r.batch_id, r.sample_idx, f"{r.wall_ms:.3f}"])

    (out / "campaign.ini").write_text(dump_config(report.config))

    if report.config.panels:
        panel_dir = out / "panels"
        panel_dir.mkdir(exist_ok=True)
        for (mode, b), triples in report.images.items():
            ext = "pgm" if triples[0][0].shape[0] == 1 else "ppm"
            write_panel([list(t) for t in triples], panel_dir / f"{mode}_batch{b:03d}.{ext}")
