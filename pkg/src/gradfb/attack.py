"""Single-image gradient inversion: DLG and iDLG, from random or blended starts."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .client import GradientSet, one_hot
from .lbfgs import LbfgsOptions, minimize
from .model import Model, forward

DEFAULT_SUCCESS_TOLERANCE = 1e-6


class UnrecoverableLabel(ValueError):
    """The final-layer bias gradient has no strictly negative entry."""


@dataclass(frozen=True)
class AttackMode:
    base: str = "dlg"
    init: str = "random"
    nf: bool = False

    def __post_init__(self):
        if self.base not in ("dlg", "idlg"):
            raise ValueError(f"unknown attack base {self.base!r}")
        if self.init not in ("random", "blended"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.nf and self.init != "blended":
            raise ValueError("the noise-factor policy only applies to blended initialization")

    @property
    def name(self) -> str:
        parts = [self.base]
        if self.init == "blended":
            parts.append("fb")
        if self.nf:
            parts.append("nf")
        return "-".join(parts)

    @classmethod
    def parse(cls, name: str) -> "AttackMode":
        parts = name.strip().lower().split("-")
        if parts[0] not in ("dlg", "idlg") or parts[1:] not in ([], ["fb"], ["fb", "nf"]):
            raise ValueError(f"unknown attack mode {name!r}")
        return cls(parts[0], "blended" if "fb" in parts else "random", "nf" in parts)

    def __str__(self):
        return self.name


ALL_MODES = tuple(AttackMode.parse(n) for n in ("dlg", "idlg", "dlg-fb", "idlg-fb", "dlg-fb-nf", "idlg-fb-nf"))


@dataclass
class AttackResult:
    reconstructed_image: np.ndarray
    reconstructed_label: int
    success: bool
    iterations_used: int
    final_matching_loss: float
    eval_mse: float = math.nan
    wall_time: float = 0.0
    loss_trace: list[float] = field(default_factory=list, repr=False)
    termination: str = ""
    label_inferred: bool = False


def infer_label_idlg(target: GradientSet) -> int:
    """Recover the true label from the sign of the last-layer bias gradient.

    With cross-entropy on a one-hot label that gradient is softmax(z) - onehot(y),
    negative only at the true class.
    """
    bias = np.asarray(target.bias_grad)
    i = int(np.argmin(bias))
    if not bias[i] < 0:
        raise UnrecoverableLabel("no strictly negative bias-gradient coordinate; label cannot be inferred")
    return i


def matching_loss(model: Model, dummy_image: Tensor, dummy_label_param: Tensor | None,
                  target: GradientSet, mode: AttackMode, label: int | None = None) -> Tensor:
    """Squared distance between the dummy gradient and the observed one.

    In ``idlg`` mode the label is the inferred (or given) class and
    ``dummy_label_param`` is ignored; in ``dlg`` mode it is a free logit
    vector whose softmax serves as a soft label.
    """
    if len(target.grads) != len(model.segments):
        raise ValueError(f"target has {len(target.grads)} tensors, model has {len(model.segments)}")
    for seg, g in zip(model.segments, target.grads):
        if tuple(np.shape(g)) != seg.shape:
            raise ValueError(f"target {seg.name}: shape {np.shape(g)} does not match {seg.shape}")
    num_classes = model.config.num_classes
    if mode.base == "idlg":
        label = infer_label_idlg(target) if label is None else label
        probs = Tensor(one_hot(label, num_classes))
    else:
        if dummy_label_param is None or dummy_label_param.shape != (num_classes,):
            raise ValueError(f"dlg mode needs label logits of shape ({num_classes},)")
        probs = ad.softmax(dummy_label_param)
    params = model.param_tensors(requires_grad=True)
    loss = ad.softmax_cross_entropy(forward(model, dummy_image, params), probs)
    dummy_grads = ad.grad(loss, params, create_graph=True)
    total = None
    for g, t in zip(dummy_grads, target.grads):
        term = ad.sum(ad.square(ad.sub(g, Tensor(t))))
        total = term if total is None else ad.add(total, term)
    return total


def random_image(shape, seed) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)


def attack_single(model: Model, target: GradientSet, init_image, mode: AttackMode,
                  opts: LbfgsOptions | None = None,
                  success_tolerance: float = DEFAULT_SUCCESS_TOLERANCE,
                  seed=0, true_image=None) -> AttackResult:
    """Reconstruct the sample behind ``target`` starting from ``init_image``.

    ``seed`` drives the DLG label-logit initialization; ``true_image`` is only
    used to report ``eval_mse`` and never reaches the optimizer.
    """
    opts = opts or LbfgsOptions()
    shape = model.config.input_shape
    init = np.asarray(init_image, dtype=np.float64)
    if init.shape != shape:
        raise ValueError(f"init image shape {init.shape} does not match model input {shape}")
    if init.min() < 0 or init.max() > 1:
        raise ValueError("init image must lie in [0, 1]")
    started = time.perf_counter()

    n_pix = init.size
    num_classes = model.config.num_classes
    base = mode.base
    label = None
    if base == "idlg":
        try:
            label = infer_label_idlg(target)
        except UnrecoverableLabel:
            base = "dlg"
    solve_mode = AttackMode(base)

    x0 = init.reshape(-1)
    if base == "dlg":
        logits0 = np.random.default_rng(seed).standard_normal(num_classes)
        x0 = np.concatenate([x0, logits0])
    box_mask = np.zeros(x0.size, dtype=bool)
    box_mask[:n_pix] = True

    def objective(z):
        image = Tensor(z[:n_pix].reshape(shape), requires_grad=True)
        wrt = [image]
        label_param = None
        if base == "dlg":
            label_param = Tensor(z[n_pix:], requires_grad=True)
            wrt.append(label_param)
        loss = matching_loss(model, image, label_param, target, solve_mode, label)
        grads = ad.grad(loss, wrt)
        return loss.item(), np.concatenate([g.data.reshape(-1) for g in grads])

    # the attacker stops as soon as the match is good enough to count
    run_opts = replace(opts, target_loss=success_tolerance)
    try:
        res = minimize(objective, x0, run_opts, box_mask=box_mask)
        z, loss, iters, trace, termination = res.x_final, res.loss, res.iterations_used, res.loss_trace, res.termination
    except FloatingPointError:
        z, loss, iters, trace, termination = x0, math.inf, 0, [], "non_finite"

    image = np.clip(z[:n_pix], 0.0, 1.0).reshape(shape)
    rec_label = label if base == "idlg" else int(np.argmax(z[n_pix:]))
    mse = math.nan
    if true_image is not None:
        mse = float(np.mean((image - np.asarray(true_image, dtype=np.float64)) ** 2))
    return AttackResult(
        reconstructed_image=image,
        reconstructed_label=int(rec_label),
        success=bool(loss <= success_tolerance),
        iterations_used=int(iters),
        final_matching_loss=float(loss),
        eval_mse=mse,
        wall_time=time.perf_counter() - started,
        loss_trace=list(trace),
        termination=termination,
        label_inferred=base == "idlg",
    )
