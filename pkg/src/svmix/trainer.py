"""Training loops: disentangled (EMA-teacher) selector training and its entangled ablation.

A disentangled step computes the mask from the frozen teacher's features,
trains the student on the mixed clip with the mask detached, trains the
selector through the teacher with the mask attached (plus the mask-mean
loss), and finally moves the teacher toward the student by EMA.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as tt
from .config import ExperimentConfig
from .data import VideoBatch, beta_from_gammas, generate, pair_batches
from .errors import ContractError
from .mixing import (EnsemblePolicy, MixMask, blend, choose_kind, cutmix_baseline, ensemble_mask,
                     mix_labels, mixup_baseline)
from .recognizer import Recognizer, evaluate, soft_ce
from .selector import Kind, VolumeSelector, encode, permute_grid
from .tensor import Tensor

log = logging.getLogger(__name__)

STREAMS = ("init_student", "init_selector", "loader", "pairing", "lambda", "ensemble", "cutmix", "dropout")


class NonFiniteLoss(ContractError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SGD:
    """Heavy-ball SGD with optional L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def state_dict(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}{i}": v.copy() for i, v in enumerate(self.velocity)}


def ema_update(teacher, student, m: float):
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    t_params = teacher.parameters() if hasattr(teacher, "parameters") else list(teacher)
    s_params = student.parameters() if hasattr(student, "parameters") else list(student)
    if len(t_params) != len(s_params):
        raise ContractError("teacher and student have different parameter counts")
    for pt, ps in zip(t_params, s_params):
        if pt.shape != ps.shape:
            raise ContractError(f"teacher/student shape mismatch {pt.shape} vs {ps.shape}")
        pt.data = m * pt.data + (1.0 - m) * ps.data
    return teacher


def loss_mask(mask: MixMask, lam=None) -> Tensor:
    """Batch mean of |lam - mean over (T, H, W) of the mask|."""
    lam = mask.lam if lam is None else lam
    w = mask.weights
    B = w.shape[0]
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    means = tt.mean(w, axis=(1, 2, 3))
    return tt.mean(tt.tabs(Tensor(lam) - means))


@dataclass
class StepReport:
    step: int
    student_loss: float
    selector_loss: float = float("nan")
    lm: float = float("nan")
    lam: float = float("nan")
    kind: str = "none"
    draw: float = float("nan")
    mask_mean: float = float("nan")
    grad_student: float = 0.0
    grad_selector: float = 0.0
    grad_teacher: float = 0.0
    # gradient-routing probes, all zero when the pipeline is disentangled
    leak_student_to_selector: float = 0.0
    leak_selector_to_student: float = 0.0

    def as_dict(self):
        return asdict(self)


@dataclass
class TrainerState:
    config: ExperimentConfig
    student: Recognizer
    teacher: Recognizer
    selector: Optional[VolumeSelector]
    opt_student: SGD
    opt_selector: Optional[SGD]
    rngs: Dict[str, np.random.Generator]
    step: int = 0
    last_mask: Optional[MixMask] = field(default=None, repr=False)

    @property
    def policy(self) -> EnsemblePolicy:
        c = self.config
        if c.arm == "svmix-spatial":
            return EnsemblePolicy("probabilistic", 0.0)
        if c.arm == "svmix-temporal":
            return EnsemblePolicy("probabilistic", 1.0)
        return EnsemblePolicy(c.ensemble_mode, c.switch_prob)


def init_state(config: ExperimentConfig) -> TrainerState:
    config.validate()
    seeds = np.random.SeedSequence(config.seed).spawn(len(STREAMS))
    rngs = {name: np.random.default_rng(s) for name, s in zip(STREAMS, seeds)}
    student = Recognizer.create(config.recognizer_config(), rngs["init_student"])
    teacher = student.copy(requires_grad=False)
    selector = opt_sel = None
    if config.uses_selector:
        selector = VolumeSelector.create(student.cfg.feature_shape[-1], config.d_k, rngs["init_selector"],
                                         share_params=config.share_params, embed=config.embed_lambda,
                                         upsample_mode=config.upsample)
        opt_sel = SGD(selector.parameters(), config.lr_selector, config.sgd_momentum)
    opt_s = SGD(student.parameters(), config.lr_student, config.sgd_momentum, config.weight_decay)
    return TrainerState(config, student, teacher, selector, opt_s, opt_sel, rngs)


def _grad_norm(params) -> float:
    return tt.parameters_grad_norm(params)


def _teacher_grad(state) -> float:
    return _grad_norm(state.teacher.parameters())


def _student_weights(mask: MixMask) -> Tensor:
    return tt.detach(mask.weights)


def _check_finite(report: StepReport, *values):
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteLoss(f"non-finite loss at step {report.step}: {report.as_dict()}", report)


def _draw_mask(state: TrainerState, batch: VideoBatch):
    """Pair the batch, draw kind and lambda, and compute the mask from teacher features."""
    c = state.config
    b_i, b_j, perm = pair_batches(batch, state.rngs["pairing"])
    policy = state.policy
    kind = mu = None
    if policy.mode == "probabilistic":
        kind, mu = choose_kind(policy, state.rngs["ensemble"])
    alpha = c.alpha_temporal if kind is Kind.TEMPORAL else c.alpha_spatial
    lam = beta_from_gammas(state.rngs["lambda"], alpha, size=len(batch))
    z_i = encode(b_i.frames, state.teacher)
    z_j = permute_grid(z_i, perm)
    mask = ensemble_mask(state.selector, z_i, z_j, lam, b_i.frames.shape[1:4], policy,
                         state.rngs["ensemble"], kind=kind)
    mask.draw = mu
    return b_i, b_j, mask


def _mask_report(report: StepReport, mask: MixMask, lm: Optional[Tensor]):
    report.lam = float(np.mean(mask.lam))
    report.kind = mask.kind
    report.draw = float("nan") if mask.draw is None else mask.draw
    report.mask_mean = float(mask.weights.data.mean())
    if lm is not None:
        report.lm = lm.item()


def _lm_term(state: TrainerState, mask: MixMask):
    c = state.config
    lm = loss_mask(mask)
    return lm, (lm * c.omega if c.use_lm and c.omega > 0 else None)


def disentangled_step(state: TrainerState, batch: VideoBatch) -> StepReport:
    s, sel = state.student, state.selector
    state.opt_student.zero_grad()
    state.opt_selector.zero_grad()
    b_i, b_j, mask = _draw_mask(state, batch)
    soft = mix_labels(b_i.labels, b_j.labels, mask.lam)

    # student path: the mask is a constant
    x_s = blend(b_i.frames, b_j.frames, _student_weights(mask))
    loss_s = soft_ce(s(x_s, rng=state.rngs["dropout"]), soft)
    loss_s.backward()
    leak_theta = _grad_norm(sel.parameters())
    student_grads = [None if p.grad is None else p.grad.copy() for p in s.parameters()]

    # selector path: gradients reach theta through the frozen teacher only
    x_t = blend(b_i.frames, b_j.frames, mask.weights)
    loss_t = soft_ce(state.teacher(x_t), soft)
    lm, lm_scaled = _lm_term(state, mask)
    loss_sel = loss_t if lm_scaled is None else loss_t + lm_scaled
    loss_sel.backward()
    leak_phi = 0.0
    for p, g in zip(s.parameters(), student_grads):
        if g is None and p.grad is not None:
            leak_phi += float(np.sum(p.grad ** 2))
        elif g is not None:
            leak_phi += float(np.sum((p.grad - g) ** 2))

    report = StepReport(state.step, loss_s.item(), loss_sel.item(),
                        grad_student=_grad_norm(s.parameters()), grad_selector=_grad_norm(sel.parameters()),
                        grad_teacher=_teacher_grad(state), leak_student_to_selector=leak_theta,
                        leak_selector_to_student=math.sqrt(leak_phi))
    _mask_report(report, mask, lm)
    _check_finite(report, report.student_loss, report.selector_loss)

    state.opt_student.step()
    state.opt_selector.step()
    ema_update(state.teacher, s, state.config.momentum)
    state.last_mask = mask
    state.step += 1
    return report


def entangled_step(state: TrainerState, batch: VideoBatch) -> StepReport:
    s, sel = state.student, state.selector
    state.opt_student.zero_grad()
    state.opt_selector.zero_grad()
    b_i, b_j, mask = _draw_mask(state, batch)
    soft = mix_labels(b_i.labels, b_j.labels, mask.lam)
    x = blend(b_i.frames, b_j.frames, mask.weights)
    loss_ce = soft_ce(s(x, rng=state.rngs["dropout"]), soft)
    lm, lm_scaled = _lm_term(state, mask)
    loss = loss_ce if lm_scaled is None else loss_ce + lm_scaled
    loss.backward()

    report = StepReport(state.step, loss_ce.item(), loss.item(),
                        grad_student=_grad_norm(s.parameters()), grad_selector=_grad_norm(sel.parameters()),
                        grad_teacher=_teacher_grad(state))
    _mask_report(report, mask, lm)
    _check_finite(report, report.student_loss, report.selector_loss)

    state.opt_student.step()
    state.opt_selector.step()
    ema_update(state.teacher, s, state.config.momentum)
    state.last_mask = mask
    state.step += 1
    return report


def selector_only_step(state: TrainerState, batch: VideoBatch) -> StepReport:
    """Update theta from the scaled mask-mean loss alone (no recognition loss, student frozen)."""
    sel = state.selector
    state.opt_selector.zero_grad()
    _, _, mask = _draw_mask(state, batch)
    lm = loss_mask(mask)
    loss = lm * state.config.omega
    loss.backward()
    report = StepReport(state.step, float("nan"), loss.item(), grad_selector=_grad_norm(sel.parameters()))
    _mask_report(report, mask, lm)
    _check_finite(report, report.selector_loss)
    state.opt_selector.step()
    state.last_mask = mask
    state.step += 1
    return report


def baseline_step(state: TrainerState, batch: VideoBatch) -> StepReport:
    """Student-only step for the none / mixup / cutmix arms."""
    c, s = state.config, state.student
    state.opt_student.zero_grad()
    mask = None
    if c.arm == "none":
        x, y = Tensor(batch.frames), batch.labels
    else:
        b_i, b_j, _ = pair_batches(batch, state.rngs["pairing"])
        lam = beta_from_gammas(state.rngs["lambda"], c.alpha_baseline, size=len(batch))
        if c.arm == "mixup":
            mixed = mixup_baseline(b_i, b_j, lam)
        else:
            mixed = cutmix_baseline(b_i, b_j, lam, state.rngs["cutmix"])
        x, y, mask = mixed.frames, mixed.soft_labels, mixed.mask
    loss = soft_ce(s(x, rng=state.rngs["dropout"]), y)
    loss.backward()
    report = StepReport(state.step, loss.item(), grad_student=_grad_norm(s.parameters()))
    if mask is not None:
        _mask_report(report, mask, None)
    _check_finite(report, report.student_loss)
    state.opt_student.step()
    ema_update(state.teacher, s, c.momentum)
    state.last_mask = mask
    state.step += 1
    return report


def train_step(state: TrainerState, batch: VideoBatch) -> StepReport:
    c = state.config
    if not c.uses_selector:
        return baseline_step(state, batch)
    if c.train_mode == "entangled":
        return entangled_step(state, batch)
    return disentangled_step(state, batch)


@dataclass
class TrainResult:
    state: TrainerState
    history: List[dict]          # one record per epoch, epoch 0 is the untrained model
    steps: List[StepReport]

    @property
    def final_val_accuracy(self) -> float:
        return self.history[-1]["val_acc"]


def train(config: ExperimentConfig, data=None, on_step: Optional[Callable[[StepReport, TrainerState], None]] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Seeded training loop.

    The student is evaluated on train and val before training, every
    ``eval_every`` epochs, and after the last epoch.
    """
    config.validate()
    train_set, val_set = data if data is not None else generate(config.dataset_spec())
    state = init_state(config)
    history, steps = [], []

    def record(epoch, loss):
        rec = {"epoch": epoch, "train_loss": loss,
               "train_acc": evaluate(state.student, train_set),
               "val_acc": evaluate(state.student, val_set)}
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)

    record(0, float("nan"))
    n = len(train_set)
    drop_last = n % config.batch_size == 1
    for epoch in range(1, config.epochs + 1):
        if config.lr_decay_epoch is not None and epoch == config.lr_decay_epoch + 1:
            state.opt_student.lr *= config.lr_decay_factor
            if state.opt_selector is not None:
                state.opt_selector.lr *= config.lr_decay_factor
        losses = []
        for batch in train_set.batches(config.batch_size, state.rngs["loader"], drop_last=drop_last):
            rep = train_step(state, batch)
            steps.append(rep)
            losses.append(rep.student_loss)
            if on_step is not None:
                on_step(rep, state)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            record(epoch, float(np.mean(losses)))
            log.debug("epoch %d val_acc %.3f", epoch, history[-1]["val_acc"])
    return TrainResult(state, history, steps)
