"""Acceptance checks shared by the ``selftest`` command and the test suite.

Every check returns a :class:`CheckResult`; none of them raises on a failed
property, so a report can list all outcomes. Reference computations here are
written straight from the definitions and never call the code they judge.
"""
from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional
from unittest import mock

import numpy as np

from . import selector as selector_mod
from . import tensor as tt
from . import trainer as trainer_mod
from .config import ExperimentConfig
from .data import generate
from .errors import SVMixError
from .gradcheck import norm_relative_error, numeric_grad, relative_error
from .mixing import EnsemblePolicy, blend, choose_kind, mix_labels
from .recognizer import Recognizer, RecognizerConfig, soft_ce
from .selector import FeatureGrid, Kind, SelectorParams, VolumeSelector, VolumeSet, attend, encode
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    budget: Optional[float] = None
    values: Dict[str, object] = field(default_factory=dict)

    @property
    def within_budget(self) -> bool:
        return self.budget is None or self.seconds <= self.budget

    @property
    def ok(self) -> bool:
        return self.passed and self.within_budget

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        budget = "" if self.budget is None else f" / {self.budget:g}s"
        over = "" if self.within_budget else " (over time budget)"
        return f"[{status}] {self.name}: {self.detail} ({self.seconds:.1f}s{budget}){over}"


def _timed(name: str, budget: Optional[float], fn: Callable[[], tuple]) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail, values = fn()
    except SVMixError as exc:
        passed, detail, values = False, f"{type(exc).__name__}: {exc}", {}
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start, budget, values)


# -- reference computations --------------------------------------------------

def reference_attend(v_i, v_j, w_q, w_k, w_v) -> List[float]:
    """Keep weights of one group, written as plain loops over nested lists."""
    N, C, d_k = len(v_i), len(v_i[0]), len(w_q[0])
    q = [[sum(v_i[n][c] * w_q[c][d] for c in range(C)) for d in range(d_k)] for n in range(N)]
    k = [[sum(v_j[n][c] * w_k[c][d] for c in range(C)) for d in range(d_k)] for n in range(N)]
    val = [sum(v_j[n][c] * w_v[c][0] for c in range(C)) for n in range(N)]
    out = []
    for n in range(N):
        s = [sum(q[n][d] * k[m][d] for d in range(d_k)) / math.sqrt(d_k) for m in range(N)]
        top = max(s)
        e = [math.exp(x - top) for x in s]
        total = sum(e)
        r = sum(e[m] / total * val[m] for m in range(N))
        out.append(1.0 - 1.0 / (1.0 + math.exp(-r)))
    return out


# -- 1: selector-loss gradients ------------------------------------------------

def _tiny_teacher(rng, frames=4, size=8, classes=2, channels=1):
    cfg = RecognizerConfig(frames=frames, height=size, width=size, channels=channels, num_classes=classes,
                           widths=(4, 4), strides=(2, 2), head_init="he")
    return Recognizer.create(cfg, rng).copy(requires_grad=False)


def check_selector_gradients(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> CheckResult:
    """Finite differences of soft_ce(teacher(mixed)) + omega * mask loss w.r.t. the selector."""
    def body():
        rng = np.random.default_rng(seed)
        teacher = _tiny_teacher(rng)
        x_i, x_j = rng.random((2, 4, 8, 8, 1)), rng.random((2, 4, 8, 8, 1))
        y_i, y_j = np.eye(2)[[0, 1]], np.eye(2)[[1, 1]]
        lam = np.array([0.3, 0.65])
        sel = VolumeSelector.create(4, 4, rng)
        for p in sel.parameters():
            p.data = rng.normal(0.0, 0.5, p.shape)
        z_i, z_j = encode(x_i, teacher), encode(x_j, teacher)
        worst, worst_entry = 0.0, 0.0
        for kind in Kind:
            def loss():
                m = sel.mask_from_features(z_i, z_j, lam, kind, (4, 8, 8))
                ce = soft_ce(teacher(blend(x_i, x_j, m.weights)), mix_labels(y_i, y_j, lam))
                return ce + trainer_mod.loss_mask(m) * 1.0

            for p in sel.parameters():
                p.grad = None
            loss().backward()
            for p in sel.parameters():
                num = numeric_grad(lambda: loss().item(), p, h)
                worst = max(worst, norm_relative_error(p.grad, num))
                worst_entry = max(worst_entry, relative_error(p.grad, num))
        detail = f"worst relative error {worst:.2e} (entrywise {worst_entry:.2e}), tolerance {tol:g}"
        return worst < tol, detail, {"error": worst, "entrywise": worst_entry}

    return _timed("selector-loss gradient check", 60.0, body)


# -- 2: attention against the reference ---------------------------------------

def check_attend_reference(seeds: int = 50, tol: float = 1e-12) -> CheckResult:
    def body():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            G, N, C, d_k = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), \
                int(rng.integers(1, 5))
            vi, vj = rng.normal(size=(G, N, C)), rng.normal(size=(G, N, C))
            w_q, w_k, w_v = rng.normal(size=(C, d_k)), rng.normal(size=(C, d_k)), rng.normal(size=(C, 1))
            p = SelectorParams(Tensor(w_q), Tensor(w_k), Tensor(w_v))
            grid = (G, 1, 1, N)
            got = attend(VolumeSet(Tensor(vi), Kind.SPATIAL, grid), VolumeSet(Tensor(vj), Kind.SPATIAL, grid), p)
            want = np.array([reference_attend(vi[g].tolist(), vj[g].tolist(), w_q.tolist(), w_k.tolist(),
                                              w_v.tolist()) for g in range(G)])
            worst = max(worst, float(np.max(np.abs(got.data - want))))
        return worst <= tol, f"max abs difference {worst:.2e} over {seeds} seeds, tolerance {tol:g}", \
            {"error": worst}

    return _timed("attention vs straight-line reference", 5.0, body)


# -- 3: mask contracts -----------------------------------------------------------

def check_mask_contracts(configs: int = 1000, seed: int = 0) -> CheckResult:
    """Random selectors, feature grids and upsampling factors; every mask must keep its contracts."""
    slack = 8 * np.finfo(np.float64).eps

    def body():
        rng = np.random.default_rng(seed)
        problems: List[str] = []
        for i in range(configs):
            B, Tf, Hf, Wf = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3)), \
                int(rng.integers(1, 3))
            C, d_k = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            ft, fh, fw = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
            kind = Kind.SPATIAL if rng.random() < 0.5 else Kind.TEMPORAL
            mode = "nearest" if rng.random() < 0.7 else "trilinear"
            sel = VolumeSelector.create(C, d_k, rng, upsample_mode=mode)
            scale = float(rng.choice([0.1, 1.0, 10.0]))
            for p in sel.parameters():
                p.data = rng.normal(0.0, scale, p.shape)
            zi = rng.normal(size=(B, Tf, Hf, Wf, C))
            zj = rng.normal(size=(B, Tf, Hf, Wf, C))
            lam = rng.uniform(1e-6, 1.0 - 1e-6, size=B)
            target = (Tf * ft, Hf * fh, Wf * fw)
            m = sel.mask_from_features(FeatureGrid(Tensor(zi), (ft, fh, fw)), FeatureGrid(Tensor(zj), (ft, fh, fw)),
                                       lam, kind, target)
            w = m.weights.data
            if w.shape != (B,) + target or np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
                problems.append(f"config {i}: mask outside [0, 1] or wrong shape")
            if kind is Kind.TEMPORAL:
                flat = w.reshape(B, target[0], -1)
                if np.any(flat.max(axis=2) - flat.min(axis=2) != 0.0):
                    problems.append(f"config {i}: temporal mask varies inside a frame")
            elif Tf > 1 and mode == "nearest":
                t = int(rng.integers(0, Tf))
                zj2 = zj.copy()
                zj2[:, t] += rng.normal(size=zj2[:, t].shape)
                m2 = sel.mask_from_features(FeatureGrid(Tensor(zi), (ft, fh, fw)),
                                            FeatureGrid(Tensor(zj2), (ft, fh, fw)), lam, kind, target).weights.data
                keep = np.ones(target[0], bool)
                keep[t * ft:(t + 1) * ft] = False
                if not np.array_equal(w[:, keep], m2[:, keep]):
                    problems.append(f"config {i}: spatial mask leaks across timestamps")
            K = int(rng.integers(2, 6))
            y_i, y_j = np.eye(K)[rng.integers(0, K, B)], np.eye(K)[rng.integers(0, K, B)]
            soft = mix_labels(y_i, y_j, lam)
            if np.any(np.abs(soft.sum(axis=1) - 1.0) > 1e-12):
                problems.append(f"config {i}: soft labels do not sum to 1")
            x_i = rng.random((B,) + target + (2,))
            x_j = rng.random((B,) + target + (2,))
            mixed = blend(x_i, x_j, m.weights).data
            if np.any(mixed < np.minimum(x_i, x_j) - slack) or np.any(mixed > np.maximum(x_i, x_j) + slack):
                problems.append(f"config {i}: mixed clip leaves the convex hull of its sources")
        detail = f"{configs} random configurations, {len(problems)} violations"
        if problems:
            detail += f"; first: {problems[0]}"
        return not problems, detail, {"violations": problems[:10]}

    return _timed("mask contracts", 30.0, body)


# -- 4: ensemble switching rate ------------------------------------------------------

def check_switch_rate(draws: int = 10_000, seed: int = 0) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        half = EnsemblePolicy("probabilistic", 0.5)
        frac = float(np.mean([choose_kind(half, rng)[0] is Kind.TEMPORAL for _ in range(draws)]))
        zero = sum(choose_kind(EnsemblePolicy("probabilistic", 0.0), rng)[0] is Kind.TEMPORAL for _ in range(draws))
        one = sum(choose_kind(EnsemblePolicy("probabilistic", 1.0), rng)[0] is Kind.TEMPORAL for _ in range(draws))
        ok = 0.485 <= frac <= 0.515 and zero == 0 and one == draws
        return ok, f"temporal fraction {frac:.4f} at P=0.5; {zero} at P=0, {one}/{draws} at P=1", {"fraction": frac}

    return _timed("ensemble switching rate", 5.0, body)


# -- 5: mask-mean pull ------------------------------------------------------------

PULL_LAMBDAS = (0.25, 0.5, 0.75)


def mask_pull_config(**changes) -> ExperimentConfig:
    base = dict(num_classes=4, samples_per_class=8, val_per_class=8, frames=8, height=32, width=32,
                widths=(8, 16), batch_size=8, omega=10.0, lr_selector=0.01, arm="svmix-full")
    return ExperimentConfig(**{**base, **changes})


def mask_pull(config: Optional[ExperimentConfig] = None, steps: int = 500, eval_pairs: int = 100,
              lambdas=PULL_LAMBDAS) -> Dict[float, float]:
    """Selector-only training, then mean |mean(M) - lam| over evaluation pairs for each lam."""
    config = config or mask_pull_config()
    train_set, val_set = generate(config.dataset_spec())
    state = trainer_mod.init_state(config)
    while state.step < steps:
        for batch in train_set.batches(config.batch_size, state.rngs["loader"], drop_last=True):
            trainer_mod.selector_only_step(state, batch)
            if state.step >= steps:
                break
    rng = np.random.default_rng(12345)
    idx_i = rng.integers(0, len(val_set), eval_pairs)
    idx_j = (idx_i + rng.integers(1, len(val_set), eval_pairs)) % len(val_set)
    z = encode(val_set.frames, state.teacher)
    zi = FeatureGrid(Tensor(z.values.data[idx_i]), z.factors)
    zj = FeatureGrid(Tensor(z.values.data[idx_j]), z.factors)
    target = val_set.frames.shape[1:4]
    policy = state.policy
    out = {}
    with tt.no_grad():
        for lam in lambdas:
            gaps = []
            if policy.mode == "average":
                kinds = [None]
            elif policy.switch_prob in (0.0, 1.0):
                kinds = [Kind.TEMPORAL if policy.switch_prob == 1.0 else Kind.SPATIAL]
            else:
                kinds = list(Kind)
            for kind in kinds:
                if kind is None:
                    w = 0.5 * (state.selector.mask_from_features(zi, zj, lam, Kind.TEMPORAL, target).weights.data
                               + state.selector.mask_from_features(zi, zj, lam, Kind.SPATIAL, target).weights.data)
                else:
                    w = state.selector.mask_from_features(zi, zj, lam, kind, target).weights.data
                gaps.append(np.abs(w.reshape(eval_pairs, -1).mean(axis=1) - lam))
            out[lam] = float(np.mean(np.concatenate(gaps)))
    return out


def check_mask_pull(config: Optional[ExperimentConfig] = None, steps: int = 500, tol: float = 0.05) -> CheckResult:
    def body():
        gaps = mask_pull(config, steps)
        text = ", ".join(f"lambda {k:g}: {v:.4f}" for k, v in gaps.items())
        return all(v < tol for v in gaps.values()), f"mean |mean(M) - lambda| {text}; tolerance {tol:g}", \
            {"gaps": gaps}

    return _timed("mask-mean pull (selector only)", 300.0, body)


# -- 6: EMA closed form ------------------------------------------------------------

def check_ema_closed_form(steps: int = 50, tol: float = 1e-12) -> CheckResult:
    def body():
        worst = 0.0
        for m in (0.0, 0.5, 0.999):
            rng = np.random.default_rng(7)
            student = _tiny_teacher(rng)
            teacher = _tiny_teacher(rng)
            start = [p.data.copy() for p in teacher.parameters()]
            for _ in range(steps):
                trainer_mod.ema_update(teacher, student, m)
            for t0, t, s in zip(start, teacher.parameters(), student.parameters()):
                want = m ** steps * t0 + (1.0 - m ** steps) * s.data
                worst = max(worst, float(np.max(np.abs(t.data - want))))
        return worst <= tol, f"max deviation from closed form {worst:.2e} after {steps} steps, m in {{0, 0.5, 0.999}}", \
            {"error": worst}

    return _timed("EMA closed form", 1.0, body)


# -- 7: gradient routing and mutation canaries ---------------------------------------

def _routing_probe(steps: int = 4, seed: int = 0) -> Dict[str, float]:
    cfg = ExperimentConfig(num_classes=2, samples_per_class=4, val_per_class=2, frames=4, height=16, width=16,
                           widths=(3, 4), d_k=4, batch_size=4, seed=seed, head_init="he")
    state = trainer_mod.init_state(cfg)
    train_set, _ = generate(cfg.dataset_spec())
    worst = {"student_to_selector": 0.0, "selector_to_student": 0.0, "teacher": 0.0}
    for batch in list(train_set.batches(4, state.rngs["loader"]))[:steps]:
        rep = trainer_mod.disentangled_step(state, batch)
        worst["student_to_selector"] = max(worst["student_to_selector"], rep.leak_student_to_selector)
        worst["selector_to_student"] = max(worst["selector_to_student"], rep.leak_selector_to_student)
        worst["teacher"] = max(worst["teacher"], rep.grad_teacher)
    return worst


def routing_clean(steps: int = 4) -> bool:
    return all(v == 0.0 for v in _routing_probe(steps).values())


def mask_invariants_hold(steps: int = 250) -> bool:
    """Short version of the lambda-matching check plus the mask range, used for canaries."""
    cfg = mask_pull_config(samples_per_class=4, val_per_class=4, widths=(4, 8))
    rng = np.random.default_rng(0)
    z = FeatureGrid(Tensor(rng.random((2, 2, 2, 2, 3))), (1, 1, 1))
    sel = VolumeSelector.create(3, 4, rng)
    in_range = True
    for kind in Kind:
        w = sel.mask_from_features(z, z, 0.5, kind, (2, 2, 2)).weights.data
        in_range &= bool(np.all((w >= 0) & (w <= 1)))
    gaps = mask_pull(cfg, steps, eval_pairs=20)
    return in_range and all(v < 0.05 for v in gaps.values())


@contextmanager
def inverted_sign():
    """Mutation: flip the sign of the inversion, M = sigmoid(r) - 1."""
    with mock.patch.object(selector_mod, "_invert", lambda s: s - 1.0):
        yield


@contextmanager
def student_sees_attached_mask():
    """Mutation: hand the student the live mask, leaking its loss into the selector."""
    with mock.patch.object(trainer_mod, "_student_weights", lambda mask: mask.weights):
        yield


def check_disentanglement(pull_steps: int = 250) -> CheckResult:
    def body():
        clean = _routing_probe()
        clean_ok = all(v == 0.0 for v in clean.values())
        with student_sees_attached_mask():
            leaked = _routing_probe()
        leak_caught = leaked["student_to_selector"] > 0.0
        clean_mask = mask_invariants_hold(pull_steps)
        with inverted_sign():
            flipped_mask = mask_invariants_hold(pull_steps)
        ok = clean_ok and leak_caught and clean_mask and not flipped_mask
        detail = (f"clean routing leaks {max(clean.values()):.1e}; leak canary "
                  f"{'caught' if leak_caught else 'MISSED'} ({leaked['student_to_selector']:.2e}); "
                  f"mask invariants clean={'hold' if clean_mask else 'FAIL'}, "
                  f"sign-flip canary {'caught' if not flipped_mask else 'MISSED'}")
        return ok, detail, {"clean": clean, "leaked": leaked}

    return _timed("gradient disentanglement and mutation canaries", 30.0, body)


# -- 8: trend reproduction -------------------------------------------------------------

TREND_SEEDS = (0, 1, 2, 3, 4)
TREND_MARGIN = 0.02


def trend_config(**changes) -> ExperimentConfig:
    """The small-data regime used for the arm comparison; only the final accuracy matters."""
    return ExperimentConfig(**{"eval_every": 30, **changes})


def trend_cells() -> Dict[str, dict]:
    return {"none": {"arm": "none"}, "svmix-full": {"arm": "svmix-full"},
            "svmix-spatial": {"arm": "svmix-spatial"}, "svmix-temporal": {"arm": "svmix-temporal"},
            "svmix-full-entangled": {"arm": "svmix-full", "train_mode": "entangled"}}


def check_trend(seeds=TREND_SEEDS, base: Optional[ExperimentConfig] = None, out_dir=None,
                on_run=None) -> CheckResult:
    from .experiment import MatrixSpec, ablate

    def body():
        res = ablate(base or trend_config(), MatrixSpec(trend_cells(), tuple(seeds)), out_dir, on_run=on_run)
        c = {cell.name: cell for cell in res.cells}
        full, none = c["svmix-full"], c["none"]
        gap = full.mean - none.mean
        a = bool(gap >= TREND_MARGIN) and not full.failures and not none.failures
        b = full.mean >= max(c["svmix-spatial"].mean, c["svmix-temporal"].mean)
        cc = full.mean >= c["svmix-full-entangled"].mean
        fmt = lambda s: f"{100 * s.mean:.1f}+-{100 * s.std:.1f}"
        detail = (f"(a) full {fmt(full)} vs none {fmt(none)}: gap {100 * gap:+.1f} points, need +2.0 "
                  f"[{'pass' if a else 'fail'}]; (b) spatial {fmt(c['svmix-spatial'])}, temporal "
                  f"{fmt(c['svmix-temporal'])}, full >= both: {b}; (c) entangled {fmt(c['svmix-full-entangled'])}, "
                  f"disentangled >= entangled: {cc}")
        return a, detail, {"table": res.table(), "gap": gap, "b": b, "c": cc}

    return _timed("trend: svmix-full vs no augmentation", 1800.0, body)


# -- 9: Beta sampler ---------------------------------------------------------------------

KS_ALPHAS = (0.2, 0.5, 0.8, 1.0, 2.0, 3.0)


def check_beta_ks(draws: int = 100_000, tol: float = 0.01, seed: int = 0) -> CheckResult:
    from scipy import stats

    from .data import beta_from_gammas

    def body():
        rng = np.random.default_rng(seed)
        worst, per = 0.0, {}
        for a in KS_ALPHAS:
            d = stats.kstest(beta_from_gammas(rng, a, draws), stats.beta(a, a).cdf).statistic
            per[a] = float(d)
            worst = max(worst, d)
        return worst < tol, f"largest KS distance {worst:.4f} over alpha {list(KS_ALPHAS)}, tolerance {tol:g}", \
            {"ks": per}

    return _timed("Beta(alpha, alpha) sampler", 10.0, body)


CHECKS: Dict[str, Callable[[], CheckResult]] = {
    "gradients": check_selector_gradients,
    "attention": check_attend_reference,
    "masks": check_mask_contracts,
    "switching": check_switch_rate,
    "pull": check_mask_pull,
    "ema": check_ema_closed_form,
    "routing": check_disentanglement,
    "trend": check_trend,
    "beta": check_beta_ks,
}
QUICK = ("gradients", "attention", "masks", "switching", "ema", "routing", "beta")


def run_checks(names=None, report: Callable[[str], None] = print) -> List[CheckResult]:
    results = []
    for name in names or CHECKS:
        res = CHECKS[name]()
        report(res.line())
        results.append(res)
    return results
