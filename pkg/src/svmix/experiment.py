"""Run records, ablation matrices and mask-dump inspection.

A run directory holds::

    config.json      the validated configuration
    metrics.tsv      one row per step and per epoch, appended as training goes
    student.ckpt     final parameters (teacher.ckpt, selector.ckpt alongside)
    masks/           optional mask dumps, step-NNNNNN.mask
    record.json      the RunRecord summary, written last
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import formats
from .config import ExperimentConfig
from .data import generate
from .errors import ConfigError, SVMixError
from .trainer import StepReport, TrainerState, train

METRIC_COLUMNS = ("record", "epoch", "step", "student_loss", "selector_loss", "lm", "lam", "kind", "draw",
                  "mask_mean", "train_loss", "train_acc", "val_acc")


def code_version() -> str:
    """Content hash of the package sources (like a git tree id, without needing git)."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode() + b"\0" + path.read_bytes() + b"\0")
    return h.hexdigest()[:12]


def data_digest(train_set, val_set) -> str:
    h = hashlib.sha256()
    for split in (train_set, val_set):
        h.update(np.ascontiguousarray(split.frames).tobytes())
        h.update(np.ascontiguousarray(split.labels).tobytes())
    return h.hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    code_version: str
    config: dict
    history: List[dict]
    final_train_acc: float
    final_val_acc: float
    wall_time: float
    data_digest: str
    out_dir: Optional[str] = None
    status: str = "ok"
    error: Optional[str] = None

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return json.dumps(clean(asdict(self)), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class MetricsWriter:
    """Tab-separated metrics, flushed after every row."""

    def __init__(self, path):
        self.path = Path(path)
        self._f = open(self.path, "w")
        self._f.write("\t".join(METRIC_COLUMNS) + "\n")
        self._f.flush()

    def write(self, row: dict):
        self._f.write("\t".join(_fmt(row.get(c)) for c in METRIC_COLUMNS) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def read_metrics(path) -> List[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:]]


def run_dir_name(config: ExperimentConfig) -> str:
    return f"{config.arm}-s{config.seed}-{config.config_hash()[:8]}"


def run(config: ExperimentConfig, out_dir=None, data=None, data_cache=None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> RunRecord:
    """Train one configuration and write its artifacts to ``out_dir`` (if given)."""
    config.validate()
    if data is None:
        spec = config.dataset_spec()
        data = formats.load_or_generate(data_cache, spec) if data_cache else generate(spec)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
        writer = MetricsWriter(out / "metrics.tsv")
        if config.dump_masks_every:
            (out / "masks").mkdir(exist_ok=True)
    epoch = [0]

    def step_hook(rep: StepReport, state: TrainerState):
        if writer is not None:
            writer.write({"record": "step", "epoch": epoch[0] + 1, **rep.as_dict()})
        every = config.dump_masks_every
        if out is not None and every and rep.step % every == 0 and state.last_mask is not None:
            m = state.last_mask
            formats.save_mask_dump(out / "masks" / f"step-{rep.step:06d}.mask", m.weights.data, m.lam,
                                   m.kind, rep.step)

    def epoch_hook(rec: dict):
        epoch[0] = rec["epoch"]
        if writer is not None:
            writer.write({"record": "epoch", **rec})
        if on_epoch is not None:
            on_epoch(rec)

    start = time.perf_counter()
    try:
        result = train(config, data, on_step=step_hook, on_epoch=epoch_hook)
    finally:
        if writer is not None:
            writer.close()
    wall = time.perf_counter() - start
    last = result.history[-1]
    record = RunRecord(config.config_hash(), code_version(), config.to_dict(), result.history,
                       last["train_acc"], last["val_acc"], wall, data_digest(*data),
                       None if out is None else str(out))
    if out is not None:
        st = result.state
        formats.save_checkpoint(out / "student.ckpt", st.student.state_dict())
        formats.save_checkpoint(out / "teacher.ckpt", st.teacher.state_dict())
        if st.selector is not None:
            formats.save_checkpoint(out / "selector.ckpt", st.selector.state_dict())
        (out / "record.json").write_text(record.to_json())
    return record


# -- ablation matrices -------------------------------------------------------

ALPHA_GRID = (0.2, 0.5, 0.8, 1.0, 2.0, 3.0)

MATRICES: Dict[str, Dict[str, dict]] = {
    "arms": {a: {"arm": a} for a in ("none", "mixup", "cutmix", "svmix-spatial", "svmix-temporal", "svmix-full")},
    "modules": {"none": {"arm": "none"}, "spatial": {"arm": "svmix-spatial"},
                "temporal": {"arm": "svmix-temporal"}, "full": {"arm": "svmix-full"}},
    "training": {"disentangled": {"train_mode": "disentangled"}, "entangled": {"train_mode": "entangled"}},
    "components": {"plain": {"embed_lambda": False, "use_lm": False},
                   "lambda-embedding": {"embed_lambda": True, "use_lm": False},
                   "mask-loss": {"embed_lambda": False, "use_lm": True},
                   "both": {"embed_lambda": True, "use_lm": True}},
    "ensemble": {"average": {"ensemble_mode": "average"},
                 "probabilistic": {"ensemble_mode": "probabilistic"},
                 "probabilistic-unshared": {"ensemble_mode": "probabilistic", "share_params": False}},
    "alpha": {f"alpha={a:g}": {"alpha_spatial": a, "alpha_temporal": a} for a in ALPHA_GRID},
}


@dataclass
class MatrixSpec:
    cells: Dict[str, dict]
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    base: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "MatrixSpec":
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"not valid JSON: {exc}", str(path)) from None
        unknown = set(values) - {"cells", "seeds", "base"}
        if unknown:
            raise ConfigError("unknown matrix key", sorted(unknown)[0])
        if not isinstance(values.get("cells"), dict) or not values["cells"]:
            raise ConfigError("matrix needs a non-empty 'cells' object", "cells")
        return cls(values["cells"], tuple(values.get("seeds", (0, 1, 2, 3, 4))), values.get("base", {}))

    @classmethod
    def named(cls, name: str, seeds=(0, 1, 2, 3, 4)) -> "MatrixSpec":
        if name not in MATRICES:
            raise ConfigError(f"unknown matrix; choose from {', '.join(MATRICES)}", "matrix")
        return cls(MATRICES[name], tuple(seeds))

    def configs(self, base: ExperimentConfig) -> Dict[str, List[ExperimentConfig]]:
        """Validate every cell up front so a bad delta fails before any training."""
        base = base.replace(**self.base) if self.base else base
        out = {}
        for name, delta in self.cells.items():
            try:
                out[name] = [base.replace(**{**delta, "seed": int(s)}) for s in self.seeds]
            except ConfigError as exc:
                raise ConfigError(f"cell {name!r}: {exc}", exc.key) from None
        return out


@dataclass
class CellSummary:
    name: str
    accuracies: List[float]
    failures: List[str]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else float("nan")


@dataclass
class AblationResult:
    cells: List[CellSummary]
    records: Dict[str, List[RunRecord]]

    def table(self) -> str:
        rows = ["cell\truns\tfailed\tmean_val_acc\tstd_val_acc"]
        for c in self.cells:
            rows.append(f"{c.name}\t{len(c.accuracies)}\t{len(c.failures)}\t{c.mean:.4f}\t{c.std:.4f}")
        return "\n".join(rows) + "\n"

    def cell(self, name: str) -> CellSummary:
        return next(c for c in self.cells if c.name == name)


def ablate(base: ExperimentConfig, matrix: MatrixSpec, out_dir=None, data_cache=None,
           on_run: Optional[Callable[[str, RunRecord], None]] = None) -> AblationResult:
    """Run every cell over the matrix seeds; failed runs are recorded and the sweep goes on."""
    plan = matrix.configs(base)
    out = Path(out_dir) if out_dir is not None else None
    data_by_spec = {}
    summaries, records = [], {}
    for name, configs in plan.items():
        accs, failures, recs = [], [], []
        for cfg in configs:
            spec = cfg.dataset_spec()
            if spec not in data_by_spec:
                data_by_spec[spec] = (formats.load_or_generate(Path(data_cache) / f"data-{spec.split_seed}.bin", spec)
                                      if data_cache else generate(spec))
            run_out = None if out is None else out / name / f"seed-{cfg.seed}"
            try:
                rec = run(cfg, run_out, data=data_by_spec[spec])
            except (SVMixError, FloatingPointError) as exc:
                rec = RunRecord(cfg.config_hash(), code_version(), cfg.to_dict(), [], float("nan"),
                                float("nan"), 0.0, "", None if run_out is None else str(run_out),
                                status="failed", error=f"{type(exc).__name__}: {exc}")
                failures.append(rec.error)
                if run_out is not None:
                    run_out.mkdir(parents=True, exist_ok=True)
                    (run_out / "record.json").write_text(rec.to_json())
            else:
                accs.append(rec.final_val_acc)
            recs.append(rec)
            if on_run is not None:
                on_run(name, rec)
        summaries.append(CellSummary(name, accs, failures))
        records[name] = recs
    result = AblationResult(summaries, records)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.tsv").write_text(result.table())
    return result


# -- mask inspection -------------------------------------------------------

@dataclass
class MaskSummary:
    kind: str
    step: int
    lambdas: List[float]
    frame_means: List[List[float]]      # per sample, per frame
    minimum: List[float]
    maximum: List[float]
    within_frame_spread: List[float]    # per sample, max over frames of (max - min) inside a frame

    def lines(self) -> List[str]:
        out = [f"kind {self.kind}  step {self.step}  samples {len(self.lambdas)}"]
        for b, lam in enumerate(self.lambdas):
            means = " ".join(f"{m:.4f}" for m in self.frame_means[b])
            out.append(f"sample {b}  lambda {lam:.6g}  min {self.minimum[b]:.4f}  max {self.maximum[b]:.4f}  "
                       f"within-frame spread {self.within_frame_spread[b]:.4g}")
            out.append(f"  frame means: {means}")
        return out


def summarize_mask(dump: formats.MaskDump) -> MaskSummary:
    w = dump.weights
    B, T = w.shape[:2]
    flat = w.reshape(B, T, -1)
    spread = (flat.max(axis=2) - flat.min(axis=2)).max(axis=1)
    return MaskSummary(dump.kind, dump.step, [float(x) for x in dump.lambdas],
                       flat.mean(axis=2).tolist(), flat.min(axis=(1, 2)).tolist(),
                       flat.max(axis=(1, 2)).tolist(), spread.tolist())


def write_pgm(path, image: np.ndarray):
    """Binary 8-bit greyscale image from values in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def mask_grid(weights: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile a B x T x H x W mask into one image: samples down, frames across."""
    B, T, H, W = weights.shape
    img = np.ones((B * (H + pad) - pad, T * (W + pad) - pad))
    for b in range(B):
        for t in range(T):
            img[b * (H + pad): b * (H + pad) + H, t * (W + pad): t * (W + pad) + W] = weights[b, t]
    return img


def inspect(path, image_dir=None) -> MaskSummary:
    """Summarise a mask dump; optionally write a PGM grid of its frames."""
    dump = formats.load_mask_dump(path)
    summary = summarize_mask(dump)
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
        write_pgm(image_dir / (Path(path).stem + ".pgm"), mask_grid(dump.weights))
    return summary
