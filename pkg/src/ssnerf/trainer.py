"""Ray batches, Adam, the training loop, checkpoints and the transfer protocol."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, DatasetError
from .field import (Field, FieldConfig, ParameterTape, field_config_from, init_params, load_checkpoint,
                    load_encoder_from, save_checkpoint)
from .objectives import LossError, LossReport, property_loss, total_loss
from .properties import Branch, ConfigError, Kind, LossKind, PropertySpec, make_specs
from .renderer import RenderError, SamplingConfig, composite, composite_backward, hierarchical_sample, stratified_sample

__all__ = [
    "TrainConfig",
    "TrainingError",
    "RayBatch",
    "AdamState",
    "Model",
    "sample_ray_batch",
    "adam_step",
    "train",
    "model_from_checkpoint",
    "CONFIG_HELP",
]

log = logging.getLogger("ssnerf.train")

ALL_PROPERTIES = "rgb,sl,sn,sh,kp,ed"


@dataclass
class TrainConfig:
    """Flat training configuration; every field is a config-file and ``--override`` key."""

    iterations: int = 5000
    batch_rays: int = 1024
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float | None = None  # multiply lr by this every step
    seed: int = 0
    properties: str = ALL_PROPERTIES
    lambda_rgb: float = 1.0
    lambda_sl: float = 0.04
    lambda_sn: float = 1.0
    lambda_sh: float = 0.1
    lambda_kp: float = 2.0
    lambda_ed: float = 0.4
    branch_sl: str = "no_view"
    branch_sn: str = "no_view"
    branch_sh: str = "view"
    branch_kp: str = "view"
    branch_ed: str = "view"
    view_subset: list | None = None
    n_coarse: int = 32
    n_fine: int = 32
    perturb: bool = True
    pos_freqs: int = 8
    dir_freqs: int = 4
    pose_freqs: int = 1
    trunk_depth: int = 4
    trunk_width: int = 64
    skip: int | None = 2
    head_width: int = 64
    chunk_rays: int = 1024  # rays per forward/backward work item
    workers: int = 1
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    eval_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_rays < 1 or self.chunk_rays < 1:
            raise ConfigError("batch_rays and chunk_rays must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.n_coarse < 2 or self.n_fine < 0:
            raise ConfigError("need n_coarse >= 2 and n_fine >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for k in self.kinds:
            if k is not Kind.RGB and getattr(self, f"branch_{k.value}") not in {b.value for b in Branch}:
                raise ConfigError(f"branch_{k.value} must be 'view' or 'no_view'")

    @property
    def kinds(self) -> list[Kind]:
        try:
            return [Kind(k.strip()) for k in self.properties.split(",") if k.strip()]
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def specs(self, n_classes: int) -> list[PropertySpec]:
        kinds = self.kinds
        return make_specs(kinds, n_classes,
                          branches={k: getattr(self, f"branch_{k.value}") for k in kinds if k is not Kind.RGB},
                          weights={k: getattr(self, f"lambda_{k.value}") for k in Kind})

    def field_config(self) -> FieldConfig:
        return field_config_from(asdict(self))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, pairs: Sequence[str]) -> "TrainConfig":
        """Apply ``key=value`` strings; values parse as JSON, falling back to plain strings."""
        d = self.to_dict()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            key = key.strip()
            if not sep or key not in d:
                raise ConfigError(f"unknown config key in override {pair!r}")
            try:
                d[key] = json.loads(raw)
            except json.JSONDecodeError:
                d[key] = raw
        return TrainConfig.from_dict(d)


CONFIG_HELP = {
    "iterations": "optimizer steps",
    "batch_rays": "rays per step, drawn uniformly over (view, pixel)",
    "lr": "Adam learning rate",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "eps": "Adam denominator epsilon",
    "lr_decay": "per-step multiplicative learning-rate decay (null: constant)",
    "seed": "root seed for initialization, batches and sample jitter",
    "properties": "comma-separated properties to train (rgb is always present)",
    "lambda_rgb": "RGB loss weight (0 removes colour supervision)",
    "lambda_sl": "semantic-label loss weight",
    "lambda_sn": "surface-normal loss weight",
    "lambda_sh": "shading loss weight",
    "lambda_kp": "keypoint loss weight",
    "lambda_ed": "edge loss weight",
    "branch_sl": "decoder branch for semantic labels (view | no_view)",
    "branch_sn": "decoder branch for surface normals (view | no_view)",
    "branch_sh": "decoder branch for shading (view | no_view)",
    "branch_kp": "decoder branch for keypoints (view | no_view)",
    "branch_ed": "decoder branch for edges (view | no_view)",
    "view_subset": "list of training view indices to use (null: all training views)",
    "n_coarse": "stratified samples per ray",
    "n_fine": "extra importance samples per ray (0 disables the fine network)",
    "perturb": "jitter sample depths during training",
    "pos_freqs": "position encoding frequencies",
    "dir_freqs": "direction encoding frequencies",
    "pose_freqs": "camera-axis encoding frequencies for the surface-normal head",
    "trunk_depth": "shared trunk layers",
    "trunk_width": "shared trunk width",
    "skip": "trunk layer that re-reads the encoded position (null: none)",
    "head_width": "decoder hidden width",
    "chunk_rays": "rays per forward/backward work item (fixes the reduction order)",
    "workers": "threads for forward/backward work items",
    "checkpoint_every": "steps between checkpoints (0: final only)",
    "eval_every": "steps between held-out evaluations (0: never)",
    "dtype": "parameter precision (float32 | float64)",
}


# -- batches -------------------------------------------------------------------

@dataclass
class RayBatch:
    view: np.ndarray  # (R,)
    pixel: np.ndarray  # (R,) row-major pixel index
    origins: np.ndarray
    dirs: np.ndarray
    axes: np.ndarray
    truth: dict  # kind -> (R, C) readout-space targets; SL holds (R,) class indices

    def __len__(self):
        return len(self.view)

    def slice(self, s: slice) -> "RayBatch":
        return RayBatch(self.view[s], self.pixel[s], self.origins[s], self.dirs[s], self.axes[s],
                        {k: v[s] for k, v in self.truth.items()})


def sample_ray_batch(dataset: Dataset, batch_rays: int, rng: np.random.Generator,
                     kinds: Sequence[Kind] = tuple(Kind), views: Sequence[int] | None = None) -> RayBatch:
    """Uniform random (view, pixel) pairs over ``views`` (default: the training split)."""
    views = np.asarray(dataset.train_views if views is None else views, dtype=np.int64)
    if len(views) == 0:
        raise DatasetError("dataset has no views to sample from")
    n_pix = dataset.height * dataset.width
    v = views[rng.integers(0, len(views), size=batch_rays)]
    p = rng.integers(0, n_pix, size=batch_rays)
    o, d, a = dataset.rays()
    truth = {}
    for k in kinds:
        if k is Kind.SL:
            if dataset.labels is None:
                raise DatasetError("dataset has no semantic labels")
            truth[k] = dataset.labels.reshape(dataset.n_views, -1)[v, p]
            continue
        if k not in dataset.images:
            raise DatasetError(f"dataset has no {k.value} images")
        img = dataset.images[k]
        truth[k] = img.reshape(img.shape[0], n_pix, -1)[v, p]
    return RayBatch(v, p, o[v, p], d[v, p], a[v, p], truth)


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, tape: ParameterTape) -> "AdamState":
        return cls(np.zeros_like(tape.data), np.zeros_like(tape.data))


def adam_step(tape: ParameterTape, state: AdamState, t: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place, then zero the gradients."""
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    g = tape.grad
    state.m *= beta1
    state.m += (1 - beta1) * g
    state.v *= beta2
    state.v += (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1**t)
    v_hat = state.v / (1 - beta2**t)
    tape.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(tape.dtype)
    tape.zero_grad()


# -- model ---------------------------------------------------------------------

@dataclass
class Model:
    config: TrainConfig
    specs: list
    coarse: Field
    fine: Field | None
    n_classes: int
    class_names: list = field(default_factory=list)
    step: int = 0

    def tapes(self) -> dict:
        out = {"coarse": self.coarse.params}
        if self.fine is not None:
            out["fine"] = self.fine.params
        return out

    def sampling(self, near: float, far: float, perturb: bool = False, chunk: int = 1024) -> SamplingConfig:
        c = self.config
        return SamplingConfig(c.n_coarse, c.n_fine, near, far, chunk=chunk, perturb=perturb, seed=c.seed)

    def checkpoint_config(self) -> dict:
        return {"train": self.config.to_dict(), "n_classes": self.n_classes, "class_names": self.class_names}

    def save(self, path) -> None:
        save_checkpoint(path, self.tapes(), self.checkpoint_config(), self.config.seed, self.step)


def _dtype(config: TrainConfig):
    return np.dtype(config.dtype)


def build_model(config: TrainConfig, n_classes: int, class_names=(), tapes: dict | None = None) -> Model:
    specs = config.specs(n_classes)
    fc = config.field_config()
    dt = _dtype(config)
    if tapes is None:
        tapes = {"coarse": init_params(fc, specs, config.seed, dt)}
        if config.n_fine > 0:
            tapes["fine"] = init_params(fc, specs, config.seed + 1, dt)
    coarse = Field(fc, specs, tapes["coarse"])
    fine = Field(fc, specs, tapes["fine"]) if "fine" in tapes else None
    return Model(config, specs, coarse, fine, n_classes, list(class_names))


def model_from_checkpoint(path, dtype=None) -> Model:
    tapes, cfg, _, step = load_checkpoint(path)
    if "train" not in cfg:
        raise ConfigError(f"{path}: checkpoint lacks a training configuration")
    config = TrainConfig.from_dict(cfg["train"])
    dt = np.dtype(dtype or config.dtype)
    tapes = {k: t.copy(dt) for k, t in tapes.items()}
    model = build_model(config, cfg["n_classes"], cfg.get("class_names", []), tapes)
    model.step = step
    return model


# -- training ------------------------------------------------------------------

class TrainingError(RuntimeError):
    pass


def _targets(spec: PropertySpec, truth):
    if spec.kind is Kind.SN:
        return (truth + 1.0) / 2.0
    return truth


def _pass_forward(fld: Field, batch: RayBatch, t):
    pts = batch.origins[:, None, :] + t[:, :, None] * batch.dirs[:, None, :]
    fo = fld(pts, batch.dirs, batch.axes, retain=True)
    comp = composite(t, fo.density, fo.properties)
    return fo, comp


def _chunk_step(model: Model, batch: RayBatch, near, far, rng, step: int, offset: int):
    """Forward and backward over one work item; returns (report, coarse grad, fine grad)."""
    c = model.config
    cf = Field(model.coarse.config, model.specs, model.coarse.params.shadow())
    ff = Field(model.fine.config, model.specs, model.fine.params.shadow()) if model.fine is not None else None
    dt = _dtype(c)
    R = len(batch)
    qb = stratified_sample(near, far, c.n_coarse, rng if c.perturb else None, n_rays=R)
    try:
        fo_c, comp_c = _pass_forward(cf, batch, qb.t.astype(dt))
        qb.weights = comp_c.weights
        if ff is not None:
            fb = hierarchical_sample(qb, c.n_fine, rng if c.perturb else None)
            fo_f, comp_f = _pass_forward(ff, batch, fb.t.astype(dt))
        else:
            fo_f, comp_f = fo_c, comp_c
    except RenderError as e:
        ray = offset + getattr(e, "ray_index", 0)
        raise TrainingError(f"step {step}: non-finite network output on batch ray {ray} "
                            f"(view {batch.view[ray - offset]}, pixel {batch.pixel[ray - offset]})") from e

    losses = {}
    for s in model.specs:
        truth = _targets(s, batch.truth[s.kind])
        losses[s.kind] = property_loss(s, comp_c.values[s.kind], comp_f.values[s.kind], truth)
        if not np.isfinite(losses[s.kind].value):
            bad = ~np.isfinite(losses[s.kind].grad_coarse.reshape(R, -1)).all(1)
            bad |= ~np.isfinite(losses[s.kind].grad_fine.reshape(R, -1)).all(1)
            ray = int(np.flatnonzero(bad)[0]) if bad.any() else 0
            raise TrainingError(f"step {step}: non-finite {s.kind.value} loss at batch ray {offset + ray}")
    report = total_loss(losses, model.specs)

    passes = [(cf, fo_c, comp_c, report.grads_coarse)]
    if ff is not None:
        passes.append((ff, fo_f, comp_f, report.grads_fine))
    else:
        # coarse doubles as fine: both loss terms flow into the same network
        report.grads_coarse = {k: report.grads_coarse[k] + report.grads_fine[k] for k in report.grads_coarse}
        passes = [(cf, fo_c, comp_c, report.grads_coarse)]
    for fld, fo, comp, grads in passes:
        d_sigma, d_props = composite_backward(comp, fo.properties, grads)
        fld.backward(d_sigma, d_props)
    return report, cf.params.grad, (ff.params.grad if ff is not None else None)


def train_step(model: Model, dataset: Dataset, rng: np.random.Generator, step: int,
               views=None, pool: ThreadPoolExecutor | None = None) -> LossReport:
    """One batch: sample, render both passes, weighted loss, backprop, accumulate gradients.

    Work items are fixed slices of the batch, each with its own gradient
    buffer and random stream; their gradients are summed in slice order so
    the result does not depend on the number of workers.
    """
    c = model.config
    batch = sample_ray_batch(dataset, c.batch_rays, rng, [s.kind for s in model.specs], views)
    starts = list(range(0, len(batch), c.chunk_rays))
    seeds = rng.integers(0, 2**63, size=len(starts))

    def work(i):
        s = starts[i]
        return _chunk_step(model, batch.slice(slice(s, s + c.chunk_rays)), dataset.near, dataset.far,
                           np.random.default_rng(int(seeds[i])), step, s)

    results = list(pool.map(work, range(len(starts)))) if pool else [work(i) for i in range(len(starts))]
    per = {}
    total = 0.0
    for report, gc, gf in results:
        model.coarse.params.grad += gc
        if gf is not None:
            model.fine.params.grad += gf
        for k, v in report.per_property.items():
            per[k] = per.get(k, 0.0) + v
        total += report.total
    return LossReport(per, total, len(batch))


def train(config: TrainConfig, dataset: Dataset, out_dir, transfer_from=None, class_names=None) -> Model:
    """Optimize the weighted multi-property loss; writes checkpoints and ``loss_log.jsonl`` to ``out_dir``.

    ``transfer_from`` is a checkpoint path whose trunk initializes both
    networks; decoder heads start fresh and nothing is frozen.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config, dataset.n_classes, class_names or dataset.class_names)
    if transfer_from is not None:
        src, _, _, _ = load_checkpoint(transfer_from)
        fc, dt = config.field_config(), _dtype(config)
        model.coarse.params = load_encoder_from(src["coarse"].copy(dt), fc, model.specs, config.seed, dt)
        model.coarse = Field(fc, model.specs, model.coarse.params)
        if model.fine is not None:
            source_fine = src.get("fine", src["coarse"]).copy(dt)
            model.fine = Field(fc, model.specs, load_encoder_from(source_fine, fc, model.specs, config.seed + 1, dt))
        log.info("initialized trunk from %s", transfer_from)
    views = config.view_subset if config.view_subset is not None else dataset.train_views
    if not views:
        raise DatasetError("no training views selected")

    rng = np.random.default_rng([config.seed, 1])
    states = {name: AdamState.zeros_like(t) for name, t in model.tapes().items()}
    loss_log = (out / "loss_log.jsonl").open("w")
    time_log = (out / "timing.jsonl").open("w")
    eval_log = (out / "eval_log.jsonl").open("w") if config.eval_every else None
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    start = time.perf_counter()
    try:
        for step in range(1, config.iterations + 1):
            report = train_step(model, dataset, rng, step, views, pool)
            if not np.isfinite(report.total):
                raise TrainingError(f"step {step}: non-finite total loss")
            lr = config.lr * (config.lr_decay ** (step - 1) if config.lr_decay else 1.0)
            for name, tape in model.tapes().items():
                adam_step(tape, states[name], step, lr, config.beta1, config.beta2, config.eps)
            model.step = step
            loss_log.write(report.to_json(step) + "\n")
            time_log.write(json.dumps({"step": step, "wall_time": round(time.perf_counter() - start, 3)}) + "\n")
            if step % 100 == 0:
                log.info("step %d total %.5g", step, report.total)
            if config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.iterations:
                model.save(out / f"ckpt_{step:06d}.ssnf")
            if eval_log is not None and step % config.eval_every == 0:
                from .evalsuite import evaluate_model
                rep = evaluate_model(model, dataset, dataset.test_views, workers=config.workers)
                eval_log.write(json.dumps({"step": step, "metrics": rep.summary()}) + "\n")
                eval_log.flush()
    finally:
        loss_log.close()
        time_log.close()
        if eval_log is not None:
            eval_log.close()
        if pool is not None:
            pool.shutdown()
    model.save(out / f"ckpt_{model.step:06d}.ssnf")
    return model


def read_loss_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
