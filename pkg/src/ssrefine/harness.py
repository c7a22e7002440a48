"""Deterministic training loop: alternating discriminator/generator steps,
per-step CSV logging, and bit-exact checkpoint/resume.

All randomness flows from the config seed through ``numpy.random.SeedSequence``
with fixed purpose tags, so a resumed run consumes exactly the streams the
uninterrupted run would have: scene i is seeded by (seed, DATA/HELDOUT, i) and
step k by (seed, STEP, k), independent of history.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ckpt
from .dataeval import DomainSpec, ToyScene, builtin_spec, generate_scene, load_image_folder
from .errors import CheckpointError, ConfigError, TrainingAbort
from .losses import LossWeights, gan_loss_d, gan_loss_g, hdce_loss, src_loss, total_loss
from .nets import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ProjectionHeads
from .patches import build_pairs, sample_plan
from .rsmi import RulsifParams, scc_loss
from .tensorcore import Tensor, precision

_TAG_INIT = 1
_TAG_DATA = 2
_TAG_STEP = 3
_TAG_HELDOUT = 4

LOG_FIELDS = ("step", "loss_src", "loss_scc", "loss_hdce", "loss_gan_g", "loss_gan_d",
              "loss_total", "wall_time")


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(tags)))


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 5000
    batch_size: int = 4
    image_size: int = 64
    precision: str = "float32"
    # data: builtin spec name, spec JSON path, or image directory
    source_data: str = "toy-source"
    target_data: str = "toy-target"
    train_scenes: int = 500
    # model
    base_width: int = 16
    n_down: int = 2
    n_res_blocks: int = 2
    tap_layers: tuple[int, ...] = (0, 2, 4)
    embed_dim: int = 64
    disc_stages: int = 3
    disc_width: int = 16
    # objective
    lambda_src: float = 0.05
    lambda_scc: float = 1.0
    lambda_hdce: float = 1.0
    lambda_gan: float = 1.0
    tau: float = 0.07
    beta: float = 1.0
    patches_per_layer: int = 64
    rsmi_alpha: float = 0.1
    rsmi_basis: int = 100
    rsmi_ridge: float = 0.1
    rsmi_pixels: int = 256
    # optimizers
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # bookkeeping
    checkpoint_every: int = 1000
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps", f"must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.image_size < 16:
            raise ConfigError("image_size", f"must be >= 16, got {self.image_size}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision", f"must be float32 or float64, got {self.precision!r}")
        if self.patches_per_layer < 2:
            raise ConfigError("patches_per_layer", f"must be >= 2, got {self.patches_per_layer}")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("lr_g", "learning rates must be positive")
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        self.weights()  # validates lambdas / tau / beta

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_src, self.lambda_scc, self.lambda_hdce,
                           self.lambda_gan, self.tau, self.beta)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(3, self.base_width, self.n_down, self.n_res_blocks, self.tap_layers)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(3, self.disc_width, self.disc_stages)

    def rsmi_params(self) -> RulsifParams:
        return RulsifParams(self.rsmi_alpha, self.rsmi_basis, self.rsmi_ridge, self.rsmi_pixels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config key")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError("config", "top-level JSON value must be an object")
        return cls.from_dict(data)


class Adam:
    """Adam with per-parameter moment buffers kept in the parameter dtype."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.int64)}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        try:
            self.t = int(arrays[f"{prefix}.t"][0])
            for name in self.params:
                self.m[name] = arrays[f"{prefix}.m.{name}"].copy()
                self.v[name] = arrays[f"{prefix}.v.{name}"].copy()
        except KeyError as e:
            raise CheckpointError(f"missing optimizer entry {e.args[0]!r}") from e


@dataclass
class TrainState:
    config: TrainConfig
    gen: Generator
    heads: ProjectionHeads
    disc: Discriminator
    opt_g: Adam
    opt_d: Adam
    step: int = 0


def build_state(cfg: TrainConfig) -> TrainState:
    rng = rng_for(cfg.seed, _TAG_INIT)
    gen = Generator(cfg.generator_config(), rng)
    heads = ProjectionHeads(cfg.generator_config().tap_channels(), cfg.embed_dim, rng)
    disc = Discriminator(cfg.discriminator_config(), rng)
    g_params = {**gen.params(), **heads.params()}
    opt_g = Adam(g_params, cfg.lr_g, cfg.beta1, cfg.beta2)
    opt_d = Adam(disc.params(), cfg.lr_d, cfg.beta1, cfg.beta2)
    return TrainState(cfg, gen, heads, disc, opt_g, opt_d)


# -- data ---------------------------------------------------------------------


def _domain_images(source: str, cfg: TrainConfig, tag: int) -> list[np.ndarray]:
    """Training images for one side: builtin toy domain, spec file, or folder."""
    if source in ("toy-source", "toy-target"):
        spec = builtin_spec(source)
    elif source.endswith(".json"):
        spec = DomainSpec.from_json(source)
    else:
        return [img for _, img in load_image_folder(source, size=cfg.image_size)]
    return [
        generate_scene(spec, _scene_seed(cfg.seed, tag, i), cfg.image_size, cfg.image_size).image
        for i in range(cfg.train_scenes)
    ]


def _scene_seed(seed: int, tag: int, index: int) -> int:
    return int(rng_for(seed, tag, index).integers(0, 2**63 - 1))


def heldout_scenes(cfg: TrainConfig, count: int) -> list[ToyScene]:
    """Held-out source-domain scenes from a seed range disjoint from training."""
    if cfg.source_data in ("toy-source", "toy-target"):
        spec = builtin_spec(cfg.source_data)
    elif cfg.source_data.endswith(".json"):
        spec = DomainSpec.from_json(cfg.source_data)
    else:
        raise ConfigError("source_data", "held-out scenes need a toy spec, not an image folder")
    return [
        generate_scene(spec, _scene_seed(cfg.seed, _TAG_HELDOUT, i), cfg.image_size, cfg.image_size)
        for i in range(count)
    ]


# -- steps ----------------------------------------------------------------------


def _set_requires_grad(params: dict[str, Tensor], flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def compute_d_loss(state: TrainState, x: Tensor, y: Tensor):
    """Discriminator loss on real targets vs detached refined outputs."""
    with_graph, _ = state.gen.generate(x)
    yhat = with_graph.detach()
    return gan_loss_d(state.disc, y, yhat), with_graph


def compute_g_losses(state: TrainState, x: Tensor, yhat: Tensor, taps_x, rng):
    """All generator-side loss terms for one batch; yhat must carry its graph."""
    cfg = state.config
    w = cfg.weights()
    zero = Tensor(np.zeros(()))
    if w.lambda_src > 0 or w.lambda_hdce > 0:
        taps_yhat = state.gen.encode_taps(yhat)
        shapes = [(t.shape[2], t.shape[3]) for t in taps_x]
        plan = sample_plan(shapes, cfg.patches_per_layer, rng)
        pairs = build_pairs(plan, taps_x, taps_yhat, state.heads)
        src = src_loss(pairs) if w.lambda_src > 0 else zero
        hdce = hdce_loss(pairs, w.tau, w.beta) if w.lambda_hdce > 0 else zero
    else:
        src = hdce = zero
    scc = scc_loss(x, yhat, cfg.rsmi_pixels, cfg.rsmi_params(), rng) if w.lambda_scc > 0 else zero
    gan_g = gan_loss_g(state.disc, yhat)
    return src, scc, hdce, gan_g


def train_step(state: TrainState, x_batch: np.ndarray, y_batch: np.ndarray,
               rng: np.random.Generator) -> dict:
    """One discriminator update followed by one generator update."""
    cfg = state.config
    t0 = time.perf_counter()
    x = Tensor(x_batch)
    y = Tensor(y_batch)

    # discriminator step: generator weights receive nothing through the detach
    d_loss, yhat = compute_d_loss(state, x, y)
    d_value = d_loss.item()
    if not np.isfinite(d_value):
        raise TrainingAbort("gan_d", state.step, d_value)
    d_loss.backward()
    state.opt_d.step()
    state.opt_d.zero_grad()

    # generator step: discriminator frozen so its parameters stay grad-free
    disc_params = state.disc.params()
    _set_requires_grad(disc_params, False)
    try:
        taps_x = state.gen.encode_taps(x)
        src, scc, hdce, gan_g = compute_g_losses(state, x, yhat, taps_x, rng)
        total = total_loss(src, scc, hdce, gan_g, cfg.weights(), step=state.step)
        total.backward()
        state.opt_g.step()
        state.opt_g.zero_grad()
    finally:
        _set_requires_grad(disc_params, True)

    row = {
        "step": state.step,
        "loss_src": src.item(),
        "loss_scc": scc.item(),
        "loss_hdce": hdce.item(),
        "loss_gan_g": gan_g.item(),
        "loss_gan_d": d_value,
        "loss_total": total.item(),
        "wall_time": time.perf_counter() - t0,
    }
    state.step += 1
    return row


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in {**state.gen.params(), **state.heads.params(), **state.disc.params()}.items():
        arrays[name] = p.data
    arrays.update(state.opt_g.state_arrays("opt_g"))
    arrays.update(state.opt_d.state_arrays("opt_d"))
    meta = {"step": state.step, "config": state.config.to_dict(), "kind": "train-state"}
    ckpt.save_tensors(path, arrays, meta)


def load_checkpoint(path) -> TrainState:
    arrays, meta = ckpt.load_tensors(path)
    if meta.get("kind") != "train-state":
        raise CheckpointError(f"{path}: not a training checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    with precision(cfg.precision):
        state = build_state(cfg)
    params = {**state.gen.params(), **state.heads.params(), **state.disc.params()}
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: {arrays[name].shape} vs {p.data.shape}"
            )
        p.data = arrays[name].copy()
    state.opt_g.load_state("opt_g", arrays)
    state.opt_d.load_state("opt_d", arrays)
    state.step = int(meta["step"])
    return state


# -- run log -------------------------------------------------------------------------


class RunLog:
    """Append-only per-step records mirrored to CSV with full float precision."""

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_FIELDS)
            for row in self.rows:
                writer.writerow(
                    [row["step"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]]
                )

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = []
            for rec in reader:
                row = {"step": int(rec["step"])}
                row.update({k: float(rec[k]) for k in LOG_FIELDS[1:]})
                rows.append(row)
            return rows


# -- driver ----------------------------------------------------------------------------


def train(cfg: TrainConfig, out_dir, resume_from=None, progress=None) -> tuple[Path, Path]:
    """Run (or continue) a training job; returns (checkpoint path, log path).

    The log file accumulates one row per executed step; resuming appends to an
    existing log in `out_dir` when present.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ssrf"
    log_path = out / "runlog.csv"

    with precision(cfg.precision):
        if resume_from is not None:
            state = load_checkpoint(resume_from)
            saved, wanted = state.config.to_dict(), cfg.to_dict()
            saved.pop("steps"), wanted.pop("steps")
            if saved != wanted:
                raise ConfigError("config", "resume config differs from checkpoint config")
            state.config = cfg  # the step horizon may extend
        else:
            state = build_state(cfg)

        log = RunLog()
        if resume_from is not None and log_path.exists():
            for row in RunLog.read_csv(log_path):
                if row["step"] < state.step:
                    log.append(row)

        src_images = _domain_images(cfg.source_data, cfg, _TAG_DATA)
        tgt_images = _domain_images(cfg.target_data, cfg, _TAG_DATA + 100)
        n_src, n_tgt = len(src_images), len(tgt_images)

        while state.step < cfg.steps:
            rng = rng_for(cfg.seed, _TAG_STEP, state.step)
            xi = rng.integers(0, n_src, size=cfg.batch_size)
            yi = rng.integers(0, n_tgt, size=cfg.batch_size)
            x = np.stack([src_images[i] for i in xi])
            y = np.stack([tgt_images[i] for i in yi])
            row = train_step(state, x, y, rng)
            log.append(row)
            done = state.step
            if progress is not None and (done % cfg.log_every == 0 or done == cfg.steps):
                progress(done, row)
            if done % cfg.checkpoint_every == 0 or done == cfg.steps:
                save_checkpoint(ckpt_path, state)
                log.write_csv(log_path)

        save_checkpoint(ckpt_path, state)
        log.write_csv(log_path)
    return ckpt_path, log_path


def resume(checkpoint_path, out_dir, extra_steps: int | None = None,
           progress=None) -> tuple[Path, Path]:
    """Continue a checkpointed run in place (optionally extending the horizon)."""
    arrays, meta = ckpt.load_tensors(checkpoint_path)
    if meta.get("kind") != "train-state":
        raise CheckpointError(f"{checkpoint_path}: not a training checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    if extra_steps is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "steps": meta["step"] + extra_steps})
    return train(cfg, out_dir, resume_from=checkpoint_path, progress=progress)
