"""Experiment configuration and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import diffusion as rf
from ..config import ModelConfig, load_config, read_config_document
from ..errors import CheckpointError, ConfigError, TrainingError
from ..model import EMMDiT, build_model
from ..numcore import checkpoint
from ..numcore.tensor import no_grad, precision
from .data import ShapesDataset
from .images import write_png_grid
from .optim import EMA, AdamW, OptimConfig

log = logging.getLogger(__name__)

MAX_BAD_STEPS = 3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    precision: str = "standard"
    ema: bool = False
    ema_decay: float = 0.999
    repa_weight: float = 0.0
    repa_dim: int = 64
    context_drop: float = 0.1
    t_sampler: str = "uniform"
    flow_shift: float = 1.0
    log_every: int = 1
    checkpoint_every: int = 0
    sample_every: int = 0
    sample_count: int = 16

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.t_sampler not in rf.T_SAMPLERS:
            raise ConfigError(f"train.t_sampler must be one of {sorted(rf.T_SAMPLERS)}")
        if not 0 <= self.context_drop <= 1:
            raise ConfigError("train.context_drop must lie in [0, 1]")
        if self.repa_weight < 0:
            raise ConfigError("train.repa_weight must be non-negative")


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class Experiment:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    sampler: rf.SamplerConfig = field(default_factory=rf.SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if tuple(self.model.image_size) != (self.data.image_size, self.data.image_size):
            raise ConfigError(
                f"data.image_size {self.data.image_size} does not match model image size {self.model.image_size}"
            )
        if self.model.in_channels != 3:
            raise ConfigError("the shapes dataset is RGB; model.in_channels must be 3")
        if self.model.num_classes != ShapesDataset().num_classes:
            raise ConfigError(f"model.num_classes must be {ShapesDataset().num_classes} for the shapes dataset")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": dataclasses.asdict(self.data),
            "optimizer": dataclasses.asdict(self.optimizer),
            "sampler": dataclasses.asdict(self.sampler),
            "train": dataclasses.asdict(self.train),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Experiment:
        unknown = sorted(set(data) - {"model", "data", "optimizer", "sampler", "train"})
        if unknown:
            raise ConfigError(f"unknown experiment sections: {unknown}")
        model = data.get("model", "micro")
        model = load_config(model) if isinstance(model, str) else ModelConfig.from_dict(model)
        try:
            return cls(
                model=model,
                data=DataConfig(**data.get("data", {})),
                optimizer=OptimConfig(**data.get("optimizer", {})),
                sampler=rf.SamplerConfig(**data.get("sampler", {})),
                train=TrainConfig(**data.get("train", {})),
            )
        except TypeError as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    def replace_train(self, **changes) -> Experiment:
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))


def load_experiment(path_or_name: str | None) -> Experiment:
    """Experiment from a JSON file or bundled name; a bare model config or preset gets default sections."""
    if path_or_name is None:
        return Experiment()
    data = read_config_document(path_or_name)
    if data is not None and "model" in data:
        return Experiment.from_dict(data)
    return Experiment(model=load_config(path_or_name))


@dataclass
class TrainState:
    experiment: Experiment
    model: EMMDiT
    optimizer: AdamW
    ema: EMA | None = None
    repa: rf.RepaEncoder | None = None
    step: int = 0

    @property
    def seed(self) -> int:
        return self.experiment.train.seed

    def named_trainables(self):
        named = [(f"model/{n}", p) for n, p in self.model.named_parameters()]
        if self.repa is not None:
            named += [(f"repa/{n}", p) for n, p in self.repa.head.named_parameters()]
        return named


def init_state(exp: Experiment) -> TrainState:
    """Fresh model/optimizer state; call inside the experiment's precision context."""
    model = build_model(exp.model, seed=exp.train.seed)
    repa = None
    if exp.train.repa_weight > 0:
        repa = rf.RepaEncoder(exp.model.patch_size, exp.model.in_channels, exp.model.width,
                              exp.train.repa_dim, seed=exp.train.seed + 7919)
    state = TrainState(exp, model, None, None, repa)  # type: ignore[arg-type]
    state.optimizer = AdamW(state.named_trainables(), exp.optimizer)
    state.ema = EMA(model, exp.train.ema_decay) if exp.train.ema else None
    return state


# -- checkpoints -----------------------------------------------------------------


def state_entries(state: TrainState) -> dict[str, np.ndarray]:
    entries = {f"model/{n}": p.data for n, p in state.model.named_parameters()}
    if state.repa is not None:
        entries.update({f"repa/{n}": p.data for n, p in state.repa.head.named_parameters()})
    entries.update({f"opt/{k}": v for k, v in state.optimizer.state_dict().items()})
    if state.ema is not None:
        entries.update({f"ema/{k}": v for k, v in state.ema.state_dict().items()})
    meta = {"step": state.step, "experiment": state.experiment.to_dict()}
    entries["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    return entries


def save_state(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, state_entries(state))
    return path


def read_meta(entries: dict[str, np.ndarray]) -> dict:
    if "meta" not in entries:
        raise CheckpointError("checkpoint has no meta entry")
    try:
        return json.loads(bytes(entries["meta"].astype(np.uint8)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint meta: {exc}") from exc


def _section(entries: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)}


def load_state(path: str | Path, exp: Experiment | None = None) -> TrainState:
    """Rebuild a training state from a checkpoint; call inside the matching precision context."""
    entries = checkpoint.load(path)
    meta = read_meta(entries)
    exp = exp or Experiment.from_dict(meta["experiment"])
    state = init_state(exp)
    try:
        state.model.load_state_dict(_section(entries, "model/"))
        if state.repa is not None:
            state.repa.head.load_state_dict(_section(entries, "repa/"))
        state.optimizer.load_state_dict(_section(entries, "opt/"))
        if state.ema is not None:
            state.ema.load_state_dict(_section(entries, "ema/"))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match the experiment: {exc}") from exc
    state.step = int(meta["step"])
    return state


# -- loop -----------------------------------------------------------------------------


def batch_for_step(exp: Experiment, dataset: ShapesDataset, step: int, dtype):
    """Images, labels (with context dropout) and the diffusion draws for one step; pure in (seed, step)."""
    rng = np.random.default_rng([exp.train.seed, step])
    x0, labels = dataset.batch(rng, exp.train.batch_size, dtype)
    drop = rng.random(labels.shape[0]) < exp.train.context_drop
    labels = np.where(drop, exp.model.num_classes, labels)
    return x0, labels, rng


def train_step(state: TrainState, dataset: ShapesDataset, sched: rf.FlowSchedule, dtype) -> dict:
    exp = state.experiment
    tc = exp.train
    x0, labels, rng = batch_for_step(exp, dataset, state.step, dtype)
    want_features = state.repa is not None
    out = rf.rf_loss(state.model, x0, {"labels": labels}, sched, rf.T_SAMPLERS[tc.t_sampler], rng,
                     return_features=want_features)
    loss, feats = out if want_features else (out, None)
    repa = rf.repa_loss(feats, x0, state.repa) if want_features else None
    total = rf.total_loss(loss, repa, tc.repa_weight)
    for _, p in state.optimizer.params:
        p.grad = None
    total.backward()
    norm = state.optimizer.grad_norm()
    if not np.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at step {state.step}")
    lr = exp.optimizer.lr_at(state.step, tc.steps)
    state.optimizer.step(lr)
    if state.ema is not None:
        state.ema.update(state.model)
    return {
        "step": state.step,
        "rf_loss": float(loss.item()),
        "repa_loss": None if repa is None else float(repa.item()),
        "lr": lr,
        "grad_norm": norm,
    }


def _trim_log(path: Path, before_step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line.strip() and json.loads(line)["step"] < before_step]
    path.write_text("".join(line + "\n" for line in keep))


def sample_grid(state: TrainState, count: int, path: Path, cfg: rf.SamplerConfig | None = None) -> Path:
    exp = state.experiment
    cfg = cfg or exp.sampler
    m = exp.model
    labels = np.arange(count) % m.num_classes
    shape = (count, m.in_channels, *m.image_size)
    x = rf.sample(rf.model_velocity(state.model), shape, {"labels": labels}, cfg,
                  uncond={"labels": state.model.null_labels(count)})
    return write_png_grid(x, path)


@dataclass
class TrainResult:
    state: TrainState
    records: list[dict]

    @property
    def losses(self) -> list[float]:
        return [r["rf_loss"] for r in self.records]


def train(
    exp: Experiment,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``exp.train.steps`` optimizer steps (continuing from ``resume`` when given).

    Three consecutive steps with non-finite loss or gradients abort with a
    :class:`TrainingError`; a single bad step is skipped.
    """
    tc = exp.train
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "train_log.jsonl" if out is not None else None
    with precision(tc.precision):
        state = load_state(resume, exp) if resume is not None else init_state(exp)
        dataset = ShapesDataset(exp.data.image_size, exp.data.seed)
        sched = rf.FlowSchedule(tc.flow_shift)
        dtype = np.float64 if tc.precision == "wide" else np.float32
        records: list[dict] = []
        if log_path is not None:
            out.mkdir(parents=True, exist_ok=True)
            _trim_log(log_path, state.step)
        start = time.perf_counter()
        bad: list[str] = []
        while state.step < tc.steps:
            try:
                rec = train_step(state, dataset, sched, dtype)
                bad.clear()
            except TrainingError as exc:
                bad.append(str(exc))
                log.warning("step %d skipped: %s", state.step, exc)
                if len(bad) >= MAX_BAD_STEPS:
                    raise TrainingError(
                        f"aborting after {MAX_BAD_STEPS} consecutive non-finite steps (last step {state.step}): "
                        + " | ".join(bad)
                    ) from exc
                state.step += 1
                continue
            rec["wall_time"] = time.perf_counter() - start
            records.append(rec)
            state.step += 1
            if callback is not None:
                callback(rec)
            if log_path is not None and (rec["step"] % tc.log_every == 0 or state.step == tc.steps):
                with log_path.open("a") as fh:
                    fh.write(json.dumps(rec) + "\n")
            if out is not None and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
                save_state(state, out / f"ckpt_{state.step:06d}.emdt")
            if out is not None and tc.sample_every and state.step % tc.sample_every == 0:
                sample_grid(state, tc.sample_count, out / f"samples_{state.step:06d}.png")
        if out is not None:
            save_state(state, out / "final.emdt")
    return TrainResult(state, records)


def eval_batches(exp: Experiment, count: int = 4, batch_size: int | None = None, seed: int = 10_000, dtype=np.float32):
    """Fixed ``(x0, labels, eps, t)`` evaluation batches, independent of the training stream."""
    dataset = ShapesDataset(exp.data.image_size, exp.data.seed)
    size = batch_size or exp.train.batch_size
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        x0, labels = dataset.batch(rng, size, dtype)
        eps = rng.standard_normal(x0.shape).astype(dtype)
        t = rng.random(size)
        out.append((x0, labels, eps, t))
    return out


def evaluate(model: EMMDiT, batches) -> float:
    """Mean rf_loss over fixed batches."""
    with no_grad():
        losses = [
            rf.rf_loss(model, x0, {"labels": labels}, eps=eps, t=t).item() for x0, labels, eps, t in batches
        ]
    return float(np.mean(losses))
