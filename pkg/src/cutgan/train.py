"""Optimization loop, checkpoints, metrics log and inference."""

from __future__ import annotations

import collections
import csv
import json
import logging
import math
import os
import pickle
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .bank import MomentumTwin, NegativeQueue
from .config import RunLayout, RunManifest, TrainConfig, derive_seeds, dump_config, run_dir_layout
from .data import IndexSampler, list_images, load_image, save_image, to_tensor, to_uint8
from .errors import InvalidCheckpoint, TrainingDiverged
from .model import TranslationModel
from .networks import split_tiles
from .objectives import discriminator_gan_term, r1_penalty, total_generator_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cutgan-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("iteration", "epoch", "lr", "gan_g", "gan_d", "nce_x", "nce_y", "r1", "wall_time")
DEVICE_ENV = "CUTGAN_DEVICE"


def default_device() -> str:
    env = os.environ.get(DEVICE_ENV)
    if env:
        return env
    return "cuda" if torch.cuda.is_available() else "cpu"


def lr_factor(epoch: int, epochs: int) -> float:
    """Constant for the first half of training, then linear decay towards zero."""
    n_const = epochs // 2
    n_decay = epochs - n_const
    return 1.0 - max(0, epoch + 1 - n_const) / (n_decay + 1)


def build_model(config: TrainConfig) -> TranslationModel:
    return TranslationModel(config.generator_spec(), config.discriminator_spec(), config.embed_dim,
                            config.objective.shared_embedding_weights)


class Trainer:
    """Owns every parameter, optimizer and random stream of one run."""

    def __init__(self, config: TrainConfig, device: str | None = None, dtype: torch.dtype = torch.float32):
        config.validate()
        self.config = config
        self.device = torch.device(device or default_device())
        self.dtype = dtype
        self.seeds = derive_seeds(config.seed)
        torch.manual_seed(self.seeds["init"])
        self.model = build_model(config).to(self.device, dtype)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.model.generator_parameters(), lr=config.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(self.model.discriminator.parameters(), lr=config.learning_rate, betas=betas)
        self.sampler = IndexSampler(self.seeds["sampler"], config.patches_per_layer)
        self.queue: NegativeQueue | None = None
        self.twin: MomentumTwin | None = None
        if config.negative_source != "internal":
            self.twin = MomentumTwin(self.model.generator.encoder, self.model.heads, config.momentum)
            self.queue = NegativeQueue(self.model.heads.layer_ids, config.queue_capacity, config.embed_dim, dtype)
        self.iteration = 0
        self.wall_time = 0.0
        self.recent = collections.deque(maxlen=100)

    # ------------------------------------------------------------------ step

    def flip_for(self, iteration: int) -> bool:
        if not self.config.flip_equivariance:
            return False
        return bool(np.random.default_rng([self.seeds["data"], iteration, 3]).random() < 0.5)

    def set_epoch(self, epoch: int, epochs: int | None = None) -> float:
        lr = self.config.learning_rate * lr_factor(epoch, epochs or self.config.epochs)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def param_norm(self) -> float:
        with torch.no_grad():
            return float(torch.sqrt(sum(p.double().pow(2).sum() for p in self.model.parameters())))

    def _check_finite(self, values: dict[str, float]) -> None:
        if all(math.isfinite(v) for v in values.values()):
            return
        dump = {"iteration": self.iteration, "components": values, "param_norm": self.param_norm()}
        raise TrainingDiverged(f"non-finite loss at iteration {self.iteration}: {values}", dump)

    def train_step(self, batch: tuple[torch.Tensor, torch.Tensor]) -> dict[str, float]:
        """One generator(+heads) update followed by one discriminator update."""
        cfg = self.config.objective
        x, y = (t.to(self.device, self.dtype) for t in batch)
        model = self.model
        disc = model.discriminator
        model.train()

        disc.requires_grad_(False)
        self.opt_g.zero_grad(set_to_none=True)
        loss = total_generator_loss(x, y, model, cfg, self.sampler, flip=self.flip_for(self.iteration),
                                    negative_source=self.config.negative_source, queue=self.queue)
        values = {k: float(v.detach()) for k, v in loss.components.items()}
        self._check_finite(values)
        loss.total.backward()
        self.opt_g.step()
        disc.requires_grad_(True)

        self.opt_d.zero_grad(set_to_none=True)
        d_loss = discriminator_gan_term(disc(y), disc(loss.fake.detach()), cfg.gan_mode)
        values["gan_d"] = float(d_loss.detach())
        total_d = d_loss
        if cfg.r1_gamma > 0:
            real = split_tiles(y, disc.spec.tile_size) if disc.spec.variant == "tile64" else y
            r1 = r1_penalty(disc, real, cfg.r1_gamma)
            values["r1"] = float(r1.detach())
            total_d = total_d + r1
        self._check_finite(values)
        total_d.backward()
        self.opt_d.step()

        if self.twin is not None:
            self.twin.update(model.generator.encoder, model.heads)
            with torch.no_grad():
                feats = self.twin.encoder(x)
                emb = self.twin.heads(feats, self.sampler.sample(feats.shapes()))
            self.queue.enqueue({layer.layer_id: layer.embeddings for layer in emb})

        self.iteration += 1
        self.recent.append(values)
        return values

    # ----------------------------------------------------------- persistence

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "parameter_counts": self.model.parameter_counts(),
            "model": self.model.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "sampler": self.sampler.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "iteration": self.iteration,
            "wall_time": self.wall_time,
            "recent": list(self.recent),
            "queue": self.queue.state_dict() if self.queue else None,
            "twin": self.twin.state_dict() if self.twin else None,
        }

    def load_state_dict(self, state: dict) -> None:
        counts = self.model.parameter_counts()
        if state["parameter_counts"] != counts:
            raise InvalidCheckpoint(f"parameter counts {state['parameter_counts']} do not match {counts}")
        try:
            self.model.load_state_dict(state["model"])
        except RuntimeError as exc:
            raise InvalidCheckpoint(str(exc)) from exc
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.sampler.load_state_dict(state["sampler"])
        torch.set_rng_state(state["torch_rng"])
        self.iteration = state["iteration"]
        self.wall_time = state["wall_time"]
        self.recent = collections.deque(state["recent"], maxlen=100)
        if self.queue is not None and state["queue"] is not None:
            self.queue.load_state_dict(state["queue"])
        if self.twin is not None and state["twin"] is not None:
            self.twin.load_state_dict(state["twin"])

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def from_checkpoint(cls, path: str | Path, device: str | None = None) -> "Trainer":
        state = load_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(state["config"]), device=device)
        trainer.load_state_dict(state)
        return trainer


def load_checkpoint(path: str | Path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise InvalidCheckpoint(f"cannot read {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise InvalidCheckpoint(f"{path} is not a {CHECKPOINT_FORMAT}")
    if state.get("version") != CHECKPOINT_VERSION:
        raise InvalidCheckpoint(f"unsupported checkpoint version {state.get('version')}")
    return state


def load_model(path: str | Path, device: str | None = None) -> tuple[TranslationModel, TrainConfig]:
    """Rebuild the networks of a checkpoint for inference."""
    state = load_checkpoint(path)
    config = TrainConfig.from_dict(state["config"])
    model = build_model(config)
    if state["parameter_counts"] != model.parameter_counts():
        raise InvalidCheckpoint(f"parameter counts {state['parameter_counts']} do not match {model.parameter_counts()}")
    try:
        model.load_state_dict(state["model"])
    except RuntimeError as exc:
        raise InvalidCheckpoint(str(exc)) from exc
    return model.to(device or default_device()).eval(), config


# ------------------------------------------------------------------- metrics

def _read_metrics(path: Path) -> list[dict]:
    if not path.exists() or path.stat().st_size == 0:
        return []
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    rows = []
    for row in _read_metrics(Path(path)):
        rows.append({k: (float(v) if v not in ("", None) else None) for k, v in row.items()})
    return rows


class MetricsLog:
    def __init__(self, path: Path, resume_from: int | None = None):
        self.path = path
        kept = []
        if resume_from is not None:
            kept = [r for r in _read_metrics(path) if int(r["iteration"]) <= resume_from]
        self.fh = path.open("w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_COLUMNS)
        self.writer.writeheader()
        self.writer.writerows(kept)
        self.fh.flush()

    def write(self, row: dict) -> None:
        self.writer.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})

    def close(self) -> None:
        self.fh.close()


# ----------------------------------------------------------------------- fit

@dataclass
class FitResult:
    trainer: Trainer
    layout: RunLayout
    checkpoint: Path


def _sample_strip(trainer: Trainer, batch, path: Path) -> None:
    model = trainer.model
    x, y = (t[:1].to(trainer.device, trainer.dtype) for t in batch)
    with torch.no_grad():
        gx, gy = model.generator(x), model.generator(y)
    save_image(torch.cat([x, gx, y, gy], dim=-1), path)


def fit(config: TrainConfig, dataset, out_dir: str | Path, *, resume: str | Path | None = None,
        max_iterations: int | None = None, force: bool = False, device: str | None = None,
        overrides: Sequence[dict] = ()) -> FitResult:
    """Train ``config`` on ``dataset`` writing checkpoints, samples and metrics under ``out_dir``.

    ``dataset`` needs ``batch(iteration)`` and ``len``; its ``seed`` is set
    from the master seed. With ``resume`` the run continues in ``out_dir``
    from that checkpoint and the metrics log is truncated to it first.
    ``max_iterations`` stops early (the schedule still spans all epochs).
    """
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, device)
        config = trainer.config
        layout = RunLayout(Path(out_dir))
        for d in (layout.checkpoints, layout.samples, layout.logs):
            d.mkdir(parents=True, exist_ok=True)
    else:
        layout = run_dir_layout(out_dir, force=force)
        trainer = Trainer(config, device)
    dataset.seed = trainer.seeds["data"]
    per_epoch = config.iterations_per_epoch or len(dataset)
    total = config.epochs * per_epoch
    stop = total if max_iterations is None else min(total, max_iterations)

    if resume is None:
        dump_config(config, layout.config)
        RunManifest(config=config.to_dict(), seed=config.seed, dataset=dataset.fingerprint(),
                    overrides=list(overrides)).write(layout.manifest)
    metrics = MetricsLog(layout.metrics, resume_from=trainer.iteration if resume is not None else None)
    strip_batch = dataset.batch(0)
    started = time.perf_counter() - trainer.wall_time
    latest = layout.checkpoints / "latest.pt"
    try:
        while trainer.iteration < stop:
            it = trainer.iteration
            epoch = it // per_epoch
            lr = trainer.set_epoch(epoch, config.epochs)
            try:
                values = trainer.train_step(dataset.batch(it))
            except TrainingDiverged as exc:
                (layout.logs / "diverged.json").write_text(json.dumps(exc.dump, indent=2))
                raise
            trainer.wall_time = time.perf_counter() - started
            metrics.write({"iteration": trainer.iteration, "epoch": epoch, "lr": lr,
                           "wall_time": round(trainer.wall_time, 3), **values})
            if trainer.iteration % config.checkpoint_interval == 0:
                metrics.fh.flush()
                trainer.save_checkpoint(layout.checkpoints / f"iter_{trainer.iteration:07d}.pt")
                trainer.save_checkpoint(latest)
                _sample_strip(trainer, strip_batch, layout.samples / f"iter_{trainer.iteration:07d}.png")
                log.info("iteration %d: %s", trainer.iteration, values)
    finally:
        metrics.close()
    trainer.save_checkpoint(latest)
    return FitResult(trainer, layout, latest)


# ----------------------------------------------------------------- inference

@torch.no_grad()
def translate_tensor(model: TranslationModel, image: torch.Tensor) -> torch.Tensor:
    """Translate (C, H, W) or (B, C, H, W) at full size, reflect-padding to the encoder stride."""
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    p = next(model.generator.parameters())
    x = x.to(p.device, p.dtype)
    factor = model.generator.encoder.factor
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    out = model.generator(x)[..., :h, :w]
    return out[0] if squeeze else out


def translate(checkpoint: str | Path | TranslationModel, images: Iterable, device: str | None = None) -> list[np.ndarray]:
    """Translate uint8 arrays, paths or tensors; returns uint8 (H, W, 3) arrays."""
    model = checkpoint if isinstance(checkpoint, TranslationModel) else load_model(checkpoint, device)[0]
    model.eval()
    outs = []
    for img in images:
        t = img if isinstance(img, torch.Tensor) else to_tensor(load_image(img))
        outs.append(to_uint8(translate_tensor(model, t)))
    return outs


def translate_directory(checkpoint: str | Path, in_dir: str | Path, out_dir: str | Path,
                        device: str | None = None) -> list[Path]:
    model, _ = load_model(checkpoint, device)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in list_images(in_dir):
        (arr,) = translate(model, [path])
        target = out_dir / f"{path.stem}.png"
        save_image(arr, target)
        written.append(target)
    return written
