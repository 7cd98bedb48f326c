"""Training loops, learning-rate schedules, augmentation and hyperparameter search."""

from __future__ import annotations

import copy
import enum
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from petbench import losses as L
from petbench.dataset import ImagePairDataset
from petbench.metrics import ssim
from petbench.models import ArchConfig, DenoiserModel, build_model
from petbench.volumes import ImagePair

logger = logging.getLogger(__name__)


class Schedule(str, enum.Enum):
    COS = "COS"
    LINEAR_DECAY_TAIL = "LINEAR_DECAY_TAIL"
    REDUCE_ON_PLATEAU = "REDUCE_ON_PLATEAU"
    CONSTANT = "CONSTANT"


class TrainConfigError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, step, breakdown):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {breakdown}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    mode: L.Mode = L.Mode.SUPERVISED
    epochs: int = 35
    batch_size: int = 32
    max_lr: float = 2e-4
    schedule: Schedule = Schedule.COS
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    rotate: str = "free"  # "none" | "right" | "free"
    flip: bool = True
    patch_size: int | None = None
    seed: int = 0
    fraction: float | None = None
    constant_epochs: int = 30
    decay_epochs: int = 15
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    max_steps_per_epoch: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", L.Mode(self.mode))
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if not self.max_lr > 0:
            raise TrainConfigError("max_lr must be positive")
        if self.weight_decay < 0:
            raise TrainConfigError("weight_decay must be non-negative")
        if self.rotate not in ("none", "right", "free"):
            raise TrainConfigError(f"rotate must be none/right/free, got {self.rotate!r}")
        if self.schedule is Schedule.LINEAR_DECAY_TAIL and self.epochs > self.constant_epochs + self.decay_epochs:
            raise TrainConfigError("LINEAR_DECAY_TAIL: epochs exceed constant + decay epochs")

    @property
    def augment(self) -> bool:
        return self.rotate != "none" or self.flip or self.patch_size is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["schedule"] = self.schedule.value
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


TRAIN_PRESETS = {
    "swinir": TrainConfig(L.Mode.SUPERVISED, epochs=80, batch_size=32, max_lr=2.3e-4,
                          schedule=Schedule.REDUCE_ON_PLATEAU, patch_size=64),
    "resnet_ed": TrainConfig(L.Mode.SUPERVISED, epochs=35, batch_size=32, max_lr=2e-4, schedule=Schedule.COS),
    "unet": TrainConfig(L.Mode.SUPERVISED, epochs=35, batch_size=32, max_lr=2e-4, schedule=Schedule.COS,
                        weight_decay=0.002),
    "pix2pix": TrainConfig(L.Mode.PIX2PIX, epochs=35, batch_size=32, max_lr=2e-4, schedule=Schedule.COS,
                           betas=(0.5, 0.999)),
    "cyclegan": TrainConfig(L.Mode.CYCLEGAN, epochs=45, batch_size=16, max_lr=1e-4,
                            schedule=Schedule.LINEAR_DECAY_TAIL, betas=(0.5, 0.999)),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    try:
        cfg = TRAIN_PRESETS[name]
    except KeyError:
        raise TrainConfigError(f"unknown training preset {name!r}") from None
    return replace(cfg, **overrides) if overrides else cfg


# --------------------------------------------------------------------------
# learning rate
# --------------------------------------------------------------------------

class LRSchedule:
    """Per-step learning rate; ``REDUCE_ON_PLATEAU`` is driven by :meth:`observe`."""

    def __init__(self, cfg: TrainConfig, steps_per_epoch: int = 1):
        self.cfg = cfg
        self.steps_per_epoch = max(1, int(steps_per_epoch))
        self.current = cfg.max_lr
        self.best = -math.inf
        self.bad_epochs = 0

    @property
    def total_epochs(self) -> int:
        if self.cfg.schedule is Schedule.LINEAR_DECAY_TAIL:
            return self.cfg.constant_epochs + self.cfg.decay_epochs
        return self.cfg.epochs

    def lr_at(self, epoch: int, step: int = 0) -> float:
        t = epoch + step / self.steps_per_epoch
        if t < 0 or t > self.total_epochs:
            raise ScheduleError(f"epoch {t} outside schedule budget [0, {self.total_epochs}]")
        cfg = self.cfg
        if cfg.schedule is Schedule.COS:
            return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.epochs))
        if cfg.schedule is Schedule.LINEAR_DECAY_TAIL:
            factor = 1.0 - max(0.0, t - (cfg.constant_epochs - 1)) / (cfg.decay_epochs + 1)
            return cfg.max_lr * max(factor, 0.0)
        if cfg.schedule is Schedule.REDUCE_ON_PLATEAU:
            return self.current
        return cfg.max_lr

    def observe(self, metric: float) -> None:
        """Feed an end-of-epoch validation score (higher is better)."""
        if self.cfg.schedule is not Schedule.REDUCE_ON_PLATEAU:
            return
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.cfg.plateau_patience:
            self.current *= self.cfg.plateau_factor
            self.bad_epochs = 0


def lr_at(schedule, epoch: int, step: int = 0, steps_per_epoch: int = 1, **cfg_kwargs) -> float:
    """Learning rate for ``epoch`` (+ ``step`` within it).

    ``schedule`` is an :class:`LRSchedule`, a :class:`TrainConfig`, or a
    :class:`Schedule` name combined with ``TrainConfig`` keyword arguments.
    """
    if isinstance(schedule, LRSchedule):
        return schedule.lr_at(epoch, step)
    if isinstance(schedule, TrainConfig):
        return LRSchedule(schedule, steps_per_epoch).lr_at(epoch, step)
    cfg = TrainConfig(schedule=Schedule(schedule), **cfg_kwargs)
    return LRSchedule(cfg, steps_per_epoch).lr_at(epoch, step)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    flip: bool = False
    crop: tuple[int, int] = (0, 0)
    size: int | None = None


def sample_augment(rng, shape, cfg: TrainConfig) -> AugmentParams:
    h, w = shape
    size = cfg.patch_size
    if size is not None and size > min(h, w):
        raise TrainConfigError(f"patch size {size} larger than image {shape}")
    if cfg.rotate == "free":
        angle = float(rng.uniform(0.0, 360.0))
    elif cfg.rotate == "right":
        angle = 90.0 * int(rng.integers(4))
    else:
        angle = 0.0
    flip = bool(rng.integers(2)) if cfg.flip else False
    if size is None:
        crop = (0, 0)
    else:
        crop = (int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1)))
    return AugmentParams(angle, flip, crop, size)


def apply_augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = np.asarray(img)
    angle = params.angle % 360.0
    if angle:
        if angle % 90.0 == 0:
            out = np.rot90(out, int(angle // 90))
        else:
            out = ndimage.rotate(out.astype(np.float64), angle, reshape=False, order=1,
                                 mode="reflect").astype(out.dtype)
    if params.flip:
        out = out[:, ::-1]
    if params.size is not None:
        y, x = params.crop
        out = out[y:y + params.size, x:x + params.size]
    return np.ascontiguousarray(out)


def augment(pair: ImagePair, rng, cfg: TrainConfig | None = None, params: AugmentParams | None = None) -> ImagePair:
    """Apply one random rotation / flip / crop identically to LT and FT."""
    if pair.lt.shape[0] != pair.lt.shape[1]:
        raise TrainConfigError(f"augmentation expects square slices, got {pair.lt.shape}")
    if params is None:
        params = sample_augment(np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng,
                                pair.lt.shape, cfg or TrainConfig())
    return replace(pair, lt=apply_augment(pair.lt, params), ft=apply_augment(pair.ft, params))


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

def _stream(seed, epoch, k):
    return np.random.default_rng([int(seed), int(epoch), int(k)])


def _stack(arrays, dtype):
    return torch.from_numpy(np.stack(arrays)[:, None].astype(np.float64)).to(dtype)


def _select_pairs(data, split, fraction):
    if isinstance(data, ImagePairDataset):
        return data.split(split, fraction)
    pairs = list(data.get(split, [])) if isinstance(data, dict) else []
    if fraction is not None:
        pairs = [p for p in pairs if np.isclose(p.fraction, fraction)]
    return pairs


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    steps = math.ceil(n / cfg.batch_size)
    if cfg.max_steps_per_epoch is not None:
        steps = min(steps, cfg.max_steps_per_epoch)
    return steps


def paired_batches(pairs, cfg: TrainConfig, epoch: int, dtype=torch.float32):
    """Shuffled ``(lt, ft)`` batches; order and augmentation depend only on ``(seed, epoch)``."""
    order = _stream(cfg.seed, epoch, 0).permutation(len(pairs))
    aug_rng = _stream(cfg.seed, epoch, 2)
    for step in range(steps_per_epoch(len(pairs), cfg)):
        idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        lts, fts = [], []
        for i in idx:
            p = pairs[i]
            if cfg.augment:
                p = augment(p, aug_rng, cfg)
            lts.append(p.lt)
            fts.append(p.ft)
        yield _stack(lts, dtype), _stack(fts, dtype)


def unpaired_ft_batches(pairs, cfg: TrainConfig, epoch: int, dtype=torch.float32):
    """FT batches from an independent shuffle, for the unpaired CycleGAN terms."""
    rng = _stream(cfg.seed, epoch, 1)
    order = rng.permutation(len(pairs))
    aug_rng = _stream(cfg.seed, epoch, 3)
    for step in range(steps_per_epoch(len(pairs), cfg)):
        idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        fts = []
        for i in idx:
            p = pairs[i]
            if cfg.augment:
                p = augment(p, aug_rng, cfg)
            fts.append(p.ft)
        yield _stack(fts, dtype)


# --------------------------------------------------------------------------
# records and checkpoints
# --------------------------------------------------------------------------

@dataclass
class RunRecord:
    arch: dict
    train: dict
    loss: dict
    epochs: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_ssim: float | None = None
    initial_train_l1: float | None = None
    checkpoint: str | None = None
    wall_clock: float = 0.0
    run_id: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def save_checkpoint(path, models: dict) -> None:
    torch.save({name: {"arch": m.arch.to_dict(), "state": m.state_dict(), "dtype": str(next(
        iter(m.state_dict().values())).dtype) if m.state_dict() else "torch.float32"}
        for name, m in models.items()}, path)


def load_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    models = {}
    for name, entry in blob.items():
        arch = ArchConfig.from_dict({**entry["arch"], "param_target": None})
        dtype = getattr(torch, entry.get("dtype", "torch.float32").split(".")[-1])
        m = build_model(arch, dtype=dtype)
        m.load_state_dict(entry["state"])
        m.eval()
        models[name] = m
    return models


def load_run(run_dir) -> tuple[RunRecord, dict]:
    run_dir = Path(run_dir)
    record = RunRecord.load(run_dir / "run.json")
    return record, load_checkpoint(run_dir / (record.checkpoint or "checkpoint.pt"))


# --------------------------------------------------------------------------
# evaluation helpers
# --------------------------------------------------------------------------

def _param_dtype(model):
    for p in model.parameters():
        return p.dtype
    return torch.float32


@torch.no_grad()
def denoise_slices(model: DenoiserModel, slices, batch_size: int = 16) -> list[np.ndarray]:
    """Run ``model`` in eval mode over 2D slices; returns float64 arrays."""
    was_training = model.training
    model.eval()
    dtype = _param_dtype(model)
    out = []
    try:
        for i in range(0, len(slices), batch_size):
            x = _stack(slices[i:i + batch_size], dtype)
            y = model(x)
            out.extend(y[:, 0].double().numpy())
    finally:
        model.train(was_training)
    return out


class Denoiser:
    """Callable ``lt -> denoised`` wrapper around a trained generator."""

    def __init__(self, model: DenoiserModel):
        self.model = model

    def __call__(self, lt):
        return denoise_slices(self.model, [np.asarray(lt)])[0]

    def many(self, slices):
        return denoise_slices(self.model, list(slices))


def validation_ssim(model: DenoiserModel, pairs) -> float:
    """Mean SSIM of the model output against FT over full-size validation slices."""
    if not pairs:
        return float("nan")
    den = denoise_slices(model, [p.lt for p in pairs])
    return float(np.mean([ssim(d, p.ft.astype(np.float64)) for d, p in zip(den, pairs)]))


@torch.no_grad()
def mean_l1(model, pairs) -> float:
    den = denoise_slices(model, [p.lt for p in pairs])
    return float(np.mean([np.abs(d - p.ft.astype(np.float64)).mean() for d, p in zip(den, pairs)]))


# --------------------------------------------------------------------------
# trainers
# --------------------------------------------------------------------------

def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.max_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def _set_lr(opts, lr):
    for opt in opts:
        for g in opt.param_groups:
            g["lr"] = lr


def _check_finite(total, breakdown, epoch, step):
    if not torch.isfinite(total).all() or not all(math.isfinite(v) for v in breakdown.values()):
        raise NonFiniteLossError(epoch, step, breakdown)


class _Loop:
    """Epoch bookkeeping shared by the trainers."""

    def __init__(self, generator, models, data, tcfg, lcfg, out_dir, callback):
        self.generator = generator
        self.models = models
        self.tcfg = tcfg
        self.lcfg = lcfg
        self.train_pairs = _select_pairs(data, "train", tcfg.fraction)
        self.val_pairs = _select_pairs(data, "val", tcfg.fraction)
        if not self.train_pairs:
            raise TrainConfigError("training split is empty")
        self.out_dir = Path(out_dir) if out_dir else None
        self.callback = callback
        self.steps = steps_per_epoch(len(self.train_pairs), tcfg)
        self.sched = LRSchedule(tcfg, self.steps)
        self.record = RunRecord(generator.arch.to_dict(), tcfg.to_dict(), lcfg.to_dict())
        self.best_state = None
        self.global_step = 0
        self.t0 = time.perf_counter()
        self.record.initial_train_l1 = mean_l1(generator, self.train_pairs)

    def end_epoch(self, epoch, sums, counts, lr, extra=None):
        losses = {k: sums[k] / counts for k in sums}
        val = validation_ssim(self.generator, self.val_pairs) if self.val_pairs else None
        entry = {"epoch": epoch, "losses": losses, "val_ssim": val, "lr": lr}
        if extra:
            entry.update(extra)
        self.record.epochs.append(entry)
        if val is not None:
            self.sched.observe(val)
        score = val if val is not None else -losses.get("total", 0.0)
        if self.record.best_val_ssim is None or score > (self.record.best_val_ssim
                                                         if val is not None else -math.inf):
            self.record.best_epoch = epoch
            self.record.best_val_ssim = val
            self.best_state = {k: copy.deepcopy(m.state_dict()) for k, m in self.models.items()}
        logger.info("epoch %d: %s val_ssim=%s", epoch, losses, val)

    def step_done(self, lr):
        self.record.lr_trace.append(lr)
        self.global_step += 1
        if self.callback is not None:
            self.callback(self.global_step, self.models)

    def finish(self):
        self.record.wall_clock = time.perf_counter() - self.t0
        if self.best_state is not None:
            for k, m in self.models.items():
                m.load_state_dict(self.best_state[k])
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(self.out_dir / "checkpoint.pt", self.models)
            self.record.checkpoint = "checkpoint.pt"
            self.record.run_id = self.record.run_id or self.out_dir.name
            self.record.save(self.out_dir / "run.json")
        for m in self.models.values():
            m.eval()
        return self.record


def train_supervised(model: DenoiserModel, data, tcfg: TrainConfig, lcfg: L.LossConfig | None = None,
                     out_dir=None, callback=None) -> RunRecord:
    """L1 training of a single generator with Adam.

    The generator is restored to its best-validation-SSIM weights on return.
    """
    lcfg = lcfg or L.LossConfig(L.Mode.SUPERVISED)
    if lcfg.mode is not L.Mode.SUPERVISED:
        raise L.LossConfigError("train_supervised needs a SUPERVISED loss config")
    loop = _Loop(model, {"G": model}, data, tcfg, lcfg, out_dir, callback)
    opt = _adam(model.parameters(), tcfg)
    dtype = _param_dtype(model)
    for epoch in range(tcfg.epochs):
        model.train()
        sums, n = {"reconstruction": 0.0, "total": 0.0}, 0
        lr = None
        for step, (lt, ft) in enumerate(paired_batches(loop.train_pairs, tcfg, epoch, dtype)):
            lr = loop.sched.lr_at(epoch, step)
            _set_lr([opt], lr)
            opt.zero_grad()
            total, breakdown = L.total_loss(lcfg, {"reconstruction": L.batch_l1(model(lt), ft)})
            _check_finite(total, breakdown, epoch, step)
            total.backward()
            opt.step()
            sums["reconstruction"] += breakdown["reconstruction"]
            sums["total"] += float(total.detach())
            n += 1
            loop.step_done(lr)
        loop.end_epoch(epoch, sums, n, lr)
    return loop.finish()


def train_pix2pix(G: DenoiserModel, D: DenoiserModel, data, tcfg: TrainConfig, lcfg: L.LossConfig | None = None,
                  out_dir=None, callback=None, freeze_generator: bool = False) -> RunRecord:
    """Conditional GAN training; D scores ``(LT, candidate - LT)`` patch maps."""
    lcfg = lcfg or L.loss_preset(L.Mode.PIX2PIX)
    if lcfg.mode is not L.Mode.PIX2PIX:
        raise L.LossConfigError("train_pix2pix needs a PIX2PIX loss config")
    if D.arch.in_channels != 2:
        raise TrainConfigError("pix2pix discriminator needs in_channels=2")
    loop = _Loop(G, {"G": G, "D": D}, data, tcfg, lcfg, out_dir, callback)
    opt_g = _adam(G.parameters(), tcfg)
    opt_d = _adam(D.parameters(), tcfg)
    dtype = _param_dtype(G)

    def d_in(lt, img):
        return torch.cat([lt, img - lt], dim=1)

    for epoch in range(tcfg.epochs):
        G.train()
        D.train()
        sums = {"adversarial": 0.0, "reconstruction": 0.0, "total": 0.0, "d_loss": 0.0}
        correct, seen, n, lr = 0.0, 0, 0, None
        for step, (lt, ft) in enumerate(paired_batches(loop.train_pairs, tcfg, epoch, dtype)):
            lr = loop.sched.lr_at(epoch, step)
            _set_lr([opt_g, opt_d], lr)
            if freeze_generator:
                with torch.no_grad():
                    fake = G(lt)
            else:
                fake = G(lt)

            opt_d.zero_grad()
            d_real = D(d_in(lt, ft))
            d_fake = D(d_in(lt, fake.detach()))
            d_loss = 0.5 * L.lsgan_loss(d_real, d_fake, L.Side.DISCRIMINATOR)
            if not torch.isfinite(d_loss):
                raise NonFiniteLossError(epoch, step, {"d_loss": float(d_loss.detach())})
            d_loss.backward()
            opt_d.step()
            correct += float((d_real > 0.5).float().mean() + (d_fake < 0.5).float().mean()) / 2
            seen += 1

            if not freeze_generator:
                opt_g.zero_grad()
                comps = {
                    "adversarial": L.lsgan_loss(d_fake=D(d_in(lt, fake)), side=L.Side.GENERATOR),
                    "reconstruction": L.batch_l1(fake, ft),
                }
                total, breakdown = L.total_loss(lcfg, comps)
                _check_finite(total, breakdown, epoch, step)
                total.backward()
                opt_g.step()
                for k, v in breakdown.items():
                    sums[k] += v
                sums["total"] += float(total.detach())
            sums["d_loss"] += float(d_loss.detach())
            n += 1
            loop.step_done(lr)
        loop.end_epoch(epoch, sums, n, lr, {"d_accuracy": correct / max(seen, 1)})
    return loop.finish()


def train_cyclegan(G: DenoiserModel, F: DenoiserModel, D_FT: DenoiserModel, D_LT: DenoiserModel, data,
                   tcfg: TrainConfig, lcfg: L.LossConfig | None = None, out_dir=None,
                   callback=None) -> RunRecord:
    """Four-network CycleGAN update per batch.

    ``G`` maps LT to FT and ``F`` maps FT to LT. Adversarial, cycle, identity and
    image-prior terms use LT batches and an independently shuffled FT stream;
    only the reconstruction term of ``CYCLEGAN_SUPERVISED`` uses the paired FT.
    """
    lcfg = lcfg or L.loss_preset(tcfg.mode if tcfg.mode.is_cyclegan else L.Mode.CYCLEGAN)
    if not lcfg.mode.is_cyclegan:
        raise L.LossConfigError("train_cyclegan needs a CYCLEGAN* loss config")
    loop = _Loop(G, {"G": G, "F": F, "D_FT": D_FT, "D_LT": D_LT}, data, tcfg, lcfg, out_dir, callback)
    opt_g = _adam(itertools.chain(G.parameters(), F.parameters()), tcfg)
    opt_d = _adam(itertools.chain(D_FT.parameters(), D_LT.parameters()), tcfg)
    dtype = _param_dtype(G)
    terms = lcfg.active_terms()

    for epoch in range(tcfg.epochs):
        for m in loop.models.values():
            m.train()
        sums = {t: 0.0 for t in terms}
        sums.update(total=0.0, d_loss=0.0)
        n, lr = 0, None
        batches = zip(paired_batches(loop.train_pairs, tcfg, epoch, dtype),
                      unpaired_ft_batches(loop.train_pairs, tcfg, epoch, dtype))
        for step, ((lt, ft_paired), ft) in enumerate(batches):
            lr = loop.sched.lr_at(epoch, step)
            _set_lr([opt_g, opt_d], lr)

            opt_g.zero_grad()
            fake_ft = G(lt)
            fake_lt = F(ft)
            comps = {}
            comps["adversarial"] = (L.lsgan_loss(d_fake=D_FT(fake_ft)) + L.lsgan_loss(d_fake=D_LT(fake_lt)))
            comps["cycle"] = L.batch_l1(F(fake_ft), lt) + L.batch_l1(G(fake_lt), ft)
            if "identity" in terms:
                comps["identity"] = L.batch_l1(G(ft), ft) + L.batch_l1(F(lt), lt)
            if "image_prior" in terms:
                comps["image_prior"] = L.batch_l1(fake_ft, lt)
            if "reconstruction" in terms:
                comps["reconstruction"] = L.batch_l1(fake_ft, ft_paired)
            total, breakdown = L.total_loss(lcfg, comps)
            _check_finite(total, breakdown, epoch, step)
            total.backward()
            opt_g.step()

            opt_d.zero_grad()
            d_loss = 0.5 * (L.lsgan_loss(D_FT(ft), D_FT(fake_ft.detach()), L.Side.DISCRIMINATOR)
                            + L.lsgan_loss(D_LT(lt), D_LT(fake_lt.detach()), L.Side.DISCRIMINATOR))
            if not torch.isfinite(d_loss):
                raise NonFiniteLossError(epoch, step, {"d_loss": float(d_loss.detach())})
            d_loss.backward()
            opt_d.step()

            for k, v in breakdown.items():
                sums[k] += v
            sums["total"] += float(total.detach())
            sums["d_loss"] += float(d_loss.detach())
            n += 1
            loop.step_done(lr)
        loop.end_epoch(epoch, sums, n, lr)
    return loop.finish()


def build_for_mode(arch: ArchConfig, tcfg: TrainConfig, disc_arch: ArchConfig | None = None,
                   dtype=torch.float32) -> dict:
    """Construct the networks a training mode needs, seeded from ``tcfg.seed``.

    The generator is always built first from the same seed, so its initial
    weights do not depend on the mode.
    """
    from petbench.models import preset

    models = {"G": build_model(arch, seed=tcfg.seed, dtype=dtype)}
    disc = disc_arch or preset("patchgan_small")
    if tcfg.mode is L.Mode.PIX2PIX:
        models["D"] = build_model(replace(disc, in_channels=2, param_target=None), seed=tcfg.seed + 1, dtype=dtype)
    elif tcfg.mode.is_cyclegan:
        models["F"] = build_model(arch, seed=tcfg.seed + 2, dtype=dtype)
        models["D_FT"] = build_model(replace(disc, in_channels=1, param_target=None), seed=tcfg.seed + 3,
                                     dtype=dtype)
        models["D_LT"] = build_model(replace(disc, in_channels=1, param_target=None), seed=tcfg.seed + 4,
                                     dtype=dtype)
    return models


def train(models: dict, data, tcfg: TrainConfig, lcfg: L.LossConfig, out_dir=None, callback=None) -> RunRecord:
    """Dispatch to the trainer for ``tcfg.mode``."""
    if lcfg.mode is not tcfg.mode:
        raise TrainConfigError(f"loss mode {lcfg.mode.value} != train mode {tcfg.mode.value}")
    if tcfg.mode is L.Mode.SUPERVISED:
        return train_supervised(models["G"], data, tcfg, lcfg, out_dir, callback)
    if tcfg.mode is L.Mode.PIX2PIX:
        return train_pix2pix(models["G"], models["D"], data, tcfg, lcfg, out_dir, callback)
    return train_cyclegan(models["G"], models["F"], models["D_FT"], models["D_LT"], data, tcfg, lcfg,
                          out_dir, callback)


# --------------------------------------------------------------------------
# hyperparameter search
# --------------------------------------------------------------------------

SEARCH_SPACES = {
    "identity": {"loss.w_identity": (0.0, 30.0)},
    "image_prior": {"loss.w_image_prior": (0.0, 30.0)},
    "unet_weight_decay": {"train.weight_decay": (0.001, 0.2)},
}


@dataclass
class TuneResult:
    best_params: dict
    best_score: float
    trials: list

    def to_dict(self) -> dict:
        return asdict(self)


def _candidates(space: dict, budget: int, rng, strategy: str):
    names = list(space)
    if strategy == "grid":
        grids = []
        for name in names:
            dim = space[name]
            if not isinstance(dim, (list, tuple)) or (isinstance(dim, tuple) and len(dim) == 2
                                                     and all(isinstance(v, (int, float)) for v in dim)
                                                     and not isinstance(dim, list)):
                raise TrainConfigError(f"grid search needs explicit value lists, {name} is a range")
            grids.append(list(dim))
        return [dict(zip(names, combo)) for combo in itertools.islice(itertools.product(*grids), budget)]
    out = []
    for _ in range(budget):
        point = {}
        for name in names:
            dim = space[name]
            if isinstance(dim, list):
                point[name] = dim[int(rng.integers(len(dim)))]
            elif len(dim) == 3 and dim[0] == "log":
                point[name] = float(math.exp(rng.uniform(math.log(dim[1]), math.log(dim[2]))))
            else:
                lo, hi = dim
                point[name] = float(rng.uniform(lo, hi))
        out.append(point)
    return out


def tune(search_space: dict, budget: int, objective, seed: int = 0, strategy: str = "random") -> TuneResult:
    """Maximize ``objective(params)`` over ``search_space``.

    Dimensions are ``(lo, hi)`` uniform ranges, ``("log", lo, hi)`` log-uniform
    ranges, or lists of choices. ``strategy="grid"`` enumerates list-valued
    dimensions in order; ``"random"`` samples ``budget`` points.
    """
    if not search_space:
        raise TrainConfigError("search space is empty")
    if budget < 1:
        raise TrainConfigError("tuning budget must be at least 1 trial")
    rng = np.random.default_rng(seed)
    trials = []
    best_params, best_score = None, -math.inf
    for i, params in enumerate(_candidates(search_space, budget, rng, strategy)):
        score = float(objective(params))
        trials.append({"trial": i, "params": params, "score": score})
        logger.info("trial %d: %s -> %.6f", i, params, score)
        if score > best_score:
            best_params, best_score = params, score
    return TuneResult(best_params, best_score, trials)


def apply_params(tcfg: TrainConfig, lcfg: L.LossConfig, params: dict) -> tuple[TrainConfig, L.LossConfig]:
    """Apply ``{"train.x": v, "loss.y": w}`` overrides."""
    t, lo = {}, {}
    for key, value in params.items():
        scope, _, name = key.partition(".")
        if scope == "train":
            t[name] = value
        elif scope == "loss":
            lo[name] = value
        else:
            raise TrainConfigError(f"parameter {key!r} must be prefixed with train. or loss.")
    return replace(tcfg, **t), replace(lcfg, **lo)


def tune_training(arch: ArchConfig, data, tcfg: TrainConfig, lcfg: L.LossConfig, search_space: dict,
                  budget: int, seed: int = 0, disc_arch: ArchConfig | None = None) -> TuneResult:
    """Random search over training/loss parameters scored by best validation SSIM."""

    def objective(params):
        t, lo = apply_params(tcfg, lcfg, params)
        record = train(build_for_mode(arch, t, disc_arch), data, t, lo)
        return record.best_val_ssim if record.best_val_ssim is not None else -math.inf

    return tune(search_space, budget, objective, seed)
