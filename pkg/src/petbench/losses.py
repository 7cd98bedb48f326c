"""Denoising, adversarial and cycle losses and their weighted composition.

All L1 terms use the mean over pixels per image and the mean over the batch,
so loss weights do not depend on batch size or resolution.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, replace

import torch


class Mode(str, enum.Enum):
    SUPERVISED = "SUPERVISED"
    PIX2PIX = "PIX2PIX"
    CYCLEGAN = "CYCLEGAN"
    CYCLEGAN_IDENTITY = "CYCLEGAN_IDENTITY"
    CYCLEGAN_IMGPRIOR = "CYCLEGAN_IMGPRIOR"
    CYCLEGAN_SUPERVISED = "CYCLEGAN_SUPERVISED"

    @property
    def is_cyclegan(self) -> bool:
        return self.value.startswith("CYCLEGAN")


class Side(str, enum.Enum):
    GENERATOR = "GENERATOR"
    DISCRIMINATOR = "DISCRIMINATOR"


class LossConfigError(ValueError):
    pass


class BatchError(ValueError):
    pass


# term name -> LossConfig weight attribute
WEIGHT_FIELDS = {
    "reconstruction": "w_reconstruction",
    "identity": "w_identity",
    "image_prior": "w_image_prior",
    "cycle": "w_cycle",
    "adversarial": "w_adversarial",
}

# terms that must be present in a breakdown for each mode
REQUIRED_TERMS = {
    Mode.SUPERVISED: ("reconstruction",),
    Mode.PIX2PIX: ("adversarial", "reconstruction"),
    Mode.CYCLEGAN: ("adversarial", "cycle"),
    Mode.CYCLEGAN_IDENTITY: ("adversarial", "cycle", "identity"),
    Mode.CYCLEGAN_IMGPRIOR: ("adversarial", "cycle", "image_prior"),
    Mode.CYCLEGAN_SUPERVISED: ("adversarial", "cycle", "reconstruction"),
}


@dataclass(frozen=True)
class LossConfig:
    mode: Mode = Mode.SUPERVISED
    w_identity: float = 0.0
    w_image_prior: float = 0.0
    w_reconstruction: float | None = None  # None: 0 for unpaired modes, 1 otherwise
    w_cycle: float = 0.0
    w_adversarial: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.w_reconstruction is None:
            unpaired = self.mode.is_cyclegan and self.mode is not Mode.CYCLEGAN_SUPERVISED
            object.__setattr__(self, "w_reconstruction", 0.0 if unpaired else 1.0)
        for name in WEIGHT_FIELDS.values():
            if getattr(self, name) < 0:
                raise LossConfigError(f"{name} must be non-negative")
        m = self.mode
        if m is Mode.SUPERVISED and (self.w_adversarial or self.w_cycle or self.w_identity
                                     or self.w_image_prior):
            raise LossConfigError("SUPERVISED mode only accepts a reconstruction weight")
        if m is Mode.PIX2PIX and (self.w_cycle or self.w_identity or self.w_image_prior):
            raise LossConfigError("PIX2PIX mode accepts adversarial and reconstruction weights only")
        if m.is_cyclegan and m is not Mode.CYCLEGAN_SUPERVISED and self.w_reconstruction:
            raise LossConfigError(f"{m.value} is unpaired and cannot use a reconstruction weight")

    def active_terms(self) -> tuple[str, ...]:
        """Terms that enter the generator objective for this mode."""
        terms = list(REQUIRED_TERMS[self.mode])
        if self.mode.is_cyclegan:
            for extra in ("identity", "image_prior"):
                if getattr(self, WEIGHT_FIELDS[extra]) > 0 and extra not in terms:
                    terms.append(extra)
        return tuple(terms)

    def weight(self, term: str) -> float:
        return getattr(self, WEIGHT_FIELDS[term])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def loss_preset(mode: Mode | str) -> LossConfig:
    """Default weights for each training mode."""
    mode = Mode(mode)
    if mode is Mode.SUPERVISED:
        return LossConfig(mode)
    if mode is Mode.PIX2PIX:
        return LossConfig(mode, w_reconstruction=10.0, w_adversarial=1.0)
    base = LossConfig(mode, w_reconstruction=0.0, w_cycle=10.0, w_adversarial=1.0)
    if mode is Mode.CYCLEGAN_IDENTITY:
        return replace(base, w_identity=2.2)
    if mode is Mode.CYCLEGAN_IMGPRIOR:
        return replace(base, w_image_prior=9.2)
    if mode is Mode.CYCLEGAN_SUPERVISED:
        return replace(base, w_reconstruction=9.2)
    return base


def _check(a, b):
    if a.shape != b.shape:
        raise BatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim < 3 or a.shape[0] < 1:
        raise BatchError(f"expected a non-empty (B, ..., H, W) batch, got {tuple(a.shape)}")


def batch_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image mean absolute difference, averaged over the batch."""
    _check(a, b)
    return (a - b).abs().flatten(1).mean(dim=1).mean()


def reconstruction_loss(G, lt, ft):
    return batch_l1(G(lt), ft)


def identity_loss(G, F, lt, ft):
    """``|G(FT) - FT| + |F(LT) - LT|``: generators should not alter in-domain images."""
    return batch_l1(G(ft), ft) + batch_l1(F(lt), lt)


def image_prior_loss(G, lt):
    return batch_l1(G(lt), lt)


def lsgan_loss(d_real=None, d_fake=None, side=Side.GENERATOR):
    """Least-squares GAN objective on discriminator outputs."""
    side = Side(side)
    if side is Side.GENERATOR:
        return ((d_fake - 1.0) ** 2).mean()
    return ((d_real - 1.0) ** 2).mean() + (d_fake ** 2).mean()


def adversarial_loss(D, real, fake, side=Side.GENERATOR, condition=None):
    """Least-squares adversarial term.

    With ``condition`` (the LT input) the discriminator sees the pair
    ``(condition, candidate - condition)`` stacked on the channel axis.
    """
    side = Side(side)

    def disc_input(x):
        if condition is None:
            return x
        return torch.cat([condition, x - condition], dim=1)

    d_fake = D(disc_input(fake))
    if side is Side.GENERATOR:
        return lsgan_loss(d_fake=d_fake, side=side)
    return lsgan_loss(D(disc_input(real)), d_fake, side)


def cycle_loss(G, F, lt, ft):
    if lt.shape[0] < 1 or ft.shape[0] < 1:
        raise BatchError("cycle loss needs non-empty LT and FT batches")
    return batch_l1(F(G(lt)), lt) + batch_l1(G(F(ft)), ft)


def total_loss(cfg: LossConfig, components: dict) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the mode's active terms.

    Returns the scalar objective and a ``{term: float}`` breakdown of the
    unweighted values that entered it.
    """
    terms = cfg.active_terms()
    missing = [t for t in terms if t not in components]
    if missing:
        raise LossConfigError(f"{cfg.mode.value} requires loss terms {missing}")
    total = None
    breakdown = {}
    for t in terms:
        value = components[t]
        breakdown[t] = float(value.detach()) if torch.is_tensor(value) else float(value)
        contrib = cfg.weight(t) * value
        total = contrib if total is None else total + contrib
    if not torch.is_tensor(total):
        total = torch.as_tensor(total, dtype=torch.float64)
    return total, breakdown
