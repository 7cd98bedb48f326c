"""Network families, presets and the residual denoiser wrapper."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn

from petbench.models.patchgan import PatchDiscriminator
from petbench.models.resnet import ResnetEncoderDecoder
from petbench.models.swinir import SwinIR
from petbench.models.unet import UnetGenerator


class Family(str, enum.Enum):
    RESNET_ED = "RESNET_ED"
    UNET = "UNET"
    SWINIR = "SWINIR"
    PATCHGAN = "PATCHGAN"
    # toy / plumbing families
    LINEAR = "LINEAR"
    IDENTITY = "IDENTITY"


GENERATOR_FAMILIES = (Family.RESNET_ED, Family.UNET, Family.SWINIR, Family.LINEAR, Family.IDENTITY)


class ConfigError(ValueError):
    """Invalid architecture configuration."""


class NumericFault(FloatingPointError):
    """Non-finite network output."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


_NORMS = {
    "batch": nn.BatchNorm2d,
    "instance": nn.InstanceNorm2d,
    "none": nn.Identity,
}


@dataclass(frozen=True)
class ArchConfig:
    family: Family = Family.RESNET_ED
    width: int = 64
    n_blocks: int = 9
    n_down: int = 2
    num_downs: int = 8
    rstb_count: int = 6
    layers_per_rstb: int = 6
    num_heads: int = 6
    window_size: int = 8
    mlp_ratio: float = 2.0
    patch_size: int = 64
    in_channels: int = 1
    out_channels: int = 1
    residual_output: bool = True
    norm: str = "batch"
    suv_scale: float = 1.0
    param_target: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.width < 1:
            raise ConfigError(f"{self.family.value}: width must be positive")
        if self.norm not in _NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.suv_scale <= 0:
            raise ConfigError("suv_scale must be positive")
        if self.family is Family.SWINIR:
            if self.width % self.num_heads:
                raise ConfigError("SWINIR: embed dim must be divisible by num_heads")
            if self.patch_size % self.window_size:
                raise ConfigError(
                    f"SWINIR: window size {self.window_size} must divide patch size {self.patch_size}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


PRESETS = {
    "resnet_ed": ArchConfig(Family.RESNET_ED, width=64, n_blocks=9, param_target=11.73e6),
    "unet": ArchConfig(Family.UNET, width=64, num_downs=8, param_target=54.4e6),
    "swinir": ArchConfig(Family.SWINIR, width=186, rstb_count=6, layers_per_rstb=6, num_heads=6,
                         window_size=8, patch_size=64, param_target=12.5e6),
    "patchgan": ArchConfig(Family.PATCHGAN, width=64, n_blocks=3, residual_output=False,
                           param_target=2.8e6),
    # reduced-width variants for desk-scale runs
    "resnet_ed_small": ArchConfig(Family.RESNET_ED, width=16, n_blocks=4),
    "unet_small": ArchConfig(Family.UNET, width=8, num_downs=5),
    "swinir_small": ArchConfig(Family.SWINIR, width=24, rstb_count=2, layers_per_rstb=2, num_heads=3,
                               window_size=8),
    "patchgan_small": ArchConfig(Family.PATCHGAN, width=16, n_blocks=3, residual_output=False),
    "identity": ArchConfig(Family.IDENTITY),
}


def preset(name: str, **overrides) -> ArchConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}") from None
    if overrides:
        overrides.setdefault("param_target", None)
        cfg = replace(cfg, **overrides)
    return cfg


class _Zero(nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


class DenoiserModel(nn.Module):
    """Architecture-tagged network with optional residual prediction.

    Inputs are SUV slices ``(B, C, H, W)``. The inner network sees ``x / suv_scale``;
    generators return ``x + suv_scale * net(x / suv_scale)`` when
    ``residual_output`` is set, so a zero network reproduces the input exactly.
    """

    def __init__(self, arch: ArchConfig, net: nn.Module):
        super().__init__()
        self.arch = arch
        self.net = net

    @property
    def is_generator(self) -> bool:
        return self.arch.family in GENERATOR_FAMILIES

    def forward(self, x):
        scale = self.arch.suv_scale
        y = self.net(x / scale)
        if not self.is_generator:
            return y
        if self.arch.residual_output:
            return x + scale * y
        return scale * y

    def head(self) -> nn.Module | None:
        return getattr(self.net, "head", None)

    def zero_head(self) -> "DenoiserModel":
        """Zero the final layer so the residual map is identically zero."""
        head = self.head()
        if head is None:
            raise ConfigError(f"{self.arch.family.value} has no output head")
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        return self


class _LinearToy(nn.Module):
    """Single bias-free 3x3 convolution with zero padding (a linear map)."""

    def __init__(self, channels=1):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    @property
    def head(self):
        return self.conv

    def forward(self, x):
        return self.conv(x)


def _build_net(cfg: ArchConfig) -> nn.Module:
    norm = _NORMS[cfg.norm]
    if cfg.family is Family.RESNET_ED:
        return ResnetEncoderDecoder(cfg.in_channels, cfg.out_channels, ngf=cfg.width,
                                    n_blocks=cfg.n_blocks, n_down=cfg.n_down, norm_layer=norm)
    if cfg.family is Family.UNET:
        return UnetGenerator(cfg.in_channels, cfg.out_channels, ngf=cfg.width,
                             num_downs=cfg.num_downs, norm_layer=norm)
    if cfg.family is Family.SWINIR:
        return SwinIR(cfg.in_channels, cfg.out_channels, embed_dim=cfg.width,
                      depths=(cfg.layers_per_rstb,) * cfg.rstb_count,
                      num_heads=(cfg.num_heads,) * cfg.rstb_count,
                      window_size=cfg.window_size, mlp_ratio=cfg.mlp_ratio)
    if cfg.family is Family.PATCHGAN:
        return PatchDiscriminator(cfg.in_channels, ndf=cfg.width, n_layers=cfg.n_blocks, norm_layer=norm)
    if cfg.family is Family.LINEAR:
        return _LinearToy(cfg.in_channels)
    if cfg.family is Family.IDENTITY:
        return _Zero()
    raise ConfigError(f"unsupported family {cfg.family}")


def count_parameters(model: nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def check_budget(model: DenoiserModel, target: float | None = None, rel_tol: float = 0.10) -> int:
    target = target if target is not None else model.arch.param_target
    n = count_parameters(model)
    if target is not None and abs(n - target) > rel_tol * target:
        raise ConfigError(
            f"{model.arch.family.value}: {n} parameters is outside ±{rel_tol:.0%} of {target:.0f}"
        )
    return n


def build_model(cfg: ArchConfig | str, seed: int | None = None, dtype=torch.float32) -> DenoiserModel:
    """Construct a network; a fixed ``seed`` gives identical initial parameters."""
    if isinstance(cfg, str):
        cfg = preset(cfg)
    if seed is None:
        net = _build_net(cfg)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = _build_net(cfg)
    model = DenoiserModel(cfg, net).to(dtype)
    if cfg.param_target is not None:
        check_budget(model)
    return model


def forward(model: nn.Module, lt: torch.Tensor) -> torch.Tensor:
    """Run ``model`` and raise :class:`NumericFault` on the first non-finite sample."""
    if lt.ndim != 4:
        raise ConfigError(f"expected a (B, C, H, W) batch, got shape {tuple(lt.shape)}")
    out = model(lt)
    bad = ~torch.isfinite(out).flatten(1).all(dim=1)
    if bad.any():
        idx = int(torch.nonzero(bad)[0])
        raise NumericFault(f"non-finite output for batch index {idx}", batch_index=idx)
    return out


__all__ = [
    "ArchConfig", "ConfigError", "DenoiserModel", "Family", "NumericFault", "PRESETS",
    "build_model", "check_budget", "count_parameters", "forward", "preset",
]
