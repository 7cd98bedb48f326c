import numpy as np
import pytest
import torch

from petbench.models import (
    ArchConfig, ConfigError, Family, NumericFault, PRESETS, build_model, check_budget, count_parameters, forward,
    preset,
)

GENERATORS = ["resnet_ed", "unet", "swinir"]
SMALL = ["resnet_ed_small", "unet_small", "swinir_small"]


def grad_toy():
    """A ResNet-ED small enough for finite differences."""
    return preset("resnet_ed", width=2, n_blocks=1, n_down=1)


class TestPresets:
    @pytest.mark.parametrize("name,target", [("resnet_ed", 11.73e6), ("unet", 54.4e6),
                                             ("swinir", 12.5e6), ("patchgan", 2.8e6)])
    def test_parameter_budget(self, name, target):
        model = build_model(name, seed=0)
        n = count_parameters(model)
        assert abs(n - target) <= 0.10 * target

    def test_exact_counts(self):
        # frozen from the constructed networks; guards silent architecture drift
        counts = {name: count_parameters(build_model(name, seed=0))
                  for name in ("resnet_ed", "unet", "swinir", "patchgan")}
        assert counts == {"resnet_ed": 11_370_881, "unet": 54_407_809, "swinir": 12_271_033,
                          "patchgan": 2_763_585}

    def test_budget_violation(self):
        with pytest.raises(ConfigError):
            check_budget(build_model("resnet_ed_small"), target=11.73e6)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("vgg")

    def test_window_must_divide_patch(self):
        with pytest.raises(ConfigError):
            preset("swinir_small", patch_size=60)

    def test_heads_divide_width(self):
        with pytest.raises(ConfigError):
            preset("swinir_small", num_heads=5)

    def test_override_clears_target(self):
        assert preset("resnet_ed", width=8).param_target is None

    def test_config_round_trip(self):
        for cfg in PRESETS.values():
            assert ArchConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    @pytest.mark.parametrize("name", GENERATORS)
    def test_zero_head_is_identity(self, name):
        model = build_model(name, seed=0).zero_head().eval()
        x = torch.rand(1, 1, 64, 64) * 5
        with torch.no_grad():
            assert torch.equal(model(x), x)

    @pytest.mark.parametrize("name", SMALL)
    @pytest.mark.parametrize("shape", [(64, 64), (37, 50)])
    def test_shape_preserved(self, name, shape):
        model = build_model(name, seed=0).eval()
        with torch.no_grad():
            assert model(torch.rand(2, 1, *shape)).shape == (2, 1, *shape)

    def test_patchgan_map(self):
        model = build_model("patchgan", seed=0)
        assert model(torch.rand(2, 1, 64, 64)).shape == (2, 1, 6, 6)

    def test_conditional_patchgan(self):
        model = build_model(preset("patchgan_small", in_channels=2), seed=0)
        assert model(torch.rand(1, 2, 64, 64)).shape[1] == 1

    def test_identity_family(self):
        x = torch.rand(1, 1, 8, 8)
        assert torch.equal(build_model("identity")(x), x)

    def test_seeded_init(self):
        a = build_model("resnet_ed_small", seed=4)
        b = build_model("resnet_ed_small", seed=4)
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)

    def test_seed_does_not_touch_global_rng(self):
        torch.manual_seed(0)
        expected = torch.rand(3)
        torch.manual_seed(0)
        build_model("resnet_ed_small", seed=9)
        assert torch.equal(torch.rand(3), expected)

    def test_numeric_fault(self):
        model = build_model("resnet_ed_small", seed=0).eval()
        x = torch.rand(3, 1, 16, 16)
        x[1, 0, 2, 2] = float("nan")
        with pytest.raises(NumericFault) as err:
            forward(model, x)
        assert err.value.batch_index == 1

    def test_forward_rejects_3d(self):
        with pytest.raises(ConfigError):
            forward(build_model("identity"), torch.rand(1, 8, 8))

    def test_linear_family_is_linear(self):
        model = build_model(ArchConfig(Family.LINEAR, residual_output=False), seed=0, dtype=torch.float64)
        a, b = torch.rand(1, 1, 9, 9, dtype=torch.float64), torch.rand(1, 1, 9, 9, dtype=torch.float64)
        torch.testing.assert_close(model(2 * a + b), 2 * model(a) + model(b))


class TestGradients:
    def test_toy_is_small(self):
        assert count_parameters(build_model(grad_toy())) <= 5000

    def test_finite_difference(self):
        model = build_model(grad_toy(), seed=1, dtype=torch.float64)
        gen = torch.Generator().manual_seed(0)
        x = torch.rand(2, 1, 12, 12, dtype=torch.float64, generator=gen)
        y = torch.rand(2, 1, 12, 12, dtype=torch.float64, generator=gen)

        def loss():
            return ((model(x) - y) ** 2).mean()

        model.zero_grad()
        loss().backward()
        params = list(model.parameters())
        analytic = torch.cat([p.grad.ravel() for p in params])
        numeric = []
        eps = 1e-6
        with torch.no_grad():
            for p in params:
                flat = p.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + eps
                    up = loss().item()
                    flat[i] = old - eps
                    down = loss().item()
                    flat[i] = old
                    numeric.append((up - down) / (2 * eps))
        numeric = torch.tensor(numeric, dtype=torch.float64)
        rel = (analytic - numeric).norm() / numeric.norm()
        assert rel < 1e-3
