import os
import subprocess
import sys

import numpy as np
import pytest

from petbench import _pykernels, kernels

ckernels = pytest.importorskip("petbench._ckernels", reason="compiled kernels not built")


class TestBackendEquivalence:
    def test_label26(self, rng):
        for _ in range(50):
            m = rng.random((7, 8, 9)) < rng.uniform(0.05, 0.5)
            lc, nc = ckernels.label26(m)
            lp, npy = _pykernels.label26(m)
            assert nc == npy
            np.testing.assert_array_equal(lc, lp)

    def test_label26_empty(self):
        m = np.zeros((3, 3, 3), bool)
        assert ckernels.label26(m)[1] == _pykernels.label26(m)[1] == 0

    def test_max_pairwise_distance(self, rng):
        for n in (1, 2, 17, 600):
            pts = rng.normal(size=(n, 3))
            assert ckernels.max_pairwise_distance(pts) == pytest.approx(
                _pykernels.max_pairwise_distance(pts), abs=1e-12)

    def test_sphere_means(self, rng):
        vol = rng.random((6, 7, 8))
        centers = np.argwhere(rng.random(vol.shape) < 0.1)
        z, y, x = np.mgrid[-2:3, -2:3, -2:3]
        offsets = np.stack([z.ravel(), y.ravel(), x.ravel()], 1)
        offsets = offsets[(offsets ** 2).sum(1) <= 4]
        np.testing.assert_allclose(ckernels.sphere_means(vol, centers, offsets),
                                   _pykernels.sphere_means(vol, centers, offsets), rtol=0, atol=1e-13)


class TestSelection:
    def test_default_prefers_compiled(self):
        if os.environ.get("PETBENCH_PURE_PYTHON", "") not in ("", "0"):
            pytest.skip("fallback forced by environment")
        assert kernels.BACKEND == "cython"

    def test_env_forces_fallback(self):
        env = dict(os.environ, PETBENCH_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "from petbench import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"
