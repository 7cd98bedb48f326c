"""Pure Python / numpy implementations of the lesion kernels.

Used when the compiled extension is unavailable or when
``PETBENCH_PURE_PYTHON=1`` is set. Outputs are identical to the compiled
versions, including label order.
"""

from collections import deque

import numpy as np

_NEIGHBOURS_26 = [
    (dz, dy, dx)
    for dz in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dx in (-1, 0, 1)
    if (dz, dy, dx) != (0, 0, 0)
]


def label26(mask):
    """Label 26-connected components of a 3D mask.

    Labels start at 1 and are ordered by the raster position of each
    component's first voxel. Returns ``(labels, n_components)``.
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    nz, ny, nx = mask.shape
    labels = np.zeros(mask.shape, dtype=np.int32)
    current = 0
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        current += 1
        labels[start] = current
        queue = deque([start])
        while queue:
            z, y, x = queue.popleft()
            for dz, dy, dx in _NEIGHBOURS_26:
                zz, yy, xx = z + dz, y + dy, x + dx
                if 0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx:
                    if mask[zz, yy, xx] and not labels[zz, yy, xx]:
                        labels[zz, yy, xx] = current
                        queue.append((zz, yy, xx))
    return labels, current


def max_pairwise_distance(points):
    """Largest Euclidean distance between any two rows of ``points``."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = len(points)
    best = 0.0
    block = 512
    for i in range(0, n, block):
        a = points[i:i + block]
        d2 = ((a[:, None, :] - points[None, i:, :]) ** 2).sum(axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def sphere_means(volume, centers, offsets):
    """Mean of ``volume`` over ``centers + offsets``, clipped to the volume."""
    volume = np.ascontiguousarray(volume, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
    shape = np.array(volume.shape)
    total = np.zeros(len(centers))
    count = np.zeros(len(centers))
    for off in offsets:
        idx = centers + off
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        sel = idx[ok]
        total[ok] += volume[sel[:, 0], sel[:, 1], sel[:, 2]]
        count[ok] += 1
    return total / count
