# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled lesion kernels; see ``_pykernels`` for the reference versions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline Py_ssize_t _find(int[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t root = i, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = <int>root
        i = nxt
    return root


cdef inline void _union(int[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label26(mask):
    cdef cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t nz = m.shape[0], ny = m.shape[1], nx = m.shape[2]
    labels_arr = np.zeros((nz, ny, nx), dtype=np.int32)
    cdef int[:, :, ::1] labels = labels_arr
    cdef Py_ssize_t n_fg = int(np.count_nonzero(mask))
    parent_arr = np.zeros(n_fg + 1, dtype=np.int32)
    cdef int[::1] parent = parent_arr
    cdef Py_ssize_t z, y, x, dz, dy, dx, zz, yy, xx
    cdef int nxt = 0, lab, other
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if not m[z, y, x]:
                        continue
                    lab = 0
                    # the 13 neighbours already visited in raster order
                    for dz in range(-1, 1):
                        zz = z + dz
                        if zz < 0:
                            continue
                        for dy in range(-1, 2):
                            yy = y + dy
                            if yy < 0 or yy >= ny:
                                continue
                            if dz == 0 and dy > 0:
                                break
                            for dx in range(-1, 2):
                                xx = x + dx
                                if xx < 0 or xx >= nx:
                                    continue
                                if dz == 0 and dy == 0 and dx >= 0:
                                    break
                                other = labels[zz, yy, xx]
                                if other:
                                    if lab == 0:
                                        lab = other
                                    else:
                                        _union(parent, lab, other)
                    if lab == 0:
                        nxt += 1
                        parent[nxt] = nxt
                        lab = nxt
                    labels[z, y, x] = lab
    remap_arr = np.zeros(nxt + 1, dtype=np.int32)
    cdef int[::1] remap = remap_arr
    cdef int count = 0, root
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    lab = labels[z, y, x]
                    if lab:
                        root = <int>_find(parent, lab)
                        if remap[root] == 0:
                            count += 1
                            remap[root] = count
                        labels[z, y, x] = remap[root]
    return labels_arr, count


def max_pairwise_distance(points):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = p.shape[0], i, j
    cdef double best = 0.0, d, a, b, c
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                a = p[i, 0] - p[j, 0]
                b = p[i, 1] - p[j, 1]
                c = p[i, 2] - p[j, 2]
                d = a * a + b * b + c * c
                if d > best:
                    best = d
    return sqrt(best)


def sphere_means(volume, centers, offsets):
    cdef double[:, :, ::1] v = np.ascontiguousarray(volume, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] c = np.ascontiguousarray(centers, dtype=np.int64).reshape(-1, 3)
    cdef cnp.int64_t[:, ::1] o = np.ascontiguousarray(offsets, dtype=np.int64).reshape(-1, 3)
    cdef Py_ssize_t nc = c.shape[0], no = o.shape[0], i, k
    cdef Py_ssize_t nz = v.shape[0], ny = v.shape[1], nx = v.shape[2]
    cdef Py_ssize_t z, y, x
    out_arr = np.empty(nc, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double total
    cdef Py_ssize_t count
    with nogil:
        for i in range(nc):
            total = 0.0
            count = 0
            # offsets are visited in the same order as the numpy version
            for k in range(no):
                z = c[i, 0] + o[k, 0]
                y = c[i, 1] + o[k, 1]
                x = c[i, 2] + o[k, 2]
                if 0 <= z < nz and 0 <= y < ny and 0 <= x < nx:
                    total = total + v[z, y, x]
                    count += 1
            out[i] = total / count
    return out_arr
