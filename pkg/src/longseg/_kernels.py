"""Voxel-loop kernels: barycentric prior rasterization and the mesh data term.

Each kernel has a numba implementation and a pure-numpy one with identical
semantics (tetrahedra visited in index order, first containing tetrahedron
wins).  The backend is picked at import time:

* ``LONGSEG_BACKEND=numpy`` forces the numpy path,
* ``LONGSEG_BACKEND=numba`` (default) uses numba when it imports.

``set_backend`` switches at runtime (used by tests and the benchmark).
Results of the two backends agree to rounding (summation order differs).
"""

import os

import numpy as np

INSIDE_TOL = 1e-9
# det J at or below this counts as a collapsed tetrahedron (rounding of an exact 0)
COLLAPSE_DET = 1e-12

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("LONGSEG_BACKEND", "numba").strip().lower()
BACKEND = "numba" if (_requested != "numpy" and HAVE_NUMBA) else "numpy"


def set_backend(name):
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not available")
    BACKEND = name


def get_backend():
    return BACKEND


def set_threads(n):
    if HAVE_NUMBA and n is not None and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


# --- shared geometry ----------------------------------------------------------


def tet_bary_matrices(positions, tets):
    """Per tetrahedron: vertex 0 and the inverse of [v1-v0, v2-v0, v3-v0]."""
    v = positions[tets]
    edges = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=2)
    return v[:, 0], np.linalg.inv(edges)


# --- numpy backend ------------------------------------------------------------


def _bbox(verts, dims):
    lo = np.maximum(np.ceil(verts.min(axis=0) - INSIDE_TOL), 0).astype(np.int64)
    hi = np.minimum(np.floor(verts.max(axis=0) + INSIDE_TOL), np.array(dims) - 1).astype(np.int64)
    return lo, hi


def _tet_voxels_numpy(verts, tinv, dims, claimed):
    """Unclaimed voxel indices inside one tetrahedron and their barycentric coords."""
    lo, hi = _bbox(verts, dims)
    if np.any(hi < lo):
        return None, None
    gx, gy, gz = np.meshgrid(
        np.arange(lo[0], hi[0] + 1),
        np.arange(lo[1], hi[1] + 1),
        np.arange(lo[2], hi[2] + 1),
        indexing="ij",
    )
    idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    free = ~claimed[idx[:, 0], idx[:, 1], idx[:, 2]]
    idx = idx[free]
    if idx.shape[0] == 0:
        return None, None
    rel = idx - verts[0]
    l123 = rel @ tinv.T
    lam = np.empty((idx.shape[0], 4))
    lam[:, 1:] = l123
    lam[:, 0] = 1.0 - l123.sum(axis=1)
    inside = np.all(lam >= -INSIDE_TOL, axis=1)
    if not np.any(inside):
        return None, None
    return idx[inside], lam[inside]


def _rasterize_numpy(positions, tets, alphas, dims, background):
    K = alphas.shape[1]
    prior = np.empty(tuple(dims) + (K,))
    prior[...] = background
    claimed = np.zeros(dims, dtype=bool)
    v0, tinv = tet_bary_matrices(positions, tets)
    for m in range(tets.shape[0]):
        verts = positions[tets[m]]
        idx, lam = _tet_voxels_numpy(verts, tinv[m], dims, claimed)
        if idx is None:
            continue
        claimed[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        prior[idx[:, 0], idx[:, 1], idx[:, 2]] = lam @ alphas[tets[m]]
    return prior


def _data_term_numpy(positions, tets, alphas, mask, lik, log_offset, background, want_grad):
    dims = mask.shape
    claimed = np.zeros(dims, dtype=bool)
    grad = np.zeros_like(positions) if want_grad else None
    total = 0.0
    v0, tinv = tet_bary_matrices(positions, tets)
    for m in range(tets.shape[0]):
        verts = positions[tets[m]]
        idx, lam = _tet_voxels_numpy(verts, tinv[m], dims, claimed)
        if idx is None:
            continue
        claimed[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        on = mask[idx[:, 0], idx[:, 1], idx[:, 2]]
        idx, lam = idx[on], lam[on]
        if idx.shape[0] == 0:
            continue
        L = lik[idx[:, 0], idx[:, 1], idx[:, 2]]
        g = L @ alphas[tets[m]].T  # (n, 4): likelihood mixed with each node's alphas
        F = np.sum(lam * g, axis=1)
        if np.any(F <= 0):
            return -np.inf, grad
        total += np.sum(np.log(F) + log_offset[idx[:, 0], idx[:, 1], idx[:, 2]])
        if want_grad:
            dl = np.empty((4, 3))
            dl[1:] = tinv[m]
            dl[0] = -tinv[m].sum(axis=0)
            gp = (g / F[:, None]) @ dl  # d log F / d p for each voxel
            contrib = -lam.T @ gp  # (4, 3)
            np.add.at(grad, tets[m], contrib)
    rest = mask & ~claimed
    if np.any(rest):
        Fb = lik[rest] @ background
        if np.any(Fb <= 0):
            return -np.inf, grad
        total += np.sum(np.log(Fb) + log_offset[rest])
    return total, grad


def _energy_numpy(x, ref, tets, want_gx, want_gr):
    vx = x[tets]
    vr = ref[tets]
    Dx = np.stack([vx[:, 1] - vx[:, 0], vx[:, 2] - vx[:, 0], vx[:, 3] - vx[:, 0]], axis=2)
    Dr = np.stack([vr[:, 1] - vr[:, 0], vr[:, 2] - vr[:, 0], vr[:, 3] - vr[:, 0]], axis=2)
    det_r = np.linalg.det(Dr)
    det_x = np.linalg.det(Dx)
    n = x.shape[0]
    gx = np.zeros((n, 3)) if want_gx else None
    gr = np.zeros((n, 3)) if want_gr else None
    if np.any(det_r <= 0):
        return np.inf, -np.inf, gx, gr
    det = det_x / det_r
    min_det = float(det.min())
    if min_det <= COLLAPSE_DET:
        return np.inf, min_det, gx, gr
    Dr_inv = np.linalg.inv(Dr)
    J = Dx @ Dr_inv
    V = det_r / 6.0
    fro = np.einsum("mij,mij->m", J, J)
    d23 = det ** (-2.0 / 3.0)
    bracket = fro * d23 - 3.0 + det + 1.0 / det - 2.0
    energy = float(np.sum(V * bracket))
    if not (want_gx or want_gr):
        return energy, min_det, gx, gr
    J_invT = np.transpose(np.linalg.inv(J), (0, 2, 1))
    coef = (-(2.0 / 3.0) * fro * d23 + det - 1.0 / det)[:, None, None]
    G = V[:, None, None] * (2.0 * d23[:, None, None] * J + coef * J_invT)
    Dr_invT = np.transpose(Dr_inv, (0, 2, 1))
    if want_gx:
        _scatter_edges(G @ Dr_invT, tets, gx)
    if want_gr:
        JT = np.transpose(J, (0, 2, 1))
        dDr = -(JT @ G @ Dr_invT) + (V * bracket)[:, None, None] * Dr_invT
        _scatter_edges(dDr, tets, gr)
    return energy, min_det, gx, gr


def _scatter_edges(dD, tets, out):
    per_vertex = np.empty((tets.shape[0], 4, 3))
    per_vertex[:, 1:, :] = np.transpose(dD, (0, 2, 1))
    per_vertex[:, 0, :] = -per_vertex[:, 1:, :].sum(axis=1)
    np.add.at(out, tets.ravel(), per_vertex.reshape(-1, 3))


# --- numba backend ------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True, error_model="numpy")
    def _inv3(a, out):
        c00 = a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
        c01 = a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2]
        c02 = a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]
        det = a[0, 0] * c00 + a[0, 1] * c01 + a[0, 2] * c02
        out[0, 0] = c00 / det
        out[1, 0] = c01 / det
        out[2, 0] = c02 / det
        out[0, 1] = (a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2]) / det
        out[1, 1] = (a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]) / det
        out[2, 1] = (a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1]) / det
        out[0, 2] = (a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]) / det
        out[1, 2] = (a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]) / det
        out[2, 2] = (a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]) / det
        return det

    @numba.njit(cache=True, error_model="numpy")
    def _tet_setup(positions, tet, verts, edges, tinv, lo, hi, dims):
        for a in range(4):
            for c in range(3):
                verts[a, c] = positions[tet[a], c]
        for a in range(3):
            for c in range(3):
                edges[c, a] = verts[a + 1, c] - verts[0, c]
        _inv3(edges, tinv)
        for c in range(3):
            mn = verts[0, c]
            mx = verts[0, c]
            for a in range(1, 4):
                mn = min(mn, verts[a, c])
                mx = max(mx, verts[a, c])
            lo[c] = max(int(np.ceil(mn - INSIDE_TOL)), 0)
            hi[c] = min(int(np.floor(mx + INSIDE_TOL)), dims[c] - 1)

    @numba.njit(cache=True, error_model="numpy")
    def _bary(verts, tinv, x, y, z, lam):
        rx = x - verts[0, 0]
        ry = y - verts[0, 1]
        rz = z - verts[0, 2]
        s = 0.0
        for a in range(3):
            v = tinv[a, 0] * rx + tinv[a, 1] * ry + tinv[a, 2] * rz
            lam[a + 1] = v
            s += v
        lam[0] = 1.0 - s
        for a in range(4):
            if lam[a] < -INSIDE_TOL:
                return False
        return True

    @numba.njit(cache=True, error_model="numpy")
    def _rasterize_numba(positions, tets, alphas, dims, background):
        K = alphas.shape[1]
        prior = np.empty((dims[0], dims[1], dims[2], K))
        for i in range(dims[0]):
            for j in range(dims[1]):
                for k in range(dims[2]):
                    for c in range(K):
                        prior[i, j, k, c] = background[c]
        claimed = np.zeros((dims[0], dims[1], dims[2]), dtype=np.bool_)
        verts = np.empty((4, 3))
        edges = np.empty((3, 3))
        tinv = np.empty((3, 3))
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        lam = np.empty(4)
        for m in range(tets.shape[0]):
            tet = tets[m]
            _tet_setup(positions, tet, verts, edges, tinv, lo, hi, dims)
            for i in range(lo[0], hi[0] + 1):
                for j in range(lo[1], hi[1] + 1):
                    for k in range(lo[2], hi[2] + 1):
                        if claimed[i, j, k]:
                            continue
                        if not _bary(verts, tinv, float(i), float(j), float(k), lam):
                            continue
                        claimed[i, j, k] = True
                        for c in range(K):
                            s = 0.0
                            for a in range(4):
                                s += lam[a] * alphas[tet[a], c]
                            prior[i, j, k, c] = s
        return prior

    @numba.njit(cache=True, error_model="numpy")
    def _data_term_numba(positions, tets, alphas, mask, lik, log_offset, background, want_grad):
        dims = np.array(mask.shape, dtype=np.int64)
        K = alphas.shape[1]
        claimed = np.zeros(mask.shape, dtype=np.bool_)
        grad = np.zeros_like(positions)
        verts = np.empty((4, 3))
        edges = np.empty((3, 3))
        tinv = np.empty((3, 3))
        dl = np.empty((4, 3))
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        lam = np.empty(4)
        g = np.empty(4)
        gp = np.empty(3)
        total = 0.0
        for m in range(tets.shape[0]):
            tet = tets[m]
            _tet_setup(positions, tet, verts, edges, tinv, lo, hi, dims)
            for c in range(3):
                dl[0, c] = -(tinv[0, c] + tinv[1, c] + tinv[2, c])
                for a in range(3):
                    dl[a + 1, c] = tinv[a, c]
            for i in range(lo[0], hi[0] + 1):
                for j in range(lo[1], hi[1] + 1):
                    for k in range(lo[2], hi[2] + 1):
                        if claimed[i, j, k]:
                            continue
                        if not _bary(verts, tinv, float(i), float(j), float(k), lam):
                            continue
                        claimed[i, j, k] = True
                        if not mask[i, j, k]:
                            continue
                        F = 0.0
                        for a in range(4):
                            s = 0.0
                            for c in range(K):
                                s += lik[i, j, k, c] * alphas[tet[a], c]
                            g[a] = s
                            F += lam[a] * s
                        if F <= 0.0:
                            return -np.inf, grad
                        total += np.log(F) + log_offset[i, j, k]
                        if want_grad:
                            for c in range(3):
                                s = 0.0
                                for a in range(4):
                                    s += g[a] * dl[a, c]
                                gp[c] = s / F
                            for a in range(4):
                                for c in range(3):
                                    grad[tet[a], c] -= lam[a] * gp[c]
        for i in range(dims[0]):
            for j in range(dims[1]):
                for k in range(dims[2]):
                    if mask[i, j, k] and not claimed[i, j, k]:
                        F = 0.0
                        for c in range(K):
                            F += lik[i, j, k, c] * background[c]
                        if F <= 0.0:
                            return -np.inf, grad
                        total += np.log(F) + log_offset[i, j, k]
        return total, grad


    @numba.njit(cache=True, error_model="numpy")
    def _energy_numba(x, ref, tets, want_gx, want_gr):
        n = x.shape[0]
        gx = np.zeros((n, 3))
        gr = np.zeros((n, 3))
        Dx = np.empty((3, 3))
        Dr = np.empty((3, 3))
        Ri = np.empty((3, 3))
        J = np.empty((3, 3))
        Ji = np.empty((3, 3))
        G = np.empty((3, 3))
        E = np.empty((3, 3))
        E2 = np.empty((3, 3))
        energy = 0.0
        min_det = np.inf
        for m in range(tets.shape[0]):
            t = tets[m]
            for a in range(3):
                for c in range(3):
                    Dx[c, a] = x[t[a + 1], c] - x[t[0], c]
                    Dr[c, a] = ref[t[a + 1], c] - ref[t[0], c]
            det_r = _inv3(Dr, Ri)
            if not det_r > 0.0:
                return np.inf, -np.inf, gx, gr
            fro = 0.0
            for i in range(3):
                for j in range(3):
                    s = 0.0
                    for q in range(3):
                        s += Dx[i, q] * Ri[q, j]
                    J[i, j] = s
                    fro += s * s
            det = _inv3(J, Ji)
            if det < min_det:
                min_det = det
            if not det > COLLAPSE_DET:
                return np.inf, min_det, gx, gr
            V = det_r / 6.0
            d23 = det ** (-2.0 / 3.0)
            bracket = fro * d23 - 3.0 + det + 1.0 / det - 2.0
            energy += V * bracket
            if not (want_gx or want_gr):
                continue
            coef = -(2.0 / 3.0) * fro * d23 + det - 1.0 / det
            for i in range(3):
                for j in range(3):
                    G[i, j] = V * (2.0 * d23 * J[i, j] + coef * Ji[j, i])
            if want_gx:
                # E = G Ri^T: column a is the gradient wrt vertex a+1
                for i in range(3):
                    for a in range(3):
                        s = 0.0
                        for q in range(3):
                            s += G[i, q] * Ri[a, q]
                        E[i, a] = s
                for c in range(3):
                    s0 = 0.0
                    for a in range(3):
                        gx[t[a + 1], c] += E[c, a]
                        s0 += E[c, a]
                    gx[t[0], c] -= s0
            if want_gr:
                # E2 = -J^T G Ri^T + V * bracket * Ri^T
                for i in range(3):
                    for j in range(3):
                        s = 0.0
                        for q in range(3):
                            s += J[q, i] * G[q, j]
                        E[i, j] = s  # J^T G
                for i in range(3):
                    for a in range(3):
                        s = 0.0
                        for q in range(3):
                            s += E[i, q] * Ri[a, q]
                        E2[i, a] = -s + V * bracket * Ri[a, i]
                for c in range(3):
                    s0 = 0.0
                    for a in range(3):
                        gr[t[a + 1], c] += E2[c, a]
                        s0 += E2[c, a]
                    gr[t[0], c] -= s0
        return energy, min_det, gx, gr


# --- dispatch -----------------------------------------------------------------


def rasterize(positions, tets, alphas, dims, background):
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    tets = np.ascontiguousarray(tets, dtype=np.int64)
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    background = np.ascontiguousarray(background, dtype=np.float64)
    if BACKEND == "numba":
        return _rasterize_numba(positions, tets, alphas, np.asarray(dims, dtype=np.int64), background)
    return _rasterize_numpy(positions, tets, alphas, tuple(dims), background)


def data_term(positions, tets, alphas, mask, lik, log_offset, background, want_grad=True):
    """Sum over masked voxels of log sum_k lik_ik * prior_ik(x), and its x-gradient.

    ``lik`` holds per-voxel likelihoods divided by ``exp(log_offset)`` so that
    the largest class is 1; ``log_offset`` is added back in the log domain.
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    tets = np.ascontiguousarray(tets, dtype=np.int64)
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    lik = np.ascontiguousarray(lik, dtype=np.float64)
    log_offset = np.ascontiguousarray(log_offset, dtype=np.float64)
    background = np.ascontiguousarray(background, dtype=np.float64)
    if BACKEND == "numba":
        total, grad = _data_term_numba(
            positions, tets, alphas, mask, lik, log_offset, background, bool(want_grad)
        )
        return float(total), (grad if want_grad else None)
    return _data_term_numpy(positions, tets, alphas, mask, lik, log_offset, background, want_grad)


def energy(x, ref, tets, want_gx=False, want_gr=False):
    """Deformation energy, min det J, and optional gradients wrt x and ref.

    Energy is +inf as soon as any tetrahedron has det J <= COLLAPSE_DET (or an inverted
    reference); gradients are then meaningless.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    tets = np.ascontiguousarray(tets, dtype=np.int64)
    if BACKEND == "numba":
        e, md, gx, gr = _energy_numba(x, ref, tets, bool(want_gx), bool(want_gr))
        return float(e), float(md), (gx if want_gx else None), (gr if want_gr else None)
    return _energy_numpy(x, ref, tets, want_gx, want_gr)
