"""Independent reference implementations used as test oracles.

Each oracle is written from the defining formula with plain loops or a
different library (scipy, sklearn, statistics) so that it shares no code
path with the package under test.
"""

import math
from statistics import NormalDist, mean, variance

import numpy as np
from scipy import stats


# --- mesh ------------------------------------------------------------------


def tet_penalty(Dx, Dr):
    """U for one tetrahedron from its edge matrices (columns are edges)."""
    V = np.linalg.det(Dr) / 6.0
    J = Dx @ np.linalg.inv(Dr)
    det = np.linalg.det(J)
    if det <= 0:
        return math.inf
    fro2 = float(np.sum(J * J))
    return V * (fro2 * det ** (-2.0 / 3.0) - 3.0 + det + 1.0 / det - 2.0)


def edges(pos, tet):
    v = [np.asarray(pos[i], dtype=float) for i in tet]
    return np.column_stack([v[1] - v[0], v[2] - v[0], v[3] - v[0]])


def tet_dets(x, ref, tets):
    return np.array([np.linalg.det(edges(x, t)) / np.linalg.det(edges(ref, t)) for t in tets])


def energy(x, ref, tets):
    total = 0.0
    for tet in tets:
        total += tet_penalty(edges(x, tet), edges(ref, tet))
    return total


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def barycentric(pos, tet, p):
    A = np.vstack([np.asarray([pos[i] for i in tet], dtype=float).T, np.ones(4)])
    return np.linalg.solve(A, np.append(np.asarray(p, dtype=float), 1.0))


def rasterize(x, tets, alphas, dims, background, tol=1e-9):
    """Voxel-by-voxel barycentric prior, first containing tetrahedron wins."""
    K = alphas.shape[1]
    out = np.empty(tuple(dims) + (K,))
    for idx in np.ndindex(*dims):
        out[idx] = background
        for tet in tets:
            verts = np.asarray([x[i] for i in tet])
            if np.any(np.asarray(idx) < verts.min(axis=0) - 1e-6) or np.any(
                np.asarray(idx) > verts.max(axis=0) + 1e-6
            ):
                continue
            lam = barycentric(x, tet, idx)
            if np.all(lam >= -tol):
                out[idx] = lam @ alphas[list(tet)]
                break
    return out


# --- appearance ----------------------------------------------------------------


def dct_axis(n, u):
    return np.array([math.cos(math.pi * u * (2 * i + 1) / (2 * n)) for i in range(n)])


def gaussian_logpdf(d, mean_, cov):
    return stats.multivariate_normal(mean=np.atleast_1d(mean_), cov=np.atleast_2d(cov)).logpdf(d)


def cross_objective(d, phi, prior, means, covs, coeffs, e, kappa):
    """sum_i log sum_k N(d_i | mu_k + C phi_i, S_k) p_ik - kappa * e, by direct summation."""
    total = 0.0
    for i in range(d.shape[0]):
        shift = coeffs @ phi[i]
        s = 0.0
        for k in range(means.shape[0]):
            if prior[i, k] > 0:
                s += math.exp(gaussian_logpdf(d[i], means[k] + shift, covs[k])) * prior[i, k]
        total += math.log(s)
    return total - kappa * e


# --- longitudinal ------------------------------------------------------------------


def theta0(means, covs, p0):
    """The printed prototype updates, evaluated term by term."""
    T, N = means.shape
    P = sum(np.linalg.inv(covs[t]) for t in range(T))
    r = sum(np.linalg.inv(covs[t]) @ means[t] for t in range(T))
    mu0 = np.linalg.inv(P) @ r
    prec0 = (P / T) * (p0 / (p0 - N - 2))
    return mu0, np.linalg.inv(prec0)


def niw_map_scalar(obs, weights, mu0, s0, p0):
    n = sum(weights)
    s = sum(w * o for w, o in zip(weights, obs))
    mu = (s + p0 * mu0) / (n + p0)
    scatter = sum(w * (o - mu) ** 2 for w, o in zip(weights, obs))
    var = (scatter + p0 * (mu - mu0) ** 2 + p0 * s0) / (n + p0)
    return mu, var


# --- metrics --------------------------------------------------------------------------


def ols_apc(times, vols):
    slope, intercept = np.polyfit(np.asarray(times, float) - times[0], np.asarray(vols, float), 1)
    return 100.0 * slope / intercept


def cohens_d(a, b):
    na, nb = len(a), len(b)
    sp = math.sqrt(((na - 1) * variance(a) + (nb - 1) * variance(b)) / (na + nb - 2))
    return (mean(a) - mean(b)) / sp


def sample_size(d, power=0.8, alpha=0.05):
    za = stats.norm.ppf(1 - alpha / 2)
    zb = stats.norm.ppf(power)
    return math.ceil(2 * (za + zb) ** 2 / d ** 2)


def normal_quantile(p):
    return NormalDist().inv_cdf(p)
