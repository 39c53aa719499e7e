"""Appearance model: one multivariate Gaussian per class plus a smooth bias field.

In log-intensity space a voxel of class ``k`` is modeled as
``d_i ~ N(mu_k + C phi_i, Sigma_k)`` where ``phi_i`` stacks the bias basis
functions at voxel ``i`` and ``C`` (N x P) holds one coefficient row per
contrast.  The basis is a separable discrete-cosine family whose first
member is the constant 1.

Functions taking a volume work on its masked voxels only; arrays "on the
grid" are filled with zeros outside the mask.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    DegenerateVoxelError,
    EmptyClassError,
    FormatError,
    NotSPDError,
    ValidationError,
)

COV_FLOOR_FRACTION = 1e-6
EMPTY_CLASS_WEIGHT = 1e-12


@dataclass
class GaussianParams:
    means: np.ndarray  # (K, N)
    covs: np.ndarray  # (K, N, N)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 1:
            covs = covs[:, None, None]
        self.covs = covs
        K, N = self.means.shape
        if self.covs.shape != (K, N, N):
            raise ValidationError(f"covariances must be {K} x {N} x {N}, got {self.covs.shape}")

    @property
    def n_classes(self):
        return self.means.shape[0]

    @property
    def n_contrasts(self):
        return self.means.shape[1]

    def copy(self):
        return GaussianParams(self.means.copy(), self.covs.copy())

    def check_spd(self):
        for k, S in enumerate(self.covs):
            if not np.allclose(S, S.T, rtol=1e-10, atol=1e-14):
                raise NotSPDError(f"covariance of class {k + 1} is not symmetric")
            ev = np.linalg.eigvalsh(S)
            if not ev[0] > 1e-12 * max(np.trace(S) / S.shape[0], 0.0) or not ev[0] > 0:
                raise NotSPDError(f"covariance of class {k + 1} is not positive definite")


@dataclass
class BiasField:
    coeffs: np.ndarray  # (N, P)
    order: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=np.float64))
        self.order = tuple(int(o) for o in self.order)
        if len(self.order) != 3 or min(self.order) < 0:
            raise ValidationError("bias order must be 3 nonnegative integers")
        if self.coeffs.shape[1] != n_basis(self.order):
            raise ValidationError(
                f"bias has {self.coeffs.shape[1]} coefficients per contrast, "
                f"order {self.order} needs {n_basis(self.order)}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ValidationError("bias coefficients must be finite")

    @classmethod
    def zeros(cls, n_contrasts, order):
        return cls(np.zeros((n_contrasts, n_basis(order))), order)

    def copy(self):
        return BiasField(self.coeffs.copy(), self.order, dict(self.meta))


def n_basis(order):
    return int(np.prod([o + 1 for o in order]))


def _axis_basis(n, order):
    i = np.arange(n)
    return np.stack([np.cos(np.pi * u * (2 * i + 1) / (2 * n)) for u in range(order + 1)], axis=1)


def eval_basis(grid, order):
    """Separable DCT-II basis on ``grid``: shape dims x P, function 0 is constant 1.

    Function index is x-fastest: ``p = u + (ox+1) * (v + (oy+1) * w)``.
    """
    order = tuple(int(o) for o in order)
    if len(order) != 3 or min(order) < 0:
        raise ValidationError("basis order must be 3 nonnegative integers")
    bx, by, bz = (_axis_basis(n, o) for n, o in zip(grid.dims, order))
    full = np.einsum("iu,jv,kw->ijkwvu", bx, by, bz)
    return full.reshape(tuple(grid.dims) + (-1,))


def masked_basis(vol, order):
    return eval_basis(vol.grid, order)[vol.mask]


def data_variance_floor(d):
    """Covariance floor: 1e-6 times the mean per-contrast variance of the data."""
    var = np.mean(np.var(d, axis=0))
    return COV_FLOOR_FRACTION * (var if var > 0 else 1.0)


# --- array-level kernels (masked voxels) ----------------------------------------


def loglik_matrix(d, phi, gauss, coeffs):
    """(n, K) multivariate normal log-densities of rows of ``d``."""
    n, N = d.shape
    corrected = d - phi @ coeffs.T
    out = np.empty((n, gauss.n_classes))
    for k in range(gauss.n_classes):
        try:
            L = np.linalg.cholesky(gauss.covs[k])
        except np.linalg.LinAlgError as exc:
            raise NotSPDError(f"covariance of class {k + 1} is not positive definite") from exc
        z = linalg.solve_triangular(L, (corrected - gauss.means[k]).T, lower=True)
        out[:, k] = (
            -0.5 * N * np.log(2 * np.pi) - np.sum(np.log(np.diag(L))) - 0.5 * np.sum(z * z, axis=0)
        )
    return out


def posterior_from_logs(loglik, prior, voxel_index=None):
    """Normalized responsibilities from log-likelihoods and prior probabilities.

    Returns ``(resp, log_evidence)`` with ``log_evidence[i] = log sum_k N_ik p_ik``.
    """
    with np.errstate(divide="ignore"):
        logp = loglik + np.log(prior)
    top = np.max(logp, axis=1)
    bad = ~np.isfinite(top)
    if np.any(bad):
        where = np.flatnonzero(bad)
        if voxel_index is not None:
            where = [tuple(int(c) for c in voxel_index[w]) for w in where]
        raise DegenerateVoxelError(
            f"{len(where)} voxel(s) with zero posterior mass, first: {where[0]}", where
        )
    e = np.exp(logp - top[:, None])
    s = e.sum(axis=1)
    return e / s[:, None], top + np.log(s)


def gaussians_from_stats(d_corr, resp, floor, previous=None):
    """Weighted ML means and covariances (plus ``floor * I``).

    Classes whose total weight is below EMPTY_CLASS_WEIGHT raise
    EmptyClassError unless ``previous`` is given, in which case they keep the
    previous parameters.
    """
    n, N = d_corr.shape
    K = resp.shape[1]
    means = np.empty((K, N))
    covs = np.empty((K, N, N))
    nk = resp.sum(axis=0)
    for k in range(K):
        if nk[k] <= EMPTY_CLASS_WEIGHT:
            if previous is None:
                raise EmptyClassError(k + 1)
            means[k] = previous.means[k]
            covs[k] = previous.covs[k]
            continue
        w = resp[:, k]
        mu = w @ d_corr / nk[k]
        r = d_corr - mu
        covs[k] = (r.T * w) @ r / nk[k] + floor * np.eye(N)
        means[k] = mu
    return GaussianParams(means, covs)


def solve_bias(d, phi, resp, gauss):
    """Exact maximizer over C of the expected complete-data log-likelihood.

    Assembles the coupled normal equations with per-voxel weight matrices
    ``W_i = sum_k r_ik Sigma_k^-1`` and solves them by Cholesky.  Returns
    ``(coeffs, meta)``.
    """
    n, N = d.shape
    P = phi.shape[1]
    prec = np.linalg.inv(gauss.covs)
    W = np.einsum("ik,kab->iab", resp, prec)  # (n, N, N)
    # b_i = sum_k r_ik Lambda_k (d_i - mu_k)
    b = np.einsum("ik,kab,ikb->ia", resp, prec, d[:, None, :] - gauss.means[None, :, :])
    A = np.empty((N * P, N * P))
    for a in range(N):
        for c in range(a, N):
            block = phi.T @ (W[:, a, c][:, None] * phi)
            A[a * P:(a + 1) * P, c * P:(c + 1) * P] = block
            A[c * P:(c + 1) * P, a * P:(a + 1) * P] = block.T
    rhs = (phi.T @ b).T.reshape(-1)  # index a * P + p
    meta = {}
    try:
        cf = linalg.cho_factor(A, lower=True, check_finite=True)
        x = linalg.cho_solve(cf, rhs)
    except linalg.LinAlgError:
        ridge = 1e-10 * max(np.trace(A) / A.shape[0], 1e-300)
        meta["regularized"] = ridge
        cf = linalg.cho_factor(A + ridge * np.eye(A.shape[0]), lower=True)
        x = linalg.cho_solve(cf, rhs)
    # iterative refinement towards the 1e-12 relative residual target
    scale = max(np.linalg.norm(rhs), 1e-300)
    for _ in range(3):
        res = rhs - A @ x
        if np.linalg.norm(res) <= 1e-12 * scale:
            break
        x = x + linalg.cho_solve(cf, res)
    meta["relative_residual"] = float(np.linalg.norm(rhs - A @ x) / scale)
    return x.reshape(N, P), meta


# --- volume-level API ---------------------------------------------------------


def _require_log(vol):
    if not vol.log_transformed:
        raise ValidationError("appearance model expects a log-transformed volume")


def voxel_log_likelihoods(vol, gauss, bias):
    """log N(d_i | mu_k + C phi_i, Sigma_k) on the grid (dims x K)."""
    _require_log(vol)
    gauss.check_spd()
    d = vol.masked_data()
    phi = masked_basis(vol, bias.order)
    out = np.zeros(tuple(vol.grid.dims) + (gauss.n_classes,))
    out[vol.mask] = loglik_matrix(d, phi, gauss, bias.coeffs)
    return out


def responsibilities(vol, gauss, bias, prior):
    """Per-voxel class posteriors (dims x K), zero rows outside the mask."""
    prior = np.asarray(prior, dtype=np.float64)
    ll = voxel_log_likelihoods(vol, gauss, bias)[vol.mask]
    resp, _ = posterior_from_logs(ll, prior[vol.mask], np.argwhere(vol.mask))
    out = np.zeros(tuple(vol.grid.dims) + (gauss.n_classes,))
    out[vol.mask] = resp
    return out


def update_gaussians_ml(vol, resp, bias):
    """Weighted maximum-likelihood Gaussians given responsibilities (dims x K)."""
    _require_log(vol)
    d = vol.masked_data()
    phi = masked_basis(vol, bias.order)
    r = np.asarray(resp)[vol.mask]
    return gaussians_from_stats(d - phi @ bias.coeffs.T, r, data_variance_floor(d))


def update_bias_field(vol, resp, gauss, basis=None, order=None):
    """Bias field maximizing the expected log-likelihood for fixed Gaussians.

    ``basis`` is the dims x P array from ``eval_basis``; its ``order`` must be
    passed alongside (or is recovered when P matches a cubic order).
    """
    _require_log(vol)
    if basis is None:
        if order is None:
            raise ValidationError("need a basis or an order")
        basis = eval_basis(vol.grid, order)
    if order is None:
        o = round(basis.shape[-1] ** (1.0 / 3.0)) - 1
        if n_basis((o, o, o)) != basis.shape[-1]:
            raise ValidationError("cannot infer basis order; pass order=")
        order = (o, o, o)
    d = vol.masked_data()
    phi = basis[vol.mask]
    r = np.asarray(resp)[vol.mask]
    coeffs, meta = solve_bias(d, phi, r, gauss)
    return BiasField(coeffs, order, meta)


def expected_objective(vol, gauss, bias, prior):
    """sum_i log sum_k N(d_i | ...) p_ik -- the data part of the log posterior."""
    ll = voxel_log_likelihoods(vol, gauss, bias)[vol.mask]
    _, ev = posterior_from_logs(ll, np.asarray(prior)[vol.mask])
    return float(np.sum(ev))


# --- PARAMS files -------------------------------------------------------------


def write_params(path, gauss, bias=None, extra=()):
    """Write ``PARAMS 1``.  ``extra`` is a sequence of (key, values) lines."""
    K, N = gauss.means.shape
    lines = ["PARAMS 1", f"CLASSES {K} {N}"]
    for k in range(K):
        lines.append(f"MU {k + 1} " + " ".join(repr(float(v)) for v in gauss.means[k]))
        lines.append(f"SIGMA {k + 1} " + " ".join(repr(float(v)) for v in gauss.covs[k].ravel()))
    if bias is not None:
        lines.append("ORDER %d %d %d" % bias.order)
        P = bias.coeffs.shape[1]
        lines.append(
            f"BIAS {bias.coeffs.shape[0]} {P} " + " ".join(repr(float(v)) for v in bias.coeffs.ravel())
        )
    for key, values in extra:
        if np.isscalar(values) or isinstance(values, str):
            values = [values]
        lines.append(f"{key} " + " ".join(v if isinstance(v, str) else repr(v) for v in values))
    lines.append("END")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_params(path):
    """Returns ``(gauss, bias_or_None, extra)`` where extra maps key -> list of token lists."""
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or lines[0] != ["PARAMS", "1"]:
        raise FormatError("missing PARAMS 1 header", field="PARAMS")
    mus, sigmas, extra = {}, {}, {}
    order = bias = None
    K = N = None
    try:
        for tok in lines[1:]:
            key = tok[0]
            if key == "END":
                break
            if key == "CLASSES":
                K, N = int(tok[1]), int(tok[2])
            elif key == "MU":
                mus[int(tok[1])] = [float(v) for v in tok[2:]]
            elif key == "SIGMA":
                sigmas[int(tok[1])] = [float(v) for v in tok[2:]]
            elif key == "ORDER":
                order = tuple(int(v) for v in tok[1:4])
            elif key == "BIAS":
                n, p = int(tok[1]), int(tok[2])
                vals = [float(v) for v in tok[3:]]
                if len(vals) != n * p:
                    raise FormatError("BIAS value count mismatch", field="BIAS")
                bias = np.array(vals).reshape(n, p)
            else:
                extra.setdefault(key, []).append(tok[1:])
        else:
            raise FormatError("missing END", field="END")
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed PARAMS line: {exc}") from exc
    if K is None:
        K = len(mus)
        N = len(next(iter(mus.values()))) if mus else 0
    if sorted(mus) != list(range(1, K + 1)) or sorted(sigmas) != list(range(1, K + 1)):
        raise FormatError("MU/SIGMA entries must cover classes 1..K", field="MU")
    means = np.array([mus[k] for k in range(1, K + 1)])
    covs = np.array([sigmas[k] for k in range(1, K + 1)])
    if means.shape != (K, N) or covs.shape != (K, N * N):
        raise FormatError("MU/SIGMA sizes do not match CLASSES", field="SIGMA")
    gauss = GaussianParams(means, covs.reshape(K, N, N))
    bf = None
    if bias is not None:
        if order is None:
            raise FormatError("BIAS without ORDER", field="ORDER")
        bf = BiasField(bias, order)
    return gauss, bf, extra
