"""Cross-sectional segmentation: fit mesh and appearance by coordinate ascent, then label.

The fitted quantity is the log posterior (up to a constant)::

    sum_i log sum_k N(d_i | mu_k + C phi_i, Sigma_k) p(l_i = k | x)  -  kappa * E(x, ref)

with ``E`` the atlas deformation energy.  Each outer sweep runs one
appearance update (E-step, Gaussian update, bias update) and one mesh
optimization; every block update is an ascent step.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from . import _kernels, lbfgs
from .applik import (
    BiasField,
    GaussianParams,
    data_variance_floor,
    eval_basis,
    gaussians_from_stats,
    loglik_matrix,
    posterior_from_logs,
    solve_bias,
)
from .atlas import deformation_energy
from .errors import InfiniteEnergyError, NonFiniteDataError, ValidationError
from .volio import LabelVolume

logger = logging.getLogger(__name__)

MIN_DET_J = 1e-9


@dataclass
class FitConfig:
    max_outer_sweeps: int = 30
    em_tolerance: float = 1e-6
    lbfgs_memory: int = 10
    lbfgs_max_iters: int = 100
    lbfgs_gtol: float = 1e-6
    lbfgs_ftol: float = 1e-9
    max_node_step: float = 1.0
    bias_order: tuple = (2, 2, 2)
    fix_boundary: bool = True
    seed: int = 0

    def __post_init__(self):
        self.bias_order = tuple(int(o) for o in self.bias_order)
        if self.max_outer_sweeps < 1 or self.lbfgs_max_iters < 0 or self.lbfgs_memory < 1:
            raise ValidationError("iteration bounds must be positive")
        if not (self.em_tolerance > 0 and self.lbfgs_gtol > 0 and self.max_node_step > 0):
            raise ValidationError("tolerances must be positive")


@dataclass
class CrossFitResult:
    x_hat: np.ndarray
    gauss: GaussianParams
    bias: BiasField
    trace: list
    converged: bool
    warnings: list = field(default_factory=list)

    @property
    def theta_hat(self):
        return self.gauss, self.bias


class Workspace:
    """Masked data, basis and helpers for one log-transformed volume."""

    def __init__(self, vol, bias_order):
        if not vol.log_transformed:
            raise ValidationError("volume must be log-transformed before fitting")
        bad = vol.nonfinite_voxels()
        if bad:
            raise NonFiniteDataError(
                f"{len(bad)} masked voxel(s) hold non-finite values, first at {bad[0]}", bad
            )
        if not np.any(vol.mask):
            raise ValidationError("mask is empty")
        self.vol = vol
        self.mask = np.ascontiguousarray(vol.mask)
        self.index = np.argwhere(vol.mask)
        self.d = vol.masked_data()
        self.order = tuple(bias_order)
        self.phi = eval_basis(vol.grid, self.order)[vol.mask]
        self.floor = data_variance_floor(self.d)

    @property
    def n_contrasts(self):
        return self.d.shape[1]

    def loglik(self, gauss, bias):
        return loglik_matrix(self.d, self.phi, gauss, bias.coeffs)

    def prior_rows(self, mesh, x):
        prior = _kernels.rasterize(x, mesh.tetrahedra, mesh.node_alphas, self.vol.grid.dims,
                                   mesh.background)
        return prior[self.mask]

    def evidence(self, mesh, x, gauss, bias):
        """Per-voxel log sum_k N p, plus responsibilities."""
        resp, ev = posterior_from_logs(self.loglik(gauss, bias), self.prior_rows(mesh, x), self.index)
        return resp, ev

    def lik_grids(self, ll):
        top = ll.max(axis=1)
        dims = self.vol.grid.dims
        lik = np.zeros(tuple(dims) + (ll.shape[1],))
        off = np.zeros(dims)
        lik[self.mask] = np.exp(ll - top[:, None])
        off[self.mask] = top
        return lik, off


def _check_inputs(vol, mesh):
    if mesh.reference_positions.shape[1] != 3:
        raise ValidationError("atlas positions must be 3-D")


# --- objective ----------------------------------------------------------------


def data_term(ws, mesh, x, gauss, bias):
    ll = ws.loglik(gauss, bias)
    lik, off = ws.lik_grids(ll)
    total, _ = _kernels.data_term(x, mesh.tetrahedra, mesh.node_alphas, ws.mask, lik, off,
                                  mesh.background, want_grad=False)
    return total


def objective(vol, atlas, x, gauss, bias, kappa, ref=None, ws=None):
    """Log posterior of (x, theta) up to a constant.

    ``ref`` defaults to the atlas reference positions.
    """
    ref = atlas.reference_positions if ref is None else ref
    energy = deformation_energy(x, ref, atlas)
    if not np.isfinite(energy):
        raise InfiniteEnergyError("mesh has an inverted tetrahedron")
    if ws is None:
        ws = Workspace(vol, bias.order)
    return data_term(ws, atlas, x, gauss, bias) - kappa * energy


# --- block updates ------------------------------------------------------------


def appearance_sweep(ws, mesh, x, gauss, bias, gauss_update=None):
    """One E-step followed by the Gaussian update and the bias update.

    ``gauss_update(d_corr, resp, previous)`` replaces the flat-prior ML update
    (the longitudinal engine passes its conjugate-prior update here).
    """
    resp, _ = ws.evidence(mesh, x, gauss, bias)
    d_corr = ws.d - ws.phi @ bias.coeffs.T
    if gauss_update is None:
        new_gauss = gaussians_from_stats(d_corr, resp, ws.floor)
    else:
        new_gauss = gauss_update(d_corr, resp, gauss)
    coeffs, meta = solve_bias(ws.d, ws.phi, resp, new_gauss)
    return new_gauss, BiasField(coeffs, bias.order, meta)


def optimize_mesh_ws(ws, mesh, x_init, gauss, bias, kappa, ref, cfg):
    """Maximize data term - kappa * E(x, ref) over x; returns (x, info dict)."""
    free = mesh.boundary_free_mask() if cfg.fix_boundary else np.ones((mesh.n_nodes, 3), bool)
    ll = ws.loglik(gauss, bias)
    lik, off = ws.lik_grids(ll)
    x_base = np.array(x_init, dtype=np.float64)
    tets, alphas, bg = mesh.tetrahedra, mesh.node_alphas, mesh.background

    def unpack(z):
        x = x_base.copy()
        x[free] = z
        return x

    def fun(z):
        x = unpack(z)
        energy, min_det, g_e, _ = _kernels.energy(x, ref, tets, True)
        if not min_det > MIN_DET_J:
            return np.inf, None
        total, g_d = _kernels.data_term(x, tets, alphas, ws.mask, lik, off, bg, want_grad=True)
        if not np.isfinite(total):
            return np.inf, None
        f = -(total - kappa * energy)
        g = -(g_d - kappa * g_e)
        return f, g[free]

    f0, _ = fun(x_base[free])
    if not np.isfinite(f0):
        raise InfiniteEnergyError("initial mesh is infeasible")
    res = lbfgs.minimize(
        fun,
        x_base[free],
        memory=cfg.lbfgs_memory,
        max_iters=cfg.lbfgs_max_iters,
        gtol=cfg.lbfgs_gtol,
        ftol=cfg.lbfgs_ftol,
        max_step_norm=cfg.max_node_step,
    )
    info = {
        "iterations": res.n_iter,
        "evaluations": res.n_eval,
        "line_search_failed": res.line_search_failed,
        "objective": -res.f,
    }
    if res.line_search_failed and res.n_iter <= 1:
        logger.warning("mesh line search failed immediately; keeping initial positions")
    return unpack(res.x), info


def optimize_mesh(vol, atlas, x_init, gauss, bias, kappa, ref=None, cfg=None):
    """Mesh update for fixed appearance.  Returns ``(x, info)``."""
    cfg = cfg or FitConfig(bias_order=bias.order)
    ref = atlas.reference_positions if ref is None else ref
    ws = Workspace(vol, bias.order)
    return optimize_mesh_ws(ws, atlas, x_init, gauss, bias, kappa, ref, cfg)


def initialize_appearance_ws(ws, prior_rows):
    """Prior-weighted moments for the Gaussians; zero bias."""
    gauss = gaussians_from_stats(ws.d, prior_rows, ws.floor)
    return gauss, BiasField.zeros(ws.n_contrasts, ws.order)


def initialize_appearance(vol, prior_at_ref, bias_order=(2, 2, 2)):
    ws = Workspace(vol, bias_order)
    return initialize_appearance_ws(ws, np.asarray(prior_at_ref)[vol.mask])


# --- fitting loop -------------------------------------------------------------


def run_sweeps(ws, mesh, x, gauss, bias, kappa, ref, cfg, n_sweeps, gauss_update=None,
               extra_objective=None, stop_early=True, trace=None):
    """Alternate appearance sweeps and mesh optimizations.

    ``extra_objective(gauss)`` adds parameter-prior terms (conjugate prior)
    to the traced objective.  Returns (x, gauss, bias, trace, converged, warnings).
    """
    trace = [] if trace is None else trace
    warnings = []
    extra = extra_objective or (lambda g: 0.0)

    def total(x_, g_, b_):
        return data_term(ws, mesh, x_, g_, b_) - kappa * deformation_energy(x_, ref, mesh) + extra(g_)

    current = total(x, gauss, bias)
    trace.append(current)
    converged = False
    for sweep in range(n_sweeps):
        start = current
        gauss, bias = appearance_sweep(ws, mesh, x, gauss, bias, gauss_update)
        trace.append(total(x, gauss, bias))
        x, info = optimize_mesh_ws(ws, mesh, x, gauss, bias, kappa, ref, cfg)
        if info["line_search_failed"]:
            warnings.append(f"sweep {sweep}: mesh line search stopped early")
        current = total(x, gauss, bias)
        trace.append(current)
        if stop_early and abs(current - start) <= cfg.em_tolerance * abs(current):
            converged = True
            break
    return x, gauss, bias, trace, converged, warnings


def fit_cross(vol, atlas, cfg=None, kappa=1.0, initial=None, gauss_update=None, ws=None):
    """Fit mesh positions and appearance to one volume (cross-sectional model).

    ``initial`` optionally replaces the prior-weighted starting appearance
    with a ``(gauss, bias)`` pair; ``gauss_update`` is passed to
    ``appearance_sweep``.
    """
    cfg = cfg or FitConfig()
    _check_inputs(vol, atlas)
    ws = ws or Workspace(vol, cfg.bias_order)
    ref = atlas.reference_positions
    x = ref.copy()
    if initial is None:
        gauss, bias = initialize_appearance_ws(ws, ws.prior_rows(atlas, x))
    else:
        gauss, bias = initial[0].copy(), initial[1].copy()
    x, gauss, bias, trace, converged, warnings = run_sweeps(
        ws, atlas, x, gauss, bias, kappa, ref, cfg, cfg.max_outer_sweeps, gauss_update
    )
    return CrossFitResult(x, gauss, bias, trace, converged, warnings)


def segment(vol, atlas, x_hat, gauss, bias):
    """MAP label per masked voxel (labels 1..K), with posteriors."""
    ws = Workspace(vol, bias.order)
    return segment_ws(ws, atlas, x_hat, gauss, bias)


def segment_ws(ws, mesh, x, gauss, bias):
    resp, _ = ws.evidence(mesh, x, gauss, bias)
    dims = ws.vol.grid.dims
    labels = np.zeros(dims, dtype=np.int32)
    post = np.zeros(tuple(dims) + (resp.shape[1],))
    labels[ws.mask] = np.argmax(resp, axis=1) + 1
    post[ws.mask] = resp
    return LabelVolume(ws.vol.grid, labels, post)
