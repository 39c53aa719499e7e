"""Longitudinal segmentation with subject-specific latent variables.

Every time point t has its own mesh ``x_t``, Gaussians ``theta_t`` and bias
field.  The time points are tied together through

* a latent subject mesh ``x0``: ``p(x_t | x0) ~ exp(-kappa E(x_t, x0))`` and
  ``p(x0) ~ exp(-kappa0 E(x0, x_ref))``;
* latent per-class prototypes ``(mu0_k, Sigma0_k)`` entering a
  normal-inverse-Wishart prior
  ``N(mu_tk | mu0_k, Sigma_tk / P0_k) IW(Sigma_tk | P0_k Sigma0_k, P0_k - N - 2)``.

The fit is coordinate ascent on the joint log posterior: per-time-point
sweeps (E-step, NIW-MAP Gaussians, bias, mesh), then the closed-form
prototype update, then an L-BFGS update of ``x0``.

NIW-MAP M-step.  With responsibilities ``w_i``, ``n = sum w_i``,
``s = sum w_i r_i`` (``r_i`` bias-corrected data) the terms of the log
posterior that involve ``(mu, Sigma)`` are::

    -(n + 1 + nu + N + 1)/2 log|Sigma| - 1/2 tr(Sigma^-1 [S(mu) + P0 (mu - mu0)(mu - mu0)^T + P0 Sigma0])

with ``S(mu) = sum w_i (r_i - mu)(r_i - mu)^T`` and ``nu = P0 - N - 2``, so
the log-determinant weight is ``(n + P0)/2``.  Setting derivatives to zero
gives ``mu = (s + P0 mu0)/(n + P0)`` and
``Sigma = (S(mu) + P0 (mu - mu0)(mu - mu0)^T + P0 Sigma0)/(n + P0)``; both
are exact block maximizers, which preserves the ascent property.
"""

from dataclasses import dataclass, field
import logging
import os

import numpy as np

from . import _kernels, lbfgs
from .applik import (
    EMPTY_CLASS_WEIGHT,
    BiasField,
    GaussianParams,
    gaussians_from_stats,
    write_params,
)
from .atlas import deformation_energy, write_positions
from .errors import (
    EmptyClassError,
    GridMismatchError,
    InfiniteEnergyError,
    SingularSystemError,
    StateError,
    ValidationError,
)
from .volio import LabelVolume, MultiContrastVolume, write_labels, write_mask
from .xsect import (
    MIN_DET_J,
    FitConfig,
    Workspace,
    data_term,
    fit_cross,
    initialize_appearance_ws,
    run_sweeps,
    segment_ws,
)

logger = logging.getLogger(__name__)


def _symsum(values):
    """Sum over axis 0 that does not depend on the order of the entries."""
    return np.sort(np.asarray(values, dtype=np.float64), axis=0).sum(axis=0)


# --- configuration and state ----------------------------------------------------


@dataclass
class NIWHyper:
    """Per-class NIW strengths ``p0`` and the template class counts ``n_k``."""

    p0: np.ndarray
    n_k: np.ndarray = None

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64).ravel()
        if self.n_k is None:
            self.n_k = np.zeros_like(self.p0)
        self.n_k = np.asarray(self.n_k, dtype=np.float64).ravel()
        if np.any(self.p0 < 0) or not np.all(np.isfinite(self.p0)):
            raise ValidationError("P0 must be finite and nonnegative")

    @property
    def coupled(self):
        return self.p0 > 0

    def check(self, n_contrasts):
        bad = [k + 1 for k in np.flatnonzero(self.coupled) if self.p0[k] <= n_contrasts + 2]
        if bad:
            raise ValidationError(
                f"P0 must be 0 or exceed N + 2 = {n_contrasts + 2} (classes {bad})"
            )

    @classmethod
    def from_counts(cls, n_k, ratio, n_contrasts, warnings=None):
        """``P0_k = ratio * n_k``, switched off where it would not exceed N + 2."""
        n_k = np.asarray(n_k, dtype=np.float64)
        p0 = ratio * n_k
        low = (p0 > 0) & (p0 <= n_contrasts + 2)
        if np.any(low):
            msg = (f"P0 = {ratio} * N_k does not exceed N + 2 for classes "
                   f"{[int(k) + 1 for k in np.flatnonzero(low)]}; coupling switched off")
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            p0 = np.where(low, 0.0, p0)
        return cls(p0, n_k)


@dataclass
class SubjectLatents:
    x0: np.ndarray
    mu0: np.ndarray  # (K, N)
    sigma0: np.ndarray  # (K, N, N)

    def copy(self):
        return SubjectLatents(self.x0.copy(), self.mu0.copy(), self.sigma0.copy())


@dataclass
class LesionConfig:
    """Extra unregularized lesion class.

    ``prior`` is ``"host"`` (lesion prior = ``fraction`` of the host class's
    atlas probability) or a number in (0, 1) used as a uniform lesion prior.
    ``offset`` shifts the host mean to initialize the lesion Gaussian; the
    default is three host standard deviations in every contrast.
    """

    enabled: bool = True
    prior: object = "host"
    fraction: float = 0.02
    host_label: int = 3
    threshold: float = 0.5
    offset: tuple = None

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("lesion threshold must lie in (0, 1)")
        if self.prior != "host":
            s = float(self.prior)
            if not 0.0 < s < 1.0:
                raise ValidationError("uniform lesion prior must lie in (0, 1)")
        elif not 0.0 < self.fraction < 1.0:
            raise ValidationError("lesion fraction must lie in (0, 1)")


@dataclass
class LongConfig:
    kappa: float = 1.0
    kappa0_ratio: float = 20.0
    p0_ratio: float = 0.5
    p0: tuple = None  # explicit per-class strengths; overrides p0_ratio
    outer_iterations: int = 5
    inner_sweeps: int = 3
    cross: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if not (self.kappa > 0 and self.kappa0_ratio > 0):
            raise ValidationError("kappa and kappa0 must be positive")
        if self.p0_ratio < 0:
            raise ValidationError("p0_ratio must be nonnegative")
        if self.outer_iterations < 0 or self.inner_sweeps < 1:
            raise ValidationError("iteration counts must be positive")

    @property
    def kappa0(self):
        return self.kappa0_ratio * self.kappa

    @classmethod
    def degenerate(cls, **kw):
        """P0 = 0 for every class and kappa0 = 1e6 kappa: the cross-sectional special case."""
        kw.setdefault("kappa0_ratio", 1e6)
        kw.setdefault("p0_ratio", 0.0)
        return cls(**kw)


@dataclass
class TimepointState:
    x: np.ndarray
    gauss: GaussianParams
    bias: BiasField
    seg: LabelVolume = None
    lesions: np.ndarray = None

    def copy(self):
        return TimepointState(self.x.copy(), self.gauss.copy(), self.bias.copy())


@dataclass
class LongFitResult:
    latents: SubjectLatents
    hyper: NIWHyper
    timepoints: list
    trace: list  # (step name, joint objective)
    template_fit: object = None
    kappa: float = 1.0
    kappa0: float = 20.0
    lesion: LesionConfig = None
    warnings: list = field(default_factory=list)
    inner_traces: list = field(default_factory=list)  # (iteration, t, sweep objectives)

    @property
    def segmentations(self):
        return [tp.seg for tp in self.timepoints]

    @property
    def objective_trace(self):
        return [v for _, v in self.trace]


# --- template ---------------------------------------------------------------------


def _check_series(volumes):
    if len(volumes) == 0:
        raise ValidationError("need at least one time point")
    first = volumes[0]
    for v in volumes[1:]:
        if not first.grid.same_shape(v.grid) or v.n_contrasts != first.n_contrasts:
            raise GridMismatchError("all time points must share one grid and contrast count")


def build_median_template(volumes):
    """Voxelwise median across time points (mean of the middle pair for even T).

    The mask is the intersection of the input masks.
    """
    volumes = list(volumes)
    _check_series(volumes)
    flags = {v.log_transformed for v in volumes}
    if len(flags) != 1:
        raise StateError("cannot mix log-transformed and raw volumes")
    stack = np.stack([v.data for v in volumes], axis=0)
    mask = np.logical_and.reduce([v.mask for v in volumes])
    med = np.median(stack, axis=0)
    return MultiContrastVolume(volumes[0].grid, med, mask, flags.pop())


# --- lesion class -----------------------------------------------------------------


def augment_atlas(mesh, lesion):
    """Add a K+1-th lesion class to the atlas alphas."""
    a = mesh.node_alphas
    bg = mesh.background
    if lesion.prior == "host":
        h = lesion.host_label - 1
        if not 0 <= h < mesh.n_classes:
            raise ValidationError(f"lesion host label {lesion.host_label} outside 1..K")

        def split(rows):
            rows = np.atleast_2d(rows)
            les = lesion.fraction * rows[:, h]
            out = rows.copy()
            out[:, h] -= les
            return np.column_stack([out, les])
    else:
        s = float(lesion.prior)

        def split(rows):
            rows = np.atleast_2d(rows)
            return np.column_stack([rows * (1.0 - s), np.full(rows.shape[0], s)])
    return mesh.with_alphas(split(a), split(bg)[0])


def lesion_initial_gauss(gauss, lesion):
    """Append the lesion Gaussian: host mean plus offset, host covariance."""
    h = lesion.host_label - 1
    N = gauss.n_contrasts
    mu_h, cov_h = gauss.means[h], gauss.covs[h]
    if lesion.offset is None:
        off = 3.0 * np.sqrt(np.diag(cov_h))
    else:
        off = np.asarray(lesion.offset, dtype=np.float64).ravel()
        if off.shape != (N,):
            raise ValidationError(f"lesion offset needs {N} values")
    means = np.vstack([gauss.means, mu_h + off])
    covs = np.concatenate([gauss.covs, cov_h[None]], axis=0)
    return GaussianParams(means, covs)


def segment_lesions(result, lesion_cfg=None):
    """Binary lesion masks (lesion-class posterior above threshold), one per time point."""
    lesion_cfg = lesion_cfg or result.lesion
    if lesion_cfg is None or not lesion_cfg.enabled or result.lesion is None:
        raise StateError("lesion class was not enabled during fitting")
    masks = []
    for tp in result.timepoints:
        if tp.seg is None or tp.seg.posteriors is None:
            raise StateError("time point has no posteriors")
        masks.append(tp.seg.posteriors[..., -1] > lesion_cfg.threshold)
    return masks


# --- closed-form updates ------------------------------------------------------------


def update_theta0(means, covs, p0, n_contrasts=None):
    """Prototype update from per-time-point Gaussians of one class.

    ``means`` is (T, N), ``covs`` (T, N, N).  Returns ``(mu0, sigma0)`` with
    ``mu0 = (sum_t S_t^-1)^-1 sum_t S_t^-1 mu_t`` and
    ``sigma0^-1 = mean_t(S_t^-1) * p0 / (p0 - N - 2)``.
    """
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    T, N = means.shape
    if p0 <= N + 2:
        raise ValidationError(f"P0 must exceed N + 2 = {N + 2}")
    prec = np.linalg.inv(covs)
    prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
    psum = _symsum(prec)
    rhs = _symsum(np.einsum("tab,tb->ta", prec, means))
    try:
        chol = np.linalg.cholesky(psum)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("sum of precisions is not positive definite") from exc
    mu0 = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    prec0 = psum / T * (p0 / (p0 - N - 2))
    sigma0 = np.linalg.inv(prec0)
    return mu0, 0.5 * (sigma0 + sigma0.T)


def update_theta_latents(states, latents, hyper):
    """Apply ``update_theta0`` to every coupled class; uncoupled classes keep their values."""
    out = latents.copy()
    for k in np.flatnonzero(hyper.coupled):
        means = np.stack([s.gauss.means[k] for s in states])
        covs = np.stack([s.gauss.covs[k] for s in states])
        out.mu0[k], out.sigma0[k] = update_theta0(means, covs, hyper.p0[k])
    return out


def niw_map_update(d_corr, resp, mu0, sigma0, p0, floor, previous=None, keep_empty=None):
    """Per-class Gaussian M-step under the NIW prior.

    Classes with ``p0 > 0`` get the NIW-MAP estimate (exactly ``(mu0, sigma0)``
    when their responsibility is zero); classes with ``p0 == 0`` get the
    flat-prior estimate with the covariance floor.  ``keep_empty`` marks
    uncoupled classes allowed to keep ``previous`` when empty.
    """
    d_corr = np.asarray(d_corr, dtype=np.float64)
    resp = np.asarray(resp, dtype=np.float64)
    K = resp.shape[1]
    N = d_corr.shape[1]
    p0 = np.asarray(p0, dtype=np.float64)
    nk = resp.sum(axis=0)
    means = np.empty((K, N))
    covs = np.empty((K, N, N))
    flat = p0 <= 0
    for k in np.flatnonzero(flat):
        if nk[k] <= EMPTY_CLASS_WEIGHT and previous is not None and keep_empty is not None \
                and keep_empty[k]:
            means[k], covs[k] = previous.means[k], previous.covs[k]
            continue
        if nk[k] <= EMPTY_CLASS_WEIGHT:
            raise EmptyClassError(int(k) + 1)
        g = gaussians_from_stats(d_corr, resp[:, k:k + 1], floor)
        means[k], covs[k] = g.means[0], g.covs[0]
    for k in np.flatnonzero(~flat):
        n = nk[k]
        if n == 0.0:
            means[k] = mu0[k]
            covs[k] = sigma0[k]
            continue
        w = resp[:, k]
        s = w @ d_corr
        mu = (s + p0[k] * mu0[k]) / (n + p0[k])
        r = d_corr - mu
        scatter = (r.T * w) @ r
        dm = mu - mu0[k]
        cov = (scatter + p0[k] * np.outer(dm, dm) + p0[k] * sigma0[k]) / (n + p0[k])
        means[k] = mu
        covs[k] = 0.5 * (cov + cov.T)
    return GaussianParams(means, covs)


def niw_log_prior(gauss, mu0, sigma0, p0):
    """Sum over coupled classes of log NIW(mu_k, Sigma_k), dropping terms that depend only on P0 and N."""
    total = 0.0
    N = gauss.n_contrasts
    for k in np.flatnonzero(np.asarray(p0) > 0):
        P = p0[k]
        nu = P - N - 2
        S = gauss.covs[k]
        _, logdet_s = np.linalg.slogdet(S)
        _, logdet_psi = np.linalg.slogdet(P * sigma0[k])
        dm = gauss.means[k] - mu0[k]
        sinv_dm = np.linalg.solve(S, dm)
        tr = np.trace(np.linalg.solve(S, P * sigma0[k]))
        total += (-0.5 * logdet_s - 0.5 * P * dm @ sinv_dm
                  + 0.5 * nu * logdet_psi - 0.5 * (nu + N + 1) * logdet_s - 0.5 * tr)
    return float(total)


# --- x0 ------------------------------------------------------------------------------


def latent_mesh_energy(x0, xs, x_ref, mesh, kappa, kappa0):
    """kappa0 E(x0, x_ref) + kappa sum_t E(x_t, x0)."""
    e0 = deformation_energy(x0, x_ref, mesh)
    et = _symsum([deformation_energy(x, x0, mesh) for x in xs])
    return float(kappa0 * e0 + kappa * et)


def update_x0(xs, x_ref, mesh, kappa, kappa0, cfg=None, x0_init=None):
    """Minimize ``kappa0 E(x0, x_ref) + kappa sum_t E(x_t, x0)`` over x0 by L-BFGS.

    Steps that degenerate a tetrahedron on either side (x0 against x_ref, or
    any x_t against x0) are rejected.  Returns ``(x0, info)``.
    """
    cfg = cfg or FitConfig()
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    x_base = np.array(x_ref if x0_init is None else x0_init, dtype=np.float64)
    free = mesh.boundary_free_mask() if cfg.fix_boundary else np.ones((mesh.n_nodes, 3), bool)
    tets = mesh.tetrahedra

    def unpack(z):
        x0 = x_base.copy()
        x0[free] = z
        return x0

    def fun(z):
        x0 = unpack(z)
        e0, md0, g0, _ = _kernels.energy(x0, x_ref, tets, True, False)
        if not md0 > MIN_DET_J:
            return np.inf, None
        es, gs = [], []
        for x in xs:
            e, md, _, gr = _kernels.energy(x, x0, tets, False, True)
            if not md > MIN_DET_J:
                return np.inf, None
            es.append(e)
            gs.append(gr)
        f = kappa0 * e0 + kappa * _symsum(es)
        g = kappa0 * g0 + kappa * _symsum(gs)
        return float(f), g[free]

    f0, _ = fun(x_base[free])
    if not np.isfinite(f0):
        raise InfiniteEnergyError("initial latent mesh is infeasible")
    res = lbfgs.minimize(
        fun,
        x_base[free],
        memory=cfg.lbfgs_memory,
        max_iters=cfg.lbfgs_max_iters,
        gtol=cfg.lbfgs_gtol,
        ftol=cfg.lbfgs_ftol,
        max_step_norm=cfg.max_node_step,
    )
    info = {"iterations": res.n_iter, "line_search_failed": res.line_search_failed,
            "objective": res.f, "initial": f0}
    if res.line_search_failed and res.n_iter <= 1:
        logger.warning("x0 line search failed immediately; keeping previous x0")
    return unpack(res.x), info


# --- per-time-point fit ------------------------------------------------------------


def _gauss_update(latents, hyper, floor, keep_empty):
    def update(d_corr, resp, previous):
        return niw_map_update(d_corr, resp, latents.mu0, latents.sigma0, hyper.p0, floor,
                              previous=previous, keep_empty=keep_empty)
    return update


def fit_timepoint_niw(vol_t, atlas, latents, hyper, state, cfg=None, kappa=1.0, n_sweeps=3,
                      ws=None, keep_empty=None):
    """Sweeps of the single-time-point problem given the latents.

    The mesh prior is ``kappa E(x_t, x0)`` and the Gaussian M-step is the
    NIW-MAP update.  Returns ``(new_state, inner_trace, warnings)``.
    """
    cfg = cfg or FitConfig()
    ws = ws or Workspace(vol_t, state.bias.order)
    hyper.check(ws.n_contrasts)
    update = _gauss_update(latents, hyper, ws.floor, keep_empty)
    x, gauss, bias, trace, _, warnings = run_sweeps(
        ws, atlas, state.x, state.gauss, state.bias, kappa, latents.x0, cfg, n_sweeps,
        gauss_update=update,
        extra_objective=lambda g: niw_log_prior(g, latents.mu0, latents.sigma0, hyper.p0),
        stop_early=False,
    )
    return TimepointState(x, gauss, bias), trace, warnings


# --- joint objective ------------------------------------------------------------------


class _Joint:
    """Caches per-time-point data terms so the joint objective is cheap to re-trace."""

    def __init__(self, workspaces, mesh, x_ref, kappa, kappa0, hyper):
        self.ws = workspaces
        self.mesh = mesh
        self.x_ref = x_ref
        self.kappa = kappa
        self.kappa0 = kappa0
        self.hyper = hyper
        self.data = [None] * len(workspaces)

    def refresh(self, t, state):
        self.data[t] = data_term(self.ws[t], self.mesh, state.x, state.gauss, state.bias)

    def value(self, states, latents):
        mesh = self.mesh
        e0 = deformation_energy(latents.x0, self.x_ref, mesh)
        parts = []
        for t, s in enumerate(states):
            e = deformation_energy(s.x, latents.x0, mesh)
            prior = niw_log_prior(s.gauss, latents.mu0, latents.sigma0, self.hyper.p0)
            parts.append(self.data[t] - self.kappa * e + prior)
        return float(_symsum(parts) - self.kappa0 * e0)


def joint_objective(volumes, atlas, states, latents, hyper, kappa, kappa0, bias_order=None):
    """Joint log posterior (up to a constant) of all time points and the latents."""
    order = bias_order or states[0].bias.order
    wss = [Workspace(v, order) for v in volumes]
    j = _Joint(wss, atlas, atlas.reference_positions, kappa, kappa0, hyper)
    for t, s in enumerate(states):
        j.refresh(t, s)
    return j.value(states, latents)


# --- pipeline ----------------------------------------------------------------------------


def template_counts(seg):
    K = seg.posteriors.shape[-1] if seg.posteriors is not None else int(seg.labels.max())
    return np.bincount(seg.labels[seg.mask].ravel(), minlength=K + 1)[1:K + 1].astype(np.float64)


def init_longitudinal(template_fit, T, template_seg, cfg=None, n_contrasts=None, lesion=None,
                      warnings=None):
    """Latents and per-time-point states from the template fit.

    ``x_t = x0 = x_hat``; ``theta_t = theta_hat``; ``(mu0, Sigma0)`` from
    ``theta_hat``; ``N_k`` are template label counts and
    ``P0_k = p0_ratio * N_k`` (the lesion class, if any, is never coupled).
    """
    cfg = cfg or LongConfig()
    N = n_contrasts or template_fit.gauss.n_contrasts
    n_k = template_counts(template_seg)
    if cfg.p0 is not None:
        hyper = NIWHyper(np.asarray(cfg.p0, dtype=np.float64), n_k)
        if hyper.p0.shape != n_k.shape:
            raise ValidationError(f"explicit P0 needs {n_k.size} values")
    else:
        hyper = NIWHyper.from_counts(n_k, cfg.p0_ratio, N, warnings)
    if lesion is not None and lesion.enabled:
        hyper.p0[-1] = 0.0
    hyper.check(N)
    g = template_fit.gauss
    latents = SubjectLatents(template_fit.x_hat.copy(), g.means.copy(), g.covs.copy())
    states = [TimepointState(template_fit.x_hat.copy(), g.copy(), template_fit.bias.copy())
              for _ in range(T)]
    return latents, hyper, states


def fit_template(template, atlas, cfg=None, lesion=None):
    """Cross-sectional fit of the template (lesion class added if enabled).

    Returns ``(fit, segmentation, mesh)`` where ``mesh`` is the (possibly
    augmented) atlas used for all later steps.
    """
    cfg = cfg or LongConfig()
    mesh = atlas
    ws = Workspace(template, cfg.cross.bias_order)
    initial = update = None
    if lesion is not None and lesion.enabled:
        g0, b0 = initialize_appearance_ws(ws, ws.prior_rows(atlas, atlas.reference_positions))
        mesh = augment_atlas(atlas, lesion)
        initial = (lesion_initial_gauss(g0, lesion), b0)
        keep = np.zeros(mesh.n_classes, bool)
        keep[-1] = True
        zero = np.zeros(mesh.n_classes)

        def flat_update(d_corr, resp, previous):
            return niw_map_update(d_corr, resp, None, None, zero, ws.floor, previous, keep)
        update = flat_update
    fit = fit_cross(template, mesh, cfg.cross, kappa=cfg.kappa, initial=initial,
                    gauss_update=update, ws=ws)
    seg = segment_ws(ws, mesh, fit.x_hat, fit.gauss, fit.bias)
    return fit, seg, mesh


def fit_longitudinal(volumes, atlas, cfg=None, lesion=None, template_fit=None, progress=None):
    """Full pipeline: median template, template fit, initialization, coordinate
    ascent over time points and latents, and per-time-point segmentation.

    ``template_fit`` may be a precomputed ``fit_template`` result (reused by
    hyperparameter searches).  ``progress(step, value)`` is called after every
    coordinate update.
    """
    cfg = cfg or LongConfig()
    volumes = list(volumes)
    _check_series(volumes)
    for v in volumes:
        if not v.log_transformed:
            raise ValidationError("volumes must be log-transformed before fitting")
    warnings = []
    if lesion is not None and not lesion.enabled:
        lesion = None
    if template_fit is None:
        template = build_median_template(volumes)
        template_fit = fit_template(template, atlas, cfg, lesion)
    tfit, tseg, mesh = template_fit
    T = len(volumes)
    N = volumes[0].n_contrasts
    latents, hyper, states = init_longitudinal(tfit, T, tseg, cfg, N, lesion, warnings)
    keep = None
    if lesion is not None:
        keep = np.zeros(mesh.n_classes, bool)
        keep[-1] = True
    wss = [Workspace(v, cfg.cross.bias_order) for v in volumes]
    x_ref = mesh.reference_positions
    joint = _Joint(wss, mesh, x_ref, cfg.kappa, cfg.kappa0, hyper)
    for t, s in enumerate(states):
        joint.refresh(t, s)
    trace = []
    inner = []

    def record(step):
        val = joint.value(states, latents)
        trace.append((step, val))
        if progress is not None:
            progress(step, val)

    record("init")
    for it in range(cfg.outer_iterations):
        for t in range(T):
            states[t], inner_t, w = fit_timepoint_niw(
                volumes[t], mesh, latents, hyper, states[t], cfg.cross, cfg.kappa,
                cfg.inner_sweeps, ws=wss[t], keep_empty=keep,
            )
            inner.append((it, t, inner_t))
            warnings.extend(f"iteration {it} t={t}: {m}" for m in w)
            joint.refresh(t, states[t])
            record(f"iter{it}:timepoint{t}")
        latents = update_theta_latents(states, latents, hyper)
        record(f"iter{it}:theta0")
        x0, info = update_x0([s.x for s in states], x_ref, mesh, cfg.kappa, cfg.kappa0,
                             cfg.cross, x0_init=latents.x0)
        if info["line_search_failed"] and info["iterations"] <= 1:
            warnings.append(f"iteration {it}: x0 line search failed")
        latents.x0 = x0
        record(f"iter{it}:x0")
    for t in range(T):
        states[t].seg = segment_ws(wss[t], mesh, states[t].x, states[t].gauss, states[t].bias)
    result = LongFitResult(latents, hyper, states, trace, template_fit, cfg.kappa, cfg.kappa0,
                           lesion, warnings, inner)
    if lesion is not None:
        for tp, m in zip(states, segment_lesions(result, lesion)):
            tp.lesions = m
    return result


# --- serialization -----------------------------------------------------------------------


def write_long_result(result, out_dir, names=None):
    """One PARAMS/POS pair, label volume (and lesion mask) per time point plus the latents."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t, tp in enumerate(result.timepoints):
        stem = os.path.join(out_dir, f"t{t}")
        write_params(stem + ".params", tp.gauss, tp.bias,
                     extra=[("KAPPA", result.kappa), ("KAPPA0", result.kappa0)])
        write_positions(tp.x, stem + ".pos")
        if tp.seg is not None:
            write_labels(tp.seg, stem + "_labels.mgv")
        if tp.lesions is not None:
            write_mask(tp.lesions, tp.seg.grid, stem + "_lesions.mgv")
        paths.append(stem)
    lat = result.latents
    extra = [("KAPPA", result.kappa), ("KAPPA0", result.kappa0)]
    extra += [("P0", [k + 1, float(p)]) for k, p in enumerate(result.hyper.p0)]
    extra += [("NK", [k + 1, float(n)]) for k, n in enumerate(result.hyper.n_k)]
    if result.lesion is not None:
        extra.append(("LESION", [len(result.hyper.p0), float(result.lesion.threshold)]))
    write_params(os.path.join(out_dir, "latents.params"), GaussianParams(lat.mu0, lat.sigma0),
                 None, extra=extra)
    write_positions(lat.x0, os.path.join(out_dir, "latents.pos"))
    return paths
