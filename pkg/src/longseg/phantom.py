"""Synthetic longitudinal head phantoms with exact ground truth.

Anatomy is a stack of ellipsoids (or boxes) painted in order onto a
background label.  A structure with annual change ``rate`` (%/yr) covers, at
time ``t``, the ``round(n0 * (1 + rate/100 * t))`` voxels closest to its
center in the primitive's normalized radius; that is the primitive with its
radius rescaled so the voxel count follows the planted trajectory exactly.

Intensities are drawn in log space from per-class Gaussians, optionally
blurred at boundaries (partial volume), shifted by a smooth bias field from
the same DCT family the segmenter uses, and finally exponentiated, so that
``log_transform`` of the output recovers them.

All randomness comes from numpy's Philox counter-based generator seeded via
``SeedSequence([seed, *stream])``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .applik import eval_basis, n_basis
from .atlas import TetrahedralMesh, build_grid_atlas
from .errors import ValidationError
from .volio import LabelVolume, MultiContrastVolume, VoxelGrid, structure_volumes


def make_rng(seed, *stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass
class Structure:
    name: str
    label: int
    center: tuple
    radii: tuple
    rate: float = 0.0
    shape: str = "ellipsoid"


@dataclass
class LesionSpec:
    count: int = 4
    radius_range: tuple = (2.0, 3.5)
    offset: tuple = (0.0, 0.6)
    growth: float = 0.0  # %/yr volume change of every lesion
    host_label: int = 3


@dataclass
class PhantomSpec:
    dims: tuple
    structures: list
    means: np.ndarray  # (K, N) log intensities
    covs: np.ndarray  # (K, N, N)
    names: dict = None  # label -> structure name
    voxel_size: tuple = (1.0, 1.0, 1.0)
    times: tuple = (0.0,)
    bias_order: tuple = (2, 2, 2)
    bias_coeffs: np.ndarray = None  # (N, P) planted at every time point
    bias_jitter: float = 0.0  # std of random non-DC coefficients drawn per time point
    pv_sigma: float = 0.0
    noise_seed: int = 0
    lesions: LesionSpec = None
    subject_id: str = "phantom"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 1:
            covs = covs[:, None, None]
        self.covs = covs
        K, N = self.means.shape
        if self.covs.shape != (K, N, N):
            raise ValidationError("covs must be K x N x N")
        if self.names is None:
            self.names = {k: f"label_{k}" for k in range(1, K + 1)}
            for s in self.structures:
                self.names[s.label] = s.name
        for s in self.structures:
            if not 1 <= s.label <= K:
                raise ValidationError(f"structure {s.name} has label {s.label} outside 1..{K}")
            if s.rate <= -100:
                raise ValidationError(f"structure {s.name} rate must exceed -100 %/yr")
            if s.shape not in ("ellipsoid", "box"):
                raise ValidationError(f"unknown shape {s.shape!r}")
            c, r = np.asarray(s.center, float), np.asarray(s.radii, float)
            if np.any(r <= 0) or np.any(c - r < -0.5) or np.any(c + r > np.array(self.dims) - 0.5):
                raise ValidationError(f"structure {s.name} overflows the grid")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise ValidationError("times must be non-decreasing")
        if self.bias_coeffs is not None:
            self.bias_coeffs = np.atleast_2d(np.asarray(self.bias_coeffs, dtype=np.float64))
            if self.bias_coeffs.shape != (N, n_basis(self.bias_order)):
                raise ValidationError("bias_coeffs must be N x P for bias_order")

    @property
    def n_classes(self):
        return self.means.shape[0]

    @property
    def n_contrasts(self):
        return self.means.shape[1]

    @property
    def grid(self):
        return VoxelGrid(self.dims, self.voxel_size)


@dataclass
class PhantomOutput:
    spec: PhantomSpec
    volumes: list  # raw-scale MultiContrastVolume per time point
    labels: list  # LabelVolume per time point
    lesions: list = None  # boolean arrays per time point
    table: list = field(default_factory=list)  # (subject, t, structure, mm3)
    log_bias: list = field(default_factory=list)  # planted (N, P) coefficients per time point


def _normalized_radius(dims, center, radii, shape):
    axes = [(np.arange(n) - c) / r for n, c, r in zip(dims, center, radii)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    if shape == "box":
        return np.maximum(np.maximum(np.abs(gx), np.abs(gy)), np.abs(gz))
    return np.sqrt(gx * gx + gy * gy + gz * gz)


def _scaled_region(rho, rate, t):
    """Voxels of the primitive at time t: the n_t smallest normalized radii."""
    n0 = int(np.count_nonzero(rho <= 1.0))
    n_t = int(round(n0 * (1.0 + rate / 100.0 * t)))
    flat = rho.ravel()
    order = np.argsort(flat, kind="stable")
    region = np.zeros(flat.shape, dtype=bool)
    region[order[:max(n_t, 0)]] = True
    return region.reshape(rho.shape)


def paint_labels(spec, t):
    labels = np.ones(spec.dims, dtype=np.int32)
    for s in spec.structures:
        rho = _normalized_radius(spec.dims, s.center, s.radii, s.shape)
        labels[_scaled_region(rho, s.rate, t)] = s.label
    return labels


def _place_lesions(spec, labels0, rng):
    les = spec.lesions
    host = labels0 == les.host_label
    depth = ndimage.distance_transform_edt(host)
    placed = []
    taken = np.zeros(spec.dims, dtype=bool)
    for _ in range(les.count):
        r = float(rng.uniform(*les.radius_range))
        ok = (depth >= r + 1.5) & ~ndimage.binary_dilation(taken, iterations=int(np.ceil(r)) + 2)
        cand = np.argwhere(ok)
        if cand.shape[0] == 0:
            raise ValidationError("no room left in the host structure for another lesion")
        c = cand[rng.integers(cand.shape[0])].astype(float)
        rho = _normalized_radius(spec.dims, c, (r, r, r), "ellipsoid")
        taken |= rho <= 1.0
        placed.append(rho)
    return placed


def _bias_coeffs_for_time(spec, rng):
    N = spec.n_contrasts
    P = n_basis(spec.bias_order)
    coeffs = np.zeros((N, P)) if spec.bias_coeffs is None else spec.bias_coeffs.copy()
    if spec.bias_jitter > 0:
        ox, oy, oz = spec.bias_order
        deg = np.array(
            [u + v + w for w in range(oz + 1) for v in range(oy + 1) for u in range(ox + 1)], float
        )
        scale = np.where(deg > 0, spec.bias_jitter / np.maximum(deg, 1.0), 0.0)
        coeffs = coeffs + rng.normal(size=(N, P)) * scale
    return coeffs


def _psd_sqrt(covs):
    """Symmetric square roots of PSD matrices (zero noise is allowed)."""
    w, v = np.linalg.eigh(covs)
    if np.any(w < -1e-12 * np.maximum(np.abs(w).max(axis=-1, keepdims=True), 1e-300)):
        raise ValidationError("phantom covariances must be positive semidefinite")
    return np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(np.clip(w, 0.0, None)), v)


def generate(spec):
    """Render every time point of ``spec``.  Deterministic in ``spec.noise_seed``."""
    rng = make_rng(spec.noise_seed)
    grid = spec.grid
    basis = eval_basis(grid, spec.bias_order)
    root = _psd_sqrt(spec.covs)
    K, N = spec.means.shape
    lesion_rhos = None
    if spec.lesions is not None:
        lesion_rhos = _place_lesions(spec, paint_labels(spec, 0.0), rng)
    out = PhantomOutput(spec, [], [], [] if spec.lesions is not None else None)
    for t in spec.times:
        labels = paint_labels(spec, t)
        mean_img = spec.means[labels - 1]  # dims x N
        lesion = None
        if lesion_rhos is not None:
            lesion = np.zeros(spec.dims, dtype=bool)
            for rho in lesion_rhos:
                lesion |= _scaled_region(rho, spec.lesions.growth, t)
            lesion &= labels == spec.lesions.host_label
            mean_img = mean_img + lesion[..., None] * np.asarray(spec.lesions.offset)[None, :]
            out.lesions.append(lesion)
        if spec.pv_sigma > 0:
            mean_img = np.stack(
                [ndimage.gaussian_filter(mean_img[..., n], spec.pv_sigma, mode="nearest")
                 for n in range(N)], axis=3)
        z = rng.normal(size=tuple(spec.dims) + (N,))
        noise = np.einsum("...ab,...b->...a", root[labels - 1], z)
        coeffs = _bias_coeffs_for_time(spec, rng)
        log_img = mean_img + noise + basis @ coeffs.T
        out.volumes.append(MultiContrastVolume(grid, np.exp(log_img)))
        seg = LabelVolume(grid, labels)
        out.labels.append(seg)
        out.log_bias.append(coeffs)
        for name, v in structure_volumes(seg, spec.names).items():
            out.table.append((spec.subject_id, float(t), name, v))
    return out


# --- canned anatomy -------------------------------------------------------------

DEFAULT_NAMES = {1: "background", 2: "cortex", 3: "white_matter", 4: "ventricle", 5: "hippocampus"}


def default_spec(dims=(48, 48, 48), n_contrasts=1, times=(0.0,), rates=None, noise=0.08,
                 seed=0, lesions=None, pv_sigma=0.3, bias_jitter=0.05, subject_id="phantom",
                 anatomy_scale=(1.0, 1.0, 1.0), anatomy_shift=(0.0, 0.0, 0.0)):
    """Five-class head phantom: background, cortex shell, white matter,
    a central ventricle and an off-center hippocampus-like blob.

    ``rates`` maps structure name -> %/yr.  With ``n_contrasts=2`` the second
    contrast is FLAIR-like (dark ventricle, bright lesions).
    """
    rates = rates or {}
    d = np.array(dims, float)
    c = (d - 1) / 2 + np.asarray(anatomy_shift, float)
    sc = np.asarray(anatomy_scale, float)
    structures = [
        Structure("cortex", 2, tuple(c), tuple(0.42 * d * sc), rates.get("cortex", 0.0)),
        Structure("white_matter", 3, tuple(c), tuple(0.33 * d * sc), rates.get("white_matter", 0.0)),
        Structure("ventricle", 4, tuple(c + d * np.array([0.0, 0.04, 0.0])),
                  tuple(d * np.array([0.12, 0.18, 0.10]) * sc), rates.get("ventricle", 0.0)),
        Structure("hippocampus", 5, tuple(c + d * np.array([0.16, -0.08, -0.04])),
                  tuple(d * np.array([0.09, 0.13, 0.09]) * sc), rates.get("hippocampus", 0.0)),
    ]
    t1 = [2.6, 4.0, 4.45, 3.3, 4.05]
    flair = [2.6, 4.25, 3.95, 3.0, 4.2]
    means = np.array([t1, flair][:n_contrasts]).T
    covs = np.array([np.eye(n_contrasts) * noise ** 2 for _ in range(5)])
    return PhantomSpec(dims, structures, means, covs, dict(DEFAULT_NAMES), times=tuple(times),
                       noise_seed=seed, lesions=lesions, pv_sigma=pv_sigma,
                       bias_jitter=bias_jitter, subject_id=subject_id)


def atlas_from_labels(labels, spacing, K, floor=1e-3):
    """Grid atlas whose node alphas are tent-weighted label frequencies around each node.

    ``labels`` is an int array (dims) with values 1..K.  ``floor`` mixes in a
    uniform simplex so no class has exactly zero prior inside the mesh.
    """
    labels = np.asarray(labels)
    grid = VoxelGrid(labels.shape)
    mesh = build_grid_atlas(grid, spacing, K=K)
    onehot = np.stack([(labels == k + 1).astype(float) for k in range(K)], axis=3)
    ref = mesh.reference_positions
    axes_w = []
    for a, n in enumerate(labels.shape):
        coords = np.arange(n, dtype=float)
        node_c = np.unique(ref[:, a])
        # tent weight of voxel coordinate for each lattice coordinate
        w = np.clip(1.0 - np.abs(coords[None, :] - node_c[:, None]) / spacing, 0.0, None)
        axes_w.append((node_c, w))
    (cx, wx), (cy, wy), (cz, wz) = axes_w
    hist = np.tensordot(wx, onehot, axes=(1, 0))
    hist = np.tensordot(wy, hist, axes=(1, 1)).transpose(1, 0, 2, 3)
    hist = np.tensordot(wz, hist, axes=(1, 2)).transpose(1, 2, 0, 3)
    ix = np.searchsorted(cx, ref[:, 0])
    iy = np.searchsorted(cy, ref[:, 1])
    iz = np.searchsorted(cz, ref[:, 2])
    weights = hist[ix, iy, iz]
    tot = weights.sum(axis=1, keepdims=True)
    alphas = np.where(tot > 0, weights / np.where(tot > 0, tot, 1.0), 1.0 / K)
    alphas = (1.0 - floor) * alphas + floor / K
    alphas /= alphas.sum(axis=1, keepdims=True)
    background = np.full(K, floor / K)
    background[0] += 1.0 - floor
    return TetrahedralMesh(ref, mesh.tetrahedra, alphas, background)


def default_atlas(dims=(48, 48, 48), spacing=4, floor=1e-3):
    """Atlas built from the unjittered default anatomy at t = 0."""
    spec = default_spec(dims)
    return atlas_from_labels(paint_labels(spec, 0.0), spacing, spec.n_classes, floor)


# --- cohorts --------------------------------------------------------------------


@dataclass
class GroupSpec:
    name: str
    rates: dict  # structure -> nominal %/yr
    spread: float = 0.5


def generate_cohort(n_per_group, groups, seed, make_spec=None, anatomy_jitter=0.0):
    """Independent subjects per group with jittered per-subject atrophy rates.

    Each group's jitter draws are centered (their sample mean is removed) so
    that the group's mean rate equals the nominal one; ``spread`` scales the
    centered draws.  ``make_spec(subject_id, rates, seed, scale, shift)``
    builds each subject's spec (default: ``default_spec`` with three time
    points at 0, 1, 2 years).

    Returns a list of ``(subject_id, group_name, PhantomOutput)``.
    """
    if make_spec is None:
        def make_spec(sid, rates, s, scale, shift):
            return default_spec(times=(0.0, 1.0, 2.0), rates=rates, seed=s, subject_id=sid,
                                anatomy_scale=scale, anatomy_shift=shift)
    out = []
    if n_per_group <= 0:
        return out
    for gi, group in enumerate(groups):
        rng = make_rng(seed, 1, gi)
        z = rng.normal(size=(n_per_group, len(group.rates)))
        if n_per_group > 1:
            z = z - z.mean(axis=0)
        for j in range(n_per_group):
            sid = f"{group.name}{j:03d}"
            rates = {name: float(nominal + group.spread * z[j, q])
                     for q, (name, nominal) in enumerate(sorted(group.rates.items()))}
            scale = tuple(1.0 + anatomy_jitter * rng.normal(size=3))
            shift = tuple(anatomy_jitter * 10.0 * rng.normal(size=3))
            subj_seed = int(make_rng(seed, 2, gi, j).integers(2 ** 31))
            spec = make_spec(sid, rates, subj_seed, scale, shift)
            out.append((sid, group.name, generate(spec)))
    return out


def with_times(spec, times, seed=None):
    return replace(spec, times=tuple(times), noise_seed=spec.noise_seed if seed is None else seed)
