"""Deformable tetrahedral probabilistic atlas.

Node positions live in voxel-index coordinates (voxel ``(i, j, k)`` has its
center at ``(i, j, k)``).  Each node carries a label simplex (``alphas``); the
prior at a voxel is the barycentric mix of the alphas of the enclosing
tetrahedron's four nodes.

Per-tetrahedron deformation penalty, with ``J`` the Jacobian of the affine
map taking the reference tetrahedron onto the deformed one and ``V`` the
reference volume::

    U = V * ( |J|_F^2 det(J)^(-2/3) - 3 + det(J) + 1/det(J) - 2 )   det(J) > 0
    U = +inf                                                         otherwise

The first part penalizes shape change (zero for any similarity), the second
penalizes volume change; both vanish at the identity.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import FormatError, InfiniteEnergyError, ValidationError

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class StiffnessConfig:
    kappa: float
    kappa0: float

    def __post_init__(self):
        if not (self.kappa > 0 and self.kappa0 > 0):
            raise ValidationError("stiffness constants must be positive")


class TetrahedralMesh:
    """Mesh topology, reference positions and per-node label simplexes."""

    def __init__(self, reference_positions, tetrahedra, node_alphas, background=None):
        ref = np.array(reference_positions, dtype=np.float64)
        tets = np.array(tetrahedra, dtype=np.int64)
        alphas = np.array(node_alphas, dtype=np.float64)
        if ref.ndim != 2 or ref.shape[1] != 3 or ref.shape[0] < 4:
            raise ValidationError("reference positions must be n_nodes x 3 with n_nodes >= 4")
        if tets.ndim != 2 or tets.shape[1] != 4 or tets.shape[0] < 1:
            raise ValidationError("tetrahedra must be M x 4")
        if tets.min() < 0 or tets.max() >= ref.shape[0]:
            raise ValidationError("tetrahedron node index out of range")
        if alphas.shape[0] != ref.shape[0] or alphas.ndim != 2 or alphas.shape[1] < 1:
            raise ValidationError("node alphas must be n_nodes x K")
        bad = np.flatnonzero(
            (alphas.min(axis=1) < 0) | (np.abs(alphas.sum(axis=1) - 1.0) > SIMPLEX_TOL)
        )
        if bad.size:
            raise ValidationError(f"node {bad[0]} alphas are not a simplex")
        if not np.all(np.isfinite(ref)):
            raise ValidationError("reference positions must be finite")
        vols = signed_volumes(ref, tets)
        neg = np.flatnonzero(vols <= 0)
        if neg.size:
            raise ValidationError(f"tetrahedron {neg[0]} has non-positive reference volume")
        K = alphas.shape[1]
        if background is None:
            background = np.zeros(K)
            background[0] = 1.0
        self.reference_positions = ref
        self.tetrahedra = tets
        self.node_alphas = alphas
        self.background = np.asarray(background, dtype=np.float64)
        for a in (self.reference_positions, self.tetrahedra, self.node_alphas, self.background):
            a.flags.writeable = False

    @property
    def n_nodes(self):
        return self.reference_positions.shape[0]

    @property
    def n_tetrahedra(self):
        return self.tetrahedra.shape[0]

    @property
    def n_classes(self):
        return self.node_alphas.shape[1]

    def with_alphas(self, node_alphas, background=None):
        return TetrahedralMesh(
            self.reference_positions,
            self.tetrahedra,
            node_alphas,
            self.background if background is None else background,
        )

    def boundary_free_mask(self):
        """Boolean n_nodes x 3: False for coordinates pinned to the mesh bounding box.

        Nodes on a bounding-box face may slide within that face but not leave
        it, so a box-shaped mesh keeps covering the same box.
        """
        ref = self.reference_positions
        lo = ref.min(axis=0)
        hi = ref.max(axis=0)
        return ~(np.isclose(ref, lo) | np.isclose(ref, hi))


def signed_volumes(positions, tets):
    v = positions[tets]
    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=2)
    return np.linalg.det(e) / 6.0


def _edge_matrices(positions, tets):
    v = positions[tets]
    return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=2)


def _check_shapes(x, ref, mesh):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != (mesh.n_nodes, 3) or ref.shape != (mesh.n_nodes, 3):
        raise ValidationError(
            f"positions must be {mesh.n_nodes} x 3, got {x.shape} and {ref.shape}"
        )
    return x, ref


def jacobian_determinants(x, ref, mesh):
    """det J for every tetrahedron (ratio of deformed to reference volume)."""
    x, ref = _check_shapes(x, ref, mesh)
    return np.linalg.det(_edge_matrices(x, mesh.tetrahedra)) / np.linalg.det(
        _edge_matrices(ref, mesh.tetrahedra)
    )


def deformation_energy(x, ref, mesh):
    """Sum of per-tetrahedron penalties; +inf if any det J <= 0 (or reference is inverted)."""
    x, ref = _check_shapes(x, ref, mesh)
    return _kernels.energy(x, ref, mesh.tetrahedra)[0]


def energy_and_min_det(x, ref, mesh):
    x, ref = _check_shapes(x, ref, mesh)
    e, md, _, _ = _kernels.energy(x, ref, mesh.tetrahedra)
    return e, md


def deformation_energy_gradients(x, ref, mesh, wrt_ref=False):
    """Energy and its gradient with respect to x (and to ref when ``wrt_ref``).

    Returns ``(energy, grad_x)`` or ``(energy, grad_x, grad_ref)``.
    """
    x, ref = _check_shapes(x, ref, mesh)
    e, _, gx, gr = _kernels.energy(x, ref, mesh.tetrahedra, True, wrt_ref)
    if not np.isfinite(e):
        raise InfiniteEnergyError("deformation energy is infinite; gradient undefined")
    return (e, gx, gr) if wrt_ref else (e, gx)


def deformation_energy_gradient(x, ref, mesh):
    return deformation_energy_gradients(x, ref, mesh)[1]


def rasterize_prior(x, mesh, grid):
    """Prior p(l_i = k | x) on every voxel, shape dims x K.

    Voxels outside every tetrahedron get ``mesh.background`` (all mass on
    class 1 by default).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mesh.n_nodes, 3):
        raise ValidationError("positions do not match mesh")
    return _kernels.rasterize(x, mesh.tetrahedra, mesh.node_alphas, grid.dims, mesh.background)


# --- construction -------------------------------------------------------------

# Corner (a, b, c) of a unit cube has local index a + 2b + 4c.
_EVEN_CUBE = ((0, 1, 2, 4), (3, 1, 2, 7), (5, 1, 4, 7), (6, 2, 4, 7), (1, 2, 4, 7))
_ODD_CUBE = ((1, 0, 3, 5), (2, 0, 3, 6), (4, 0, 5, 6), (7, 3, 5, 6), (0, 3, 5, 6))


def build_grid_atlas(grid, spacing, K=None, alpha_init=None):
    """Regular lattice atlas covering every voxel center of ``grid``.

    Nodes sit at multiples of ``spacing`` (in voxels) along each axis, enough
    of them to reach ``dims - 1``; each lattice cube is split into five
    tetrahedra, alternating the split with cube parity so faces match.
    """
    spacing = int(spacing)
    if spacing < 1:
        raise ValidationError("spacing must be a positive integer")
    if any(spacing > d for d in grid.dims):
        raise ValidationError(f"spacing {spacing} larger than grid {grid.dims}")
    if alpha_init is None:
        if K is None:
            raise ValidationError("need K or alpha_init")
        alpha_init = np.full(K, 1.0 / K)
    alpha_init = np.asarray(alpha_init, dtype=np.float64)
    if K is not None and alpha_init.shape != (K,):
        raise ValidationError("alpha_init must have K entries")
    cells = [max(1, -(-(d - 1) // spacing)) for d in grid.dims]
    nx, ny, nz = (c + 1 for c in cells)
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    # node id is x-fastest, matching voxel ordering
    node_id = (ii + nx * (jj + ny * kk)).astype(np.int64)
    ref = np.zeros((nx * ny * nz, 3))
    ref[node_id.ravel(), 0] = ii.ravel() * spacing
    ref[node_id.ravel(), 1] = jj.ravel() * spacing
    ref[node_id.ravel(), 2] = kk.ravel() * spacing
    tets = []
    for c in range(cells[2]):
        for b in range(cells[1]):
            for a in range(cells[0]):
                corners = [
                    node_id[a + (q & 1), b + ((q >> 1) & 1), c + ((q >> 2) & 1)] for q in range(8)
                ]
                pattern = _EVEN_CUBE if (a + b + c) % 2 == 0 else _ODD_CUBE
                for t in pattern:
                    tets.append([corners[q] for q in t])
    tets = np.array(tets, dtype=np.int64)
    vols = signed_volumes(ref, tets)
    flip = vols < 0
    tets[flip, 1], tets[flip, 2] = tets[flip, 2].copy(), tets[flip, 1].copy()
    alphas = np.tile(alpha_init, (ref.shape[0], 1))
    return TetrahedralMesh(ref, tets, alphas)


# --- I/O ----------------------------------------------------------------------


def write_atlas(mesh, path):
    lines = ["TETATLAS 1", f"NODES {mesh.n_nodes} {mesh.n_classes}"]
    for p, a in zip(mesh.reference_positions, mesh.node_alphas):
        lines.append(" ".join(repr(float(v)) for v in (*p, *a)))
    lines.append(f"TETS {mesh.n_tetrahedra}")
    for t in mesh.tetrahedra:
        lines.append(" ".join(str(int(v)) for v in t))
    lines.append("END")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_atlas(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        if lines[0].split() != ["TETATLAS", "1"]:
            raise FormatError("missing TETATLAS 1 header", field="TETATLAS")
        head = lines[1].split()
        if head[0] != "NODES" or len(head) != 3:
            raise FormatError("expected 'NODES n K'", field="NODES")
        n, K = int(head[1]), int(head[2])
        if n < 1 or K < 1:
            raise FormatError("NODES counts must be positive", field="NODES")
        node_rows = np.array([[float(v) for v in ln.split()] for ln in lines[2:2 + n]])
        if node_rows.shape != (n, 3 + K):
            raise FormatError("node line has wrong number of values", field="NODES")
        tet_head = lines[2 + n].split()
        if tet_head[0] != "TETS" or len(tet_head) != 2:
            raise FormatError("expected 'TETS M'", field="TETS")
        M = int(tet_head[1])
        tets = np.array([[int(v) for v in ln.split()] for ln in lines[3 + n:3 + n + M]])
        if tets.shape != (M, 4):
            raise FormatError("tetrahedron line must hold 4 indices", field="TETS")
        if lines[3 + n + M] != "END" or len(lines) != 4 + n + M:
            raise FormatError("missing END or trailing content", field="END")
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed atlas file: {exc}") from exc
    return TetrahedralMesh(node_rows[:, :3], tets, node_rows[:, 3:])


def write_positions(x, path):
    lines = ["POS 1"] + [" ".join(repr(float(v)) for v in row) for row in np.asarray(x)] + ["END"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_positions(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "POS 1" or lines[-1] != "END":
        raise FormatError("positions file must start with 'POS 1' and end with END", field="POS")
    try:
        x = np.array([[float(v) for v in ln.split()] for ln in lines[1:-1]])
    except ValueError as exc:
        raise FormatError("bad number in positions file", field="POS") from exc
    if x.ndim != 2 or x.shape[1] != 3:
        raise FormatError("position rows must have 3 values", field="POS")
    return x
