"""Volume data model, log transform, and MGV / CSV file I/O.

MGV is a minimal self-describing volume format::

    MGV 1
    DIMS dx dy dz
    NCONTRASTS n
    VOXSIZE sx sy sz
    LOG 0|1
    END
    <dx*dy*dz*n float32 little-endian values>

The payload is contrast-major (all voxels of contrast 1, then contrast 2,
...) and voxels are x-fastest, then y, then z.  In memory, arrays are indexed
``[x, y, z]`` (plus a trailing contrast axis), so x-fastest on disk is
Fortran order in memory.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, StateError, ValidationError

DEFAULT_FLOOR_FRACTION = 1e-4
_HEADER_LIMIT = 4096


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple
    voxel_size: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(v) for v in self.voxel_size)
        org = tuple(float(v) for v in self.origin)
        if len(dims) != 3 or len(vs) != 3 or len(org) != 3:
            raise ValidationError("grid needs 3 dims, 3 voxel sizes and a 3-vector origin")
        if any(d < 1 for d in dims):
            raise ValidationError(f"grid dims must be >= 1, got {dims}")
        if any(not np.isfinite(v) or v <= 0 for v in vs):
            raise ValidationError(f"voxel sizes must be > 0, got {vs}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", org)

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self):
        sx, sy, sz = self.voxel_size
        return sx * sy * sz

    def same_shape(self, other):
        return self.dims == other.dims and self.voxel_size == other.voxel_size


@dataclass(frozen=True)
class MultiContrastVolume:
    """T-independent multi-contrast image on a voxel grid.

    ``data`` has shape ``dims + (n_contrasts,)``; ``mask`` has shape ``dims``.
    """

    grid: VoxelGrid
    data: np.ndarray
    mask: np.ndarray = None
    log_transformed: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or data.shape[:3] != self.grid.dims:
            raise ValidationError(
                f"data shape {data.shape} does not match grid dims {self.grid.dims}"
            )
        if data.shape[3] < 1:
            raise ValidationError("need at least one contrast")
        if self.mask is None:
            mask = np.ones(self.grid.dims, dtype=bool)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != self.grid.dims:
                raise ValidationError(f"mask shape {mask.shape} != grid dims {self.grid.dims}")
        data.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def n_contrasts(self):
        return self.data.shape[3]

    def masked_data(self):
        """(n_masked, N) float64 array of masked voxels in C order of ``[x, y, z]``."""
        return np.asarray(self.data[self.mask], dtype=np.float64)

    def nonfinite_voxels(self):
        bad = self.mask & ~np.all(np.isfinite(self.data), axis=3)
        return [tuple(int(c) for c in idx) for idx in np.argwhere(bad)]


@dataclass(frozen=True)
class LabelVolume:
    grid: VoxelGrid
    labels: np.ndarray
    posteriors: np.ndarray = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.grid.dims:
            raise ValidationError(f"label shape {labels.shape} != grid dims {self.grid.dims}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValidationError("labels must be integral")
            labels = labels.astype(np.int32)
        if labels.min(initial=0) < 0:
            raise ValidationError("labels must be nonnegative")
        if self.posteriors is not None:
            post = np.asarray(self.posteriors, dtype=np.float64)
            if post.shape[:3] != self.grid.dims or post.ndim != 4:
                raise ValidationError("posteriors must have shape dims x K")
            on = labels > 0
            rows = post[on]
            if rows.size and (rows.min() < -1e-12 or rows.max() > 1 + 1e-12):
                raise ValidationError("posteriors outside [0, 1]")
            if rows.size and np.max(np.abs(rows.sum(axis=1) - 1.0)) > 1e-6:
                raise ValidationError("posterior rows must sum to 1")
            if rows.size and np.any(np.argmax(rows, axis=1) + 1 != labels[on]):
                raise ValidationError("labels disagree with argmax of posteriors")
            object.__setattr__(self, "posteriors", post)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def mask(self):
        return self.labels > 0


@dataclass
class VolumeTimeSeries:
    subject_id: str
    entries: list = field(default_factory=list)  # [(time_years, {structure: mm3}), ...]

    def __post_init__(self):
        times = [float(t) for t, _ in self.entries]
        if times and times[0] != 0.0:
            raise ValidationError(f"first time offset must be 0, got {times[0]}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("time offsets must be strictly increasing")
        for _, vols in self.entries:
            if any(v < 0 for v in vols.values()):
                raise ValidationError("volumes must be nonnegative")

    @property
    def times(self):
        return np.array([t for t, _ in self.entries], dtype=np.float64)

    def volumes(self, structure):
        return np.array([vols[structure] for _, vols in self.entries], dtype=np.float64)


def log_transform(vol, floor=None):
    """Natural log of masked intensities, clamped below at ``floor``.

    With ``floor=None`` the floor is 1e-4 of each contrast's masked maximum.
    Unmasked voxels are set to 0.
    """
    if vol.log_transformed:
        raise StateError("volume is already log-transformed")
    raw = np.asarray(vol.data, dtype=np.float64)
    out = np.zeros_like(raw)
    m = vol.mask
    for n in range(vol.n_contrasts):
        vals = raw[..., n][m]
        if floor is None:
            top = np.max(vals[np.isfinite(vals)], initial=0.0)
            f = DEFAULT_FLOOR_FRACTION * top if top > 0 else DEFAULT_FLOOR_FRACTION
        else:
            if floor <= 0:
                raise ValidationError("log floor must be positive")
            f = floor
        with np.errstate(invalid="ignore"):
            chan = out[..., n]
            chan[m] = np.log(np.maximum(vals, f))
    return MultiContrastVolume(vol.grid, out, vol.mask, log_transformed=True)


def structure_volumes(seg, names=None):
    """Per-label volume in mm^3 (voxel count times voxel volume).

    ``names`` maps label -> structure name; by default every label 1..max
    present in the map is reported as ``label_<k>``.  Labels in ``names`` that
    do not occur report 0.
    """
    counts = np.bincount(np.asarray(seg.labels).ravel())
    vv = seg.grid.voxel_volume
    if names is None:
        names = {k: f"label_{k}" for k in range(1, len(counts))}
    return {
        name: (float(counts[k]) if k < len(counts) else 0.0) * vv
        for k, name in names.items()
    }


# --- MGV -------------------------------------------------------------------


def _header_bytes(grid, n_contrasts, log_flag):
    sx, sy, sz = grid.voxel_size
    lines = [
        "MGV 1",
        "DIMS %d %d %d" % grid.dims,
        f"NCONTRASTS {n_contrasts}",
        f"VOXSIZE {sx!r} {sy!r} {sz!r}",
        f"LOG {1 if log_flag else 0}",
        "END",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def _write_mgv(path, grid, array4, log_flag):
    payload = np.concatenate(
        [np.asarray(array4[..., n], dtype="<f4").ravel(order="F") for n in range(array4.shape[3])]
    )
    with open(path, "wb") as fh:
        fh.write(_header_bytes(grid, array4.shape[3], log_flag))
        fh.write(payload.tobytes())


def _parse_header(blob):
    fields = {}
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0 or nl > _HEADER_LIMIT:
            raise FormatError("header not terminated by END", field="END")
        line = blob[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line == "END":
            break
        if not line:
            continue
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    return fields, pos


def _int_fields(fields, key, count):
    if key not in fields:
        raise FormatError(f"missing {key} in header", field=key)
    vals = fields[key]
    if len(vals) != count:
        raise FormatError(f"{key} expects {count} values, got {len(vals)}", field=key)
    try:
        return [int(v) for v in vals]
    except ValueError as exc:
        raise FormatError(f"{key} values must be integers", field=key) from exc


def _read_mgv(path):
    blob = Path(path).read_bytes()
    fields, offset = _parse_header(blob)
    if fields.get("MGV") != ["1"]:
        raise FormatError("not an MGV 1 file", field="MGV")
    dims = _int_fields(fields, "DIMS", 3)
    if any(d <= 0 for d in dims):
        raise FormatError(f"non-positive DIMS {dims}", field="DIMS")
    (n,) = _int_fields(fields, "NCONTRASTS", 1)
    if n <= 0:
        raise FormatError(f"non-positive NCONTRASTS {n}", field="NCONTRASTS")
    if "VOXSIZE" not in fields or len(fields["VOXSIZE"]) != 3:
        raise FormatError("VOXSIZE expects 3 values", field="VOXSIZE")
    try:
        vs = [float(v) for v in fields["VOXSIZE"]]
    except ValueError as exc:
        raise FormatError("VOXSIZE values must be numbers", field="VOXSIZE") from exc
    if any(not v > 0 for v in vs):
        raise FormatError(f"non-positive VOXSIZE {vs}", field="VOXSIZE")
    (log_flag,) = _int_fields(fields, "LOG", 1) if "LOG" in fields else (0,)
    if log_flag not in (0, 1):
        raise FormatError("LOG must be 0 or 1", field="LOG")
    nvox = dims[0] * dims[1] * dims[2]
    expected = nvox * n * 4
    payload = blob[offset:]
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload: expected {nvox * n} values, found {len(payload) // 4}",
            field="payload",
        )
    if len(payload) > expected:
        raise FormatError("payload longer than header declares", field="payload")
    flat = np.frombuffer(payload, dtype="<f4")
    data = np.empty(tuple(dims) + (n,), dtype=np.float32)
    for c in range(n):
        data[..., c] = flat[c * nvox:(c + 1) * nvox].reshape(dims, order="F")
    return VoxelGrid(tuple(dims), tuple(vs)), data, bool(log_flag)


def read_volume(path, mask=None):
    """Read an MGV file.  ``mask`` may be a boolean array or an MGV 0/1 path."""
    grid, data, log_flag = _read_mgv(path)
    if mask is not None and not isinstance(mask, np.ndarray):
        mask = read_mask(mask, grid)
    return MultiContrastVolume(grid, data, mask, log_transformed=log_flag)


def write_volume(vol, path):
    bad = vol.nonfinite_voxels()
    if bad:
        raise ValidationError(f"non-finite values in masked voxels, first at {bad[0]}")
    _write_mgv(path, vol.grid, vol.data, vol.log_transformed)


def write_mask(mask, grid, path):
    _write_mgv(path, grid, np.asarray(mask, dtype=np.float32)[..., None], False)


def read_mask(path, grid=None):
    g, data, _ = _read_mgv(path)
    if data.shape[3] != 1:
        raise FormatError("mask volume must have one contrast", field="NCONTRASTS")
    if grid is not None and g.dims != grid.dims:
        raise FormatError(f"mask dims {g.dims} differ from volume dims {grid.dims}", field="DIMS")
    vals = data[..., 0]
    if not np.all((vals == 0) | (vals == 1)):
        raise FormatError("mask values must be 0 or 1", field="payload")
    return vals.astype(bool)


def write_labels(seg, path):
    _write_mgv(path, seg.grid, np.asarray(seg.labels, dtype=np.float32)[..., None], False)


def read_labels(path):
    grid, data, _ = _read_mgv(path)
    if data.shape[3] != 1:
        raise FormatError("label volume must have one contrast", field="NCONTRASTS")
    vals = data[..., 0]
    if not np.all(np.mod(vals, 1) == 0):
        raise FormatError("label values must be integral", field="payload")
    return LabelVolume(grid, vals.astype(np.int32))


# --- volume tables ------------------------------------------------------------

TABLE_HEADER = ("subject", "time_years", "structure", "volume_mm3")


def write_volume_table(rows, path):
    """``rows``: iterable of (subject, time_years, structure, volume_mm3)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for subject, t, structure, v in rows:
            w.writerow([subject, repr(float(t)), structure, repr(float(v))])


def read_volume_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TABLE_HEADER:
            raise FormatError(f"volume table header must be {','.join(TABLE_HEADER)}", field="header")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise FormatError(f"line {lineno}: expected 4 fields", field="row")
            try:
                rows.append((rec[0], float(rec[1]), rec[2], float(rec[3])))
            except ValueError as exc:
                raise FormatError(f"line {lineno}: bad number", field="row") from exc
    return rows


def table_to_series(rows):
    """Group table rows into one VolumeTimeSeries per subject (times shifted to baseline)."""
    by_subject = {}
    for subject, t, structure, v in rows:
        by_subject.setdefault(subject, {}).setdefault(t, {})[structure] = v
    out = {}
    for subject, per_time in by_subject.items():
        times = sorted(per_time)
        t0 = times[0]
        out[subject] = VolumeTimeSeries(subject, [(t - t0, per_time[t]) for t in times])
    return out
