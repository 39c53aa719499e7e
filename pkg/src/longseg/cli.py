"""Command-line interface.

Subcommands ``fit``, ``fit-long``, ``metrics``, ``grid-search`` and
``phantom``.  Options may also come from a flat ``key = value`` file given
with ``--config``; command-line flags win over the file.  Exit codes: 0 on
success, 2 for usage or input problems, 3 for numerical failures.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import _kernels, longit, metrics, phantom, volio, xsect
from .applik import write_params
from .atlas import read_atlas, write_atlas, write_positions
from .errors import InputError, NumericalError, StateError

logger = logging.getLogger("longseg")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

KAPPA0_GRID = (5.0, 10.0, 14.0, 15.0, 20.0)
P0_GRID = (0.25, 0.5, 0.75, 1.0, 1.25)


# --- config handling ------------------------------------------------------------------


def read_config(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InputError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


def _ints3(text):
    vals = [int(v) for v in (text if isinstance(text, (list, tuple)) else str(text).replace(",", " ").split())]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ValueError("expected 1 or 3 integers")
    return tuple(vals)


def _paths(text):
    if isinstance(text, (list, tuple)):
        return list(text)
    return [p for p in str(text).replace(",", " ").split() if p]


def _rates(text):
    """``name:rate,name:rate`` -> dict."""
    if isinstance(text, dict):
        return text
    out = {}
    for item in str(text).replace(" ", "").split(","):
        if not item:
            continue
        name, _, val = item.partition(":")
        if not name or not val:
            raise ValueError(f"bad rate item {item!r}")
        out[name] = float(val)
    return out


class Option:
    def __init__(self, key, conv, default=None, help="", nargs=None, flag=False):
        self.key = key
        self.conv = conv
        self.default = default
        self.help = help
        self.nargs = nargs
        self.flag = flag


COMMON = [
    Option("seed", int, 0, "random seed"),
    Option("threads", int, None, "cap on internal threads"),
    Option("out_dir", str, ".", "output directory"),
]

FIT_OPTS = [
    Option("atlas", str, None, "atlas file (TETATLAS format)"),
    Option("mask", str, None, "mask volume (MGV, 0/1)"),
    Option("kappa", float, 1.0, "mesh stiffness"),
    Option("bias_order", _ints3, (2, 2, 2), "bias basis order per axis, e.g. 2,2,2"),
    Option("max_sweeps", int, 30, "maximum outer sweeps of the cross-sectional fit"),
    Option("em_tolerance", float, 1e-6, "relative objective change for convergence"),
    Option("lbfgs_memory", int, 10, "L-BFGS memory"),
    Option("lbfgs_max_iters", int, 100, "L-BFGS iterations per mesh update"),
    Option("lbfgs_gtol", float, 1e-6, "L-BFGS relative gradient tolerance"),
]

LONG_OPTS = FIT_OPTS + [
    Option("times", _floats, None, "time of each volume in years", nargs="+"),
    Option("subject", str, "subject", "subject id for the volume table"),
    Option("kappa0_ratio", float, 20.0, "kappa0 as a multiple of kappa"),
    Option("p0_ratio", float, 0.5, "P0_k as a multiple of N_k"),
    Option("outer_iterations", int, 5, "outer coordinate-ascent iterations"),
    Option("inner_sweeps", int, 3, "sweeps per time point per outer iteration"),
    Option("degenerate", _bool, False, "P0 = 0 and kappa0 = 1e6 kappa", flag=True),
    Option("lesions", _bool, False, "add an unregularized lesion class", flag=True),
    Option("lesion_threshold", float, 0.5, "lesion posterior threshold"),
    Option("lesion_prior", str, "host", "'host' or a uniform lesion probability"),
    Option("lesion_fraction", float, 0.02, "fraction of the host prior given to lesions"),
    Option("lesion_host", int, 3, "label hosting lesions"),
    Option("lesion_offset", _floats, None, "per-contrast lesion mean offset", nargs="+"),
]

METRIC_OPTS = [
    Option("table", str, None, "volume table CSV"),
    Option("groups", str, None, "CSV with header subject,group"),
    Option("structures", _paths, None, "structures to report (default: all but background)", nargs="+"),
    Option("retest", _bool, False, "treat each subject's scans as test-retest replicates", flag=True),
    Option("positive", str, None, "group treated as the positive class"),
    Option("folds", int, 5, "cross-validation folds"),
    Option("power", float, 0.8, "power for the sample-size estimate"),
    Option("alpha", float, 0.05, "significance level"),
    Option("masks", _paths, None, "lesion masks (MGV) in time order", nargs="+"),
    Option("mask_times", _floats, None, "time of each mask in years", nargs="+"),
    Option("dice", _paths, None, "two masks to compare", nargs=2),
]

GRID_OPTS = [
    Option("subjects", int, 6, "cohort size (split evenly between patients and controls)"),
    Option("dims", _ints3, (32, 32, 32), "phantom grid"),
    Option("spacing", int, 4, "atlas node spacing"),
    Option("structure", str, "hippocampus", "atrophying structure"),
    Option("rate", float, -2.0, "patient atrophy rate in %/yr"),
    Option("spread", float, 0.5, "per-subject rate spread"),
    Option("kappa", float, 1.0, "mesh stiffness"),
    Option("outer_iterations", int, 5, "outer coordinate-ascent iterations"),
    Option("inner_sweeps", int, 3, "sweeps per time point per outer iteration"),
    Option("max_sweeps", int, 30, "maximum sweeps of the template fit"),
    Option("bias_order", _ints3, (2, 2, 2), "bias basis order per axis"),
]

PHANTOM_OPTS = [
    Option("dims", _ints3, (48, 48, 48), "grid size"),
    Option("contrasts", int, 1, "number of contrasts (1 or 2)"),
    Option("times", _floats, [0.0], "scan times in years", nargs="+"),
    Option("rates", _rates, {}, "structure:rate list, %/yr"),
    Option("noise", float, 0.08, "log-intensity noise standard deviation"),
    Option("pv_sigma", float, 0.3, "partial-volume blur (voxels)"),
    Option("bias_jitter", float, 0.05, "per-scan bias field jitter"),
    Option("spacing", int, 4, "node spacing of the written atlas"),
    Option("subject", str, "phantom", "subject id"),
    Option("lesion_count", int, 0, "number of planted lesions"),
    Option("lesion_growth", float, 0.0, "lesion volume change, %/yr"),
    Option("lesion_offset", _floats, None, "per-contrast lesion offset", nargs="+"),
    Option("cohort", int, 0, "subjects per group (0: a single phantom)"),
    Option("groups", _rates, None, "group:rate list for the cohort"),
    Option("structure", str, "hippocampus", "structure whose rate differs between groups"),
    Option("spread", float, 0.5, "per-subject rate spread"),
]


def _add_options(parser, options):
    for opt in options:
        flag = "--" + opt.key.replace("_", "-")
        if opt.flag:
            parser.add_argument(flag, dest=opt.key, action="store_const", const=True,
                                default=None, help=opt.help)
        else:
            parser.add_argument(flag, dest=opt.key, default=None, nargs=opt.nargs, help=opt.help)


def resolve(args, options):
    """Merge flags over the config file over defaults, converting types."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    known = {o.key for o in options}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise InputError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for opt in options:
        val = getattr(args, opt.key, None)
        src = "flag"
        if val is None and opt.key in cfg:
            val, src = cfg[opt.key], "config"
        if val is None:
            out[opt.key] = opt.default
            continue
        try:
            if opt.nargs is not None and isinstance(val, list) and opt.conv not in (_floats, _paths):
                val = " ".join(val)
            out[opt.key] = opt.conv(val)
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad value for {opt.key} ({src}): {exc}") from exc
    return argparse.Namespace(**out)


# --- helpers ---------------------------------------------------------------------------------


def _setup(opts):
    if opts.threads is not None:
        if opts.threads < 1:
            raise InputError("--threads must be positive")
        _kernels.set_threads(opts.threads)
    os.makedirs(opts.out_dir, exist_ok=True)


def _require(value, name):
    if value is None:
        raise InputError(f"missing required option --{name.replace('_', '-')}")
    return value


def _load_atlas(path):
    path = _require(path, "atlas")
    if not os.path.exists(path):
        raise InputError(f"atlas not found: {path}")
    return read_atlas(path)


def _load_volume(path, mask_path=None):
    if not os.path.exists(path):
        raise InputError(f"volume not found: {path}")
    vol = volio.read_volume(path, mask=mask_path)
    if not vol.log_transformed:
        vol = volio.log_transform(vol)
    return vol


def _fit_config(opts):
    return xsect.FitConfig(
        max_outer_sweeps=opts.max_sweeps,
        em_tolerance=opts.em_tolerance,
        lbfgs_memory=opts.lbfgs_memory,
        lbfgs_max_iters=opts.lbfgs_max_iters,
        lbfgs_gtol=opts.lbfgs_gtol,
        bias_order=opts.bias_order,
        seed=opts.seed,
    )


def _names(K, lesion=False):
    names = {k: phantom.DEFAULT_NAMES.get(k, f"label_{k}") for k in range(1, K + 1)}
    if lesion:
        names[K] = "lesion"
    return names


# --- fit ----------------------------------------------------------------------------------------


def cmd_fit(args):
    opts = resolve(args, COMMON + FIT_OPTS + [Option("volume", str, None, "")])
    _setup(opts)
    atlas = _load_atlas(opts.atlas)
    vol = _load_volume(_require(opts.volume, "volume"), opts.mask)
    cfg = _fit_config(opts)
    res = xsect.fit_cross(vol, atlas, cfg, kappa=opts.kappa)
    seg = xsect.segment(vol, atlas, res.x_hat, res.gauss, res.bias)
    out = opts.out_dir
    write_params(os.path.join(out, "fit.params"), res.gauss, res.bias,
                 extra=[("KAPPA", opts.kappa), ("CONVERGED", int(res.converged))])
    write_positions(res.x_hat, os.path.join(out, "fit.pos"))
    volio.write_labels(seg, os.path.join(out, "labels.mgv"))
    rows = [("subject", 0.0, name, v)
            for name, v in volio.structure_volumes(seg, _names(atlas.n_classes)).items()]
    volio.write_volume_table(rows, os.path.join(out, "volumes.csv"))
    for w in res.warnings:
        logger.warning(w)
    logger.info("fit finished after %d trace entries (converged=%s)", len(res.trace), res.converged)
    return EXIT_OK


# --- fit-long ---------------------------------------------------------------------------------------


def _long_config(opts):
    kw = dict(kappa=opts.kappa, kappa0_ratio=opts.kappa0_ratio, p0_ratio=opts.p0_ratio,
              outer_iterations=opts.outer_iterations, inner_sweeps=opts.inner_sweeps,
              cross=_fit_config(opts))
    if opts.degenerate:
        kw.update(kappa0_ratio=1e6, p0_ratio=0.0)
    return longit.LongConfig(**kw)


def _lesion_config(opts):
    if not opts.lesions:
        return None
    prior = opts.lesion_prior
    if prior != "host":
        try:
            prior = float(prior)
        except ValueError as exc:
            raise InputError("lesion_prior must be 'host' or a number") from exc
    return longit.LesionConfig(prior=prior, fraction=opts.lesion_fraction,
                               host_label=opts.lesion_host, threshold=opts.lesion_threshold,
                               offset=opts.lesion_offset)


def cmd_fit_long(args):
    opts = resolve(args, COMMON + LONG_OPTS + [Option("volumes", _paths, None, "", nargs="+")])
    _setup(opts)
    atlas = _load_atlas(opts.atlas)
    paths = _require(opts.volumes, "volumes")
    vols = [_load_volume(p, opts.mask) for p in paths]
    times = opts.times if opts.times is not None else [float(t) for t in range(len(vols))]
    if len(times) != len(vols):
        raise InputError("need one time per volume")
    cfg = _long_config(opts)
    lesion = _lesion_config(opts)
    res = longit.fit_longitudinal(vols, atlas, cfg, lesion=lesion)
    longit.write_long_result(res, opts.out_dir)
    K = res.timepoints[0].gauss.n_classes
    names = _names(K, lesion is not None)
    rows = []
    for t, tp in zip(times, res.timepoints):
        for name, v in volio.structure_volumes(tp.seg, names).items():
            rows.append((opts.subject, float(t), name, v))
    volio.write_volume_table(rows, os.path.join(opts.out_dir, "volumes.csv"))
    with open(os.path.join(opts.out_dir, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "objective"))
        for step, val in res.trace:
            w.writerow((step, repr(float(val))))
    for msg in res.warnings:
        logger.warning(msg)
    return EXIT_OK


# --- metrics ------------------------------------------------------------------------------------------


def _read_groups(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject", "group"]:
            raise InputError("groups CSV header must be subject,group")
        return {rec[0]: rec[1] for rec in reader if rec}


def _default_structures(rows):
    names = sorted({r[2] for r in rows})
    return [n for n in names if n != "background"] or names


def metric_rows_from_table(rows, opts):
    """All table-derived metric rows plus an optional ROC result."""
    out = []
    structures = opts.structures or _default_structures(rows)
    by_subject = {}
    for subject, t, structure, v in rows:
        by_subject.setdefault(subject, []).append((t, structure, v))
    if opts.retest:
        for sid in sorted(by_subject):
            for s in structures:
                vals = [v for _, st, v in sorted(by_subject[sid], key=lambda r: r[0]) if st == s]
                for (i, a), (j, b) in _pairs(vals):
                    out.append(("aspc", f"{sid}#{i}-{j}", s, metrics.aspc(a, b)))
                    out.append(("spc", f"{sid}#{i}-{j}", s, metrics.spc(a, b)))
        return out, None
    series = volio.table_to_series(rows)
    apcs = metrics.apc_table(series, structures)
    for sid in sorted(apcs):
        for s in structures:
            out.append(("apc", sid, s, apcs[sid][s]))
    roc = None
    if opts.groups:
        groups = _read_groups(opts.groups)
        names = sorted(set(groups[s] for s in apcs if s in groups))
        if len(names) != 2:
            raise InputError(f"need exactly two groups with APCs, found {names}")
        pos = opts.positive or names[1]
        if pos not in names:
            raise InputError(f"positive group {pos!r} not present")
        neg = names[0] if names[1] == pos else names[1]
        tag = f"{pos}-vs-{neg}"
        subjects = sorted(s for s in apcs if s in groups)
        for s in structures:
            a = [apcs[sid][s] for sid in subjects if groups[sid] == pos]
            b = [apcs[sid][s] for sid in subjects if groups[sid] == neg]
            try:
                d = metrics.cohens_d(a, b)
            except NumericalError as exc:
                logger.warning("no effect size for %s: %s", s, exc)
                continue
            out.append(("cohens_d", tag, s, d))
            if d == 0:
                logger.warning("zero effect size for %s; no sample size reported", s)
                continue
            out.append(("sample_size", tag, s, metrics.sample_size_for_d(d, opts.power, opts.alpha)))
        X = np.array([[apcs[sid][s] for s in structures] for sid in subjects])
        y = np.array([groups[sid] == pos for sid in subjects])
        roc = metrics.lda_roc(X, y, folds=opts.folds, seed=opts.seed)
        out.append(("auc", tag, "+".join(structures), roc.auc))
        for f in roc.ridge_folds:
            logger.warning("LDA fold %d used the ridge fallback", f)
    return out, roc


def _pairs(vals):
    idx = list(enumerate(vals))
    return [(a, b) for k, a in enumerate(idx) for b in idx[k + 1:]]


def cmd_metrics(args):
    opts = resolve(args, COMMON + METRIC_OPTS)
    _setup(opts)
    rows_out = []
    roc = None
    did = False
    if opts.table:
        if not os.path.exists(opts.table):
            raise InputError(f"table not found: {opts.table}")
        rows = volio.read_volume_table(opts.table)
        if not rows:
            raise InputError("volume table is empty")
        r, roc = metric_rows_from_table(rows, opts)
        rows_out += r
        did = True
    if opts.masks:
        masks = [volio.read_mask(p) for p in opts.masks]
        times = opts.mask_times if opts.mask_times is not None else list(range(len(masks)))
        if len(times) != len(masks):
            raise InputError("need one time per mask")
        les_i, les_d = metrics.lesion_rates(list(zip(masks, times)))
        rows_out += [("les_i", "-", "lesion", les_i), ("les_d", "-", "lesion", les_d)]
        did = True
    if opts.dice:
        a, b = (volio.read_mask(p) for p in opts.dice)
        rows_out.append(("dice", "-", "mask", metrics.dice(a, b)))
        did = True
    if not did:
        raise InputError("nothing to do: give --table, --masks or --dice")
    metrics.write_metric_rows(rows_out, os.path.join(opts.out_dir, "metrics.csv"))
    if roc is not None:
        metrics.write_roc(roc.fpr, roc.tpr, os.path.join(opts.out_dir, "roc.csv"))
    return EXIT_OK


# --- grid search -----------------------------------------------------------------------------------------


def grid_cohort(n_subjects, dims, structure, rate, spread, seed):
    """Half patients (``rate``), half controls (0 %/yr).  Each subject is scanned
    twice at baseline (a test-retest pair) and once a year later."""
    n_pat = n_subjects // 2
    n_ctl = n_subjects - n_pat
    groups = [phantom.GroupSpec("control", {structure: 0.0}, spread),
              phantom.GroupSpec("patient", {structure: rate}, spread)]

    def make_spec(sid, rates, s, scale, shift):
        return phantom.default_spec(dims=dims, times=(0.0, 0.0, 1.0), rates=rates, seed=s,
                                    subject_id=sid, anatomy_scale=scale, anatomy_shift=shift)

    out = []
    for g, n in zip(groups, (n_ctl, n_pat)):
        sub = phantom.generate_cohort(n, [g], seed + (0 if g.name == "control" else 1),
                                      make_spec=make_spec, anatomy_jitter=0.02)
        out.extend(sub)
    return out


def run_grid_search(cohort, atlas, structure, base_cfg, kappa0_grid=KAPPA0_GRID,
                    p0_grid=P0_GRID, progress=None):
    """Evaluate every (kappa0, P0) cell; returns a list of row dicts.

    The template fit of each subject is shared by all cells.
    """
    subjects = []
    for sid, group, ph in cohort:
        vols = [volio.log_transform(v) for v in ph.volumes]
        template = longit.build_median_template(vols)
        tfit = longit.fit_template(template, atlas, base_cfg)
        subjects.append((sid, group, vols, tfit))
    names = phantom.DEFAULT_NAMES
    rows = []
    for k0 in kappa0_grid:
        for p0 in p0_grid:
            row = {"kappa0_ratio": k0, "p0_ratio": p0, "median_aspc": float("nan"),
                   "cohens_d": float("nan"), "status": "ok"}
            try:
                cfg = longit.LongConfig(kappa=base_cfg.kappa, kappa0_ratio=k0, p0_ratio=p0,
                                        outer_iterations=base_cfg.outer_iterations,
                                        inner_sweeps=base_cfg.inner_sweeps, cross=base_cfg.cross)
                aspcs, apcs = [], {"control": [], "patient": []}
                for sid, group, vols, tfit in subjects:
                    res = longit.fit_longitudinal(vols, atlas, cfg, template_fit=tfit)
                    v = [volio.structure_volumes(tp.seg, names) for tp in res.timepoints]
                    for s in list(names.values())[1:]:
                        aspcs.append(metrics.aspc(v[0][s], v[1][s]))
                    times = [0.0, 0.0, 1.0]
                    apcs[group].append(metrics.apc((times, [vv[structure] for vv in v])))
                row["median_aspc"] = float(np.median(aspcs))
                row["cohens_d"] = metrics.cohens_d(apcs["control"], apcs["patient"])
            except (NumericalError, InputError) as exc:
                row["status"] = f"error: {exc}".replace(",", ";")
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def write_grid(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("kappa0_ratio", "p0_ratio", "median_aspc", "cohens_d", "status"))
        for r in rows:
            w.writerow((repr(r["kappa0_ratio"]), repr(r["p0_ratio"]), repr(r["median_aspc"]),
                        repr(r["cohens_d"]), r["status"]))


def cmd_grid_search(args):
    opts = resolve(args, COMMON + GRID_OPTS)
    _setup(opts)
    if opts.subjects < 4:
        raise InputError("grid search needs at least 4 subjects (2 per group)")
    cohort = grid_cohort(opts.subjects, opts.dims, opts.structure, opts.rate, opts.spread,
                         opts.seed)
    atlas = phantom.default_atlas(opts.dims, opts.spacing)
    base = longit.LongConfig(
        kappa=opts.kappa, outer_iterations=opts.outer_iterations, inner_sweeps=opts.inner_sweeps,
        cross=xsect.FitConfig(max_outer_sweeps=opts.max_sweeps, bias_order=opts.bias_order,
                              seed=opts.seed),
    )

    def progress(row):
        logger.info("kappa0=%gK P0=%gN_k: median ASPC %.4f, d %.3f (%s)", row["kappa0_ratio"],
                    row["p0_ratio"], row["median_aspc"], row["cohens_d"], row["status"])

    rows = run_grid_search(cohort, atlas, opts.structure, base, progress=progress)
    write_grid(rows, os.path.join(opts.out_dir, "grid.csv"))
    return EXIT_OK


# --- phantom ---------------------------------------------------------------------------------------------


def _phantom_spec(opts, sid, rates, seed, scale=(1.0, 1.0, 1.0), shift=(0.0, 0.0, 0.0)):
    if opts.contrasts not in (1, 2):
        raise InputError("contrasts must be 1 or 2")
    lesions = None
    if opts.lesion_count > 0:
        offset = opts.lesion_offset
        if offset is None:
            offset = [0.0] * (opts.contrasts - 1) + [0.6]
        if len(offset) != opts.contrasts:
            raise InputError(f"lesion_offset needs {opts.contrasts} values")
        lesions = phantom.LesionSpec(count=opts.lesion_count, growth=opts.lesion_growth,
                                     offset=tuple(offset))
    unknown = set(rates) - set(phantom.DEFAULT_NAMES.values())
    if unknown:
        raise InputError(f"unknown structure(s) in rates: {sorted(unknown)}")
    return phantom.default_spec(dims=opts.dims, n_contrasts=opts.contrasts, times=opts.times,
                                rates=rates, noise=opts.noise, seed=seed, lesions=lesions,
                                pv_sigma=opts.pv_sigma, bias_jitter=opts.bias_jitter,
                                subject_id=sid, anatomy_scale=scale, anatomy_shift=shift)


def _write_phantom(out, directory):
    os.makedirs(directory, exist_ok=True)
    for t, (vol, lab) in enumerate(zip(out.volumes, out.labels)):
        volio.write_volume(vol, os.path.join(directory, f"t{t}.mgv"))
        volio.write_labels(lab, os.path.join(directory, f"t{t}_labels.mgv"))
        if out.lesions is not None:
            volio.write_mask(out.lesions[t], vol.grid, os.path.join(directory, f"t{t}_lesions.mgv"))
    volio.write_volume_table(out.table, os.path.join(directory, "truth.csv"))


def cmd_phantom(args):
    opts = resolve(args, COMMON + PHANTOM_OPTS)
    _setup(opts)
    atlas = phantom.default_atlas(opts.dims, opts.spacing)
    write_atlas(atlas, os.path.join(opts.out_dir, "atlas.txt"))
    if opts.cohort <= 0:
        spec = _phantom_spec(opts, opts.subject, opts.rates, opts.seed)
        _write_phantom(phantom.generate(spec), opts.out_dir)
        return EXIT_OK
    group_rates = opts.groups or {"subject": 0.0}
    groups = []
    for name, r in group_rates.items():
        rates = dict(opts.rates)
        if opts.groups:
            rates[opts.structure] = r
        groups.append(phantom.GroupSpec(name, rates, opts.spread))

    def make_spec(sid, rates, s, scale, shift):
        return _phantom_spec(opts, sid, rates, s, scale, shift)

    cohort = phantom.generate_cohort(opts.cohort, groups, opts.seed, make_spec=make_spec)
    table = []
    with open(os.path.join(opts.out_dir, "groups.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("subject", "group"))
        for sid, group, out in cohort:
            _write_phantom(out, os.path.join(opts.out_dir, sid))
            w.writerow((sid, group))
            table.extend(out.table)
    volio.write_volume_table(table, os.path.join(opts.out_dir, "truth.csv"))
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------------------------


COMMANDS = {
    "fit": (cmd_fit, FIT_OPTS, "cross-sectional fit of one volume"),
    "fit-long": (cmd_fit_long, LONG_OPTS, "longitudinal fit of several volumes"),
    "metrics": (cmd_metrics, METRIC_OPTS, "evaluation metrics from tables and masks"),
    "grid-search": (cmd_grid_search, GRID_OPTS, "kappa0 x P0 hyperparameter grid on a phantom cohort"),
    "phantom": (cmd_phantom, PHANTOM_OPTS, "write synthetic phantoms"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("-v", "--verbose", action="count", default=0)
    _add_options(common, COMMON)
    parser = argparse.ArgumentParser(prog="longseg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, options, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        _add_options(p, options)
        if name == "fit":
            p.add_argument("volume", nargs="?", help="input volume (MGV)")
        elif name == "fit-long":
            p.add_argument("volumes", nargs="*", help="input volumes (MGV), one per time point")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "volumes", None) == []:
        args.volumes = None
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        return func(args)
    except (InputError, StateError) as exc:
        print(f"longseg {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"longseg {args.command}: numerical failure: {exc}", file=sys.stderr)
        voxels = getattr(exc, "voxels", None)
        if voxels:
            shown = ", ".join(str(tuple(int(i) for i in v)) for v in voxels[:10])
            more = f" (+{len(voxels) - 10} more)" if len(voxels) > 10 else ""
            print(f"  offending voxels: {shown}{more}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"longseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
