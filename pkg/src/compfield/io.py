"""Data ingestion, grid alignment, run persistence, and map rasterization.

File conventions are deliberately plain: delimited text tables (tab or
comma), binary PPM (P6) rasters, key-value metrics, JSON manifests, and a
small binary checkpoint container with explicit little-endian float64
payloads. All writers are deterministic: identical inputs give
byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .model import ObservationSet

__all__ = [
    "LatticeGrid",
    "GridTable",
    "read_grid_table",
    "write_grid_table",
    "read_observations",
    "upscale",
    "cell_area",
    "write_checkpoint",
    "read_checkpoint",
    "render_ternary_map",
    "render_grayscale_map",
    "write_metrics",
    "write_manifest",
    "sha256_file",
    "output_lock",
    "write_outputs",
]

#: zero-replacement threshold for observed compositions
DEFAULT_EPS = 1e-4

_CHECKPOINT_MAGIC = b"CFCK0001"
_LATTICE_TOL = 1e-6


@dataclass
class LatticeGrid:
    """Regular lon/lat lattice carrying covariates and an observation mask.

    Cells are row-major (row = latitude index from south to north,
    col = longitude index from west to east); cell centers are
    (lon0 + col * resolution, lat0 + row * resolution).
    """

    n_rows: int
    n_cols: int
    lon0: float
    lat0: float
    resolution: float
    observed_mask: np.ndarray = None
    covariates: dict = field(default_factory=dict)
    category_names: tuple = ("cat1", "cat2", "cat3")

    def __post_init__(self):
        if self.observed_mask is None:
            self.observed_mask = np.zeros(self.n_cells, dtype=bool)

    @property
    def n_cells(self):
        return self.n_rows * self.n_cols

    def lons(self):
        return self.lon0 + (np.arange(self.n_cells) % self.n_cols) * self.resolution

    def lats(self):
        return self.lat0 + (np.arange(self.n_cells) // self.n_cols) * self.resolution

    def cell_index(self, lon, lat):
        """Row-major index of the cell whose center is (lon, lat)."""
        col = (np.asarray(lon) - self.lon0) / self.resolution
        row = (np.asarray(lat) - self.lat0) / self.resolution
        coli = np.rint(col).astype(int)
        rowi = np.rint(row).astype(int)
        off = (np.abs(col - coli) > _LATTICE_TOL) | (np.abs(row - rowi) > _LATTICE_TOL)
        if np.any(off) or np.any((coli < 0) | (coli >= self.n_cols)) or np.any(
            (rowi < 0) | (rowi >= self.n_rows)
        ):
            raise DataError("coordinates do not lie on the lattice")
        return rowi * self.n_cols + coli


@dataclass
class GridTable:
    """Rows of (cell_id, lon, lat, value columns) at a declared resolution."""

    cell_ids: list
    lon: np.ndarray
    lat: np.ndarray
    columns: dict
    resolution: float = None


def _sniff_delimiter(line):
    return "," if "," in line else None  # None => any whitespace


def _split(line, delim):
    return [f.strip() for f in line.split(delim)] if delim else line.split()


def read_grid_table(path):
    """Parse a delimited table with header cell_id, lon, lat, values...

    A leading comment line ``# resolution: X`` declares the resolution;
    otherwise it is inferred from the coordinate spacing. Raises DataError
    with line numbers for malformed content.
    """
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    resolution = None
    header = None
    rows = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s.lstrip("#").strip()
            if body.lower().startswith("resolution:"):
                try:
                    resolution = float(body.split(":", 1)[1])
                except ValueError as exc:
                    raise DataError(f"line {lineno}: bad resolution declaration") from exc
            continue
        if header is None:
            header = _split(s, _sniff_delimiter(s))
            if len(header) < 4 or [h.lower() for h in header[:3]] != ["cell_id", "lon", "lat"]:
                raise DataError(
                    f"line {lineno}: header must start with 'cell_id lon lat' "
                    f"followed by value columns, got {header!r}"
                )
            delim = _sniff_delimiter(s)
            continue
        fields = _split(s, delim)
        if len(fields) != len(header):
            raise DataError(
                f"line {lineno}: expected {len(header)} fields, got {len(fields)}"
            )
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise DataError(f"line {lineno}: non-numeric value ({exc})") from exc
        if not all(np.isfinite(v) for v in values[:2]):
            raise DataError(f"line {lineno}: non-finite coordinates")
        rows.append((fields[0], values))
    if header is None or not rows:
        raise DataError(f"{path}: no data rows")
    cell_ids = [r[0] for r in rows]
    if len(set(cell_ids)) != len(cell_ids):
        seen = set()
        dup = next(c for c in cell_ids if c in seen or seen.add(c))
        raise DataError(f"{path}: duplicate cell_id {dup!r}")
    data = np.array([r[1] for r in rows], dtype=float)
    columns = {name: data[:, i + 2] for i, name in enumerate(header[3:])}
    return GridTable(
        cell_ids=cell_ids,
        lon=data[:, 0],
        lat=data[:, 1],
        columns=columns,
        resolution=resolution,
    )


def write_grid_table(table, path, float_format="%.12g"):
    """Write a GridTable as tab-separated text (deterministic)."""
    path = Path(path)
    names = list(table.columns)
    lines = []
    if table.resolution is not None:
        lines.append(f"# resolution: {float_format % table.resolution}")
    lines.append("\t".join(["cell_id", "lon", "lat"] + names))
    cols = [np.asarray(table.columns[n], dtype=float) for n in names]
    for i, cid in enumerate(table.cell_ids):
        vals = [float_format % table.lon[i], float_format % table.lat[i]]
        vals += [float_format % c[i] for c in cols]
        lines.append("\t".join([str(cid)] + vals))
    path.write_text("\n".join(lines) + "\n")


def _infer_resolution(coords):
    u = np.unique(coords)
    if u.size < 2:
        return 1.0
    d = np.diff(u)
    return float(d.min())


def _snap_to_lattice(coords, origin, resolution, what):
    idx = (coords - origin) / resolution
    snapped = np.rint(idx)
    if np.any(np.abs(idx - snapped) > _LATTICE_TOL):
        bad = int(np.argmax(np.abs(idx - snapped)))
        raise DataError(
            f"{what} coordinate {coords[bad]} is off the {resolution} degree lattice"
        )
    return snapped.astype(int)


def read_observations(path, eps=DEFAULT_EPS, resolution=None):
    """Read observed compositions and infer the bounding lattice.

    Composition rows must sum to 1 within 1e-9 (accepted as-is), or lie in
    [0.99, 1.01] (renormalized); anything else is rejected with its line
    number. Components below ``eps`` are raised to ``eps`` and the row
    renormalized, so downstream log-ratio transforms stay finite.

    Returns (ObservationSet, LatticeGrid).
    """
    table = read_grid_table(path)
    names = list(table.columns)
    if len(names) < 2:
        raise DataError(f"{path}: need at least two composition columns")
    y = np.column_stack([table.columns[n] for n in names])
    if np.any(~np.isfinite(y)):
        raise DataError(f"{path}: non-finite composition values")
    if np.any(y < 0):
        bad = int(np.argmax(np.any(y < 0, axis=1)))
        raise DataError(f"row for cell {table.cell_ids[bad]}: negative proportion")
    sums = y.sum(axis=1)
    ok = np.abs(sums - 1.0) <= 1e-9
    renorm = (~ok) & (sums >= 0.99) & (sums <= 1.01)
    bad = ~(ok | renorm)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DataError(
            f"row for cell {table.cell_ids[i]}: proportions sum to {sums[i]:.6g}, "
            "outside the [0.99, 1.01] renormalization band"
        )
    y[renorm] /= sums[renorm, None]
    # zero replacement, then renormalize
    low = y < eps
    if np.any(low):
        y = np.where(low, eps, y)
        y /= y.sum(axis=1, keepdims=True)

    res = resolution if resolution is not None else (
        table.resolution if table.resolution is not None
        else min(_infer_resolution(table.lon), _infer_resolution(table.lat))
    )
    lon0, lat0 = float(table.lon.min()), float(table.lat.min())
    cols = _snap_to_lattice(table.lon, lon0, res, "longitude")
    rows = _snap_to_lattice(table.lat, lat0, res, "latitude")
    n_cols = int(cols.max()) + 1
    n_rows = int(rows.max()) + 1
    cells = rows * n_cols + cols
    if np.unique(cells).size != cells.size:
        dup = int(np.argmax(np.bincount(cells) > 1))
        raise DataError(f"duplicate observations at lattice cell {dup}")
    if len(set(table.cell_ids)) != len(table.cell_ids):
        raise DataError("duplicate cell_id values")
    order = np.argsort(cells)
    grid = LatticeGrid(
        n_rows=n_rows,
        n_cols=n_cols,
        lon0=lon0,
        lat0=lat0,
        resolution=float(res),
        category_names=tuple(names),
    )
    grid.observed_mask[cells] = True
    return ObservationSet(cells[order], y[order]), grid


def cell_area(lat, resolution):
    """Relative plate-carree cell area at latitude lat (degrees)."""
    return np.cos(np.deg2rad(np.asarray(lat, dtype=float))) * resolution**2


def upscale(fine, target_resolution, composition_groups=()):
    """Aggregate a fine GridTable to a coarser resolution.

    Values are area-weighted means of the child cells (plate-carree
    weights); columns named in ``composition_groups`` are renormalized to
    unit sum after averaging. Cells whose children are more than half
    missing (by area) become missing (NaN). The target resolution must be
    an integer multiple of the source resolution.
    """
    res = fine.resolution
    if res is None:
        res = min(_infer_resolution(fine.lon), _infer_resolution(fine.lat))
    ratio = target_resolution / res
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise DataError(
            f"target resolution {target_resolution} is not an integer multiple "
            f"of the source resolution {res}"
        )
    # child cell edges start half a cell below the minimum center
    lon_edge = fine.lon.min() - res / 2.0
    lat_edge = fine.lat.min() - res / 2.0
    ci = np.floor((fine.lon - lon_edge) / target_resolution).astype(int)
    ri = np.floor((fine.lat - lat_edge) / target_resolution).astype(int)
    n_ci = ci.max() + 1
    key = ri * n_ci + ci
    w = cell_area(fine.lat, res)

    names = list(fine.columns)
    uniq, inv = np.unique(key, return_inverse=True)
    m = uniq.size
    total_w = np.bincount(inv, weights=w, minlength=m)
    out_cols = {}
    for name in names:
        v = np.asarray(fine.columns[name], dtype=float)
        good = np.isfinite(v)
        wsum = np.bincount(inv[good], weights=w[good], minlength=m)
        vsum = np.bincount(inv[good], weights=(w * np.where(good, v, 0.0))[good], minlength=m)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = vsum / wsum
        mean[wsum < 0.5 * total_w] = np.nan
        out_cols[name] = mean
    for group in composition_groups:
        block = np.column_stack([out_cols[g] for g in group])
        s = block.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            block = block / s
        for j, g in enumerate(group):
            out_cols[g] = block[:, j]
    lon_out = lon_edge + (uniq % n_ci + 0.5) * target_resolution
    lat_out = lat_edge + (uniq // n_ci + 0.5) * target_resolution
    return GridTable(
        cell_ids=[str(int(k)) for k in uniq],
        lon=lon_out,
        lat=lat_out,
        columns=out_cols,
        resolution=float(target_resolution),
    )


# ------------------------------------------------------------------ checkpoint


def write_checkpoint(path, meta, arrays):
    """Binary checkpoint: magic, JSON metadata, little-endian f8 payloads."""
    index = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr.tobytes())  # C order, little-endian float64
    blob = json.dumps({"meta": meta, "index": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def read_checkpoint(path):
    """Inverse of write_checkpoint; returns (meta, arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise DataError(
                f"checkpoint version mismatch: expected {_CHECKPOINT_MAGIC!r}, got {magic!r}"
            )
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        head = json.loads(fh.read(blob_len).decode())
        payload = fh.read()
    arrays = {}
    for entry in head["index"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arrays[entry["name"]] = np.frombuffer(
            payload, dtype="<f8", count=count, offset=off
        ).reshape(shape).copy()
    return head["meta"], arrays


# ------------------------------------------------------------------ rasters


def _to_image(cell_values, n_rows, n_cols, block):
    """Expand per-cell RGB rows (n, 3) into a north-up pixel image."""
    img = cell_values.reshape(n_rows, n_cols, 3)[::-1]  # row 0 = northernmost
    return np.repeat(np.repeat(img, block, axis=0), block, axis=1)


def _write_ppm(img, path):
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.astype(np.uint8).tobytes())


def render_ternary_map(zmap, n_rows, n_cols, path, block=8, mask=None):
    """Write a binary PPM of a composition map.

    Colors blend the barycentric corners: category 1 pure red, category 2
    pure green, category 3 pure blue; missing or masked cells are white.
    """
    zmap = np.asarray(zmap, dtype=float)
    if zmap.shape != (n_rows * n_cols, 3):
        raise ValueError("zmap must be (n_rows * n_cols, 3)")
    corners = np.eye(3) * 255.0
    rgb = np.rint(zmap @ corners)
    missing = ~np.all(np.isfinite(zmap), axis=1)
    if mask is not None:
        missing |= ~np.asarray(mask, dtype=bool)
    rgb[missing] = 255.0
    _write_ppm(_to_image(np.clip(rgb, 0, 255), n_rows, n_cols, block), path)


def render_grayscale_map(values, n_rows, n_cols, path, vmax=None, block=8, mask=None):
    """Write a grayscale PPM of a per-cell scalar (0 = black at value 0)."""
    v = np.asarray(values, dtype=float)
    if vmax is None:
        finite = v[np.isfinite(v)]
        vmax = float(finite.max()) if finite.size else 1.0
    if not np.isfinite(vmax) or vmax <= 0:
        vmax = 1.0
    with np.errstate(invalid="ignore"):
        g = np.rint(np.clip(v / vmax, 0.0, 1.0) * 255.0)
    g[~np.isfinite(g)] = 255.0
    rgb = np.repeat(g[:, None], 3, axis=1)
    missing = ~np.isfinite(v)
    if mask is not None:
        missing |= ~np.asarray(mask, dtype=bool)
    rgb[missing] = 255.0
    _write_ppm(_to_image(rgb, n_rows, n_cols, block), path)


# ------------------------------------------------------------------ run output


def write_metrics(path, mapping):
    """Key-value metrics, one 'key: value' per line, keys sorted."""
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, float):
            value = "%.10g" % value
        lines.append(f"{key}: {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(command, config_text, input_paths, seeds, timings=None):
    """Assemble the run manifest. The digest covers configuration and input
    bytes, so it changes iff any input byte changes. Timing is recorded
    separately and excluded from the digest."""
    from . import __version__

    inputs = {str(k): sha256_file(v) for k, v in sorted(input_paths.items())}
    digest_src = json.dumps(
        {"command": command, "config": config_text, "inputs": inputs, "seeds": seeds},
        sort_keys=True,
    ).encode()
    return {
        "command": command,
        "config_digest": hashlib.sha256(config_text.encode()).hexdigest(),
        "digest": hashlib.sha256(digest_src).hexdigest(),
        "inputs": inputs,
        "seeds": seeds,
        "version": __version__,
        "timings": timings or {},
    }


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@contextmanager
def output_lock(out_dir):
    """Exclusive writer lock for an output directory (lock file)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".compfield.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(
            f"output directory {out_dir} is locked by another writer "
            f"(remove {lock} if stale)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def composition_table(grid, zmap, category_names=None):
    """GridTable over all lattice cells for a composition map."""
    names = list(category_names or grid.category_names)
    zmap = np.asarray(zmap, dtype=float)
    return GridTable(
        cell_ids=[str(i) for i in range(grid.n_cells)],
        lon=grid.lons(),
        lat=grid.lats(),
        columns={n: zmap[:, j] for j, n in enumerate(names)},
        resolution=grid.resolution,
    )


def write_traces(summary, path):
    """Per-iteration scalar traces as tab-separated text."""
    tr = summary.traces
    n = tr["alpha"].size
    q = tr["sigma"].shape[1]
    p = tr["beta"].shape[1]
    cols = ["iteration", "phase", "loglik", "logpost", "alpha", "kappa"]
    cols += [f"sigma_{i + 1}{j + 1}" for i in range(q) for j in range(i, q)]
    cols += [f"beta_{name}_{f + 1}" for name in summary.column_names for f in range(q)]
    burn = summary.config.burn_in
    lines = ["\t".join(cols)]
    for i in range(n):
        row = [str(i), "burnin" if i < burn else "sampling"]
        row += ["%.10g" % tr[k][i] for k in ("loglik", "logpost", "alpha", "kappa")]
        row += ["%.10g" % tr["sigma"][i, a, b] for a in range(q) for b in range(a, q)]
        row += ["%.10g" % tr["beta"][i, j, f] for j in range(p) for f in range(q)]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_outputs(summary, grid, out_dir, metrics=None, manifest=None):
    """Write the standard fit artifacts into out_dir.

    Emits reconstruction.tsv (GridTable schema over all cells), traces.tsv,
    metrics.txt, and manifest.json when provided. Rasters, figures, and
    checkpoints are written by their own helpers.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_grid_table(composition_table(grid, summary.z_mean), out_dir / "reconstruction.tsv")
    write_traces(summary, out_dir / "traces.tsv")
    if metrics is not None:
        write_metrics(out_dir / "metrics.txt", metrics)
    if manifest is not None:
        write_manifest(out_dir / "manifest.json", manifest)
