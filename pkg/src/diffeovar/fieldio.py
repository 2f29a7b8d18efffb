"""File formats: PGM/PNG image ingestion, raw float32 fields with JSON
sidecars, and CSV helpers.

Images are normalized to [0, 1] on load.  Arrays on disk follow the image
convention (rows = y, columns = x, row 0 at the top); in memory fields are
indexed [x, y], so readers and writers transpose at the boundary.  Raw
field files are little-endian float32 in C order of the on-disk layout,
with the grid geometry carried by a ``.json`` sidecar next to the data.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .grid import GridSpec, ScalarField, VectorField

SIDECAR_SUFFIX = ".json"


def _to_disk_layout(values: np.ndarray) -> np.ndarray:
    # [x, y] with y up -> rows top-to-bottom
    return values.T[::-1]


def _from_disk_layout(rows: np.ndarray) -> np.ndarray:
    return rows[::-1].T


# ---------------------------------------------------------------------------
# PGM / PNG images
# ---------------------------------------------------------------------------


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) PGM with 8- or 16-bit depth, normalized to [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval <= 0 or maxval >= 65536:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    count = width * height
    if maxval < 256:
        raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos)
    else:
        raw = np.frombuffer(data, dtype=">u2", count=count, offset=pos)
    rows = raw.reshape(height, width).astype(np.float64) / maxval
    return _from_disk_layout(rows)


def write_pgm(path: str | Path, values: np.ndarray, maxval: int = 255) -> None:
    """Write values in [0, 1] as a binary PGM."""
    rows = np.clip(_to_disk_layout(np.asarray(values)), 0.0, 1.0)
    quant = np.round(rows * maxval).astype(">u2" if maxval >= 256 else np.uint8)
    header = f"P5\n{rows.shape[1]} {rows.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + quant.tobytes())


def read_png(path: str | Path) -> np.ndarray:
    """Read a grayscale PNG (8- or 16-bit), normalized to [0, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        if img.mode not in ("L", "I;16", "I;16B", "I"):
            img = img.convert("L")
        arr = np.asarray(img, dtype=np.float64)
    peak = 65535.0 if arr.max() > 255 else 255.0
    return _from_disk_layout(arr / peak)


def write_png(path: str | Path, values: np.ndarray) -> None:
    from PIL import Image

    rows = np.clip(_to_disk_layout(np.asarray(values)), 0.0, 1.0)
    Image.fromarray(np.round(rows * 255).astype(np.uint8), mode="L").save(path)


def load_image(path: str | Path, spacing: float = 0.125) -> ScalarField:
    """Load a PGM or PNG image as a scalar field with the given spacing."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        values = read_pgm(path)
    elif path.suffix.lower() == ".png":
        values = read_png(path)
    else:
        raise ValueError(f"unsupported image format: {path.suffix}")
    nx, ny = values.shape
    return ScalarField(GridSpec(nx, ny, dx=spacing, dy=spacing), values)


# ---------------------------------------------------------------------------
# Raw float32 fields with JSON sidecars
# ---------------------------------------------------------------------------


def _sidecar(spec: GridSpec, components: int) -> dict:
    return {
        "nx": spec.nx,
        "ny": spec.ny,
        "dx": spec.dx,
        "dy": spec.dy,
        "origin": list(spec.origin),
        "dtype": "float32",
        "byteorder": "little",
        "components": components,
        "layout": "rows are y (top row = max y), columns are x; component-major",
    }


def write_field(path: str | Path, field: ScalarField | VectorField) -> None:
    """Write a field as raw little-endian float32 plus a JSON sidecar."""
    path = Path(path)
    if isinstance(field, ScalarField):
        planes = [field.values]
    else:
        planes = [field.x, field.y]
    blob = b"".join(
        _to_disk_layout(p).astype("<f4").tobytes() for p in planes
    )
    path.write_bytes(blob)
    meta = _sidecar(field.spec, len(planes))
    path.with_suffix(path.suffix + SIDECAR_SUFFIX).write_text(
        json.dumps(meta, indent=1, sort_keys=True)
    )


def read_field(path: str | Path) -> ScalarField | VectorField:
    """Read a raw float32 field using its JSON sidecar."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + SIDECAR_SUFFIX).read_text())
    spec = GridSpec(
        meta["nx"], meta["ny"], dx=meta["dx"], dy=meta["dy"],
        origin=tuple(meta["origin"]),
    )
    raw = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    n = spec.nx * spec.ny
    comps = meta["components"]
    if raw.size != n * comps:
        raise ValueError(f"{path}: expected {n * comps} values, found {raw.size}")
    planes = [
        _from_disk_layout(raw[k * n : (k + 1) * n].reshape(spec.ny, spec.nx))
        for k in range(comps)
    ]
    if comps == 1:
        return ScalarField(spec, planes[0])
    if comps == 2:
        return VectorField(spec, planes[0], planes[1])
    raise ValueError(f"{path}: unsupported component count {comps}")


# ---------------------------------------------------------------------------
# CSV helpers (deterministic formatting)
# ---------------------------------------------------------------------------


def format_float(x: float) -> str:
    return format(float(x), ".10g")


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    """UTF-8 comma-separated file with a header row and stable float text."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [format_float(v) if isinstance(v, float) else v for v in row]
            )


def write_energy_trace(path: str | Path, trace) -> None:
    """Energy trace rows (iteration, kinetic, data, total)."""
    rows = [
        [i, float(k), float(d), float(tot)] for i, (k, d, tot) in enumerate(trace)
    ]
    write_csv(path, ["iteration", "kinetic", "data", "total"], rows)


def write_heatmap_png(path: str | Path, field: ScalarField, title: str | None = None,
                      vmax: float | None = None) -> None:
    """8-bit heatmap rendering of a scalar field."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.2, 4.0), dpi=120)
    im = ax.imshow(field.values.T, origin="lower", cmap="viridis", vmax=vmax)
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)