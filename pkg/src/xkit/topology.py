"""Excursion-set topology on lattices: masks, Euler characteristics, EC curves.

An excursion mask is interpreted as a closed cubical complex: a k-face of
the grid belongs to the set exactly when all ``2^k`` of its corner sites do.
The Euler characteristic is then the alternating sum of face counts

    ``chi = N_0 - N_1 + N_2 - N_3``

with the sign convention anchored so that a single occupied site counts +1.
Face counting is done with shifted boolean (or running-minimum) array
reductions, never by materialising face lists, so memory stays proportional
to the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from xkit.fields import LatticeField
from xkit.geometry import LKCVector

__all__ = [
    "ECCurve",
    "CurveFormatError",
    "excursion_mask",
    "face_counts",
    "euler_characteristic",
    "ec_curve",
    "geometric_measures",
    "ec_csv_text",
    "write_ec_csv",
    "read_ec_csv",
]

_MAX_DIM = 3


class CurveFormatError(ValueError):
    """An EC-curve file does not conform to the CSV schema."""


def excursion_mask(field: LatticeField, u: float) -> np.ndarray:
    """Boolean mask of the excursion set ``{x : f(x) >= u}`` on the grid."""
    if not math.isfinite(u):
        raise ValueError(f"threshold must be finite, got {u}")
    return field.values >= u


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise ValueError(f"mask must be boolean, got dtype {mask.dtype}")
    if not 1 <= mask.ndim <= _MAX_DIM:
        raise ValueError(
            f"unsupported dimension {mask.ndim}: Euler characteristics are "
            f"implemented for 1 to {_MAX_DIM} dimensions"
        )
    return mask


def _reduce_along(arr: np.ndarray, axis: int, op) -> np.ndarray:
    lead = (slice(None),) * axis
    return op(arr[lead + (slice(0, -1),)], arr[lead + (slice(1, None),)])


def face_counts(mask: np.ndarray) -> np.ndarray:
    """Counts ``(N_0, ..., N_dim)`` of k-faces present in the closed complex.

    A k-face spanning axis subset ``S`` is present when the boolean AND over
    its corners is true; subsets are enumerated by bitmask and reuse the
    reduction of their largest proper prefix.
    """
    mask = _check_mask(mask)
    dim = mask.ndim
    counts = np.zeros(dim + 1, dtype=np.int64)
    reduced = {0: mask}
    counts[0] = int(mask.sum())
    for bits in range(1, 1 << dim):
        low = bits & -bits
        axis = low.bit_length() - 1
        arr = _reduce_along(reduced[bits ^ low], axis, np.logical_and)
        reduced[bits] = arr
        counts[bits.bit_count()] += int(arr.sum())
    return counts


def euler_characteristic(mask: np.ndarray) -> int:
    """Euler characteristic of the excursion mask's closed cubical complex."""
    counts = face_counts(mask)
    signs = (-1) ** np.arange(counts.size)
    return int(np.dot(signs, counts))


@dataclass(frozen=True)
class ECCurve:
    """Euler characteristic as a function of the excursion level.

    ``kind`` distinguishes lattice measurements ("empirical") from
    closed-form or simulation-averaged expectations ("expected").  ``meta``
    carries the parameter provenance (model, grid, seed, ...) as strings and
    is embedded in the CSV serialisation.
    """

    levels: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    kind: str = "empirical"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if levels.ndim != 1 or levels.size == 0:
            raise ValueError("levels must be a non-empty 1-d array")
        if values.shape != levels.shape:
            raise ValueError("levels and values must have matching shapes")
        if not np.all(np.isfinite(levels)) or not np.all(np.isfinite(values)):
            raise ValueError("levels and values must be finite")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("levels must be strictly increasing")
        if self.kind not in ("empirical", "expected"):
            raise ValueError(f"kind must be 'empirical' or 'expected', got {self.kind!r}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "values", values)
        object.__setattr__(
            self, "meta", {str(k): str(v) for k, v in dict(self.meta).items()}
        )

    def __len__(self):
        return self.levels.size

    def __repr__(self):
        return (
            f"ECCurve(kind={self.kind!r}, n={len(self)}, "
            f"levels=[{self.levels[0]:g}..{self.levels[-1]:g}])"
        )


def ec_curve(field: LatticeField, levels: np.ndarray, meta: dict | None = None) -> ECCurve:
    """Empirical EC curve of a lattice field over strictly increasing levels.

    Rather than rebuilding a mask per level, each face's appearance level
    (the minimum of its corner values) is computed once per axis subset;
    the count of faces present at level ``u`` is then a sorted-array lookup,
    making the whole curve barely more expensive than a single level.
    """
    levels = np.asarray(levels, dtype=float)
    if levels.ndim != 1 or levels.size == 0:
        raise ValueError("levels must be a non-empty 1-d array")
    if np.any(np.diff(levels) <= 0):
        raise ValueError("levels must be strictly increasing")
    values = field.values
    if not 1 <= values.ndim <= _MAX_DIM:
        raise ValueError(f"unsupported dimension {values.ndim}")
    chi = np.zeros(levels.size, dtype=np.int64)
    minima = {0: values}
    for bits in range(1 << values.ndim):
        if bits:
            low = bits & -bits
            axis = low.bit_length() - 1
            minima[bits] = _reduce_along(minima[bits ^ low], axis, np.minimum)
        flat = np.sort(minima[bits], axis=None)
        # number of faces with corner-minimum >= u
        present = flat.size - np.searchsorted(flat, levels, side="left")
        chi += (-1) ** bits.bit_count() * present
    base_meta = {"shape": "x".join(str(n) for n in field.shape), "spacing": repr(field.spacing)}
    if meta:
        base_meta.update(meta)
    return ECCurve(levels=levels, values=chi.astype(float), kind="empirical", meta=base_meta)


def geometric_measures(mask: np.ndarray, spacing: float) -> LKCVector:
    """Top two lattice Lipschitz-Killing estimates of an excursion mask.

    ``L_N`` is the volume of the fully occupied N-cells; ``L_(N-1)`` is half
    the (N-1)-measure of the boundary faces, i.e. faces of occupied N-cells
    shared with exactly one occupied N-cell.  Orders below ``N - 1`` are not
    measurable this way and are returned as NaN.
    """
    mask = _check_mask(mask)
    if not (math.isfinite(spacing) and spacing > 0):
        raise ValueError(f"spacing must be positive, got {spacing}")
    dim = mask.ndim
    cells = mask
    for axis in range(dim):
        cells = _reduce_along(cells, axis, np.logical_and)
    n_cells = int(cells.sum())
    boundary = 0
    for axis in range(dim):
        padded = np.concatenate(
            [
                np.zeros_like(np.take(cells, [0], axis=axis)),
                cells,
                np.zeros_like(np.take(cells, [0], axis=axis)),
            ],
            axis=axis,
        )
        boundary += int(_reduce_along(padded, axis, np.logical_xor).sum())
    out = np.full(dim + 1, np.nan)
    out[dim] = spacing ** dim * n_cells
    out[dim - 1] = 0.5 * spacing ** (dim - 1) * boundary
    return LKCVector(out)


# ---------------------------------------------------------------------------
# CSV serialisation
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def ec_csv_text(curve: ECCurve) -> str:
    """The CSV serialisation of a curve as a string.

    Deterministic (sorted metadata, 17-significant-digit floats), so
    identical curves serialise to identical bytes.
    """
    lines = [f"# {k}={v}" for k, v in sorted(curve.meta.items())]
    lines.append("u,ec,kind")
    for u, v in zip(curve.levels, curve.values):
        lines.append(f"{_fmt(u)},{_fmt(v)},{curve.kind}")
    return "\n".join(lines) + "\n"


def write_ec_csv(curve: ECCurve, path) -> None:
    """Write an EC curve as CSV with `# key=value` metadata comments."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ec_csv_text(curve))


def read_ec_csv(path) -> ECCurve:
    """Read an EC curve written by :func:`write_ec_csv`."""
    meta: dict[str, str] = {}
    rows: list[tuple[float, float, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            text = ln[1:].strip()
            if "=" in text:
                key, _, value = text.partition("=")
                meta[key.strip()] = value
        elif ln.strip():
            body.append(ln)
    if not body or body[0].strip() != "u,ec,kind":
        raise CurveFormatError(f"{path}: missing 'u,ec,kind' header")
    for ln in body[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise CurveFormatError(f"{path}: malformed row {ln!r}")
        try:
            rows.append((float(parts[0]), float(parts[1]), parts[2].strip()))
        except ValueError as exc:
            raise CurveFormatError(f"{path}: non-numeric row {ln!r}") from exc
    if not rows:
        raise CurveFormatError(f"{path}: no data rows")
    kinds = {r[2] for r in rows}
    if len(kinds) != 1:
        raise CurveFormatError(f"{path}: mixed curve kinds {sorted(kinds)}")
    try:
        return ECCurve(
            levels=np.array([r[0] for r in rows]),
            values=np.array([r[1] for r in rows]),
            kind=rows[0][2],
            meta=meta,
        )
    except ValueError as exc:
        raise CurveFormatError(f"{path}: {exc}") from exc
