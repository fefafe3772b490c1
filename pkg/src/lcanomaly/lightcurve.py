"""Light-curve parsing, folding, and training-manifest handling.

Input formats:

* light-curve file: whitespace- or comma-delimited rows of
  ``time magnitude error`` (MJD days, mag, mag); lines starting with ``#``
  are comments.
* manifest CSV with header ``id,path,label,ra_deg,dec_deg``. Extra columns
  are tolerated; an optional ``red_path`` column links the red-band curve
  of the same object (used for the color feature and per-band runs).

All parsing functions are pure; parsed objects are immutable in practice
(arrays are not written to after construction) and safe to share across
threads.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, IoError, MalformedInput

BANDS = ("blue", "red")


@dataclass
class LightCurve:
    """Irregularly sampled magnitude series with per-point errors.

    Invariants (enforced on construction): times strictly increasing,
    equal-length arrays of at least 2 samples, all errors > 0.
    """

    object_id: str
    band: str
    times: np.ndarray
    magnitudes: np.ndarray
    errors: np.ndarray
    ra: float = float("nan")
    dec: float = float("nan")
    dropped_rows: int = 0
    merged_duplicates: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.magnitudes = np.asarray(self.magnitudes, dtype=float)
        self.errors = np.asarray(self.errors, dtype=float)
        if self.band not in BANDS:
            raise InvalidArgument(f"unknown band {self.band!r}, expected one of {BANDS}")
        n = len(self.times)
        if not (len(self.magnitudes) == len(self.errors) == n):
            raise MalformedInput("times, magnitudes, errors must have equal length")
        if n < 2:
            raise MalformedInput(f"light curve needs at least 2 samples, got {n}")
        if np.any(np.diff(self.times) <= 0):
            raise MalformedInput("times must be strictly increasing")
        if np.any(self.errors <= 0):
            raise MalformedInput("all errors must be > 0")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def span(self) -> float:
        return float(self.times[-1] - self.times[0])


@dataclass
class FoldedLightCurve:
    """Phase-folded light curve; phases sorted ascending in [0, 1)."""

    phases: np.ndarray
    magnitudes: np.ndarray
    errors: np.ndarray
    period: float


def parse_lightcurve(
    text,
    band: str = "blue",
    object_id: str = "",
    ra: float = float("nan"),
    dec: float = float("nan"),
    duplicate_policy: str = "average",
) -> LightCurve:
    """Parse delimited (time, magnitude, error) rows into a LightCurve.

    ``text`` may be a string or a line iterable (open file). Rows with
    non-numeric or non-finite values are dropped and counted; rows are
    sorted by time. Duplicate epochs are inverse-variance averaged
    (``duplicate_policy="average"``, default) or rejected
    (``duplicate_policy="reject"``).

    Raises MalformedInput if fewer than 2 valid rows remain or any parsed
    error value is <= 0.
    """
    if duplicate_policy not in ("average", "reject"):
        raise InvalidArgument(f"unknown duplicate_policy {duplicate_policy!r}")
    lines = io.StringIO(text) if isinstance(text, str) else text

    times, mags, errs = [], [], []
    dropped = 0
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 3:
            dropped += 1
            continue
        try:
            t, m, e = float(parts[0]), float(parts[1]), float(parts[2])
        except ValueError:
            dropped += 1
            continue
        if not (np.isfinite(t) and np.isfinite(m) and np.isfinite(e)):
            dropped += 1
            continue
        if e <= 0:
            raise MalformedInput(
                f"non-positive error value {e} at time {t} in {object_id or '<stream>'}"
            )
        times.append(t)
        mags.append(m)
        errs.append(e)

    if len(times) < 2:
        raise MalformedInput(
            f"fewer than 2 valid rows in {object_id or '<stream>'} "
            f"({len(times)} valid, {dropped} dropped)"
        )

    t = np.array(times)
    m = np.array(mags)
    e = np.array(errs)
    order = np.argsort(t, kind="stable")
    t, m, e = t[order], m[order], e[order]

    merged = 0
    if np.any(np.diff(t) == 0):
        if duplicate_policy == "reject":
            raise MalformedInput(f"duplicate epochs in {object_id or '<stream>'}")
        t, m, e, merged = _merge_duplicate_epochs(t, m, e)

    return LightCurve(
        object_id=object_id, band=band, times=t, magnitudes=m, errors=e,
        ra=ra, dec=dec, dropped_rows=dropped, merged_duplicates=merged,
    )


def _merge_duplicate_epochs(t, m, e):
    """Inverse-variance average samples sharing an epoch."""
    uniq, inverse, counts = np.unique(t, return_inverse=True, return_counts=True)
    w = 1.0 / e**2
    wsum = np.bincount(inverse, weights=w)
    msum = np.bincount(inverse, weights=w * m)
    m_out = msum / wsum
    e_out = 1.0 / np.sqrt(wsum)
    merged = int(np.sum(counts - 1))
    return uniq, m_out, e_out, merged


def load_lightcurve(path, band: str = "blue", object_id: str = "",
                    ra: float = float("nan"), dec: float = float("nan"),
                    duplicate_policy: str = "average") -> LightCurve:
    """Parse a light-curve file; the curve is read streaming, line by line."""
    if not object_id:
        object_id = os.path.splitext(os.path.basename(str(path)))[0]
    try:
        with open(path) as fh:
            return parse_lightcurve(fh, band=band, object_id=object_id,
                                    ra=ra, dec=dec, duplicate_policy=duplicate_policy)
    except OSError as exc:
        raise IoError(f"cannot read light curve {path}: {exc}") from exc


def write_lightcurve(lc: LightCurve, path) -> None:
    """Persist a curve as '# time mag err' delimited text at full precision."""
    with open(path, "w") as fh:
        fh.write("# time mag err\n")
        for t, m, e in zip(lc.times, lc.magnitudes, lc.errors):
            fh.write(f"{float(t)!r} {float(m)!r} {float(e)!r}\n")


def fold(lc: LightCurve, period: float, t0: float | None = None) -> FoldedLightCurve:
    """Fold a curve at ``period``; phases in [0, 1), sorted ascending.

    ``t0`` defaults to the first observation epoch (the zero-point
    convention is a free choice; it only rotates the folded curve).
    """
    if period <= 0:
        raise InvalidArgument(f"period must be > 0, got {period}")
    if t0 is None:
        t0 = float(lc.times[0])
    phases = np.mod(lc.times - t0, period) / period
    # guard against phase == 1.0 from floating-point roundoff near the edge
    phases = np.where(phases >= 1.0, phases - 1.0, phases)
    order = np.argsort(phases, kind="stable")
    return FoldedLightCurve(
        phases=phases[order],
        magnitudes=lc.magnitudes[order],
        errors=lc.errors[order],
        period=float(period),
    )


MANIFEST_COLUMNS = ("id", "path", "label", "ra_deg", "dec_deg")


@dataclass
class ManifestEntry:
    object_id: str
    path: str
    label: str
    ra: float = float("nan")
    dec: float = float("nan")
    red_path: str = ""


@dataclass
class TrainingManifest:
    """Ordered labeled entries plus the class list (first-appearance order)."""

    entries: list[ManifestEntry]
    classes: list[str]
    path: str = ""
    class_counts: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path, require_labels: bool = True, min_classes: int = 2) -> TrainingManifest:
    """Load a manifest CSV and validate it.

    Checks every referenced file for existence up front (IoError names the
    offending entry). With ``require_labels`` the class column must be
    present and at least ``min_classes`` distinct classes must appear.
    Curves themselves are not loaded here; use :func:`iter_curves`.
    """
    base = os.path.dirname(os.path.abspath(str(path)))
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = MANIFEST_COLUMNS if require_labels else ("id", "path")
        missing = [c for c in required if c not in header]
        if missing:
            raise MalformedInput(f"manifest {path} missing column(s) {missing}; header={header}")

        entries = []
        classes: list[str] = []
        counts: dict[str, int] = {}
        for row in reader:
            label = (row.get("label") or "").strip()
            if require_labels and not label:
                raise MalformedInput(f"manifest {path}: empty label for id {row.get('id')!r}")
            entry = ManifestEntry(
                object_id=row["id"].strip(),
                path=_resolve(row["path"].strip(), base),
                label=label,
                ra=_parse_deg(row.get("ra_deg")),
                dec=_parse_deg(row.get("dec_deg")),
                red_path=_resolve((row.get("red_path") or "").strip(), base),
            )
            if not os.path.isfile(entry.path):
                raise IoError(f"manifest {path}: file not found for id {entry.object_id!r}: {entry.path}")
            if entry.red_path and not os.path.isfile(entry.red_path):
                raise IoError(f"manifest {path}: red-band file not found for id {entry.object_id!r}: {entry.red_path}")
            entries.append(entry)
            if label and label not in counts:
                classes.append(label)
            if label:
                counts[label] = counts.get(label, 0) + 1

    if not entries:
        raise MalformedInput(f"manifest {path} has no entries")
    if require_labels and len(classes) < min_classes:
        raise InvalidArgument(
            f"manifest {path} has {len(classes)} class(es); at least {min_classes} required"
        )
    return TrainingManifest(entries=entries, classes=classes, path=str(path), class_counts=counts)


def _resolve(p: str, base: str) -> str:
    if not p:
        return ""
    return p if os.path.isabs(p) else os.path.join(base, p)


def _parse_deg(value) -> float:
    if value is None or str(value).strip() == "":
        return float("nan")
    return float(value)


def iter_curves(manifest: TrainingManifest, band: str = "blue",
                duplicate_policy: str = "average"):
    """Yield (entry, blue curve, red curve or None), one object at a time.

    Memory stays bounded by a single curve; callers should not accumulate
    the curves themselves.
    """
    for entry in manifest.entries:
        lc = load_lightcurve(entry.path, band=band, object_id=entry.object_id,
                             ra=entry.ra, dec=entry.dec, duplicate_policy=duplicate_policy)
        red = None
        if entry.red_path:
            red = load_lightcurve(entry.red_path, band="red", object_id=entry.object_id,
                                  ra=entry.ra, dec=entry.dec, duplicate_policy=duplicate_policy)
        yield entry, lc, red
