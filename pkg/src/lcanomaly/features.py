"""Variability features for light curves.

Each curve is summarized by a fixed-order 13-dimensional descriptor
(:data:`FEATURE_NAMES`). Features that cannot be computed for a given
curve (too few points, constant magnitudes, missing red band) are flagged
invalid in a per-feature mask rather than silently zeroed; the batch
extractor fills them with per-feature training medians.

The period feature comes from a generalized (floating-mean, weighted)
least-squares periodogram computed directly on the irregular sampling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, MalformedInput
from .lightcurve import LightCurve, TrainingManifest, iter_curves

FEATURE_NAMES = (
    "period",
    "amplitude",
    "color",
    "std",
    "skewness",
    "small_kurtosis",
    "stetson_k",
    "autocorrelation_length",
    "beyond1std",
    "max_slope",
    "linear_trend_slope",
    "pair_slope_trend",
    "flux_percentile_ratio_mid50",
)
N_FEATURES = len(FEATURE_NAMES)

ACF_THRESHOLD = 1.0 / np.e
PAIR_SLOPE_WINDOW = 30
MIN_PERIOD_POINTS = 10


@dataclass
class FeatureVector:
    """13 ordered feature values with a per-feature validity mask."""

    object_id: str
    values: np.ndarray  # shape (13,), float; masked entries are NaN
    mask: np.ndarray    # shape (13,), bool; True = valid
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != (N_FEATURES,) or self.mask.shape != (N_FEATURES,):
            raise InvalidArgument(
                f"feature vector must have exactly {N_FEATURES} entries"
            )

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_NAMES.index(name)])

    def is_valid(self, name: str) -> bool:
        return bool(self.mask[FEATURE_NAMES.index(name)])

    @property
    def mask_bits(self) -> int:
        """Bitmask form of the validity mask; bit i (LSB = feature 1) set = valid."""
        return int(np.sum(self.mask * (1 << np.arange(N_FEATURES))))


@dataclass
class Periodogram:
    frequencies: np.ndarray  # cycles/day, strictly increasing
    powers: np.ndarray       # normalized to [0, 1]
    best_period: float       # days
    best_power: float


def lomb_scargle(
    lc: LightCurve,
    f_min: float | None = None,
    f_max: float = 10.0,
    oversample: int = 5,
    frequencies: np.ndarray | None = None,
    chunk: int = 2048,
) -> Periodogram:
    """Generalized least-squares periodogram of an irregular series.

    Floating-mean, inverse-variance-weighted formulation; power is
    normalized to [0, 1]. The default grid spans [1/span, ``f_max``]
    cycles/day at spacing 1/(oversample * span). A constant curve yields
    zero power everywhere. Frequencies are processed in chunks so memory
    stays O(n + chunk).
    """
    if len(lc) < MIN_PERIOD_POINTS:
        raise InvalidArgument(
            f"periodogram needs >= {MIN_PERIOD_POINTS} points, got {len(lc)}"
        )
    if frequencies is None:
        span = lc.span
        if f_min is None:
            f_min = 1.0 / span
        if not (0 < f_min < f_max):
            raise InvalidArgument(f"degenerate frequency grid [{f_min}, {f_max}]")
        df = 1.0 / (oversample * span)
        frequencies = np.arange(f_min, f_max, df)
    else:
        frequencies = np.asarray(frequencies, dtype=float)
    if len(frequencies) < 2 or np.any(np.diff(frequencies) <= 0) or frequencies[0] <= 0:
        raise InvalidArgument("frequency grid must be strictly increasing and positive")

    t = lc.times - lc.times[0]
    y = lc.magnitudes
    w = 1.0 / lc.errors**2
    w = w / np.sum(w)

    ybar = np.dot(w, y)
    dy = y - ybar
    YY = np.dot(w, dy * dy)
    # variance below roundoff scale of the magnitudes = constant curve
    yy_floor = (100 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(y))))) ** 2

    powers = np.empty(len(frequencies))
    if YY <= yy_floor:
        powers.fill(0.0)  # constant curve: no variance to explain
    else:
        for lo in range(0, len(frequencies), chunk):
            f = frequencies[lo:lo + chunk]
            powers[lo:lo + len(f)] = _gls_power_chunk(t, dy, w, YY, f)

    best = int(np.argmax(powers))
    return Periodogram(
        frequencies=frequencies,
        powers=powers,
        best_period=1.0 / float(frequencies[best]),
        best_power=float(powers[best]),
    )


def _gls_power_chunk(t, dy, w, YY, freqs):
    """Power for one block of frequencies (floating-mean normal equations)."""
    phase = 2.0 * np.pi * np.outer(freqs, t)  # (m, n)
    cosx = np.cos(phase)
    sinx = np.sin(phase)
    C = cosx @ w
    S = sinx @ w
    YC = cosx @ (w * dy)
    YS = sinx @ (w * dy)
    CC = (cosx * cosx) @ w - C * C
    SS = 1.0 - (cosx * cosx) @ w - S * S  # cos^2 + sin^2 = 1
    CS = (cosx * sinx) @ w - C * S
    D = CC * SS - CS * CS
    power = np.zeros(len(freqs))
    ok = D > 1e-15
    power[ok] = (
        SS[ok] * YC[ok] ** 2 + CC[ok] * YS[ok] ** 2 - 2.0 * CS[ok] * YC[ok] * YS[ok]
    ) / (YY * D[ok])
    return np.clip(power, 0.0, 1.0)


def extract_features(
    lc_blue: LightCurve,
    lc_red: LightCurve | None = None,
    f_max: float = 10.0,
    oversample: int = 5,
) -> FeatureVector:
    """Compute the 13-feature descriptor for one object.

    Deterministic given inputs. Features whose preconditions fail are
    NaN-valued with mask False; the rest are still computed.
    """
    m = lc_blue.magnitudes
    t = lc_blue.times
    e = lc_blue.errors
    n = len(m)

    values = np.full(N_FEATURES, np.nan)
    mask = np.zeros(N_FEATURES, dtype=bool)

    def put(name, value, valid=True):
        i = FEATURE_NAMES.index(name)
        values[i] = value
        mask[i] = valid

    std = float(np.std(m, ddof=1))
    put("std", std)

    p5, p40, p60, p95 = np.percentile(m, [5, 40, 60, 95])
    put("amplitude", (p95 - p5) / 2.0)

    if lc_red is not None:
        put("color", float(np.mean(m) - np.mean(lc_red.magnitudes)))

    if n >= MIN_PERIOD_POINTS and std > 0:
        pg = lomb_scargle(lc_blue, f_max=f_max, oversample=oversample)
        put("period", pg.best_period)

    mean = float(np.mean(m))
    d = m - mean
    m2 = float(np.mean(d * d))
    if n >= 3 and m2 > 0:
        g1 = float(np.mean(d**3)) / m2**1.5
        put("skewness", g1 * np.sqrt(n * (n - 1)) / (n - 2))
    if n >= 4 and m2 > 0:
        g2 = float(np.mean(d**4)) / m2**2 - 3.0
        put("small_kurtosis", (n - 1) / ((n - 2) * (n - 3)) * ((n + 1) * g2 + 6.0))

    delta = np.sqrt(n / (n - 1.0)) * d / e
    denom = float(np.mean(delta * delta))
    if denom > 0:
        put("stetson_k", float(np.mean(np.abs(delta))) / np.sqrt(denom))

    acl = _autocorrelation_length(t, m)
    if acl is not None:
        put("autocorrelation_length", acl)

    if std > 0:
        wmean = float(np.average(m, weights=1.0 / e**2))
        put("beyond1std", float(np.mean(np.abs(m - wmean) > std)))
    else:
        put("beyond1std", 0.0)

    dt = np.diff(t)
    put("max_slope", float(np.max(np.abs(np.diff(m) / dt))))

    put("linear_trend_slope", float(np.polyfit(t, m, 1)[0]))

    tail = np.diff(m[-PAIR_SLOPE_WINDOW:])
    put("pair_slope_trend",
        float(np.mean(tail > 0) - np.mean(tail < 0)))

    spread = p95 - p5
    if spread > 0:
        put("flux_percentile_ratio_mid50", (p60 - p40) / spread)

    return FeatureVector(object_id=lc_blue.object_id, values=values, mask=mask)


def _autocorrelation_length(t, m):
    """Smallest lag (days) where the ACF of the regularly resampled curve
    drops below 1/e; capped at the time span. None if undefined."""
    span = t[-1] - t[0]
    dt = float(np.median(np.diff(t)))
    if dt <= 0 or span <= 0:
        return None
    grid = np.arange(t[0], t[-1] + dt / 2, dt)
    if len(grid) < 3:
        return None
    x = np.interp(grid, t, m)
    x = x - x.mean()
    denom = float(np.dot(x, x))
    if denom <= 0:
        return None
    acf = np.correlate(x, x, mode="full")[len(x) - 1:] / denom
    below = np.nonzero(acf < ACF_THRESHOLD)[0]
    if len(below) == 0:
        return float(span)
    return float(min(below[0] * dt, span))


@dataclass
class FeatureTable:
    """Feature rows aligned with their source manifest order.

    ``aux`` holds optional per-object side data (``ra``, ``dec``,
    ``mean_mag``, ``snr``) that rides along to candidate records but never
    enters the model; it is not part of the feature CSV schema.
    """

    ids: list[str]
    labels: list[str]
    X: np.ndarray          # (n, 13) raw values, NaN where masked
    mask: np.ndarray       # (n, 13) bool
    medians: np.ndarray = field(default=None)  # imputation medians, set by impute()
    imputed_counts: np.ndarray = field(default=None)
    warnings: list[str] = field(default_factory=list)
    aux: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    @property
    def X_imputed(self) -> np.ndarray:
        if self.medians is None:
            raise InvalidArgument("call impute() or apply_medians() first")
        out = self.X.copy()
        idx = np.nonzero(~self.mask)
        out[idx] = self.medians[idx[1]]
        return out

    def impute(self) -> "FeatureTable":
        """Fit per-feature medians on this table's valid entries."""
        med = np.zeros(N_FEATURES)
        for j in range(N_FEATURES):
            valid = self.X[self.mask[:, j], j]
            med[j] = float(np.median(valid)) if len(valid) else 0.0
        self.medians = med
        self.imputed_counts = np.sum(~self.mask, axis=0)
        frac = self.imputed_counts / max(len(self), 1)
        for j in np.nonzero(frac > 0.5)[0]:
            self.warnings.append(
                f"feature {FEATURE_NAMES[j]} masked for "
                f"{100 * frac[j]:.0f}% of objects; median imputation dominates"
            )
        return self

    def apply_medians(self, medians: np.ndarray) -> "FeatureTable":
        """Use medians fit on a training table (for scoring sets)."""
        self.medians = np.asarray(medians, dtype=float)
        self.imputed_counts = np.sum(~self.mask, axis=0)
        return self


def feature_matrix(
    manifest: TrainingManifest,
    f_max: float = 10.0,
    oversample: int = 5,
    n_workers: int = 1,
    duplicate_policy: str = "average",
) -> FeatureTable:
    """Extract features for every manifest entry, rows in manifest order.

    Extraction is a pure per-curve function, so entries may be processed
    by a worker pool; output order follows input order regardless of
    completion order. Medians are fit on the result (call
    ``apply_medians`` instead for scoring sets).
    """
    def one(item):
        _entry, blue, red = item
        fv = extract_features(blue, red, f_max=f_max, oversample=oversample)
        amp = fv.values[FEATURE_NAMES.index("amplitude")]
        med_err = float(np.median(blue.errors))
        snr = amp / med_err if med_err > 0 else float("nan")
        return fv, float(np.mean(blue.magnitudes)), snr

    stream = iter_curves(manifest, duplicate_policy=duplicate_policy)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(one, stream))
    else:
        results = [one(item) for item in stream]
    fvs = [r[0] for r in results]

    table = FeatureTable(
        ids=[e.object_id for e in manifest.entries],
        labels=[e.label for e in manifest.entries],
        X=np.array([fv.values for fv in fvs]),
        mask=np.array([fv.mask for fv in fvs]),
        aux={
            "ra": np.array([e.ra for e in manifest.entries]),
            "dec": np.array([e.dec for e in manifest.entries]),
            "mean_mag": np.array([r[1] for r in results]),
            "snr": np.array([r[2] for r in results]),
        },
    )
    return table.impute()


CSV_HEADER = ["id", "label"] + [f"f{i + 1}" for i in range(N_FEATURES)] + ["mask_bits"]


def write_feature_table(table: FeatureTable, path) -> None:
    """Persist as `id,label,f1..f13,mask_bits`; masked entries written as nan."""
    with open(path, "w") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for i in range(len(table)):
            bits = int(np.sum(table.mask[i] * (1 << np.arange(N_FEATURES))))
            vals = ",".join(repr(float(v)) for v in table.X[i])
            fh.write(f"{table.ids[i]},{table.labels[i]},{vals},{bits}\n")


def read_feature_table(path) -> FeatureTable:
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise MalformedInput(f"unexpected feature CSV header in {path}: {header}")
        ids, labels, rows, masks = [], [], [], []
        for row in reader:
            if len(row) != len(CSV_HEADER):
                raise MalformedInput(f"bad feature row width in {path}: {row}")
            ids.append(row[0])
            labels.append(row[1])
            rows.append([float(v) for v in row[2:2 + N_FEATURES]])
            bits = int(row[-1])
            masks.append([(bits >> j) & 1 == 1 for j in range(N_FEATURES)])
    if not ids:
        raise MalformedInput(f"feature table {path} has no rows")
    return FeatureTable(ids=ids, labels=labels,
                        X=np.array(rows), mask=np.array(masks, dtype=bool))
