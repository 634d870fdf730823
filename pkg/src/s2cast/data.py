"""Acquisitions, sequence windows, vegetation indices and feature assembly.

A pixel's cloud-free acquisitions are cut into sliding windows of ``T``
history dates; the acquisition after each window is its target. Every time
step carries the selected bands or indices plus one time-difference channel
holding ``(target_date - acquisition_date).days / time_scale``.
"""

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .model import read_container, write_container

S2_BANDS = ("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12")
VI_SET = ("NDVI", "GNDVI", "NDRE", "SAVI", "EVI")
INDEX_NAMES = VI_SET + ("NDSI",)
TASKS = {
    "ndvi": (("NDVI",), ("NDVI",)),
    "vis": (VI_SET, VI_SET),
    "s2bands": (S2_BANDS, S2_BANDS),
}
DATASET_MAGIC = b"S2O1D"
DEFAULT_TIME_SCALE = 365.25


@dataclass
class Acquisition:
    date: dt.date
    bands: dict

    def __post_init__(self):
        for name, value in self.bands.items():
            if not math.isfinite(value) or value < 0:
                raise DataError(f"{self.date}: band {name} has invalid reflectance {value}")


@dataclass
class PixelSeries:
    pixel_id: str
    acquisitions: list
    truth: dict | None = None  # generator parameters, synthetic data only


@dataclass
class SequenceSample:
    pixel_id: str
    history: list
    target_date: dt.date
    target: dict | None = None  # band values of the target acquisition, when known


def parse_date(value):
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(value)
    except (TypeError, ValueError):
        raise DataError(f"invalid ISO-8601 date {value!r}") from None


# ---------------------------------------------------------------------------
# Indices


def _nd(a, b):
    den = a + b
    if abs(den) < 1e-9:
        raise DataError("normalized-difference denominator is zero")
    return (a - b) / den


def compute_index(name, bands):
    """Vegetation or snow index from a band dict (names like ``"B8"``)."""
    try:
        if name == "NDVI":
            return _nd(bands["B8"], bands["B4"])
        if name == "GNDVI":
            return _nd(bands["B8"], bands["B3"])
        if name == "NDRE":
            return _nd(bands["B8"], bands["B5"])
        if name == "NDSI":
            return _nd(bands["B3"], bands["B11"])
        if name == "SAVI":
            den = bands["B8"] + bands["B4"] + 0.5
            if abs(den) < 1e-9:
                raise DataError("SAVI denominator is zero")
            return 1.5 * (bands["B8"] - bands["B4"]) / den
        if name == "EVI":
            den = bands["B8"] + 6.0 * bands["B4"] - 7.5 * bands["B2"] + 1.0
            if abs(den) < 1e-9:
                raise DataError("EVI denominator is zero")
            return 2.5 * (bands["B8"] - bands["B4"]) / den
    except KeyError as exc:
        raise DataError(f"{name} needs band {exc.args[0]}") from None
    raise DataError(f"unknown index {name!r}")


def feature_value(name, bands):
    if name in INDEX_NAMES:
        return compute_index(name, bands)
    if name not in bands:
        raise DataError(f"missing band {name}")
    return bands[name]


def ndsi_cloud_filter(acquisitions, threshold=0.4):
    """Drop acquisitions whose NDSI exceeds ``threshold``.

    Returns ``(kept, n_dropped)``.
    """
    kept = [a for a in acquisitions if compute_index("NDSI", a.bands) <= threshold]
    return kept, len(acquisitions) - len(kept)


# ---------------------------------------------------------------------------
# Windows and features


def time_difference_channel(sample, time_scale=DEFAULT_TIME_SCALE, forecast=True):
    """Days from each history date to the target date, divided by ``time_scale``.

    History dates must be strictly increasing. With ``forecast`` every
    difference must be positive; otherwise only zero differences are rejected.
    """
    dates = [a.date for a in sample.history]
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise DataError(f"{sample.pixel_id}: history dates are not strictly increasing")
    days = [(sample.target_date - d).days for d in dates]
    if forecast and days[-1] <= 0:
        raise DataError(
            f"{sample.pixel_id}: target date {sample.target_date} is not after the last acquisition {dates[-1]}"
        )
    if 0 in days:
        raise DataError(f"{sample.pixel_id}: target date coincides with a history date")
    return np.array(days, dtype=np.float64) / time_scale


def build_dataset(series, T=5):
    """Sliding windows over each pixel's acquisitions.

    Returns ``(samples, n_skipped)`` where ``n_skipped`` counts pixels with
    fewer than ``T + 1`` acquisitions. Samples are ordered by pixel id, then date.
    """
    samples = []
    skipped = 0
    for px in sorted(series, key=lambda s: s.pixel_id):
        acq = px.acquisitions
        if any(b.date <= a.date for a, b in zip(acq, acq[1:])):
            raise DataError(f"{px.pixel_id}: acquisitions not sorted by strictly increasing date")
        if len(acq) < T + 1:
            skipped += 1
            continue
        for k in range(len(acq) - T):
            tgt = acq[k + T]
            samples.append(SequenceSample(px.pixel_id, acq[k:k + T], tgt.date, dict(tgt.bands)))
    return samples, skipped


@dataclass
class FeatureSpec:
    inputs: list
    targets: list
    time_scale: float = DEFAULT_TIME_SCALE
    input_mean: list | None = None
    input_std: list | None = None
    target_mean: list | None = None
    target_std: list | None = None
    task: str | None = None

    @classmethod
    def for_task(cls, task, time_scale=DEFAULT_TIME_SCALE):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; valid: {', '.join(TASKS)}")
        inputs, targets = TASKS[task]
        return cls(list(inputs), list(targets), time_scale, task=task)

    @property
    def n_features(self):
        return len(self.inputs) + 1

    @property
    def fitted(self):
        return self.input_mean is not None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def raw_arrays(samples, spec, forecast=True):
    """Un-normalized ``(x, y)``; ``y`` is None if any sample lacks a target."""
    n, T = len(samples), (len(samples[0].history) if samples else 0)
    x = np.zeros((n, T, spec.n_features))
    have_y = all(s.target is not None for s in samples)
    y = np.zeros((n, len(spec.targets))) if have_y else None
    for i, s in enumerate(samples):
        for t, a in enumerate(s.history):
            x[i, t, :-1] = [feature_value(name, a.bands) for name in spec.inputs]
        x[i, :, -1] = time_difference_channel(s, spec.time_scale, forecast)
        if have_y:
            y[i] = [feature_value(name, s.target) for name in spec.targets]
    return x, y


def fit_normalization(spec, train_samples):
    """Return a copy of ``spec`` with mean/std learned from ``train_samples``."""
    if not train_samples:
        raise DataError("cannot fit normalization on an empty training split")
    x, y = raw_arrays(train_samples, spec)
    feats = x[:, :, :-1].reshape(-1, len(spec.inputs))
    in_mean, in_std = feats.mean(axis=0), feats.std(axis=0)
    out_mean, out_std = y.mean(axis=0), y.std(axis=0)
    for names, mean, std in ((spec.inputs, in_mean, in_std), (spec.targets, out_mean, out_std)):
        for name, m, s in zip(names, mean, std):
            if not s > 1e-12 * max(1.0, abs(m)):
                raise DataError(f"feature {name} is constant on the training split")
    return replace(
        spec,
        input_mean=in_mean.tolist(),
        input_std=in_std.tolist(),
        target_mean=out_mean.tolist(),
        target_std=out_std.tolist(),
    )


def normalize_inputs(x, spec):
    out = x.copy()
    out[:, :, :-1] = (x[:, :, :-1] - np.asarray(spec.input_mean)) / np.asarray(spec.input_std)
    return out


def normalize_targets(y, spec):
    return (y - np.asarray(spec.target_mean)) / np.asarray(spec.target_std)


def denormalize_targets(y, spec):
    return y * np.asarray(spec.target_std) + np.asarray(spec.target_mean)


@dataclass
class FeaturizedSet:
    x: np.ndarray
    y: np.ndarray | None
    pixel_ids: list
    target_dates: list
    spec: FeatureSpec

    def __len__(self):
        return len(self.x)


def featurize(samples, spec, forecast=True):
    """Normalized tensors for ``samples`` using the fitted statistics in ``spec``."""
    if not spec.fitted:
        raise ConfigError("feature spec has no normalization statistics; call fit_normalization first")
    if not samples:
        return FeaturizedSet(np.zeros((0, 0, spec.n_features)), np.zeros((0, len(spec.targets))), [], [], spec)
    x, y = raw_arrays(samples, spec, forecast)
    return FeaturizedSet(
        normalize_inputs(x, spec),
        None if y is None else normalize_targets(y, spec),
        [s.pixel_id for s in samples],
        [s.target_date.isoformat() for s in samples],
        spec,
    )


def split(samples, fractions=(0.7, 0.15, 0.15), seed=0):
    """Group-aware split: all windows of one pixel land in one partition.

    Pixel ids are shuffled with ``seed`` and cut contiguously by the
    fractions; each partition keeps the original sample order.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    pixels = sorted({s.pixel_id for s in samples})
    order = np.random.default_rng(seed).permutation(len(pixels))
    n = len(pixels)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    part = {}
    for rank, idx in enumerate(order):
        part[pixels[idx]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    out = ([], [], [])
    for s in samples:
        out[part[s.pixel_id]].append(s)
    return out


# ---------------------------------------------------------------------------
# Synthetic seasonal pixels


@dataclass
class SynthConfig:
    n_pixels: int = 200
    n_acquisitions: int = 30
    noise_sigma: float = 0.02
    irregular_gap_days: int = 20
    seed: int = 0
    start_date: str = "2021-01-01"
    cloud_prob: float = 0.0

    def validate(self):
        if self.n_pixels < 1 or self.n_acquisitions < 1:
            raise ConfigError("pixel and acquisition counts must be positive")
        if self.irregular_gap_days < 5:
            raise ConfigError("irregular_gap_days must be >= 5")
        if self.noise_sigma < 0 or not 0 <= self.cloud_prob <= 1:
            raise ConfigError("noise_sigma must be >= 0 and cloud_prob in [0, 1]")
        return self


def seasonal_ndvi(truth, date):
    """Noise-free NDVI of a synthetic pixel on ``date``."""
    doy = (date - dt.date(date.year, 1, 1)).days
    phase = 2.0 * math.pi * (doy - truth["peak_day"]) / 365.25
    return truth["base"] + truth["amp"] * 0.5 * (1.0 + math.cos(phase))


def _bands_from_ndvi(v, brightness):
    # NIR and red are antiphase sinusoids summing to ``brightness``.
    nir = 0.5 * brightness * (1.0 + v)
    red = 0.5 * brightness * (1.0 - v)
    return {
        "B2": 0.5 * red + 0.02,
        "B3": 0.45 * red + 0.08 * nir + 0.02,
        "B4": red,
        "B5": 0.5 * red + 0.35 * nir,
        "B6": 0.2 * red + 0.7 * nir,
        "B7": 0.1 * red + 0.85 * nir,
        "B8": nir,
        "B8A": 1.02 * nir,
        "B11": 0.35 * red + 0.25 * nir + 0.03,
        "B12": 0.4 * red + 0.12 * nir + 0.02,
    }


def generate_synthetic(config=None):
    """Seeded seasonal reflectance series, one :class:`PixelSeries` per pixel."""
    cfg = (config or SynthConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    start = parse_date(cfg.start_date)
    width = len(str(cfg.n_pixels - 1))
    out = []
    for p in range(cfg.n_pixels):
        truth = {
            "base": float(rng.uniform(0.15, 0.3)),
            "amp": float(rng.uniform(0.4, 0.6)),
            "peak_day": float(rng.uniform(150.0, 230.0)),
            "brightness": float(rng.uniform(0.9, 1.1)),
        }
        day = start + dt.timedelta(days=int(rng.integers(0, 15)))
        acquisitions = []
        for k in range(cfg.n_acquisitions):
            if k:
                day += dt.timedelta(days=int(rng.integers(5, cfg.irregular_gap_days + 1)))
            bands = _bands_from_ndvi(seasonal_ndvi(truth, day), truth["brightness"])
            noise = rng.normal(0.0, cfg.noise_sigma, size=len(bands)) if cfg.noise_sigma > 0 else np.zeros(len(bands))
            cloudy = rng.uniform() < cfg.cloud_prob
            if cloudy:
                bands["B3"] += 0.5
                bands["B11"] *= 0.2
            acquisitions.append(
                Acquisition(day, {k2: max(float(v + e), 1e-4) for (k2, v), e in zip(bands.items(), noise)})
            )
        out.append(PixelSeries(f"px{p:0{width}d}", acquisitions, truth))
    return out


# ---------------------------------------------------------------------------
# File formats


def write_jsonl(series, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for px in series:
            rec = {
                "pixel_id": px.pixel_id,
                "acquisitions": [{"date": a.date.isoformat(), "bands": a.bands} for a in px.acquisitions],
            }
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                acq = [
                    Acquisition(parse_date(a["date"]), {k: float(v) for k, v in a["bands"].items()})
                    for a in rec["acquisitions"]
                ]
                out.append(PixelSeries(str(rec["pixel_id"]), sorted(acq, key=lambda a: a.date)))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
    return out


def save_featurized(fset, path):
    meta = {
        "spec": fset.spec.to_dict(),
        "pixel_ids": fset.pixel_ids,
        "target_dates": fset.target_dates,
        "has_targets": fset.y is not None,
    }
    blocks = {"x": fset.x}
    if fset.y is not None:
        blocks["y"] = fset.y
    write_container(path, DATASET_MAGIC, meta, blocks)


def load_featurized(path):
    meta, blocks = read_container(path, DATASET_MAGIC)
    try:
        return FeaturizedSet(
            blocks["x"],
            blocks.get("y"),
            meta["pixel_ids"],
            meta["target_dates"],
            FeatureSpec.from_dict(meta["spec"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete dataset container ({exc})") from None
