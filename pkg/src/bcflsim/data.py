"""Synthetic patient data, sliding-window samples, and hospital train/val/test splits.

A patient series is a 4-channel matrix sampled every 5 minutes (288 steps per
day): glucose (mg/dL), meal carbohydrates (g), insulin boluses (units), and
time of day as a fraction in [0, 1). Honest patients come from a seeded
physiological toy model (basal level + circadian rhythm + lagged meal and
insulin responses + AR(1) noise). Malicious "fake patients" are uniform noise
far outside physiological ranges.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import derive_rng

STEPS_PER_DAY = 288
INTERVAL_MINUTES = 5
CHANNELS = ("glucose", "carbs", "insulin", "time_of_day")

GLUCOSE_MIN, GLUCOSE_MAX = 40.0, 400.0
CARBS_MAX = 200.0
INSULIN_MAX = 25.0


class EmptyWindowError(ValueError):
    """Series too short to produce a single window."""


@dataclass(frozen=True)
class GlucoseSeries:
    patient_id: int
    days: int
    glucose: np.ndarray
    carbs: np.ndarray
    insulin: np.ndarray
    time_of_day: np.ndarray
    interval_minutes: int = INTERVAL_MINUTES

    def __post_init__(self):
        n = self.days * STEPS_PER_DAY
        for name in ("glucose", "carbs", "insulin", "time_of_day"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise ValueError(f"channel {name} must have {n} samples, got {arr.shape}")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.days * STEPS_PER_DAY

    def channel_matrix(self) -> np.ndarray:
        """Series as an (n, 4) matrix in CHANNELS order."""
        return np.stack([self.glucose, self.carbs, self.insulin, self.time_of_day], axis=1)


@dataclass(frozen=True)
class WindowConfig:
    history_len: int = 24
    horizon: int = 6

    def __post_init__(self):
        if self.history_len < 1 or self.horizon < 1:
            raise ValueError("history_len and horizon must be >= 1")

    @property
    def span(self) -> int:
        return self.history_len + self.horizon


@dataclass(frozen=True)
class WindowedSample:
    x: np.ndarray  # (history_len, 4), channels normalized
    y: float  # raw glucose mg/dL at the prediction step
    target_step: int  # absolute index of y in the source series


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics for glucose/carbs/insulin.

    time_of_day is never scaled. The glucose entry doubles as the target
    scale used to map model outputs back to mg/dL.
    """

    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,), strictly positive

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        std = np.asarray(self.std, dtype=np.float64).copy()
        std[std < 1e-9] = 1.0
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(mean=np.zeros(3), std=np.ones(3))

    @classmethod
    def from_series(cls, series: Iterable[GlucoseSeries], end_step: int | None = None) -> "NormStats":
        """Stats over the first end_step samples of each series, pooled."""
        cols = []
        for s in series:
            mat = s.channel_matrix()[:end_step, :3]
            cols.append(mat)
        pooled = np.concatenate(cols, axis=0)
        return cls(mean=pooled.mean(axis=0), std=pooled.std(axis=0))

    @property
    def glucose_scale(self) -> tuple[float, float]:
        return float(self.mean[0]), float(self.std[0])


@dataclass
class HospitalDataset:
    hospital_id: int
    patient_ids: list[int]
    train: list[WindowedSample]
    val: list[WindowedSample]
    test: list[WindowedSample]
    n_train: int
    stats: NormStats = field(default_factory=NormStats.identity)

    @property
    def target_scale(self) -> tuple[float, float]:
        return self.stats.glucose_scale


@dataclass(frozen=True)
class PatientParams:
    """Per-patient physiology knobs, a deterministic function of (patient_id, data_seed)."""

    basal_glucose: float  # mg/dL
    circadian_amplitude: float  # mg/dL
    circadian_phase: float  # fraction of day
    meal_response_gain: float  # peak mg/dL per gram
    insulin_response_gain: float  # peak mg/dL per unit
    response_lag: int  # steps to meal peak
    insulin_lag: int  # steps to insulin peak
    noise_std: float  # stationary AR(1) std, mg/dL
    ar_coeff: float
    carb_ratio: float  # grams covered per insulin unit


def derive_patient_params(patient_id: int, data_seed: int) -> PatientParams:
    rng = derive_rng("patient-params", patient_id, data_seed)
    basal = rng.uniform(110.0, 160.0)
    circ_amp = rng.uniform(10.0, 30.0)
    circ_phase = rng.uniform(0.0, 1.0)
    meal_gain = rng.uniform(0.6, 1.2)
    carb_ratio = rng.uniform(8.0, 14.0)
    # Insulin roughly counteracts a covered meal; the balance factor leaves a
    # patient-specific net excursion in either direction.
    insulin_gain = meal_gain * carb_ratio * rng.uniform(0.85, 1.1)
    response_lag = int(rng.integers(7, 13))
    insulin_lag = response_lag + int(rng.integers(3, 8))
    noise_std = rng.uniform(2.0, 5.0)
    ar_coeff = rng.uniform(0.85, 0.95)
    return PatientParams(
        basal_glucose=basal,
        circadian_amplitude=circ_amp,
        circadian_phase=circ_phase,
        meal_response_gain=meal_gain,
        insulin_response_gain=insulin_gain,
        response_lag=response_lag,
        insulin_lag=insulin_lag,
        noise_std=noise_std,
        ar_coeff=ar_coeff,
        carb_ratio=carb_ratio,
    )


def _impulse_kernel(peak_step: int, length: int) -> np.ndarray:
    """Gamma-shaped response, peak-normalized to 1 at peak_step."""
    t = np.arange(1, length + 1, dtype=np.float64)
    k = (t / peak_step) * np.exp(1.0 - t / peak_step)
    return k


def generate_patient(patient_id: int, days: int, data_seed: int) -> GlucoseSeries:
    """Seeded honest patient series; pure function of its arguments."""
    if days < 1:
        raise ValueError("days must be >= 1")
    params = derive_patient_params(patient_id, data_seed)
    rng = derive_rng("patient-series", patient_id, data_seed)
    n = days * STEPS_PER_DAY

    carbs = np.zeros(n)
    insulin = np.zeros(n)
    # Meal slots as fractions of the day: breakfast, lunch, dinner, two snack slots.
    slots = np.array([0.29, 0.52, 0.78, 0.42, 0.65])
    for day in range(days):
        n_meals = int(rng.integers(3, 6))
        n_bolus = int(rng.integers(3, 6))
        order = rng.permutation(len(slots))[:n_meals]
        meal_steps = []
        meal_grams = []
        for j, slot in enumerate(slots[np.sort(order)]):
            jitter = rng.integers(-9, 10)  # +/- 45 min
            step = day * STEPS_PER_DAY + int(slot * STEPS_PER_DAY) + int(jitter)
            step = min(max(step, day * STEPS_PER_DAY), (day + 1) * STEPS_PER_DAY - 1)
            grams = rng.uniform(30.0, 90.0) if j < 3 else rng.uniform(10.0, 30.0)
            grams = min(grams, CARBS_MAX)
            carbs[step] += grams
            meal_steps.append(step)
            meal_grams.append(grams)
        # Boluses cover meals first; any remainder becomes small correction doses.
        for j in range(n_bolus):
            if j < len(meal_steps):
                step = meal_steps[j] + int(rng.integers(0, 3))
                dose = (meal_grams[j] / params.carb_ratio) * rng.uniform(0.85, 1.15)
            else:
                step = day * STEPS_PER_DAY + int(rng.integers(0, STEPS_PER_DAY))
                dose = rng.uniform(0.5, 2.5)
            step = min(step, n - 1)
            insulin[step] += float(np.clip(dose, 0.0, INSULIN_MAX))

    steps = np.arange(n)
    time_of_day = (steps % STEPS_PER_DAY) / STEPS_PER_DAY

    circadian = params.circadian_amplitude * np.sin(
        2.0 * np.pi * (time_of_day - params.circadian_phase)
    )

    meal_kernel = params.meal_response_gain * _impulse_kernel(params.response_lag, 36)
    insulin_kernel = params.insulin_response_gain * _impulse_kernel(params.insulin_lag, 48)
    meal_effect = np.convolve(carbs, meal_kernel)[:n]
    insulin_effect = np.convolve(insulin, insulin_kernel)[:n]

    innovations = rng.normal(0.0, params.noise_std * np.sqrt(1.0 - params.ar_coeff**2), size=n)
    noise = np.empty(n)
    prev = rng.normal(0.0, params.noise_std)
    for i in range(n):
        prev = params.ar_coeff * prev + innovations[i]
        noise[i] = prev

    glucose = params.basal_glucose + circadian + meal_effect - insulin_effect + noise
    glucose = np.clip(glucose, GLUCOSE_MIN, GLUCOSE_MAX)

    return GlucoseSeries(
        patient_id=patient_id,
        days=days,
        glucose=glucose,
        carbs=carbs,
        insulin=insulin,
        time_of_day=time_of_day,
    )


def generate_malicious_series(days: int, seed: int, patient_id: int = -1) -> GlucoseSeries:
    """Fabricated out-of-range series: uniform per-sample noise on every channel."""
    if days < 1:
        raise ValueError("days must be >= 1")
    rng = derive_rng("malicious-series", seed)
    n = days * STEPS_PER_DAY
    return GlucoseSeries(
        patient_id=patient_id,
        days=days,
        glucose=rng.uniform(-10.0, 10.0, size=n),
        carbs=rng.uniform(-3.0, 3.0, size=n),
        insulin=rng.uniform(-5.0, 5.0, size=n),
        time_of_day=rng.uniform(-1.0, 1.0, size=n),
    )


def make_windows(
    series: GlucoseSeries,
    cfg: WindowConfig,
    stats: NormStats,
    start: int = 0,
    end: int | None = None,
) -> list[WindowedSample]:
    """Stride-1 sliding windows over series steps [start, end).

    Window i covers input steps [i, i+L); its target is the *raw* glucose
    value at step i+L+H-1. Inputs are z-scored with `stats` (time_of_day
    passes through). Produces exactly (end-start) - (L+H) + 1 samples.
    """
    n = len(series)
    end = n if end is None else end
    if not (0 <= start <= end <= n):
        raise ValueError("invalid window range")
    span = cfg.span
    if end - start < span:
        raise EmptyWindowError(
            f"need at least {span} steps for one window, region has {end - start}"
        )
    mat = series.channel_matrix()
    normed = mat.copy()
    normed[:, :3] = (mat[:, :3] - stats.mean) / stats.std
    L = cfg.history_len
    samples = []
    for i in range(start, end - span + 1):
        t = i + span - 1
        samples.append(
            WindowedSample(x=normed[i : i + L].copy(), y=float(series.glucose[t]), target_step=t)
        )
    return samples


def split_dataset(
    series_list: Sequence[GlucoseSeries],
    cfg: WindowConfig,
    split_seed: int,
    hospital_id: int = 0,
    train_days: int = 7,
    val_fraction: float = 0.05,
    stats: NormStats | None = None,
) -> HospitalDataset:
    """Pool a hospital's patients into train/val/test windows.

    The first `train_days` of every series become training windows; a seeded
    `val_fraction` of those (rounded down, at least one) is set aside for
    validation; all remaining days become test windows. Test window source
    ranges never overlap the training region. Normalization stats come from
    the training region only unless `stats` is supplied.
    """
    if not series_list:
        raise ValueError("series_list must be non-empty")
    train_end = train_days * STEPS_PER_DAY
    span = cfg.span
    for s in series_list:
        if len(s) < train_end + span:
            raise ValueError(
                f"patient {s.patient_id}: need at least {train_days} days plus "
                f"{span} test steps, got {len(s)} steps"
            )
    if stats is None:
        stats = NormStats.from_series(series_list, end_step=train_end)

    train_all: list[WindowedSample] = []
    test: list[WindowedSample] = []
    for s in series_list:
        train_all.extend(make_windows(s, cfg, stats, end=train_end))
        test.extend(make_windows(s, cfg, stats, start=train_end))

    rng = derive_rng("val-split", split_seed)
    n_val = max(1, int(len(train_all) * val_fraction))
    val_idx = set(rng.choice(len(train_all), size=n_val, replace=False).tolist())
    val = [w for i, w in enumerate(train_all) if i in val_idx]
    train = [w for i, w in enumerate(train_all) if i not in val_idx]

    return HospitalDataset(
        hospital_id=hospital_id,
        patient_ids=[s.patient_id for s in series_list],
        train=train,
        val=val,
        test=test,
        n_train=len(train),
        stats=stats,
    )


def stack_samples(samples: Sequence[WindowedSample]) -> tuple[np.ndarray, np.ndarray]:
    """Samples as (X, y) arrays with X of shape (n, L, 4)."""
    if not samples:
        raise ValueError("no samples to stack")
    X = np.stack([s.x for s in samples])
    y = np.array([s.y for s in samples])
    return X, y


def series_to_csv(series: GlucoseSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "glucose", "carbs", "insulin", "time_of_day"])
        for i in range(len(series)):
            writer.writerow(
                [
                    i,
                    repr(float(series.glucose[i])),
                    repr(float(series.carbs[i])),
                    repr(float(series.insulin[i])),
                    repr(float(series.time_of_day[i])),
                ]
            )


def series_from_csv(path: str | Path, patient_id: int) -> GlucoseSeries:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["step", "glucose", "carbs", "insulin", "time_of_day"]:
            raise ValueError(f"unexpected CSV header: {header}")
        for row in reader:
            rows.append([float(v) for v in row[1:]])
    mat = np.array(rows)
    if mat.shape[0] % STEPS_PER_DAY != 0:
        raise ValueError("series length is not a whole number of days")
    return GlucoseSeries(
        patient_id=patient_id,
        days=mat.shape[0] // STEPS_PER_DAY,
        glucose=mat[:, 0],
        carbs=mat[:, 1],
        insulin=mat[:, 2],
        time_of_day=mat[:, 3],
    )
