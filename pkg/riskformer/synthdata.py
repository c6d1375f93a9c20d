# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Seeded generator of irregular meter readings with known anomalous accounts.

Every account gets a seasonal monthly consumption curve scaled by its
customer profile. Readings are emitted at the account's cadence (quarterly,
monthly or at arbitrary gaps), each one holding the consumption since the
previous reading. Anomalous accounts get piecewise level drops and amplified
month-to-month fluctuation after a random change point.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from riskformer.preprocess import RawReading
from riskformer.statistic_manager import StatisticManager
from riskformer.util import ConfigurationError, check_arg, logger, month_range

#: profile -> (median monthly kWh, seasonal amplitude)
PROFILES = {
    "residential": (300.0, 0.35),
    "sme": (1500.0, 0.2),
    "industrial": (20000.0, 0.1),
}

#: profile -> readings `source` tag
PROFILE_SOURCES = {
    "residential": "manual",
    "sme": "telemeter_lv",
    "industrial": "telemeter_mv",
}

CADENCES = ("quarterly", "monthly", "arbitrary")

#: Share of accounts connected after the horizon start
LATE_START_RATE = 0.1


def _check_weights(name, weights, known):
    if not isinstance(weights, dict):
        raise ConfigurationError(f"synth.{name} must be a mapping, got {weights!r}")
    unknown = set(weights).difference(known)
    if unknown:
        raise ConfigurationError(f"synth.{name}: unknown key(s) {', '.join(sorted(unknown))}")
    if any(
        isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0
        for w in weights.values()
    ):
        raise ConfigurationError(f"synth.{name}: weights must be non-negative numbers")
    total = math.fsum(weights.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"synth.{name}: weights must sum to 1, got {total:g}")


@dataclass
class SynthConfig:
    accounts: int = 2000
    horizon_start: str = "2018-01"
    horizon_end: str = "2022-12"
    profile_weights: dict = field(
        default_factory=lambda: {"residential": 0.75, "sme": 0.2, "industrial": 0.05}
    )
    cadence_weights: dict = field(
        default_factory=lambda: {"quarterly": 0.7, "monthly": 0.2, "arbitrary": 0.1}
    )
    anomaly_fraction: float = 0.01
    anomaly_amplitude: float = 0.8
    noise: float = 0.1
    outlier_rate: float = 0.0
    outlier_value: float = 1.0e9
    seed: int = 42

    def __post_init__(self):
        if isinstance(self.accounts, bool) or not isinstance(self.accounts, int):
            raise ConfigurationError(f"synth.accounts must be an int, got {self.accounts!r}")
        if self.accounts < 1:
            raise ConfigurationError(f"synth.accounts must be >= 1, got {self.accounts}")
        _check_weights("profile_weights", self.profile_weights, PROFILES)
        _check_weights("cadence_weights", self.cadence_weights, CADENCES)
        if not 0 <= self.anomaly_fraction < 1:
            raise ConfigurationError(
                f"synth.anomaly_fraction must be in [0, 1), got {self.anomaly_fraction}"
            )
        if not 0 < self.anomaly_amplitude <= 1:
            raise ConfigurationError(
                f"synth.anomaly_amplitude must be in (0, 1], got {self.anomaly_amplitude}"
            )
        if self.noise < 0:
            raise ConfigurationError(f"synth.noise must be >= 0, got {self.noise}")
        if not 0 <= self.outlier_rate < 1:
            raise ConfigurationError(
                f"synth.outlier_rate must be in [0, 1), got {self.outlier_rate}"
            )
        try:
            months = month_range(self.horizon_start, self.horizon_end)
        except ValueError as e:
            raise ConfigurationError(f"Invalid synth horizon: {e}") from None
        if len(months) < 12:
            raise ConfigurationError("Synthetic horizon must span at least 12 months")

    @classmethod
    def from_config(cls, synth_cfg, seed):
        check_arg(synth_cfg, dict)
        return cls(seed=seed, **synth_cfg)

    @property
    def months(self):
        return month_range(self.horizon_start, self.horizon_end)

    @property
    def anomaly_count(self):
        return int(math.floor(self.anomaly_fraction * self.accounts))


def account_id_for(index):
    # zero-padded so that lexical and numerical order agree
    return f"A{index:06d}"


def seasonal_profile(rng, profile, n_months, noise):
    """Return one account's monthly consumption (kWh, non-negative)."""
    median, amplitude = PROFILES[profile]
    level = median * rng.lognormal(0.0, 0.3)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n_months)
    season = 1.0 + amplitude * np.sin(2.0 * np.pi * t / 12.0 + phase)
    jitter = 1.0 + noise * rng.standard_normal(n_months)
    return np.clip(level * season * jitter, 0.0, None)


def inject_anomaly(rng, consumption, amplitude, start=0):
    """Apply level drops and amplified fluctuation after a change point.

    Returns:
        (modified copy, change point month index)
    """
    res = np.array(consumption, dtype=np.float64)
    n = res.size
    lo = start + max(1, (n - start) // 4)
    hi = max(lo + 1, n - max(1, (n - start) // 4))
    change = int(rng.integers(lo, hi))

    n_steps = int(rng.integers(1, 4))
    cuts = np.sort(rng.choice(np.arange(change, n), size=min(n_steps, n - change), replace=False))
    factor = 1.0
    for i, cut in enumerate(cuts):
        factor *= 1.0 - amplitude * rng.uniform(0.3, 0.7)
        end = cuts[i + 1] if i + 1 < len(cuts) else n
        res[cut:end] *= factor

    swing = 1.0 + amplitude * rng.standard_normal(n - change)
    res[change:] *= np.clip(swing, 0.0, None)
    return res, change


def reading_months(rng, cadence, start, n_months):
    """Return strictly increasing month indexes at which a reading is taken."""
    if cadence == "monthly":
        return np.arange(start, n_months)
    if cadence == "quarterly":
        nominal = np.arange(start + 2, n_months, 3)
        months = nominal + rng.integers(-1, 2, size=nominal.size)
    else:
        gaps = rng.integers(1, 8, size=n_months)
        months = start - 1 + np.cumsum(gaps)
    months = np.clip(months, start, n_months - 1)
    months = np.unique(months)
    if months.size == 0 or months[-1] != n_months - 1:
        # every account is read at the end of the horizon
        months = np.append(months, n_months - 1)
    return np.unique(months)


def interval_readings(consumption, months, start):
    """Sum monthly consumption over the interval closed by each reading."""
    cum = np.concatenate([[0.0], np.cumsum(consumption)])
    bounds = np.concatenate([[start], np.asarray(months) + 1])
    return cum[bounds[1:]] - cum[bounds[:-1]]


def generate(config, stats=None):
    """Create a readings stream and the set of anomalous account ids.

    Accounts are generated independently from per-account seed sequences and
    emitted in account id order. The label set holds exactly
    floor(anomaly_fraction * accounts) accounts.

    Returns:
        (list of :class:`RawReading`, set of labeled account ids)
    """
    check_arg(config, SynthConfig)
    stats = stats or StatisticManager()
    months = config.months
    n_months = len(months)

    rng = np.random.default_rng(config.seed)
    profile_names = list(config.profile_weights)
    profiles = rng.choice(
        profile_names, size=config.accounts, p=[config.profile_weights[p] for p in profile_names]
    )
    cadence_names = list(config.cadence_weights)
    cadences = rng.choice(
        cadence_names, size=config.accounts, p=[config.cadence_weights[c] for c in cadence_names]
    )
    anomalous = set(rng.choice(config.accounts, size=config.anomaly_count, replace=False).tolist())
    children = np.random.SeedSequence(config.seed).spawn(config.accounts)

    records = []
    labels = set()
    n_outliers = 0
    for idx in range(config.accounts):
        account_id = account_id_for(idx + 1)
        arng = np.random.default_rng(children[idx])
        profile = str(profiles[idx])
        start = 0
        if arng.random() < LATE_START_RATE:
            start = int(arng.integers(1, max(2, n_months - 11)))

        consumption = seasonal_profile(arng, profile, n_months, config.noise)
        consumption[:start] = 0.0
        if idx in anomalous:
            consumption, _ = inject_anomaly(arng, consumption, config.anomaly_amplitude, start)
            labels.add(account_id)

        at = reading_months(arng, str(cadences[idx]), start, n_months)
        values = np.round(interval_readings(consumption, at, start), 6)
        if config.outlier_rate > 0:
            hit = arng.random(values.size) < config.outlier_rate
            values[hit] = config.outlier_value
            n_outliers += int(hit.sum())
        source = PROFILE_SOURCES[profile]
        records.extend(
            RawReading(account_id=account_id, date=months[m], value_kwh=float(v), source=source)
            for m, v in zip(at, values)
        )

    stats.set_value("synth.accounts", config.accounts)
    stats.set_value("synth.readings", len(records))
    stats.set_value("synth.labeled", len(labels))
    stats.set_value("synth.outliers", n_outliers)
    logger.info(
        f"Generated {len(records):,} readings for {config.accounts:,} accounts "
        f"({len(labels):,} anomalous, {n_outliers:,} outlier readings)"
    )
    return records, labels
