# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Turn raw, irregular meter readings into a fixed-length normalized dataset.

Pipeline stages (:func:`run_pipeline`):

1. ingest readings into an account x month matrix (outliers dropped,
   missing months hold :data:`MISSING`)
2. join the labeled account list
3. interval-average every row into a monthly consumption series
4. row-normalize (zero-sum series are removed)
5. drop series shorter than `min_len`
6. prune / zero-pad to `target_len` steps
7. min-max scale every column to [0, 1]
"""
import io
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import yaml
from sklearn.preprocessing import MinMaxScaler

from riskformer.statistic_manager import StatisticManager
from riskformer.util import (
    DataError,
    ShapeError,
    check_arg,
    fingerprint,
    logger,
    month_range,
)

#: Marks a month without a measurement
MISSING = -1.0

#: Allowed values of the readings `source` column
SOURCES = ("manual", "telemeter_lv", "telemeter_mv")

READINGS_COLUMNS = ("account_id", "date", "value_kwh", "source")

#: Format tag of the normalized dataset archive
DATASET_FORMAT_VERSION = 1

MONTH_PATTERN = r"\d{4}-(0[1-9]|1[0-2])"


@dataclass(frozen=True)
class RawReading:
    """One meter measurement: consumption since the previous reading."""

    account_id: str
    date: str
    value_kwh: float
    source: str = "manual"


@dataclass
class ConsumptionMatrix:
    """Accounts x months matrix; entries are consumptions or :data:`MISSING`."""

    account_ids: list
    months: list
    values: np.ndarray

    def __len__(self):
        return len(self.account_ids)

    def row(self, account_id):
        return self.values[self.account_ids.index(account_id)]


@dataclass
class NormalizedDataset:
    """Fixed-length scaled series, ready for training and inference.

    Attributes:
        values (ndarray): (N, target_len) float64 in [0, 1]
        account_ids (ndarray): (N,) str
        labels (ndarray): (N,) bool, true for verified non-technical losses
        scaler_min, scaler_max (ndarray): per-column min-max parameters
        config_fingerprint (str): SHA-256 of the preprocess config
        provenance (dict): stage counts
    """

    values: np.ndarray
    account_ids: np.ndarray
    labels: np.ndarray
    scaler_min: np.ndarray
    scaler_max: np.ndarray
    config_fingerprint: str = ""
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.account_ids)

    @property
    def seq_len(self):
        return self.values.shape[1]

    @property
    def labeled_ids(self):
        return set(self.account_ids[self.labels].tolist())

    def fingerprint(self):
        return fingerprint(
            self.values,
            "\n".join(self.account_ids.tolist()),
            self.labels.astype(np.uint8),
            self.config_fingerprint,
        )

    def subset(self, index):
        """Return a dataset restricted to the rows in `index` (same scaler)."""
        index = np.asarray(index)
        return NormalizedDataset(
            values=self.values[index],
            account_ids=self.account_ids[index],
            labels=self.labels[index],
            scaler_min=self.scaler_min,
            scaler_max=self.scaler_max,
            config_fingerprint=self.config_fingerprint,
            provenance=dict(self.provenance),
        )

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as f:
            np.savez(
                f,
                format_version=np.array(DATASET_FORMAT_VERSION, dtype="<i8"),
                values=np.asarray(self.values, dtype="<f8"),
                account_ids=np.asarray(self.account_ids, dtype=str),
                labels=np.asarray(self.labels, dtype=bool),
                scaler_min=np.asarray(self.scaler_min, dtype="<f8"),
                scaler_max=np.asarray(self.scaler_max, dtype="<f8"),
                config_fingerprint=np.array(self.config_fingerprint),
                provenance=np.array(yaml.safe_dump(self.provenance, sort_keys=True)),
            )
        logger.info(f"Wrote dataset '{path}' ({len(self)} series x {self.seq_len} steps)")
        return path

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as f:
                raw = f.read()
            with np.load(io.BytesIO(raw), allow_pickle=False) as npz:
                entries = {name: npz[name] for name in npz.files}
        except FileNotFoundError:
            raise DataError(f"Dataset not found: '{path}'") from None
        except Exception as e:
            raise DataError(f"Corrupt dataset '{path}': {e}") from None
        if int(entries.get("format_version", -1)) != DATASET_FORMAT_VERSION:
            raise DataError(f"Dataset '{path}' has an unsupported format version")
        try:
            return cls(
                values=entries["values"].astype(np.float64),
                account_ids=entries["account_ids"].astype(str),
                labels=entries["labels"].astype(bool),
                scaler_min=entries["scaler_min"].astype(np.float64),
                scaler_max=entries["scaler_max"].astype(np.float64),
                config_fingerprint=str(entries["config_fingerprint"]),
                provenance=yaml.safe_load(str(entries["provenance"])) or {},
            )
        except KeyError as e:
            raise DataError(f"Dataset '{path}' lacks entry {e}") from None


# --- Reading input files -----------------------------------------------------


def readings_frame(records):
    """Return a readings DataFrame for a DataFrame or an iterable of RawReading."""
    if isinstance(records, pd.DataFrame):
        return records
    rows = [(r.account_id, r.date, r.value_kwh, r.source) for r in records]
    return pd.DataFrame(rows, columns=list(READINGS_COLUMNS))


def validate_readings(df, strict=False, stats=None, first_line=2):
    """Drop malformed readings rows, or raise in strict mode.

    A row is malformed if the account id is empty, the date is not 'YYYY-MM',
    the value is not a finite non-negative number, or the source is unknown.
    Line numbers in messages assume a header line (`first_line` = 2).

    Returns:
        DataFrame with columns account_id (str), date (str), value_kwh (float),
        source (str)
    Raises:
        DataError: on the first malformed row if `strict`
    """
    missing = [c for c in READINGS_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"Readings lack column(s): {', '.join(missing)}")

    df = df.reset_index(drop=True)
    account = df["account_id"].fillna("").astype(str).str.strip()
    date = df["date"].fillna("").astype(str).str.strip()
    value = pd.to_numeric(df["value_kwh"], errors="coerce")
    source = df["source"].fillna("").astype(str).str.strip()

    problems = pd.Series("", index=df.index)
    problems[account == ""] = "empty account_id"
    problems[(problems == "") & ~date.str.fullmatch(MONTH_PATTERN)] = "invalid date"
    finite = np.isfinite(value.to_numpy(dtype=float, na_value=np.nan))
    problems[(problems == "") & ~finite] = "invalid value"
    problems[(problems == "") & (value < 0)] = "negative value"
    problems[(problems == "") & ~source.isin(SOURCES)] = "unknown source"

    bad = problems[problems != ""]
    for idx, reason in bad.items():
        msg = f"Line {idx + first_line}: {reason}: {df.loc[idx].tolist()}"
        if strict:
            raise DataError(f"Malformed reading; {msg}")
        if stats:
            stats.report_warning(f"Skipping malformed reading; {msg}")
        else:
            logger.warning(f"Skipping malformed reading; {msg}")
    if len(bad):
        logger.warning(f"Skipped {len(bad):,} malformed reading(s)")
    if stats:
        stats.add_count("preprocess.malformed", len(bad))

    ok = problems == ""
    return pd.DataFrame(
        {
            "account_id": account[ok],
            "date": date[ok],
            "value_kwh": value[ok].astype(float),
            "source": source[ok],
        }
    ).reset_index(drop=True)


def read_readings(path, strict=False, stats=None):
    """Read a readings CSV (`account_id,date,value_kwh,source`)."""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise DataError(f"Readings file not found: '{path}'") from None
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=list(READINGS_COLUMNS))
    except pd.errors.ParserError as e:
        raise DataError(f"Cannot parse readings file '{path}': {e}") from None
    df = df.replace("", np.nan)
    res = validate_readings(df, strict=strict, stats=stats)
    logger.info(f"Read {len(res):,} readings from '{path}'")
    return res


def read_labels(path):
    """Return the set of labeled account ids (one per line; blank lines ignored)."""
    try:
        df = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=True, names=["id"])
    except FileNotFoundError:
        raise DataError(f"Labels file not found: '{path}'") from None
    except pd.errors.EmptyDataError:
        return set()
    ids = df["id"].dropna().str.strip()
    return set(ids[ids != ""].tolist())


def write_readings(records, path):
    df = readings_frame(records)
    df.to_csv(path, index=False, columns=list(READINGS_COLUMNS), float_format="%.6f")
    return path


def write_labels(labels, path):
    with open(path, "w") as f:
        for account_id in sorted(labels):
            f.write(f"{account_id}\n")
    return path


# --- Pipeline stages ---------------------------------------------------------


def ingest_readings(records, horizon, outlier_cap, stats=None):
    """Build the account x month matrix.

    Readings outside the horizon and readings above `outlier_cap` are dropped
    (and counted). Several readings of one account in one month are summed.
    Accounts whose readings were all dropped keep an all-missing row.

    Args:
        records: readings DataFrame or iterable of :class:`RawReading`
        horizon (tuple): ('YYYY-MM', 'YYYY-MM'), both inclusive
        outlier_cap (float): largest accepted reading
    """
    check_arg(outlier_cap, (int, float), outlier_cap > 0)
    stats = stats or StatisticManager()
    months = month_range(*horizon)
    month_index = {m: i for i, m in enumerate(months)}

    df = readings_frame(records)
    if not isinstance(records, pd.DataFrame):
        df = validate_readings(df, strict=True)

    account_ids = sorted(set(df["account_id"].tolist()))
    row_index = {a: i for i, a in enumerate(account_ids)}

    col = df["date"].map(month_index)
    in_horizon = col.notna()
    n_out = int((~in_horizon).sum())
    outlier = in_horizon & (df["value_kwh"] > outlier_cap)
    n_outliers = int(outlier.sum())
    if n_outliers:
        logger.warning(f"Dropped {n_outliers:,} reading(s) above outlier cap {outlier_cap:g}")
    if n_out:
        logger.info(f"Dropped {n_out:,} reading(s) outside {horizon[0]}..{horizon[1]}")

    keep = in_horizon & ~outlier
    rows = df.loc[keep, "account_id"].map(row_index).to_numpy(dtype=np.int64)
    cols = col[keep].to_numpy(dtype=np.int64)
    vals = df.loc[keep, "value_kwh"].to_numpy(dtype=np.float64)

    total = np.zeros((len(account_ids), len(months)), dtype=np.float64)
    seen = np.zeros((len(account_ids), len(months)), dtype=bool)
    # Unbuffered, in file order: duplicates are summed deterministically
    np.add.at(total, (rows, cols), vals)
    seen[rows, cols] = True
    values = np.where(seen, total, MISSING)

    stats.add_count("preprocess.accounts_in", len(account_ids))
    stats.add_count("preprocess.readings_in", len(df))
    stats.add_count("preprocess.readings_out_of_horizon", n_out)
    stats.add_count("preprocess.readings_outliers", n_outliers)
    return ConsumptionMatrix(account_ids=account_ids, months=months, values=values)


def first_measurement(row):
    """Index of the first non-missing month (or None)."""
    present = np.flatnonzero(np.asarray(row) >= 0)
    return int(present[0]) if present.size else None


def interval_average(row, start=0):
    """Spread every measurement evenly over the months it covers.

    The interval of a measurement runs from the month after the previous
    measurement (or from `start` for the first one) up to and including its
    own month. Each month of the interval receives value / interval length.
    The series runs from `start` to the last measurement.

    Args:
        row (ndarray): one matrix row, negative entries are missing
        start (int): first covered month index
    Returns:
        ndarray (possibly empty)
    """
    row = np.asarray(row, dtype=np.float64)
    present = np.flatnonzero(row >= 0)
    if present.size == 0:
        return np.zeros(0, dtype=np.float64)
    check_arg(start, (int, np.integer), start >= 0)
    start = min(int(start), int(present[0]))
    series = np.empty(present[-1] - start + 1, dtype=np.float64)
    prev = start - 1
    for m in present:
        length = m - prev
        series[prev + 1 - start : m + 1 - start] = row[m] / length
        prev = m
    return series


def row_normalize(series):
    """Divide every entry by the series sum.

    Raises:
        DataError: for an empty or zero-sum series
    """
    series = np.asarray(series, dtype=np.float64)
    total = series.sum()
    if series.size == 0 or not total > 0:
        raise DataError(f"Cannot row-normalize a zero-sum series (sum={total})")
    return series / total


def clean_filter(series_set, min_len=7):
    """Remove empty, all-zero and short series.

    Args:
        series_set (dict): account_id -> series
        min_len (int): shortest series that is kept
    Returns:
        (kept dict, counts dict with 'removed_empty', 'removed_zero',
        'removed_short')
    """
    check_arg(series_set, dict)
    check_arg(min_len, int, min_len >= 1)
    kept = {}
    counts = {"removed_empty": 0, "removed_zero": 0, "removed_short": 0}
    for account_id, series in series_set.items():
        series = np.asarray(series)
        if series.size == 0:
            counts["removed_empty"] += 1
        elif not np.any(series != 0):
            counts["removed_zero"] += 1
        elif series.size < min_len:
            counts["removed_short"] += 1
        else:
            kept[account_id] = series
    return kept, counts


def pad_prune(series, target_len=58):
    """Keep the most recent `target_len` steps, or append zeros up to it."""
    check_arg(target_len, int, target_len >= 1)
    series = np.asarray(series, dtype=np.float64)
    if series.size >= target_len:
        return series[series.size - target_len :].copy()
    return np.concatenate([series, np.zeros(target_len - series.size, dtype=np.float64)])


def minmax_fit(dataset):
    """Fit a per-column min-max scaler; constant columns map to 0."""
    values = np.asarray(dataset, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise DataError(f"Cannot fit a scaler on a dataset of shape {values.shape}")
    return MinMaxScaler(feature_range=(0, 1), clip=True).fit(values)


def minmax_transform(scaler, dataset):
    values = np.asarray(dataset, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != scaler.n_features_in_:
        raise ShapeError(
            f"minmax_transform: dataset has shape {values.shape}, "
            f"scaler was fitted on {scaler.n_features_in_} columns"
        )
    return scaler.transform(values)



def run_pipeline(records, labels, config, stats=None):
    """Run all preprocessing stages.

    Args:
        records: readings DataFrame or iterable of :class:`RawReading`
        labels (set): labeled account ids
        config (dict): the `preprocess` config section
        stats (StatisticManager, optional): receives the stage counts
    Returns:
        :class:`NormalizedDataset`
    Raises:
        DataError: if no series survives cleaning
    """
    stats = stats or StatisticManager()
    horizon = (config["horizon_start"], config["horizon_end"])
    anchor = config.get("interval_anchor", "horizon")
    labels = set(labels or ())

    with stats.timer("preprocess.stage"):
        matrix = ingest_readings(records, horizon, config["outlier_cap"], stats=stats)

    unknown = labels.difference(matrix.account_ids)
    if unknown:
        logger.warning(f"{len(unknown):,} labeled account(s) have no readings")
    stats.set_value("preprocess.labeled_in", len(labels))

    with stats.timer("preprocess.stage"):
        averaged = {}
        for account_id, row in zip(matrix.account_ids, matrix.values):
            start = 0 if anchor == "horizon" else (first_measurement(row) or 0)
            averaged[account_id] = interval_average(row, start)

    with stats.timer("preprocess.stage"):
        normalized = {}
        removed_empty = removed_zero = 0
        for account_id, series in averaged.items():
            if series.size == 0:
                removed_empty += 1
            elif not series.sum() > 0:
                removed_zero += 1
            else:
                normalized[account_id] = row_normalize(series)

    with stats.timer("preprocess.stage"):
        kept, counts = clean_filter(normalized, min_len=config["min_len"])
    removed_empty += counts["removed_empty"]
    removed_zero += counts["removed_zero"]
    stats.add_count("preprocess.removed_empty", removed_empty)
    stats.add_count("preprocess.removed_zero", removed_zero)
    stats.add_count("preprocess.removed_short", counts["removed_short"])

    if not kept:
        raise DataError("No series survived cleaning")

    target_len = config["target_len"]
    with stats.timer("preprocess.stage"):
        ids = list(kept.keys())
        stats.add_count(
            "preprocess.truncated", sum(1 for a in ids if kept[a].size > target_len)
        )
        stats.add_count("preprocess.padded", sum(1 for a in ids if kept[a].size < target_len))
        fixed = np.vstack([pad_prune(kept[a], target_len) for a in ids])

    with stats.timer("preprocess.stage"):
        scaler = minmax_fit(fixed)
        values = minmax_transform(scaler, fixed)

    flags = np.array([a in labels for a in ids], dtype=bool)
    stats.add_count("preprocess.series_out", len(ids))
    stats.set_value("preprocess.labeled_out", int(flags.sum()))

    provenance = {
        k: v
        for k, v in stats.as_dict().get("preprocess", {}).items()
        if not k.startswith("stage_")
    }
    logger.info(
        "Preprocessing: {accounts_in:,} accounts -> {series_out:,} series "
        "(removed: {removed_empty} empty, {removed_zero} zero, {removed_short} short)".format(
            **provenance
        )
    )
    return NormalizedDataset(
        values=values,
        account_ids=np.array(ids, dtype=str),
        labels=flags,
        scaler_min=scaler.data_min_.copy(),
        scaler_max=scaler.data_max_.copy(),
        config_fingerprint=fingerprint(dict(config)),
        provenance=provenance,
    )
