# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
import threading
import time
from contextlib import contextmanager

from riskformer.util import format_elap, get_dict_attr, logger


class StatisticManager:
    """
    Collect counters and timings of one command run.

    Values live in a nested dict and are addressed with dotted keys.

    Example::

        {'preprocess': {'accounts_in': 12,
                        'removed_empty': 1,
                        'removed_short': 3,
                        'removed_zero': 2,
                        'series_out': 6,
                        'stage_count': 7,
                        'stage_time': 0.0132,
                        'stage_time_avg': 0.0019,
                        'stage_time_max': 0.0061,
                        'stage_time_min': 0.0002},
         'train': {'epoch_count': 30,
                   'epoch_time': 41.2,
                   ...},
         'errors': 0,
         'warnings': 2}
    """

    def __init__(self):
        self._lock = threading.RLock()
        self.stats = {
            "errors": 0,
            "warnings": 0,
        }

    def __getitem__(self, key):
        return get_dict_attr(self.stats, key)

    def get(self, key, default=None):
        return get_dict_attr(self.stats, key, default)

    def _section(self, key_path):
        """Return (parent dict, leaf key) for a dotted path, creating parents."""
        segs = key_path.split(".")
        d = self.stats
        for seg in segs[:-1]:
            d = d.setdefault(seg, {})
        return d, segs[-1]

    def add_count(self, key_path, n=1):
        with self._lock:
            d, key = self._section(key_path)
            d[key] = d.get(key, 0) + n
            return d[key]

    def set_value(self, key_path, value):
        with self._lock:
            d, key = self._section(key_path)
            d[key] = value

    def add_timing(self, key_path, elap):
        """Add one measurement to `<key_path>_count`, `_time`, `_time_min`, ..."""
        with self._lock:
            d, key = self._section(key_path)
            self._add_timing(d, key + "_", elap)

    @contextmanager
    def timer(self, key_path):
        start = time.monotonic()
        try:
            yield
        finally:
            self.add_timing(key_path, time.monotonic() - start)

    def _add_timing(self, d, key_prefix, elap):
        p = key_prefix
        count = d.setdefault(p + "count", 0) + 1
        time_tot = d.setdefault(p + "time", 0.0) + elap
        time_max = d.setdefault(p + "time_max", 0.0)
        time_min = d.setdefault(p + "time_min", 0.0)

        d[p + "count"] = count
        d[p + "time"] = time_tot
        if elap > time_max:
            d[p + "time_max"] = elap
        if time_min == 0.0 or elap < time_min:
            d[p + "time_min"] = elap
        d[p + "time_avg"] = time_tot / count
        return

    def report_warning(self, msg):
        with self._lock:
            self.stats["warnings"] += 1
        logger.warning(msg)

    def report_error(self, msg):
        with self._lock:
            self.stats["errors"] += 1
            self.stats["last_error"] = msg

    def error_count(self):
        return self.stats["errors"]

    def has_errors(self):
        return self.error_count() > 0

    def as_dict(self):
        """Return a deep copy that can be dumped as YAML."""

        def _copy(value):
            if isinstance(value, dict):
                return {k: _copy(v) for k, v in value.items()}
            if hasattr(value, "item"):
                return value.item()
            return value

        with self._lock:
            return _copy(self.stats)

    def format_timing(self, key_path):
        """Return 'n x, total, avg' for a timing key (or 'n.a.')."""
        d = self.get(key_path.rsplit(".", 1)[0]) if "." in key_path else self.stats
        key = key_path.rsplit(".", 1)[-1]
        if not isinstance(d, dict) or (key + "_count") not in d:
            return "n.a."
        return "{:,} x, total {}, avg {}".format(
            d[key + "_count"],
            format_elap(d[key + "_time"]),
            format_elap(d[key + "_time_avg"], high_prec=True),
        )
