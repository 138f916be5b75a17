import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)


def random_index(array_len, size=None, replace=False, rng=None):
    """
    Indices into an array of length `array_len`, drawn with a seeded Generator.
    """
    rng = np.random.default_rng(rng)
    if size is None:
        return int(rng.integers(array_len))
    if not replace:
        assert size <= array_len, "The array has to be longer than 'size' when sampling without replacement."
    return rng.choice(array_len, size=size, replace=replace)


def parse_list(text, cast=str, sep=","):
    """ "1,2,3" -> [1, 2, 3]; an empty string is an empty list. """
    if isinstance(text, (list, tuple)):
        return [cast(x) for x in text]
    text = str(text).strip()
    if not text:
        return []
    try:
        return [cast(x.strip()) for x in text.split(sep) if x.strip()]
    except ValueError:
        raise ValueError("cannot parse %r as a %r-separated list of %s" % (text, sep, cast.__name__))


def parse_shapes(text):
    """ "2x4x8x8,4x4x8x8" -> [[2, 4, 8, 8], [4, 4, 8, 8]]; a scalar operand is written as "" between commas. """
    shapes = []
    for part in str(text).split(","):
        part = part.strip()
        try:
            shapes.append([int(x) for x in part.split("x")] if part else [])
        except ValueError:
            raise ValueError("cannot parse shape %r (expected dims separated by 'x')" % part)
    return shapes


def loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    assert np.all(x > 0) and np.all(y > 0), "log-log slope needs positive data"
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def rank_correlation(x, y):
    """Spearman rank correlation; 0 when either input is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(stats.spearmanr(x, y)[0])


def ordered_map(fn, items, workers=1):
    """map over a bounded thread pool; results come back in input order."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_rows(path, header, rows, fmt="csv"):
    """Writes rows (lists in header order) as CSV or as a JSON list of objects."""
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_csv_cell(x) for x in row])
    elif fmt == "json":
        with open(path, "w") as f:
            json.dump(json_safe([dict(zip(header, row)) for row in rows]), f, indent=1)
            f.write("\n")
    else:
        raise ValueError('Unknown output format %r. Options are: "csv", "json"' % fmt)
    return path


def _csv_cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def json_safe(x):
    """Plain JSON types all the way down; NaN and infinities become null."""
    if isinstance(x, dict):
        return {str(k): json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [json_safe(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else None
    return x


class StageTimer:
    def __init__(self):
        self.times = {}

    @contextmanager
    def stage(self, name):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t
            logger.debug("stage %s took %.3fs", name, self.times[name])
