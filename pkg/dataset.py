import csv
from collections import deque

import numpy as np

from utils import random_index


class ColumnStore:
    """
    Named columns of equal length, appended row by row or column by column. Backs the training
    trace and the operator-learning samples.
    """

    def __init__(self, capacity=None):
        self.capacity = capacity
        self._data = {}

    def __len__(self):
        if not self._data:
            return 0
        return len(next(iter(self._data.values())))  # length of any column

    def columns(self):
        return list(self._data.keys())

    def items(self):
        if not self._data:
            raise ValueError("Trying to iterate over an empty dataset")
        return self._data.items()

    def __getitem__(self, name):
        return list(self._data[name])

    def add_column(self, name, examples):
        assert name not in self._data, "column %r already exists" % name
        assert len(self) == 0 or len(self) == len(examples), \
            "column %r has %i rows, dataset has %i" % (name, len(examples), len(self))
        self._data[name] = deque(examples, maxlen=self.capacity)

    def append(self, example):
        if not self._data:
            self._data = {k: deque([v], maxlen=self.capacity) for k, v in example.items()}
            return
        assert set(example) == set(self._data), "row keys %s do not match columns %s" % (sorted(example), self.columns())
        for k, v in example.items():
            self._data[k].append(v)

    def extend(self, examples):
        if isinstance(examples, ColumnStore):
            examples = {k: list(v) for k, v in examples.items()}
        if not self._data:
            self._data = {k: deque(v, maxlen=self.capacity) for k, v in examples.items()}
            return
        for k, v in examples.items():
            self._data[k].extend(v)

    def sample(self, size, rng=None):
        idx = random_index(len(self), size, replace=False, rng=rng)
        return {k: [col[i] for i in idx] for k, col in self._data.items()}

    def arrays(self):
        """Every column stacked into a numpy array."""
        return {k: np.asarray(list(col)) for k, col in self._data.items()}

    def to_csv(self, path, columns=None):
        columns = columns if columns is not None else self.columns()
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for row in zip(*(self._data[c] for c in columns)):
                writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
        return path
