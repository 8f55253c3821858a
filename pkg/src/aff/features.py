"""Containers for per-item gallery features.

``FeatureBundle`` holds one item. ``FeatureSet`` is the columnar form used
for batched training and evaluation: every item shares one family schema, so
each family is a single stacked array.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError
from .numerics import l2_normalize

GLOBAL = "global"
LOCAL = "local"


@dataclass(frozen=True)
class Family:
    """Schema entry: a global family has ``count == 1`` by definition."""

    kind: str
    dim: int
    count: int = 1

    @property
    def width(self):
        return self.dim * self.count


@dataclass
class FeatureBundle:
    globals: list
    locals: list
    item_id: int = 0
    label: int | None = None

    def __post_init__(self):
        self.globals = [np.asarray(g) for g in self.globals]
        self.locals = [np.asarray(m) for m in self.locals]
        for g in self.globals:
            if g.ndim != 1:
                raise SchemaError("global features must be vectors")
        for m in self.locals:
            if m.ndim != 2:
                raise SchemaError("local features must be (n, dim) matrices")
        if len(self.globals) + sum(m.shape[0] for m in self.locals) < 1:
            raise SchemaError("a bundle needs at least one feature")
        for a in (*self.globals, *self.locals):
            if not np.all(np.isfinite(a)):
                raise SchemaError("features must be finite")

    @classmethod
    def from_raw(cls, globals, locals=(), item_id=0, label=None):
        """Build a bundle, L2-normalizing each global feature on the way in."""
        return cls([l2_normalize(np.asarray(g, dtype=np.float64)) for g in globals],
                   list(locals), item_id, label)

    @property
    def schema(self):
        return tuple([Family(GLOBAL, g.shape[0]) for g in self.globals]
                     + [Family(LOCAL, m.shape[1], m.shape[0]) for m in self.locals])

    @property
    def num_tokens(self):
        return len(self.globals) + sum(m.shape[0] for m in self.locals)


@dataclass
class FeatureSet:
    """Columnar batch of bundles sharing one schema.

    ``globals[i]`` is ``(B, D_i)``; ``locals[i]`` is ``(B, n_i, d_i)``.
    ``query_views`` optionally carries each item's degraded query-side input.
    """

    globals: list
    locals: list
    ids: np.ndarray
    labels: np.ndarray
    query_views: np.ndarray | None = None
    junk: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.ids.shape[0]
        for a in (*self.globals, *self.locals):
            if a.shape[0] != n:
                raise SchemaError("every family must have one row per item")
        if self.labels.shape[0] != n:
            raise SchemaError("labels must have one entry per item")
        if self.query_views is not None and self.query_views.shape[0] != n:
            raise SchemaError("query views must have one row per item")

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def schema(self):
        return tuple([Family(GLOBAL, g.shape[1]) for g in self.globals]
                     + [Family(LOCAL, m.shape[2], m.shape[1]) for m in self.locals])

    @property
    def num_tokens(self):
        return sum(f.count for f in self.schema)

    def bundle(self, i):
        return FeatureBundle([g[i] for g in self.globals], [m[i] for m in self.locals],
                             int(self.ids[i]), int(self.labels[i]))

    def bundles(self):
        return [self.bundle(i) for i in range(len(self))]

    def subset(self, index):
        index = np.asarray(index)
        return FeatureSet(
            [g[index] for g in self.globals],
            [m[index] for m in self.locals],
            self.ids[index],
            self.labels[index],
            None if self.query_views is None else self.query_views[index],
        )

    def select_families(self, global_idx=None, local_idx=None):
        """Keep only the listed families (``None`` keeps all of that kind)."""
        gi = range(len(self.globals)) if global_idx is None else global_idx
        li = range(len(self.locals)) if local_idx is None else local_idx
        return FeatureSet([self.globals[i] for i in gi], [self.locals[i] for i in li],
                          self.ids, self.labels, self.query_views, dict(self.junk))

    def with_globals(self, extra):
        return FeatureSet(list(self.globals) + list(extra), list(self.locals),
                          self.ids, self.labels, self.query_views, dict(self.junk))

    def astype(self, dtype):
        return FeatureSet([g.astype(dtype) for g in self.globals],
                          [m.astype(dtype) for m in self.locals], self.ids, self.labels,
                          None if self.query_views is None else self.query_views.astype(dtype),
                          dict(self.junk))

    def flat(self):
        """All features concatenated per item, globals first (``(B, sum widths)``)."""
        parts = list(self.globals) + [m.reshape(m.shape[0], -1) for m in self.locals]
        return np.concatenate(parts, axis=1)

    @classmethod
    def from_bundles(cls, bundles, query_views=None):
        bundles = list(bundles)
        if not bundles:
            raise SchemaError("no bundles given")
        schema = bundles[0].schema
        for b in bundles[1:]:
            if b.schema != schema:
                raise SchemaError("bundles do not share one family schema")
        k = len(bundles[0].globals)
        m = len(bundles[0].locals)
        return cls(
            [np.stack([b.globals[i] for b in bundles]) for i in range(k)],
            [np.stack([b.locals[i] for b in bundles]) for i in range(m)],
            [b.item_id for b in bundles],
            [-1 if b.label is None else b.label for b in bundles],
            query_views,
        )
