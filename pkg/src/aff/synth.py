"""Synthetic multi-model feature datasets.

Each class owns a latent vector. Every feature family observes its own slice
of the latent (slices overlap but differ, so families are complementary)
through a fixed random isometry, plus item noise. Noise families ignore the
latent entirely. The query view sees the full latent through a different map
with heavier noise than any gallery family.

Local families describe a class as a set of parts: each local vector sees
one chunk of the family's slice, and parts arrive in a random order per item.
An optional low-rank nuisance adds class-independent variation shared by
every class, and an optional failure rate swaps some vectors for a generic
background output.

Scaling: the signal part of every emitted vector has norm close to 1 and the
noise part has norm close to ``sigma``, so ``1 / sigma`` is the family's
signal-to-noise ratio.

An optional training pool (``train_classes``) draws extra classes used only
for training, disjoint from the evaluation classes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .features import FeatureSet

KINDS = ("global", "local", "noise")


@dataclass(frozen=True)
class FamilySpec:
    kind: str
    dim: int
    informative: int = 8
    offset: int = 0
    sigma: float = 1.0
    count: int = 1
    jitter: float = 0.0
    nuisance_rank: int = 0
    nuisance_sigma: float = 0.0
    failure_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"family kind must be one of {KINDS}, got {self.kind!r}")
        if self.dim < 2:
            raise ConfigError("family dim must be >= 2")
        if self.kind != "noise" and not 1 <= self.informative <= self.dim:
            raise ConfigError("informative subspace must fit inside the family dim")
        if self.count < 1:
            raise ConfigError("local families need at least one vector")
        if self.kind == "local" and self.count > self.informative:
            raise ConfigError("a local family cannot have more parts than informative dims")
        if not 0 <= self.failure_rate < 1:
            raise ConfigError("failure rate must lie in [0, 1)")
        if not 0 <= self.nuisance_rank <= self.dim:
            raise ConfigError("nuisance rank must lie in [0, dim]")


def default_families():
    """Three global families and one local family of four parts.

    Every family carries a rank-4, class-independent nuisance component
    (think viewpoint or illumination) stronger than its class signal: raw
    cosine similarity cannot discount it, a learned projection can.
    """
    nuisance = dict(nuisance_rank=4, nuisance_sigma=1.3)
    return [
        FamilySpec("global", 24, informative=16, offset=0, sigma=0.7, **nuisance),
        FamilySpec("global", 32, informative=16, offset=12, sigma=0.7, **nuisance),
        FamilySpec("global", 40, informative=16, offset=24, sigma=0.7, **nuisance),
        FamilySpec("local", 16, informative=12, offset=34, sigma=0.7, count=4, jitter=0.3, **nuisance),
    ]


@dataclass(frozen=True)
class GenSpec:
    num_classes: int = 20
    items_per_class: int = 15
    latent_dim: int = 48
    families: tuple = field(default_factory=lambda: tuple(default_families()))
    query_dim: int = 48
    query_sigma: float = 1.2
    query_nuisance_rank: int = 4
    query_nuisance_sigma: float = 1.3
    split: tuple = (7, 5, 3)
    train_classes: int = 0
    train_items_per_class: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        object.__setattr__(self, "split", tuple(self.split))
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.train_classes < 0 or (self.train_classes and self.train_items_per_class < 1):
            raise ConfigError("the training pool needs a non-negative class count and >= 1 item per class")
        if self.latent_dim < 2 or self.query_dim < 2:
            raise ConfigError("latent and query dims must be >= 2")
        if not 0 <= self.query_nuisance_rank <= self.query_dim:
            raise ConfigError("query nuisance rank must lie in [0, query_dim]")
        if len(self.split) != 3 or sum(self.split) != self.items_per_class or min(self.split[1:]) < 1 \
                or self.split[0] < 0 or (self.split[0] == 0 and not self.train_classes):
            raise ConfigError("split must be (train, gallery, query) counts summing to items_per_class, "
                              "with at least one gallery and one query item per class")
        for fam in self.families:
            if fam.kind != "noise" and fam.informative > self.latent_dim:
                raise ConfigError("informative subspace larger than the latent")
        signal = [f.sigma for f in self.families if f.kind != "noise"]
        # weak families may be noisier than the query view; the best gallery family may not
        if signal and self.query_sigma <= min(signal):
            raise ConfigError("query_sigma must exceed the sigma of the strongest gallery family")


@dataclass
class SynthDataset:
    train: FeatureSet
    gallery: FeatureSet
    query: FeatureSet
    spec: GenSpec
    num_classes: int

    def splits(self):
        return {"train": self.train, "gallery": self.gallery, "query": self.query}

    def checksum(self):
        h = hashlib.sha256()
        for name, fs in self.splits().items():
            h.update(name.encode())
            for arr in (fs.ids, fs.labels, *fs.globals, *fs.locals, fs.query_views):
                if arr is not None:
                    a = np.ascontiguousarray(arr)
                    h.update(str(a.shape).encode())
                    h.update(a.tobytes())
        return h.hexdigest()

    def map_sets(self, fn):
        return replace(self, train=fn(self.train), gallery=fn(self.gallery), query=fn(self.query))


def _isometry(rng, rows, cols):
    """``rows x cols`` matrix with orthonormal columns (rows >= cols) or rows (rows < cols)."""
    m = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, _ = np.linalg.qr(m)
    return q if rows >= cols else q.T


def _normalize(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _subspace(fam, latent_dim):
    return (fam.offset + np.arange(fam.informative)) % latent_dim


def _emit(fam, maps, latent, rng, n_items):
    """Features of one family for items whose class latents are ``latent`` (``(B, L)``)."""
    shape = (n_items, fam.count, fam.dim) if fam.kind == "local" else (n_items, fam.dim)
    if fam.kind == "noise":
        return _normalize(fam.sigma * rng.standard_normal(shape))
    sub = latent[:, maps["index"]]
    signal = sub @ maps["A"].T / np.sqrt(fam.informative)
    noise = fam.sigma * rng.standard_normal((n_items, fam.dim)) / np.sqrt(fam.dim)
    if fam.nuisance_rank:
        # class-independent, low-rank item variation shared by every class
        u = rng.standard_normal((n_items, fam.nuisance_rank)) / np.sqrt(fam.nuisance_rank)
        noise = noise + fam.nuisance_sigma * u @ maps["U"].T
    if fam.kind == "global":
        return _fail(fam, maps, rng, _normalize(signal + noise))
    # each local vector describes one chunk of the family's slice (a "part"),
    # and parts arrive in a random order per item, as region descriptors do
    chunks = np.array_split(np.arange(fam.informative), fam.count)
    parts = np.stack([sub[:, c] @ maps["A"][:, c].T / np.sqrt(len(c)) for c in chunks], axis=1)
    order = np.argsort(rng.random((n_items, fam.count)), axis=1)
    parts = np.take_along_axis(parts, order[:, :, None], axis=1)
    jitter = fam.jitter * rng.standard_normal(shape) / np.sqrt(fam.dim)
    return _fail(fam, maps, rng, _normalize(parts + noise[:, None, :] + jitter))


def _fail(fam, maps, rng, feats):
    """Replace a ``failure_rate`` fraction of vectors by the family's generic background output."""
    if not fam.failure_rate:
        return feats
    hit = rng.random(feats.shape[:-1]) < fam.failure_rate
    blank = maps["background"] + fam.sigma * rng.standard_normal(feats.shape) / np.sqrt(fam.dim)
    return np.where(hit[..., None], _normalize(blank), feats)


def generate(spec=GenSpec()):
    """Deterministic dataset for ``spec`` (bit-identical for equal specs)."""
    root = np.random.SeedSequence(spec.seed)
    s_latent, s_maps, s_items, s_split = root.spawn(4)
    latent_rng = np.random.default_rng(s_latent)
    total_classes = spec.num_classes + spec.train_classes
    class_latent = latent_rng.standard_normal((total_classes, spec.latent_dim))

    map_rng = np.random.default_rng(s_maps)
    maps = []
    for fam in spec.families:
        if fam.kind == "noise":
            maps.append(None)
        else:
            m = {"index": _subspace(fam, spec.latent_dim),
                 "A": _isometry(map_rng, fam.dim, fam.informative)}
            if fam.nuisance_rank:
                m["U"] = _isometry(map_rng, fam.dim, fam.nuisance_rank)
            if fam.failure_rate:
                m["background"] = _normalize(map_rng.standard_normal(fam.dim))
            maps.append(m)
    query_map = _isometry(map_rng, spec.query_dim, spec.latent_dim)
    if spec.query_nuisance_rank:
        query_nuisance = _isometry(map_rng, spec.query_dim, spec.query_nuisance_rank)

    # evaluation classes first, then the disjoint training-only pool
    labels = np.concatenate([np.repeat(np.arange(spec.num_classes), spec.items_per_class),
                             np.repeat(np.arange(spec.num_classes, total_classes),
                                       spec.train_items_per_class)])
    n = labels.shape[0]
    ids = np.arange(n, dtype=np.int64)
    latent = class_latent[labels]

    item_rng = np.random.default_rng(s_items)
    globals_, locals_ = [], []
    for fam, m in zip(spec.families, maps):
        feats = _emit(fam, m, latent, item_rng, n).astype(np.float32)
        (locals_ if fam.kind == "local" else globals_).append(feats)
    q_signal = latent @ query_map.T / np.sqrt(spec.latent_dim)
    q_noise = spec.query_sigma * item_rng.standard_normal((n, spec.query_dim)) / np.sqrt(spec.query_dim)
    if spec.query_nuisance_rank:
        # the query image carries the same kind of nuisance the gallery extractors see
        u = item_rng.standard_normal((n, spec.query_nuisance_rank)) / np.sqrt(spec.query_nuisance_rank)
        q_noise = q_noise + spec.query_nuisance_sigma * u @ query_nuisance.T
    query_views = _normalize(q_signal + q_noise).astype(np.float32)
    full = FeatureSet(globals_, locals_, ids, labels, query_views)

    split_rng = np.random.default_rng(s_split)
    n_train, n_gallery, _ = spec.split
    parts = {"train": [], "gallery": [], "query": []}
    for c in range(spec.num_classes):
        members = split_rng.permutation(np.flatnonzero(labels == c))
        parts["train"].extend(members[:n_train])
        parts["gallery"].extend(members[n_train:n_train + n_gallery])
        parts["query"].extend(members[n_train + n_gallery:])
    parts["train"].extend(np.flatnonzero(labels >= spec.num_classes))
    sets = {k: full.subset(np.sort(np.asarray(v, dtype=np.int64))) for k, v in parts.items()}
    return SynthDataset(sets["train"], sets["gallery"], sets["query"], spec, total_classes)


def inject_noise_families(ds, count=1, dim=32, sigma=1.0, seed=None):
    """Append ``count`` pure-Gaussian global families to every item of every split."""
    if count == 0:
        return ds
    rng = np.random.default_rng(np.random.SeedSequence(
        [ds.spec.seed if seed is None else seed, 0x6E6F6973]))
    out = {}
    for name, fs in ds.splits().items():
        extra = [_normalize(sigma * rng.standard_normal((len(fs), dim))).astype(np.float32)
                 for _ in range(count)]
        out[name] = fs.with_globals(extra)
    noise = tuple(FamilySpec("noise", dim, sigma=sigma) for _ in range(count))
    spec = replace(ds.spec, families=ds.spec.families + noise)
    return SynthDataset(out["train"], out["gallery"], out["query"], spec, ds.num_classes)


def weak_family_bank():
    """Three low-quality global families: heavy noise, narrow informative slices."""
    return [
        FamilySpec("global", 32, informative=6, offset=4, sigma=2.5),
        FamilySpec("global", 32, informative=6, offset=20, sigma=2.5),
        FamilySpec("global", 48, informative=6, offset=36, sigma=2.5),
    ]


def with_families(spec, extra):
    return replace(spec, families=tuple(spec.families) + tuple(extra))


def random_ranking_ap(n_items, n_positives):
    """Expected average precision of a uniformly random ranking.

    With ``P`` positives among ``n`` items the expectation is
    ``((P - 1) / (n - 1)) * (1 - H_n / n) + H_n / n`` where ``H_n`` is the
    ``n``-th harmonic number.
    """
    n, p = int(n_items), int(n_positives)
    if not 1 <= p <= n:
        raise ValueError("need 1 <= positives <= items")
    h = float(np.sum(1.0 / np.arange(1, n + 1)))
    if n == 1:
        return 1.0
    return (p - 1) / (n - 1) * (1.0 - h / n) + h / n
