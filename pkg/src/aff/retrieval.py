"""Exact cosine retrieval and mAP evaluation.

Rankings sort by descending cosine score; equal scores are broken by
ascending item id so every ranking is reproducible.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateInputError, SchemaError
from .numerics import l2_normalize

PROTOCOLS = ("symmetric", "asymmetric", "ensemble")


@dataclass(frozen=True)
class RetrievalIndex:
    ids: np.ndarray
    embeddings: np.ndarray
    tag: str = ""

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def __len__(self):
        return int(self.ids.shape[0])


def build_index(embeddings, ids=None, tag=""):
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise SchemaError("index needs a non-empty (n, d) embedding matrix")
    ids = np.arange(emb.shape[0], dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape[0] != emb.shape[0]:
        raise SchemaError("one id per embedding row is required")
    if np.unique(ids).size != ids.size:
        raise SchemaError("index ids must be unique")
    try:
        emb = l2_normalize(emb)
    except DegenerateInputError:
        raise DegenerateInputError("index contains a zero embedding") from None
    emb.setflags(write=False)
    return RetrievalIndex(ids.copy(), emb, tag)


def search(index, query, k=None):
    """Top-``k`` ``(ids, scores)`` for one query vector."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise SchemaError(f"query has shape {q.shape}, index dim is {index.dim}")
    k = len(index) if k is None else k
    if not 0 <= k <= len(index):
        raise SchemaError(f"k={k} exceeds index size {len(index)}")
    scores = index.embeddings @ l2_normalize(q)
    order = np.lexsort((index.ids, -scores))[:k]
    return index.ids[order], scores[order]


def average_precision(ranked_ids, positives, junk=()):
    """AP of one ranking; ``None`` when no positive survives junk removal.

    Accumulates in exact rationals and rounds once, so the result is the
    correctly rounded AP. Bulk evaluation goes through the batched kernel.
    """
    junk = set(junk)
    positives = set(positives) - junk
    if not positives:
        return None
    hits = 0
    total = Fraction(0)
    rank = 0
    for item in ranked_ids:
        if item in junk:
            continue
        rank += 1
        if item in positives:
            hits += 1
            total += Fraction(hits, rank)
    return float(total / len(positives))


def mean_average_precision(query_emb, gallery_emb, query_labels, gallery_labels,
                           gallery_ids=None, junk=None, top_k=0):
    """Per-query APs (``nan`` where skipped) using the selected kernel backend."""
    q = np.ascontiguousarray(query_emb, dtype=np.float64)
    g = np.ascontiguousarray(gallery_emb, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise SchemaError("query and gallery embeddings differ in width")
    gids = np.arange(g.shape[0], dtype=np.int64) if gallery_ids is None else gallery_ids
    scores = np.ascontiguousarray(q @ g.T)
    ap, valid = kernels.average_precision_batch(
        scores, np.ascontiguousarray(gids, dtype=np.int64),
        np.ascontiguousarray(gallery_labels, dtype=np.int64),
        np.ascontiguousarray(query_labels, dtype=np.int64), junk, int(top_k))
    ap = np.asarray(ap)
    ap[np.asarray(valid) == 0] = np.nan
    return ap


def family_embeddings(fs, family):
    """Normalized raw features of one family; locals are flattened first."""
    ng = len(fs.globals)
    x = fs.globals[family] if family < ng else fs.locals[family - ng].reshape(len(fs), -1)
    return l2_normalize(x.astype(np.float64))


def ensemble_embeddings(fs):
    """Each family normalized on its own, concatenated, normalized again."""
    parts = [family_embeddings(fs, i) for i in range(len(fs.globals) + len(fs.locals))]
    return l2_normalize(np.concatenate(parts, axis=1))


@dataclass
class EvalReport:
    protocol: str
    query_model: str
    gallery_model: str
    query_ids: list
    aps: list
    skipped: list = field(default_factory=list)
    top_k: int = 0
    timing: dict = field(default_factory=dict)

    @property
    def mAP(self):
        return float(np.mean(self.aps)) if self.aps else float("nan")

    def to_dict(self, timing=False):
        d = {
            "protocol": self.protocol,
            "query_model": self.query_model,
            "gallery_model": self.gallery_model,
            "mAP": self.mAP,
            "top_k": self.top_k,
            "num_queries": len(self.aps),
            "skipped": list(self.skipped),
            "per_query": [{"id": i, "ap": a} for i, a in zip(self.query_ids, self.aps)],
        }
        if timing:
            d["timing"] = dict(self.timing)
        return d

    def write_json(self, path, timing=False):
        with open(path, "w") as fh:
            json.dump(self.to_dict(timing), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "ap"])
            for i, a in zip(self.query_ids, self.aps):
                w.writerow([i, repr(float(a))])


def _embed_side(protocol, side, fs, mixer, encoder):
    if protocol == "ensemble":
        return ensemble_embeddings(fs), "ensemble"
    if protocol == "asymmetric" and side == "query":
        if encoder is None:
            raise ConfigError("asymmetric evaluation needs a query encoder")
        return encoder.embed(fs), "encoder"
    if mixer is None:
        raise ConfigError(f"{protocol} evaluation needs a mixer")
    return mixer.embed(fs), f"mixer:{mixer.kind}"


def evaluate_protocol(query_set, gallery_set, protocol, mixer=None, encoder=None, top_k=0, junk=None):
    """Embed both sides per ``protocol`` and score every query against the gallery."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    t0 = time.perf_counter()
    g_emb, g_tag = _embed_side(protocol, "gallery", gallery_set, mixer, encoder)
    index = build_index(g_emb, gallery_set.ids, g_tag)
    t1 = time.perf_counter()
    q_emb, q_tag = _embed_side(protocol, "query", query_set, mixer, encoder)
    ap = mean_average_precision(q_emb, index.embeddings, query_set.labels, gallery_set.labels,
                                index.ids, junk, top_k)
    t2 = time.perf_counter()
    keep = ~np.isnan(ap)
    return EvalReport(
        protocol=protocol,
        query_model=q_tag,
        gallery_model=g_tag,
        query_ids=[int(i) for i in query_set.ids[keep]],
        aps=[float(a) for a in ap[keep]],
        skipped=[int(i) for i in query_set.ids[~keep]],
        top_k=int(top_k),
        timing={"index_build_s": t1 - t0, "mean_query_latency_s": (t2 - t1) / max(1, len(query_set)),
                "backend": kernels.BACKEND},
    )
