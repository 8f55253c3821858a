"""Pure-numpy fallback for the compiled kernels (identical results)."""
import numpy as np


def average_precision_batch(scores, gallery_ids, gallery_labels, query_labels, junk=None, top_k=0):
    scores = np.asarray(scores, dtype=np.float64)
    nq, ng = scores.shape
    by_id = np.argsort(gallery_ids, kind="stable")
    # stable descending sort over id-ordered columns breaks ties by ascending id
    order = by_id[np.argsort(-scores[:, by_id], axis=1, kind="stable")]
    rel = gallery_labels[order] == np.asarray(query_labels)[:, None]
    keep = np.ones_like(rel) if junk is None else ~np.take_along_axis(np.asarray(junk, bool), order, 1)
    out = np.zeros(nq)
    valid = np.zeros(nq, dtype=np.uint8)
    for q in range(nq):
        r = rel[q][keep[q]]
        n_pos = int(r.sum())
        if n_pos == 0:
            continue
        ranks = np.flatnonzero(r) + 1
        hits = np.arange(1, n_pos + 1)
        if top_k > 0:
            inside = ranks <= top_k
            ranks, hits = ranks[inside], hits[inside]
            n_pos = min(n_pos, top_k)
        # left-to-right accumulation, matching the compiled loop bit for bit
        out[q] = (np.cumsum(hits / ranks)[-1] if hits.size else 0.0) / n_pos
        valid[q] = 1
    return out, valid
