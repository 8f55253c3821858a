# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled average-precision kernel.

For each query the positives are sorted once (P log P); every negative is
then placed among them by binary search (G log P). No full ranking of the
gallery is ever materialized.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline bint _before(double sa, long long ia, double sb, long long ib) nogil:
    return sa > sb or (sa == sb and ia < ib)


cdef void _sort_positives(double* s, long long* ids, Py_ssize_t n) nogil:
    # insertion sort; positive lists are short
    cdef Py_ssize_t i, j
    cdef double ks
    cdef long long ki
    for i in range(1, n):
        ks = s[i]
        ki = ids[i]
        j = i - 1
        while j >= 0 and _before(ks, ki, s[j], ids[j]):
            s[j + 1] = s[j]
            ids[j + 1] = ids[j]
            j -= 1
        s[j + 1] = ks
        ids[j + 1] = ki


def average_precision_batch(const double[:, ::1] scores,
                            const long long[::1] gallery_ids,
                            const long long[::1] gallery_labels,
                            const long long[::1] query_labels,
                            junk=None,
                            Py_ssize_t top_k=0):
    cdef Py_ssize_t nq = scores.shape[0], ng = scores.shape[1]
    cdef Py_ssize_t q, j, p, lo, hi, mid, k, n_pos, rank, seen, denom
    cdef double acc
    cdef const unsigned char[:, ::1] junk_view
    cdef bint has_junk = junk is not None
    if has_junk:
        junk_view = np.ascontiguousarray(junk, dtype=np.uint8)
    out = np.zeros(nq, dtype=np.float64)
    valid = np.zeros(nq, dtype=np.uint8)
    cdef double[::1] out_v = out
    cdef unsigned char[::1] valid_v = valid
    cdef double* ps = <double*> malloc(ng * sizeof(double))
    cdef long long* pid = <long long*> malloc(ng * sizeof(long long))
    cdef Py_ssize_t* bucket = <Py_ssize_t*> malloc((ng + 1) * sizeof(Py_ssize_t))
    if ps == NULL or pid == NULL or bucket == NULL:
        free(ps); free(pid); free(bucket)
        raise MemoryError()
    try:
        with nogil:
            for q in range(nq):
                n_pos = 0
                for j in range(ng):
                    if has_junk and junk_view[q, j]:
                        continue
                    if gallery_labels[j] == query_labels[q]:
                        ps[n_pos] = scores[q, j]
                        pid[n_pos] = gallery_ids[j]
                        n_pos += 1
                if n_pos == 0:
                    continue
                _sort_positives(ps, pid, n_pos)
                for p in range(n_pos + 1):
                    bucket[p] = 0
                for j in range(ng):
                    if has_junk and junk_view[q, j]:
                        continue
                    if gallery_labels[j] == query_labels[q]:
                        continue
                    # number of positives ranked ahead of this negative
                    lo = 0
                    hi = n_pos
                    while lo < hi:
                        mid = (lo + hi) >> 1
                        if _before(ps[mid], pid[mid], scores[q, j], gallery_ids[j]):
                            lo = mid + 1
                        else:
                            hi = mid
                    bucket[lo] += 1
                acc = 0.0
                seen = 0
                for k in range(n_pos):
                    seen += bucket[k]
                    rank = 1 + k + seen
                    if top_k > 0 and rank > top_k:
                        break
                    acc += (k + 1.0) / rank
                denom = n_pos
                if top_k > 0 and top_k < denom:
                    denom = top_k
                out_v[q] = acc / denom
                valid_v[q] = 1
    finally:
        free(ps)
        free(pid)
        free(bucket)
    return out, valid
