# cython: language_level=3
"""Compiled restricted-attention label propagation kernel.

Mirrors ``_kernel_py.propagate_frame_py`` op for op; see _recipe.md for
the arithmetic contract that keeps the two bitwise identical.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def propagate_frame_c(
    cnp.ndarray[cnp.float64_t, ndim=3] target_feats,
    cnp.ndarray[cnp.float64_t, ndim=4] context_feats,
    cnp.ndarray[cnp.float64_t, ndim=4] context_labels,
    int radius,
    int top_k,
    double temperature,
):
    """Propagate labels from context frames onto one target frame.

    target_feats: (h, w, d) float64, rows assumed unit length
    context_feats: (n, h, w, d) float64
    context_labels: (n, h, w, c) float64
    Returns (h, w, c) float64 labels, each cell renormalized to sum 1.
    """
    cdef int h = target_feats.shape[0]
    cdef int w = target_feats.shape[1]
    cdef int d = target_feats.shape[2]
    cdef int n = context_feats.shape[0]
    cdef int c = context_labels.shape[3]

    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((h, w, c), dtype=np.float64)

    # top-k scratch, kept sorted best-first
    cdef cnp.ndarray[cnp.float64_t, ndim=1] best_sim = np.empty(top_k, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] best_frame = np.empty(top_k, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] best_cell = np.empty(top_k, dtype=np.int64)

    cdef int y, x, f, y2, x2, k, i, j, kept, cell
    cdef int y_lo, y_hi, x_lo, x_hi
    cdef double sim, max_sim, total, weight, norm
    cdef bint better

    for y in range(h):
        for x in range(w):
            kept = 0
            for f in range(n):
                y_lo = y - radius
                if y_lo < 0:
                    y_lo = 0
                y_hi = y + radius
                if y_hi > h - 1:
                    y_hi = h - 1
                x_lo = x - radius
                if x_lo < 0:
                    x_lo = 0
                x_hi = x + radius
                if x_hi > w - 1:
                    x_hi = w - 1
                for y2 in range(y_lo, y_hi + 1):
                    for x2 in range(x_lo, x_hi + 1):
                        sim = 0.0
                        for k in range(d):
                            sim = sim + target_feats[y, x, k] * context_feats[f, y2, x2, k]
                        cell = y2 * w + x2
                        # insertion position under (sim desc, frame desc, cell asc)
                        i = kept
                        while i > 0:
                            better = False
                            if sim > best_sim[i - 1]:
                                better = True
                            elif sim == best_sim[i - 1]:
                                if f > best_frame[i - 1]:
                                    better = True
                                elif f == best_frame[i - 1] and cell < best_cell[i - 1]:
                                    better = True
                            if not better:
                                break
                            i = i - 1
                        if i >= top_k:
                            continue
                        if kept < top_k:
                            kept = kept + 1
                        j = kept - 1
                        while j > i:
                            best_sim[j] = best_sim[j - 1]
                            best_frame[j] = best_frame[j - 1]
                            best_cell[j] = best_cell[j - 1]
                            j = j - 1
                        best_sim[i] = sim
                        best_frame[i] = f
                        best_cell[i] = cell

            max_sim = best_sim[0]
            total = 0.0
            for i in range(kept):
                best_sim[i] = exp((best_sim[i] - max_sim) / temperature)
                total = total + best_sim[i]
            for i in range(kept):
                weight = best_sim[i] / total
                f = <int>best_frame[i]
                y2 = <int>(best_cell[i] // w)
                x2 = <int>(best_cell[i] % w)
                for k in range(c):
                    out[y, x, k] = out[y, x, k] + weight * context_labels[f, y2, x2, k]
            norm = 0.0
            for k in range(c):
                norm = norm + out[y, x, k]
            if norm > 0.0:
                for k in range(c):
                    out[y, x, k] = out[y, x, k] / norm
    return out
