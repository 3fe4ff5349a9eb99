"""Pure-Python propagation kernel, the fallback when the compiled
extension is unavailable.

Follows _recipe.md exactly so its output is bitwise identical to the
compiled kernel. Slow on purpose: plain loops over Python floats keep
the arithmetic order obvious and auditable.
"""

import math

import numpy as np


def propagate_frame_py(target_feats, context_feats, context_labels,
                       radius, top_k, temperature):
    """Propagate labels from context frames onto one target frame.

    Same contract as the compiled kernel: target_feats (h, w, d),
    context_feats (n, h, w, d), context_labels (n, h, w, c), all
    float64. Returns (h, w, c) float64.
    """
    h, w, d = target_feats.shape
    n = context_feats.shape[0]
    c = context_labels.shape[3]
    tf = target_feats.tolist()
    cf = context_feats.tolist()
    cl = context_labels.tolist()

    out = np.zeros((h, w, c), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            row = tf[y][x]
            # kept sorted best-first under (sim desc, frame desc, cell asc)
            best = []
            y_lo = max(y - radius, 0)
            y_hi = min(y + radius, h - 1)
            x_lo = max(x - radius, 0)
            x_hi = min(x + radius, w - 1)
            for f in range(n):
                frame = cf[f]
                for y2 in range(y_lo, y_hi + 1):
                    fr_row = frame[y2]
                    for x2 in range(x_lo, x_hi + 1):
                        cand = fr_row[x2]
                        sim = 0.0
                        for k in range(d):
                            sim = sim + row[k] * cand[k]
                        cell = y2 * w + x2
                        i = len(best)
                        while i > 0:
                            p_sim, p_frame, p_cell = best[i - 1]
                            if sim > p_sim:
                                better = True
                            elif sim == p_sim and f > p_frame:
                                better = True
                            elif sim == p_sim and f == p_frame and cell < p_cell:
                                better = True
                            else:
                                better = False
                            if not better:
                                break
                            i -= 1
                        if i >= top_k:
                            continue
                        best.insert(i, (sim, f, cell))
                        if len(best) > top_k:
                            best.pop()

            max_sim = best[0][0]
            exps = [math.exp((sim - max_sim) / temperature) for sim, _, _ in best]
            total = 0.0
            for e in exps:
                total = total + e
            acc = [0.0] * c
            for e, (_, f, cell) in zip(exps, best):
                weight = e / total
                lab = cl[f][cell // w][cell % w]
                for k in range(c):
                    acc[k] = acc[k] + weight * lab[k]
            norm = 0.0
            for k in range(c):
                norm = norm + acc[k]
            if norm > 0.0:
                for k in range(c):
                    acc[k] = acc[k] / norm
            out[y, x, :] = acc
    return out
