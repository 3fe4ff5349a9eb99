"""Finite-difference fidelity of the four losses on a micro setup.

Gradients flow through the real student chain (tempered softmax,
normalized masked rows, affinity softmax) with the teacher side held
fixed, in 64-bit. The micro shapes (two frames, two locals per frame,
a 2x2 token grid, 16-way distributions, K = 2 masked tokens) keep the
central-difference sweep under a second per loss.
"""

import numpy as np

from vidcorr.numerics import (
    Tensor,
    gather_rows,
    grad_check,
    l2_normalize_rows,
    narrow,
    reshape,
)
from vidcorr.objectives import (
    TemperatureConfig,
    build_affinity,
    loss_in_aff,
    loss_in_mim,
    loss_out_g2g,
    loss_out_l2g,
    student_distribution,
    total_loss,
)
from vidcorr.views import MaskPattern, make_frame_pairs

CLIP_LEN = 2
LOCALS = 2
TOKENS = 4  # 2x2 grid
WIDTH = 16


def _teacher_rows(g, shape):
    logits = g.normal(size=shape)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _mask_patterns():
    return [MaskPattern(np.array([1, 0, 0, 1], dtype=bool), 0.5, 2),
            MaskPattern(np.array([0, 1, 1, 0], dtype=bool), 0.5, 2)]


def _masked_q(patch_logits, masks, in_graph):
    blocks = []
    flat = reshape(patch_logits, (CLIP_LEN * TOKENS, WIDTH)) if in_graph else None
    for i, pattern in enumerate(masks):
        rows = i * TOKENS + np.nonzero(pattern.m)[0]
        if in_graph:
            blocks.append(l2_normalize_rows(gather_rows(flat, rows)))
        else:
            picked = patch_logits.reshape(CLIP_LEN * TOKENS, WIDTH)[rows]
            norm = np.sqrt((picked * picked).sum(axis=-1, keepdims=True))
            blocks.append(picked / norm)
    return blocks


def loss_fidelity_report(seed=0, h=1e-3, tolerance=1e-4):
    """[(loss name, max relative error)] for the four losses and the
    equal-weight total, each checked against central differences."""
    del tolerance  # callers compare; kept for a stable signature
    g = np.random.default_rng(seed)
    temps = TemperatureConfig()
    pairs = make_frame_pairs(CLIP_LEN)
    masks = _mask_patterns()

    td_cls = Tensor(_teacher_rows(g, (CLIP_LEN, WIDTH)))
    td_patch = Tensor(_teacher_rows(g, (CLIP_LEN, TOKENS, WIDTH)))
    t_patch_raw = g.normal(size=(CLIP_LEN, TOKENS, WIDTH))
    q_teacher = _masked_q(t_patch_raw, masks, in_graph=False)
    t_affs = [build_affinity(Tensor(q_teacher[i]), Tensor(q_teacher[i + 1]),
                             temps.teacher, i, i + 1)
              for i in range(CLIP_LEN - 1)]

    cls_n = CLIP_LEN * WIDTH
    loc_n = CLIP_LEN * LOCALS * WIDTH
    patch_n = CLIP_LEN * TOKENS * WIDTH

    def g2g_of(z):
        return loss_out_g2g(td_cls, student_distribution(
            reshape(z, (CLIP_LEN, WIDTH)), temps), pairs)

    def l2g_of(z):
        return loss_out_l2g(td_cls, student_distribution(
            reshape(z, (CLIP_LEN, LOCALS, WIDTH)), temps), pairs)

    def mim_of(z):
        return loss_in_mim(td_patch, student_distribution(
            reshape(z, (CLIP_LEN, TOKENS, WIDTH)), temps), masks)

    def aff_of(z):
        q_student = _masked_q(reshape(z, (CLIP_LEN, TOKENS, WIDTH)), masks,
                              in_graph=True)
        s_affs = [build_affinity(q_student[i], q_student[i + 1],
                                 temps.student, i, i + 1)
                  for i in range(CLIP_LEN - 1)]
        return loss_in_aff(t_affs, s_affs)

    def total_of(z):
        z_cls = narrow(z, 0, 0, cls_n)
        z_loc = narrow(z, 0, cls_n, loc_n)
        z_patch = narrow(z, 0, cls_n + loc_n, patch_n)
        return total_loss(g2g_of(z_cls), l2g_of(z_loc), mim_of(z_patch),
                          aff_of(z_patch)).total

    z_cls0 = g.normal(size=cls_n)
    z_loc0 = g.normal(size=loc_n)
    z_patch0 = g.normal(size=patch_n)
    z_all0 = np.concatenate([z_cls0, z_loc0, z_patch0])

    checks = [
        ("loss_out_g2g", g2g_of, z_cls0),
        ("loss_out_l2g", l2g_of, z_loc0),
        ("loss_in_mim", mim_of, z_patch0),
        ("loss_in_aff", aff_of, z_patch0),
        ("total_loss", total_of, z_all0),
    ]
    out = []
    for name, fn, z0 in checks:
        probe = Tensor(z0.copy(), name=name)
        out.append((name, grad_check(fn, probe, h=h).max_rel_error))
    return out
