"""Tests for restricted-attention label propagation."""

import numpy as np
import pytest

from reference_propagation import propagate_frame_reference, reference_cell
from vidcorr.propagation import (
    FeatureMap,
    LabelMap,
    PropagationConfig,
    active_backend,
    init_labels,
    labels_to_mask,
    propagate_frame,
    propagate_video,
)

BACKENDS = ["python"] + (["compiled"] if active_backend() == "compiled" else [])


def unit_grid(rng, h, w, d):
    g = rng.normal(size=(h, w, d))
    return g / np.sqrt((g * g).sum(axis=-1, keepdims=True))


def random_onehot(rng, h, w, c):
    return np.eye(c)[rng.integers(0, c, size=(h, w))]


def make_instance(seed, h=16, w=16, d=8, c=4, frames=3):
    rng = np.random.default_rng(seed)
    target = FeatureMap(unit_grid(rng, h, w, d))
    context = [(FeatureMap(unit_grid(rng, h, w, d), i),
                LabelMap(random_onehot(rng, h, w, c)))
               for i in range(frames)]
    return target, context


def stacked(context):
    feats = np.stack([f.grid for f, _ in context])
    labels = np.stack([l.grid for _, l in context])
    return feats, labels


class TestConfig:
    """Field validation."""

    def test_defaults(self):
        cfg = PropagationConfig()
        assert (cfg.top_k, cfg.context_size, cfg.radius) == (5, 10, 40)
        assert cfg.temperature == 0.07

    def test_rejects_bad_fields(self):
        with pytest.raises(ValueError):
            PropagationConfig(top_k=0)
        with pytest.raises(ValueError):
            PropagationConfig(radius=0)
        with pytest.raises(ValueError):
            PropagationConfig(context_size=-1)
        with pytest.raises(ValueError):
            PropagationConfig(temperature=0.0)
        with pytest.raises(ValueError):
            PropagationConfig(include_first_frame=False)

    def test_feature_map_requires_unit_rows(self):
        with pytest.raises(ValueError, match="unit norm"):
            FeatureMap(np.full((2, 2, 3), 2.0))

    def test_label_map_requires_distributions(self):
        with pytest.raises(ValueError):
            LabelMap(np.full((2, 2, 3), 0.9))
        with pytest.raises(ValueError):
            LabelMap(np.array([[[1.5, -0.5]]]))


class TestInitLabels:
    """Majority-vote downsampling to the feature grid."""

    def test_uniform_background(self):
        lm = init_labels(np.zeros((8, 8), dtype=np.int32), (4, 4), num_classes=3)
        assert np.array_equal(lm.grid[:, :, 0], np.ones((4, 4)))

    def test_aligned_mask_transfers_exactly(self):
        ids = np.array([[0, 1], [2, 1]])
        mask = np.kron(ids, np.ones((3, 3), dtype=int))
        lm = init_labels(mask, (2, 2))
        assert np.array_equal(lm.grid.argmax(axis=-1), ids)
        assert lm.grid.max() == 1.0

    def test_majority_wins(self):
        """3 background pixels against 1 object pixel -> background."""
        mask = np.zeros((2, 2), dtype=int)
        mask[0, 0] = 1
        lm = init_labels(mask, (1, 1))
        assert np.array_equal(lm.grid[0, 0], [1.0, 0.0])

    def test_tie_goes_to_lower_id(self):
        mask = np.array([[0, 2], [2, 0]])
        lm = init_labels(mask, (1, 1))
        assert lm.grid[0, 0].argmax() == 0

    def test_errors(self):
        with pytest.raises(ValueError):
            init_labels(np.zeros((0, 4), dtype=int), (1, 1))
        with pytest.raises(ValueError):
            init_labels(np.zeros((5, 4), dtype=int), (2, 2))
        with pytest.raises(ValueError):
            init_labels(np.zeros((4, 4)), (2, 2))  # float mask
        with pytest.raises(ValueError):
            init_labels(np.full((4, 4), 7), (2, 2), num_classes=3)


class TestPropagateFrame:
    """Per-frame voting against hand cases and the exhaustive oracle."""

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_self_match_exact(self, backend):
        """Identical context with top_k=1 copies one-hot labels bit for bit."""
        target, context = make_instance(0, frames=1)
        feats = context[0][0]
        labels = context[0][1]
        cfg = PropagationConfig(top_k=1, radius=3)
        out = propagate_frame(feats, [(feats, labels)], cfg, backend=backend)
        assert np.array_equal(out.grid, labels.grid)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_equal_similarity_split(self, backend):
        """Two tied neighbors with different one-hot labels give 0.5/0.5."""
        q = np.array([1.0, 0.0])
        feats = FeatureMap(np.array([[q, [0.0, 1.0], q]]))
        labels = LabelMap(np.array([[[0, 1, 0], [1, 0, 0], [0, 0, 1]]], dtype=np.float64))
        target = FeatureMap(np.array([[q, q, q]]))
        cfg = PropagationConfig(top_k=2, radius=1)
        out = propagate_frame(target, [(feats, labels)], cfg, backend=backend)
        assert np.array_equal(out.grid[0, 1], [0.0, 0.5, 0.5])

    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_bruteforce_oracle(self, backend, seed):
        """Bitwise equality with the exhaustive reference, 16x16."""
        target, context = make_instance(seed)
        cfg = PropagationConfig(top_k=5, radius=3)
        out = propagate_frame(target, context, cfg, backend=backend)
        feats, labels = stacked(context)
        ref = propagate_frame_reference(target.grid, feats, labels, 3, 5, 0.07)
        assert np.array_equal(out.grid, ref)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_odd_shape_and_shortage(self, backend):
        """top_k above the candidate count uses all candidates."""
        target, context = make_instance(5, h=4, w=7, d=6, c=3, frames=1)
        cfg = PropagationConfig(top_k=50, radius=1)
        out = propagate_frame(target, context, cfg, backend=backend)
        feats, labels = stacked(context)
        ref = propagate_frame_reference(target.grid, feats, labels, 1, 50, 0.07)
        assert np.array_equal(out.grid, ref)

    def test_backends_agree_bitwise(self):
        if active_backend() != "compiled":
            pytest.skip("compiled kernel not built")
        target, context = make_instance(9, h=11, w=13)
        cfg = PropagationConfig(top_k=5, radius=4)
        a = propagate_frame(target, context, cfg, backend="compiled")
        b = propagate_frame(target, context, cfg, backend="python")
        assert np.array_equal(a.grid, b.grid)

    def test_radius_beyond_grid_is_unrestricted(self):
        target, context = make_instance(11, h=6, w=6)
        a = propagate_frame(target, context, PropagationConfig(top_k=5, radius=6))
        b = propagate_frame(target, context, PropagationConfig(top_k=5, radius=600))
        assert np.array_equal(a.grid, b.grid)

    def test_output_is_convex_combination(self):
        target, context = make_instance(13)
        out = propagate_frame(target, context, PropagationConfig(top_k=5, radius=3))
        assert out.grid.min() >= 0.0 and out.grid.max() <= 1.0
        assert np.allclose(out.grid.sum(axis=-1), 1.0, atol=1e-6)

    def test_cells_independent_of_visit_order(self):
        """Each cell depends only on the inputs, not on its neighbors."""
        target, context = make_instance(17, h=6, w=5)
        cfg = PropagationConfig(top_k=4, radius=2)
        out = propagate_frame(target, context, cfg, backend="python")
        feats, labels = stacked(context)
        cells = [(y, x) for y in range(6) for x in range(5)]
        np.random.default_rng(0).shuffle(cells)
        for y, x in cells:
            ref = reference_cell(y, x, target.grid, feats, labels, 2, 4, 0.07)
            assert np.array_equal(out.grid[y, x], ref)

    def test_errors(self):
        target, context = make_instance(19, h=4, w=4)
        cfg = PropagationConfig(radius=2)
        with pytest.raises(ValueError):
            propagate_frame(target, [], cfg)
        small, small_ctx = make_instance(19, h=3, w=4)
        with pytest.raises(ValueError):
            propagate_frame(target, small_ctx, cfg)
        with pytest.raises(ValueError):
            propagate_frame(target, context, cfg, backend="gpu")


class TestPropagateVideo:
    """Sequential context management."""

    def test_single_frame_returns_init(self):
        rng = np.random.default_rng(2)
        feats = unit_grid(rng, 4, 4, 6)
        mask = rng.integers(0, 3, size=(8, 8)).astype(np.int32)
        out = propagate_video([feats], mask, PropagationConfig(radius=2))
        assert len(out) == 1
        assert np.array_equal(out[0].grid, init_labels(mask, (4, 4)).grid)

    def test_zero_context_uses_first_frame_only(self):
        rng = np.random.default_rng(3)
        frames = [unit_grid(rng, 5, 5, 6) for _ in range(4)]
        mask = rng.integers(0, 2, size=(10, 10)).astype(np.int32)
        cfg = PropagationConfig(top_k=3, radius=2, context_size=0)
        outs = propagate_video(frames, mask, cfg)
        first = FeatureMap(frames[0], 0)
        first_labels = init_labels(mask, (5, 5))
        for t in range(1, 4):
            expected = propagate_frame(FeatureMap(frames[t], t),
                                       [(first, first_labels)], cfg)
            assert np.array_equal(outs[t].grid, expected.grid)

    def test_constant_video_is_fixed_point(self):
        """Identical frames keep the first frame's argmax everywhere."""
        rng = np.random.default_rng(4)
        g = unit_grid(rng, 6, 6, 8)
        ids = rng.integers(0, 3, size=(6, 6))
        mask = np.kron(ids, np.ones((2, 2), dtype=int)).astype(np.int32)
        outs = propagate_video([g, g, g, g], mask, PropagationConfig(top_k=5, radius=2))
        for out in outs:
            assert np.array_equal(out.grid.argmax(axis=-1), ids)
        # and the second frame matches the oracle run directly
        first_labels = init_labels(mask, (6, 6))
        ref = propagate_frame_reference(g, g[None], first_labels.grid[None], 2, 5, 0.07)
        assert np.array_equal(outs[1].grid, ref)

    def test_context_window_caps_at_size(self):
        rng = np.random.default_rng(5)
        frames = [unit_grid(rng, 4, 4, 5) for _ in range(5)]
        mask = rng.integers(0, 2, size=(4, 4)).astype(np.int32)
        cfg = PropagationConfig(top_k=3, radius=2, context_size=1)
        outs = propagate_video(frames, mask, cfg)
        # frame 3's context must be {frame 0, prediction for frame 2}
        maps = [FeatureMap(f, i) for i, f in enumerate(frames)]
        first_labels = init_labels(mask, (4, 4))
        expected = propagate_frame(
            maps[3], [(maps[0], first_labels), (maps[2], outs[2])], cfg)
        assert np.array_equal(outs[3].grid, expected.grid)

    def test_empty_video_rejected(self):
        with pytest.raises(ValueError):
            propagate_video([], np.zeros((4, 4), dtype=int), PropagationConfig(radius=2))


class TestLabelsToMask:
    """Argmax hardening and nearest-neighbor upsampling."""

    def test_upsample_repeats_cells(self):
        grid = np.zeros((2, 2, 2))
        grid[:, :, 0] = 1.0
        grid[1, 1] = [0.0, 1.0]
        mask = labels_to_mask(LabelMap(grid), 3)
        assert mask.shape == (6, 6)
        assert mask[5, 5] == 1 and mask[0, 0] == 0
        assert (mask[3:, 3:] == 1).all()

    def test_argmax_tie_takes_lower_id(self):
        grid = np.full((1, 1, 2), 0.5)
        assert labels_to_mask(LabelMap(grid), 1)[0, 0] == 0
