"""Dual-template mixing, embeddings, similarity, and the update rule."""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtrack.boxes import BBox
from dualtrack.model import FeatureMap, ModelConfig, ShapeError, build_model
from dualtrack.templates import (
    DualTemplateState,
    combine_templates,
    cosine_similarity,
    embed_search,
    embed_template,
    observe_frame,
    stable_sigmoid,
)


def fm(data, stride=16):
    return FeatureMap(torch.as_tensor(data, dtype=torch.float64), stride)


def make_state(static, dynamic, raw_mix=0.0, **kwargs):
    return DualTemplateState(
        static_feats=fm(static), dynamic_feats=fm(dynamic), raw_mix=raw_mix, **kwargs
    )


class TestCombineTemplates:
    def test_w_zero_returns_static(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 4, 4))
        out = combine_templates(make_state(a, b, raw_mix=-math.inf))
        assert np.allclose(out.data.numpy(), a)

    def test_w_one_returns_dynamic(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4, 4))
        out = combine_templates(make_state(a, b, raw_mix=math.inf))
        assert np.allclose(out.data.numpy(), b)

    def test_quarter_mix(self):
        # w = 0.25 on scalar maps 4 and 8 -> 5
        raw = math.log(0.25 / 0.75)
        out = combine_templates(make_state(np.full((1, 1, 1), 4.0),
                                           np.full((1, 1, 1), 8.0), raw_mix=raw))
        assert float(out.data) == pytest.approx(5.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            combine_templates(make_state(np.zeros((2, 4, 4)), np.zeros((2, 2, 2))))

    @given(raw=st.floats(-50, 50), seed=st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_output_bounded_by_inputs(self, raw, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 2, 3, 3))
        out = combine_templates(make_state(a, b, raw_mix=raw)).data.numpy()
        assert np.all(out >= np.minimum(a, b) - 1e-12)
        assert np.all(out <= np.maximum(a, b) + 1e-12)


class TestStableSigmoid:
    def test_extremes(self):
        assert stable_sigmoid(-math.inf) == 0.0
        assert stable_sigmoid(math.inf) == 1.0
        assert stable_sigmoid(0.0) == 0.5

    def test_no_overflow(self):
        assert stable_sigmoid(-1e6) == 0.0
        assert stable_sigmoid(1e6) == 1.0


class TestSingleLearnableParameter:
    def test_parameter_count_difference_is_one(self):
        cfg = ModelConfig(backbone_channels=(4, 8, 8, 8), adjusted_channels=16)
        with_mix = build_model(cfg, seed=0)
        without = build_model(ModelConfig(**{**cfg.to_dict(), "dual_template": False}), seed=0)
        n_with = sum(p.numel() for p in with_mix.parameters())
        n_without = sum(p.numel() for p in without.parameters())
        assert n_with - n_without == 1

    def test_mix_gradient_flows(self):
        # well-conditioned check of the mixing parameter's gradient path
        torch.manual_seed(0)
        raw = torch.tensor(-2.2, dtype=torch.float64, requires_grad=True)
        a = torch.randn(4, 3, 3, dtype=torch.float64)
        b = torch.randn(4, 3, 3, dtype=torch.float64)
        weights = torch.randn(4, 3, 3, dtype=torch.float64)

        def f():
            w = torch.sigmoid(raw)
            return (((1 - w) * a + w * b) * weights).sum()

        loss = f()
        loss.backward()
        analytic = float(raw.grad)
        h = 1e-6
        with torch.no_grad():
            raw += h
            fp = float(f())
            raw -= 2 * h
            fm_ = float(f())
            raw += h
        fd = (fp - fm_) / (2 * h)
        assert analytic == pytest.approx(fd, rel=1e-6)
        assert abs(analytic) > 1e-3


class TestEmbeddings:
    def test_constant_map_embeds_to_value(self):
        out = embed_template(fm(np.full((5, 4, 4), 3.25)))
        assert np.allclose(out.numpy(), 3.25)

    def test_small_map_mean(self):
        out = embed_template(fm(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        assert float(out) == pytest.approx(2.5)

    def test_template_embedding_matches_naive_mean(self):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(8, 6, 6))
        out = embed_template(fm(data)).numpy()
        naive = np.array([data[c].sum() / 36.0 for c in range(8)])
        assert np.max(np.abs(out - naive)) <= 1e-6

    def test_uniform_weights_equal_plain_mean(self):
        rng = np.random.default_rng(4)
        data = rng.normal(size=(8, 5, 5))
        scores = np.full((5, 5), 0.37)
        wap = embed_search(fm(data), scores).numpy()
        mean = embed_template(fm(data)).numpy()
        assert np.max(np.abs(wap - mean)) <= 1e-6

    def test_point_mass_selects_cell(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(4, 3, 3))
        scores = np.full((3, 3), 1e-9)
        scores[1, 2] = 1.0
        out = embed_search(fm(data), scores).numpy()
        assert np.allclose(out, data[:, 1, 2], atol=1e-6)

    def test_wap_matches_naive_weighted_sum(self):
        rng = np.random.default_rng(6)
        data = rng.normal(size=(7, 4, 4))
        scores = rng.uniform(0.01, 0.99, size=(4, 4))
        out = embed_search(fm(data), scores).numpy()
        naive = np.array([
            (data[c] * scores).sum() / scores.sum() for c in range(7)
        ])
        assert np.max(np.abs(out - naive)) <= 1e-6

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            embed_search(fm(np.zeros((2, 4, 4))), np.ones((3, 3)))


class TestCosineSimilarity:
    def t(self, *vals):
        return torch.tensor(vals, dtype=torch.float64)

    def test_self_similarity(self):
        v = self.t(1.0, -2.0, 0.5)
        assert float(cosine_similarity(v, v)) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert float(cosine_similarity(self.t(1, 0), self.t(0, 1))) == pytest.approx(0.0)

    def test_known_angle(self):
        got = float(cosine_similarity(self.t(1, 0), self.t(1, 1)))
        assert got == pytest.approx(0.70710678, abs=1e-8)

    @given(alpha=st.floats(0.01, 100), beta=st.floats(0.01, 100), seed=st.integers(0, 500))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        a = torch.from_numpy(rng.normal(size=6) + 0.1)
        b = torch.from_numpy(rng.normal(size=6) + 0.1)
        base = float(cosine_similarity(a, b))
        scaled = float(cosine_similarity(alpha * a, beta * b))
        assert scaled == pytest.approx(base, abs=1e-6)

    def test_range_clamped(self):
        v = self.t(1.0, 1.0)
        assert -1.0 <= float(cosine_similarity(v, 3 * v)) <= 1.0


class FakeExtractor:
    """Records which crop was used for the dynamic refresh."""

    def __init__(self):
        self.calls = []

    def __call__(self, crop):
        self.calls.append(crop.copy())
        return FeatureMap(torch.full((1, 2, 2), float(crop.mean()), dtype=torch.float64), 16)


def run_window(similarities, interval=70):
    state = make_state(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)),
                       update_interval=interval)
    extractor = FakeExtractor()
    updates = []
    for k, sim in enumerate(similarities):
        crop = np.full((4, 4, 3), k, dtype=np.uint8)
        updated = observe_frame(state, sim, crop, BBox(0, 0, 1, 1), extractor)
        if updated:
            updates.append(k)
    return state, extractor, updates


class TestObserveFrame:
    def test_running_argmax_selects_best_frame(self):
        sims = [0.9, 0.2, 0.95] + [0.1] * 67
        _, extractor, updates = run_window(sims, interval=70)
        assert updates == [69]
        assert extractor.calls[0][0, 0, 0] == 2  # frame with similarity 0.95

    def test_tie_break_keeps_earliest(self):
        _, extractor, updates = run_window([0.5] * 70, interval=70)
        assert updates == [69]
        assert extractor.calls[0][0, 0, 0] == 0

    def test_three_updates_in_210_frames(self):
        state, extractor, updates = run_window(list(np.linspace(0, 1, 210)), interval=70)
        assert updates == [69, 139, 209]
        assert state.updates_performed == 3

    @given(seed=st.integers(0, 200), interval=st.integers(1, 9), n=st.integers(1, 80))
    @settings(max_examples=40, deadline=None)
    def test_update_cadence_exact_for_any_similarities(self, seed, interval, n):
        rng = np.random.default_rng(seed)
        _, _, updates = run_window(list(rng.uniform(-1, 1, size=n)), interval=interval)
        assert updates == [k for k in range(n) if (k + 1) % interval == 0]

    def test_counter_stays_in_range(self):
        state, _, _ = run_window(list(np.linspace(0, 1, 25)), interval=10)
        assert 0 <= state.frames_since_update < 10

    def test_similarity_gate_blocks_updates(self):
        state = make_state(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)),
                           update_interval=5, min_similarity=0.9)
        extractor = FakeExtractor()
        for k in range(5):
            updated = observe_frame(state, 0.5, np.zeros((4, 4, 3), np.uint8),
                                    BBox(0, 0, 1, 1), extractor)
        assert not updated and not extractor.calls
        assert state.frames_since_update == 0  # window still closed and reset
