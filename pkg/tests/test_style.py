"""Style model construction, fitting, cross-rendering, and affinity."""

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parl.augment import AugmentationCandidate
from parl.errors import FittingError
from parl.styles import (
    DEFAULT_SEPARATION_FLOOR,
    N_CLASSES,
    StyleModel,
    built_in_style,
    cross_render,
    fit_style,
    style_affinity,
    style_to_json,
    styles_for_agents,
)
from parl.world import ScenarioGenerator, TaskType, WorldConfig, segment


def _min_separation(means):
    best = np.inf
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            best = min(best, float(np.max(np.abs(means[i] - means[j]))))
    return best


class TestBuiltInStyles:
    def test_deterministic(self):
        assert built_in_style(4, seed=9) == built_in_style(4, seed=9)

    @given(
        style_id=st.integers(min_value=0, max_value=31),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    @settings(max_examples=40, deadline=None)
    def test_separation_floor_plus_margin(self, style_id, seed):
        style = built_in_style(style_id, seed)
        assert _min_separation(style.class_means) >= DEFAULT_SEPARATION_FLOOR + 0.10 - 1e-12
        assert (style.class_spreads < style.separation_floor / 2).all()

    def test_distinct_agents_get_distinct_palettes(self):
        styles = styles_for_agents(range(4), seed=3)
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.allclose(styles[i].class_means, styles[j].class_means)

    def test_styles_for_agents_rejects_duplicates(self):
        with pytest.raises(FittingError, match="duplicate"):
            styles_for_agents([1, 1])

    def test_style_id_recorded(self):
        assert built_in_style(6, seed=1).style == 6


class TestFitStyle:
    def test_recovers_generating_palette(self, generator, small_dataset):
        fitted = fit_style(small_dataset)
        truth = generator.styles[0]
        assert fitted.style == truth.style
        # fitted means sit near the true palette, well within the floor
        assert np.max(np.abs(fitted.class_means - truth.class_means)) < DEFAULT_SEPARATION_FLOOR / 2

    def test_fitted_style_segments_its_own_samples(self, small_dataset):
        fitted = fit_style(small_dataset)
        for sample in small_dataset[:6]:
            recovered, _ = segment(sample.scenario, fitted)
            assert np.array_equal(recovered.classes, sample.semantic.classes)

    def test_empty_input_rejected(self):
        with pytest.raises(FittingError, match="at least one sample"):
            fit_style([])

    def test_mixed_styles_rejected(self, generator):
        a = generator.generate_scenario(style=0, task=TaskType.STRAIGHT, seed=400)
        b = generator.generate_scenario(style=1, task=TaskType.STRAIGHT, seed=401)
        with pytest.raises(FittingError, match="span styles"):
            fit_style([a, b])

    def test_determinism(self, small_dataset):
        assert fit_style(small_dataset) == fit_style(small_dataset)

    def test_missing_class_coverage_rejected(self, small_dataset):
        # repaint every CAR and PEDESTRIAN cell as ROAD in the semantic map:
        # the palette then has no pixel evidence for the thing classes
        broken = []
        for s in small_dataset[:3]:
            classes = s.semantic.classes.copy()
            classes[np.isin(classes, (2, 3))] = 0
            broken.append(
                dataclasses.replace(
                    s,
                    semantic=dataclasses.replace(s.semantic, classes=classes),
                )
            )
        with pytest.raises(FittingError, match="no pixel coverage"):
            fit_style(broken)


class TestCrossRender:
    def test_cross_render_segments_back_exactly(self, generator, small_dataset):
        sample = small_dataset[0]
        candidate = AugmentationCandidate(
            semantic=sample.semantic,
            instances=sample.instances,
            inserted=(),
            source_sample_id=0,
            score=None,
        )
        for sid, style in generator.styles.items():
            scenario = cross_render(candidate, style, seed=77)
            assert scenario.style == style.style
            recovered, _ = segment(scenario, style)
            assert np.array_equal(recovered.classes, sample.semantic.classes), sid

    def test_cross_render_is_seed_deterministic(self, generator, small_dataset):
        sample = small_dataset[0]
        candidate = AugmentationCandidate(
            semantic=sample.semantic,
            instances=sample.instances,
            inserted=(),
            source_sample_id=0,
            score=None,
        )
        style = generator.styles[1]
        a = cross_render(candidate, style, seed=5)
        b = cross_render(candidate, style, seed=5)
        c = cross_render(candidate, style, seed=6)
        assert np.array_equal(a.pixels, b.pixels)
        assert not np.array_equal(a.pixels, c.pixels)


class TestAffinity:
    def test_self_affinity_is_one(self):
        style = built_in_style(2, seed=8)
        assert style_affinity(style, style) == pytest.approx(1.0)

    def test_symmetric_and_bounded(self):
        a, b = built_in_style(0, seed=8), built_in_style(1, seed=8)
        ab = style_affinity(a, b)
        assert ab == pytest.approx(style_affinity(b, a))
        assert 0.0 < ab <= 1.0

    def test_distance_monotonicity(self):
        a = built_in_style(0, seed=8)
        nearby = dataclasses.replace(a, class_means=np.clip(a.class_means + 0.01, 0, 1))
        far = dataclasses.replace(a, class_means=np.clip(a.class_means + 0.2, 0, 1))
        assert style_affinity(a, nearby) > style_affinity(a, far)


class TestStyleModelValidation:
    def test_bad_shapes_rejected(self):
        with pytest.raises(FittingError):
            StyleModel(
                style=0,
                class_means=np.zeros((4, 3)),
                class_spreads=np.zeros(N_CLASSES),
                texture_seed=0,
            )

    def test_separation_violation_rejected(self):
        means = np.zeros((N_CLASSES, 3))  # all classes identical
        with pytest.raises(FittingError, match="separat"):
            StyleModel(
                style=0,
                class_means=means,
                class_spreads=np.zeros(N_CLASSES),
                texture_seed=0,
            )

    def test_json_export_round_trips_values(self):
        style = built_in_style(1, seed=4)
        doc = json.loads(style_to_json(style))
        assert doc["style"] == 1
        assert np.allclose(np.array(doc["class_means"]), style.class_means)
