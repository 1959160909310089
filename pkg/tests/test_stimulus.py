import math

import numpy as np
import pytest

from dvsbias.stimulus import (
    Directive,
    LuminanceField,
    ScenarioSchedule,
    SceneConfig,
    ScheduleError,
    max_swing_efolds,
    parse_schedule,
    render,
    resolve_state,
    serialize_schedule,
)

ONE_DOT = ScenarioSchedule(
    directives=[
        Directive(t=0.0, ambient=100.0, dot_count=1, dot_speed_hz=1.0, dot_contrast=(0.5,))
    ]
)


class TestParse:
    def test_empty_text_gives_default_schedule(self):
        s = parse_schedule("")
        assert s.directives == []
        assert resolve_state(s, 123.0).ambient == 100.0
        assert resolve_state(s, 123.0).dot_count == 0

    def test_basic_directives_and_blocks(self):
        text = """
        # light off and back on
        sim geometry=32x32 duration_s=5
        t=0 ambient=100 dot_count=2 dot_speed_hz=1.5 dot_contrast=0.2,0.4
        t=2 ambient=10
        t=4 ambient=100 noise_controller=on
        """
        s = parse_schedule(text)
        assert len(s.directives) == 3
        assert s.blocks["sim"]["geometry"] == "32x32"
        assert s.directives[0].dot_contrast == (0.2, 0.4)
        assert s.directives[1].ambient == 10.0
        assert s.directives[2].noise_controller is True

    def test_light_off_then_on_is_two_directives(self):
        s = parse_schedule("t=1 ambient=10\nt=4 ambient=100\n")
        assert [d.ambient for d in s.directives] == [10.0, 100.0]

    def test_out_of_order_timestamps_rejected(self):
        with pytest.raises(ScheduleError, match="strictly increasing"):
            parse_schedule("t=2 ambient=10\nt=1 ambient=100\n")

    def test_duplicate_timestamps_rejected(self):
        with pytest.raises(ScheduleError, match="strictly increasing"):
            parse_schedule("t=1 ambient=10\nt=1 dot_count=1\n")

    def test_syntax_error_carries_line_number(self):
        with pytest.raises(ScheduleError, match="line 2"):
            parse_schedule("t=0 ambient=5\nnot a directive\n")

    def test_bad_contrast_rejected_with_index(self):
        with pytest.raises(ScheduleError, match="directive 1"):
            parse_schedule("t=0 ambient=5\nt=1 dot_contrast=1.5\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ScheduleError, match="unknown directive key"):
            parse_schedule("t=0 wobble=3\n")

    def test_serialize_roundtrip(self):
        text = (
            "sim geometry=48x48\n"
            "t=0.0 ambient=100.0 dot_count=3 dot_speed_hz=2.0 dot_contrast=0.2,0.3\n"
            "t=5.0 dot_speed_hz=0.5 threshold_controller=on\n"
            "t=9.25 refractory_tweak=-0.4\n"
        )
        first = parse_schedule(text)
        second = parse_schedule(serialize_schedule(first))
        assert second.directives == first.directives
        assert second.blocks == first.blocks


class TestRender:
    def test_zero_contrast_is_uniform_ambient(self):
        s = ScenarioSchedule(
            directives=[Directive(t=0.0, dot_count=3, dot_contrast=(0.0,), ambient=42.0)]
        )
        f = render(s, 1.0, 32, 32)
        assert np.all(f.samples == 42.0)

    def test_static_scene_time_invariant(self):
        s = ScenarioSchedule(
            directives=[Directive(t=0.0, dot_count=2, dot_speed_hz=0.0, dot_contrast=(0.6,))]
        )
        a = render(s, 0.0, 48, 48)
        b = render(s, 7.3, 48, 48)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_render_is_pure(self):
        a = render(ONE_DOT, 0.37, 64, 64)
        b = render(ONE_DOT, 0.37, 64, 64)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_half_rotation_moves_dot_diametrically(self):
        f0 = render(ONE_DOT, 0.0, 64, 64)
        f1 = render(ONE_DOT, 0.5, 64, 64)
        # dark-pixel centroid should reflect through the array centre
        def centroid(f):
            mask = f.samples < 99.0
            ys, xs = np.nonzero(mask)
            return xs.mean() + 0.5, ys.mean() + 0.5

        x0, y0 = centroid(f0)
        x1, y1 = centroid(f1)
        assert x0 + x1 == pytest.approx(64.0, abs=0.1)
        assert y0 + y1 == pytest.approx(64.0, abs=0.1)

    def test_phase_accumulates_across_speed_changes(self):
        s = ScenarioSchedule(
            directives=[
                Directive(t=0.0, dot_count=1, dot_speed_hz=1.0, dot_contrast=(0.5,)),
                Directive(t=1.0, dot_speed_hz=0.0),
            ]
        )
        # at t=1 the dot completed exactly one revolution and then froze
        a = render(s, 1.0, 64, 64)
        b = render(s, 5.0, 64, 64)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_allclose(a.samples, render(ONE_DOT, 0.0, 64, 64).samples)

    def test_moving_dot_changes_confined_to_annulus(self):
        scene = SceneConfig()
        size = 64
        orbit = scene.orbit_frac * size
        dot_r = scene.dot_radius_frac * size
        f0 = render(ONE_DOT, 0.10, size, size, scene)
        f1 = render(ONE_DOT, 0.11, size, size, scene)
        changed = np.nonzero(f0.samples != f1.samples)
        ys, xs = changed
        r = np.hypot(xs + 0.5 - size / 2, ys + 0.5 - size / 2)
        assert np.all(r >= orbit - dot_r - 1.5)
        assert np.all(r <= orbit + dot_r + 1.5)

    def test_mean_luminance_constant_while_dots_static(self):
        s = ScenarioSchedule(
            directives=[
                Directive(t=0.0, dot_count=1, dot_speed_hz=0.0, dot_contrast=(0.4,)),
                Directive(t=2.0, ambient=50.0),
            ]
        )
        m0 = render(s, 0.5, 64, 64).samples.mean()
        m1 = render(s, 1.5, 64, 64).samples.mean()
        m2 = render(s, 2.5, 64, 64).samples.mean()
        assert m0 == pytest.approx(m1, rel=1e-12)
        assert m2 == pytest.approx(m0 / 2, rel=1e-12)  # ambient halved scales field

    def test_luminance_always_positive(self):
        s = ScenarioSchedule(
            directives=[Directive(t=0.0, dot_count=4, dot_contrast=(0.99,), ambient=1e-3)]
        )
        f = render(s, 0.2, 32, 32)
        assert np.all(f.samples > 0)

    def test_bad_geometry_rejected(self):
        with pytest.raises(ValueError):
            render(ONE_DOT, 0.0, 0, 32)

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            render(ONE_DOT, -1.0, 32, 32)


class TestHelpers:
    def test_field_validates_positivity(self):
        with pytest.raises(ValueError):
            LuminanceField(2, 2, np.zeros((2, 2)), 0.0)

    def test_field_validates_shape(self):
        with pytest.raises(ValueError):
            LuminanceField(3, 2, np.ones((3, 3)), 0.0)

    def test_max_swing(self):
        s = parse_schedule("t=0 dot_contrast=0.2,0.45\nt=1 dot_contrast=0.3\n")
        assert max_swing_efolds(s) == pytest.approx(-math.log(0.55), rel=1e-12)

    def test_contrast_cycles_across_dots(self):
        s = ScenarioSchedule(
            directives=[Directive(t=0.0, dot_count=3, dot_contrast=(0.8, 0.2))]
        )
        f = render(s, 0.0, 96, 96)
        # three dots, alternating contrasts: darkest pixel comes from the 0.8 dot
        assert f.samples.min() == pytest.approx(100.0 * 0.2, rel=0.05)
