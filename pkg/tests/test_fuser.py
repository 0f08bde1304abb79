import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnedit.errors import ConfigError
from attnedit.fuser import FuserConfig, schedule_ratio


def cfg(scheduler="cosine_annealing", eta_min=0.0, eta_max=1.0, t_s=0, t_e=40,
        **kw):
    return FuserConfig(scheduler=scheduler, eta_min=eta_min, eta_max=eta_max,
                       t_s=t_s, t_e=t_e, **kw)


def test_cosine_endpoints_and_midpoint_exact():
    c = cfg(eta_min=0.125, eta_max=0.875, t_s=4, t_e=36)
    assert abs(schedule_ratio(c, 4) - 0.875) < 1e-12
    assert schedule_ratio(c, 36) == 0.125
    mid = (4 + 36) / 2
    assert abs(schedule_ratio(c, mid) - (0.125 + 0.875) / 2) < 1e-12


def test_linear_closed_form():
    # alpha_start 1, alpha_end 0, window 10: halfway in, the value is 0.5
    c = cfg("linear", eta_min=0.0, eta_max=1.0, t_s=0, t_e=10)
    assert abs(schedule_ratio(c, 5) - 0.5) < 1e-12
    assert schedule_ratio(c, 0) == 1.0
    assert schedule_ratio(c, 10) == 0.0
    assert abs(schedule_ratio(c, 2.5) - 0.75) < 1e-12


def test_exponential_closed_form():
    # alpha_start 1, alpha_end 0.25, window 2: decay rate 0.5, value 0.5 at u=1
    c = cfg("exponential", eta_min=0.25, eta_max=1.0, t_s=0, t_e=2)
    assert abs(schedule_ratio(c, 1) - 0.5) < 1e-12
    assert schedule_ratio(c, 0) == 1.0
    assert schedule_ratio(c, 2) == 0.25


def test_exponential_invalid_bounds():
    c = cfg("exponential", eta_min=0.0, eta_max=1.0)
    with pytest.raises(ConfigError):
        schedule_ratio(c, 5)
    c = cfg("exponential", eta_min=-0.5, eta_max=1.0)
    with pytest.raises(ConfigError):
        schedule_ratio(c, 5)


def test_binary_switches_at_window_start():
    c = cfg("binary", eta_min=0.2, eta_max=0.9, t_s=10, t_e=20)
    assert schedule_ratio(c, 9) == 0.9
    assert schedule_ratio(c, 10) == 0.2
    assert schedule_ratio(c, 25) == 0.2


def test_plateaus_outside_window():
    for name in ("linear", "cosine_annealing"):
        c = cfg(name, eta_min=0.1, eta_max=0.7, t_s=5, t_e=15)
        assert schedule_ratio(c, 0) == 0.7
        assert schedule_ratio(c, 4.999) == 0.7
        assert schedule_ratio(c, 15) == 0.1
        assert schedule_ratio(c, 1000) == 0.1


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(["linear", "exponential", "cosine_annealing"]),
    st.floats(0.05, 0.45),
    st.floats(0.55, 1.0),
    st.integers(0, 10),
    st.integers(12, 60),
)
def test_continuity_at_window_edges(name, lo, hi, t_s, t_e):
    """Endpoint values match plateau values; binary is the only scheduler
    allowed to jump."""
    c = cfg(name, eta_min=lo, eta_max=hi, t_s=t_s, t_e=t_e)
    eps = 1e-9
    inside_start = schedule_ratio(c, t_s + eps)
    inside_end = schedule_ratio(c, t_e - eps)
    assert abs(inside_start - hi) < 1e-6
    assert abs(inside_end - lo) < 1e-6
    assert schedule_ratio(c, t_s) == pytest.approx(hi, abs=1e-12)
    assert schedule_ratio(c, t_e) == lo


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["linear", "exponential", "cosine_annealing"]),
       st.floats(0, 50))
def test_ratio_monotone_non_increasing(name, t):
    c = cfg(name, eta_min=0.1, eta_max=0.9, t_s=0, t_e=40)
    assert schedule_ratio(c, t) >= schedule_ratio(c, t + 0.5) - 1e-12


def test_config_validation():
    with pytest.raises(ConfigError):
        FuserConfig(scheduler="quadratic")
    with pytest.raises(ConfigError):
        FuserConfig(t_s=10, t_e=5)
    with pytest.raises(ConfigError):
        FuserConfig(cross_replace_frac=1.5)
    with pytest.raises(ConfigError):
        FuserConfig(eta_min=math.inf)
    with pytest.raises(ConfigError):
        schedule_ratio(FuserConfig(), 3)  # unresolved t_e


def test_resolved_window_tracks_cross_replace():
    c = FuserConfig(skip=50)
    r = c.resolved(denoise_steps=50)
    assert r.t_e == math.ceil(0.8 * 50)
    explicit = FuserConfig(t_e=17).resolved(denoise_steps=50)
    assert explicit.t_e == 17
