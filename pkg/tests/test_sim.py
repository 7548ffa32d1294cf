import numpy as np
import pytest

from dplx import metrics
from dplx.device import Environment, randomize, sweep
from dplx.sim import (
    DB_FLOOR,
    DegenerateConfiguration,
    SweepState,
    channel_sparams,
    junction_sparams,
    lowpass_variable,
)


def single_resonator_s11(lam, m11, r1, r2):
    # |S11|^2 = ((lam+M11)^2 + (R1-R2)^2) / ((lam+M11)^2 + (R1+R2)^2)
    x = lam + m11
    return np.sqrt((x**2 + (r1 - r2) ** 2) / (x**2 + (r1 + r2) ** 2))


@pytest.mark.parametrize("m11,r1,r2", [(0.0, 1.0, 1.0), (0.3, 0.7, 1.2), (-0.5, 2.0, 0.4)])
def test_single_resonator_matches_closed_form(m11, r1, r2):
    lam = np.linspace(-5, 5, 401)
    s = channel_sparams(np.array([[m11]]), r1, r2, lam)
    np.testing.assert_allclose(np.abs(s[:, 0, 0]), single_resonator_s11(lam, m11, r1, r2), rtol=1e-12)
    # S21 of a single resonator: 2 sqrt(R1 R2) / |A|
    a = np.abs(lam + m11 - 1j * (r1 + r2))
    np.testing.assert_allclose(np.abs(s[:, 1, 0]), 2 * np.sqrt(r1 * r2) / a, rtol=1e-12)


def admittance_oracle(s_high, s_low):
    """Duplexer S through channel admittances summed at the common node."""
    eye2, eye3 = np.eye(2), np.eye(3)
    out = []
    for sh, sl in zip(s_high, s_low):
        yh = (eye2 - sh) @ np.linalg.inv(eye2 + sh)
        yl = (eye2 - sl) @ np.linalg.inv(eye2 + sl)
        y = np.zeros((3, 3), dtype=complex)
        y[0, 0] = yh[0, 0] + yl[0, 0]
        y[0, 1], y[1, 0], y[1, 1] = yh[0, 1], yh[1, 0], yh[1, 1]
        y[0, 2], y[2, 0], y[2, 2] = yl[0, 1], yl[1, 0], yl[1, 1]
        out.append((eye3 - y) @ np.linalg.inv(eye3 + y))
    return np.array(out)


def test_junction_matches_admittance_assembly(desk, rng):
    freq = np.linspace(1.9, 2.14, 97)
    pos = randomize(desk, rng)
    couplings = desk.coupling_at(pos)
    parts = []
    for m, (r_in, r_out), ch in zip(couplings, desk.r_ext, desk.spec.channels):
        parts.append(channel_sparams(m, r_in, r_out, lowpass_variable(freq, ch.center_ghz, ch.bandwidth_ghz)))
    s_low, s_high = parts
    np.testing.assert_allclose(junction_sparams(s_high, s_low), admittance_oracle(s_high, s_low), atol=1e-9)


def test_reciprocity_and_unitarity(desk, rng):
    for _ in range(5):
        s = desk.sparams(randomize(desk, rng))
        assert np.abs(s - s.transpose(0, 2, 1)).max() < 1e-9
        power = (np.abs(s) ** 2).sum(axis=2)
        assert np.abs(power - 1).max() < 1e-9


def test_golden_sweep_is_tuned(desk, full):
    for dev in (desk, full):
        st = sweep(dev, dev.golden)
        assert metrics.areas(st.s11, dev.passbands) == (0.0, 0.0)


def test_sweep_values_are_passive_and_finite(desk, rng):
    st = sweep(desk, randomize(desk, rng))
    c = st.curves()
    assert c.shape == (3, 1300)
    assert np.all(np.isfinite(c))
    assert c.max() <= 0.01
    assert c.min() >= DB_FLOOR


def test_port_mapping_puts_plateau_in_high_band(desk):
    st = sweep(desk, desk.golden)
    (a0, a1), (b0, b1) = desk.passbands
    assert st.s21[b0:b1].min() > -1.0  # high band passes to port 2
    assert st.s31[a0:a1].min() > -1.0  # low band passes to port 3
    assert st.s21[a0:a1].max() < -15.0


def test_every_screw_changes_the_sweep(desk):
    base = sweep(desk, desk.golden).curves()
    for k in range(desk.n_screws):
        pos = desk.golden.copy()
        pos[k] = 0.05
        assert np.abs(sweep(desk, pos).curves() - base).max() > 1e-6, k


def test_sweep_is_bitwise_deterministic(desk, rng):
    pos = randomize(desk, rng)
    a, b = sweep(desk, pos).curves(), sweep(desk, pos).curves()
    assert a.tobytes() == b.tobytes()


def test_area_shortcut_matches_full_sweep(desk, rng):
    pos = randomize(desk, rng)
    full_areas = metrics.areas(sweep(desk, pos).s11, desk.passbands)
    np.testing.assert_allclose(desk.areas(pos), full_areas, rtol=1e-12)


def test_singular_channel_reports_frequency():
    # isolated lossless resonator (no port coupling reaches it) at lam = 0
    m = np.zeros((2, 2))
    lam = np.array([-1.0, 0.0, 1.0])
    with pytest.raises(DegenerateConfiguration) as err:
        channel_sparams(m, 1.0, 0.0, lam, freq=np.array([1.9, 2.0, 2.1]))
    assert err.value.freq_ghz == 2.0


def test_csv_export(desk):
    st = sweep(desk, desk.golden)
    text = st.to_csv()
    lines = text.splitlines()
    assert lines[0] == "freq_ghz,s11_db,s21_db,s31_db"
    assert len(lines) == 1 + desk.spec.n_points
    back = np.loadtxt(text.splitlines()[1:], delimiter=",")
    np.testing.assert_array_equal(back[:, 1], st.s11)
    rt = SweepState.from_curves(back[:, 0], back[:, 1:].T)
    np.testing.assert_array_equal(rt.curves(), st.curves())


def test_environment_apply_reports_clamped_delta(desk):
    env = Environment(desk)
    lim = desk.travel[0]
    applied = env.apply(np.r_[lim + 1.0, np.zeros(desk.n_screws - 1)])
    assert env.positions[0] == lim
    assert applied[0] == lim
