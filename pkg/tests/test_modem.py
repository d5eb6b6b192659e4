import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loraflow.exceptions import ParameterError, ShapeError
from loraflow.modem import (
    LoRaParams, add_awgn, base_chirp, correlation_oracle_demod, dechirp_demod, dechirp_spectrum,
    modulate_symbol, symbol_error_rate,
)

SF7 = LoRaParams(7, 125_000.0, "up")


def explicit_chirp(sf, bw, direction):
    """Independent evaluation of the chirp phase, straight from the formula, no wrapping."""
    n = 2**sf
    T = n / bw
    k = bw**2 / n
    out = []
    for i in range(n):
        t = -T / 2 + i / bw
        cycles = -(bw / 2) * t + (k / 2) * t * t
        sign = 1 if direction == "up" else -1
        out.append(np.exp(2j * np.pi * sign * cycles))
    return np.array(out)


def test_params_validation():
    for bad in (4, 13, 7.5):
        with pytest.raises(ParameterError):
            LoRaParams(bad)
    with pytest.raises(ParameterError):
        LoRaParams(7, 0.0)
    with pytest.raises(ParameterError):
        LoRaParams(7, 125e3, "sideways")


def test_sf7_geometry():
    assert SF7.n_samples == 128
    assert SF7.symbol_duration == pytest.approx(1.024e-3, rel=1e-12)
    assert SF7.chirp_rate == pytest.approx(125e3**2 / 128)
    assert base_chirp(SF7).shape == (128,)


def test_first_sample_is_one():
    s = base_chirp(SF7)
    assert abs(s[0] - 1.0) < 1e-12


@pytest.mark.parametrize("sf", range(5, 13))
@pytest.mark.parametrize("direction", ["up", "down"])
def test_unit_modulus(sf, direction):
    s = base_chirp(LoRaParams(sf, 250e3, direction))
    assert np.max(np.abs(np.abs(s) - 1)) < 1e-12


@pytest.mark.parametrize("sf,bw", [(5, 125e3), (7, 125e3), (8, 500e3)])
@pytest.mark.parametrize("direction", ["up", "down"])
def test_chirp_matches_explicit_formula(sf, bw, direction):
    # the explicit evaluation loses a little precision to large unwrapped phases
    np.testing.assert_allclose(base_chirp(LoRaParams(sf, bw, direction)),
                               explicit_chirp(sf, bw, direction), atol=1e-9)


def test_down_chirp_is_conjugate():
    up = base_chirp(SF7)
    down = base_chirp(LoRaParams(7, 125e3, "down"))
    np.testing.assert_allclose(down, np.conj(up), atol=1e-15)


def test_instantaneous_frequency_sweeps_bandwidth():
    p = LoRaParams(9, 125e3)
    s = base_chirp(p)
    f = np.angle(s[1:] * np.conj(s[:-1])) / (2 * np.pi) * p.bw
    # sampled at fs = bw the sweep aliases once; frequency is only defined mod bw
    f = np.unwrap(f, period=p.bw)
    t_mid = -p.symbol_duration / 2 + (np.arange(f.size) + 0.5) / p.bw
    slope, intercept = np.polyfit(t_mid, f, 1)
    assert slope == pytest.approx(p.chirp_rate, rel=1e-9)
    offset = (intercept + p.bw / 2) % p.bw
    assert min(offset, p.bw - offset) < 1e-6 * p.bw


def test_modulate_zero_is_base():
    np.testing.assert_array_equal(modulate_symbol(SF7, 0), base_chirp(SF7))


def test_modulate_is_cyclic_delay():
    np.testing.assert_array_equal(modulate_symbol(SF7, 5), np.roll(base_chirp(SF7), 5))


def test_modulate_out_of_range():
    with pytest.raises(ParameterError):
        modulate_symbol(SF7, 128)
    with pytest.raises(ParameterError):
        modulate_symbol(SF7, -1)
    with pytest.raises(ParameterError):
        modulate_symbol(SF7, 2.5)


def test_modulate_batched_matches_scalar():
    ms = np.array([0, 3, 127, 64])
    batch = modulate_symbol(SF7, ms)
    for row, m in zip(batch, ms):
        np.testing.assert_array_equal(row, modulate_symbol(SF7, int(m)))


def test_symbol_37():
    assert dechirp_demod(SF7, modulate_symbol(SF7, 37))[0] == 37
    assert correlation_oracle_demod(SF7, modulate_symbol(SF7, 37)) == 37


@pytest.mark.parametrize("sf", range(5, 11))
@pytest.mark.parametrize("direction", ["up", "down"])
def test_round_trip_every_symbol(sf, direction):
    p = LoRaParams(sf, 125e3, direction)
    m = np.arange(p.n_samples)
    sym, peak = dechirp_demod(p, modulate_symbol(p, m))
    np.testing.assert_array_equal(sym, m)
    np.testing.assert_allclose(peak, p.n_samples, rtol=1e-9)


def test_demod_length_mismatch():
    with pytest.raises(ShapeError):
        dechirp_demod(SF7, np.ones(64, complex))
    with pytest.raises(ShapeError):
        correlation_oracle_demod(SF7, np.ones(64, complex))


def test_zero_signal_ties_to_smallest():
    assert dechirp_demod(SF7, np.zeros(128, complex))[0] == 0
    assert correlation_oracle_demod(SF7, np.zeros(128, complex)) == 0


def test_inverted_symbol_demodulates():
    assert dechirp_demod(SF7, -modulate_symbol(SF7, 99))[0] == 99


def test_awgn_infinite_snr_is_identity():
    s = modulate_symbol(SF7, 3)
    out = add_awgn(s, np.inf, 0)
    np.testing.assert_array_equal(out, s)
    assert out is not s


def test_awgn_noise_power_at_zero_db():
    s = base_chirp(LoRaParams(12))
    big = np.tile(s, 4)  # 2**14 samples
    noise = add_awgn(big, 0.0, 11) - big
    assert np.mean(np.abs(noise) ** 2) == pytest.approx(1.0, rel=0.05)


def test_awgn_power_tracks_snr():
    s = np.ones(1 << 15, complex)
    for snr in (-20.0, -5.0, 10.0):
        noise = add_awgn(s, snr, 1) - s
        assert 10 * np.log10(np.mean(np.abs(noise) ** 2)) == pytest.approx(-snr, abs=0.1)


def test_awgn_is_circular():
    noise = add_awgn(np.zeros(1 << 15, complex), 0.0, 5)
    assert np.var(noise.real) == pytest.approx(0.5, rel=0.05)
    assert np.var(noise.imag) == pytest.approx(0.5, rel=0.05)
    assert abs(np.mean(noise * noise)) < 0.03  # pseudo-covariance


def test_awgn_seeded():
    s = modulate_symbol(SF7, 1)
    np.testing.assert_array_equal(add_awgn(s, -10, 42), add_awgn(s, -10, 42))
    assert not np.array_equal(add_awgn(s, -10, 42), add_awgn(s, -10, 43))


def test_pure_noise_is_chance():
    rng = np.random.default_rng(0)
    trials = 10_000
    truth = rng.integers(0, 128, trials)
    noise = add_awgn(np.zeros((trials, 128), complex), 0.0, rng)
    pred, _ = dechirp_demod(SF7, noise)
    acc = np.mean(pred == truth)
    sigma = np.sqrt((1 / 128) * (1 - 1 / 128) / trials)
    assert abs(acc - 1 / 128) < 3 * sigma


def test_waterfall_minus_5db():
    rng = np.random.default_rng(1)
    rx = add_awgn(np.broadcast_to(modulate_symbol(SF7, 42), (10_000, 128)), -5.0, rng)
    pred, _ = dechirp_demod(SF7, rx)
    assert np.mean(pred == 42) > 0.999


@pytest.mark.parametrize("snr", [-30.0, -20.0, -10.0, 0.0])
def test_oracle_equivalence(snr):
    rng = np.random.default_rng(int(100 - snr))
    m = rng.integers(0, 128, 1000)
    rx = add_awgn(modulate_symbol(SF7, m), snr, rng)
    fast, _ = dechirp_demod(SF7, rx)
    slow = correlation_oracle_demod(SF7, rx)
    assert np.mean(fast == slow) >= 0.999


def test_spectrum_equals_correlation_magnitudes():
    rng = np.random.default_rng(3)
    x = add_awgn(modulate_symbol(LoRaParams(6), 9), -3.0, rng)
    p = LoRaParams(6)
    corr = np.array([abs(np.vdot(modulate_symbol(p, m), x)) for m in range(64)])
    np.testing.assert_allclose(dechirp_spectrum(p, x), corr, rtol=1e-10)


def test_ser_monotone_in_snr():
    rng = np.random.default_rng(4)
    trials = 10_000
    m = rng.integers(0, 128, trials)
    clean = modulate_symbol(SF7, m)
    sers = []
    for snr in (-25.0, -20.0, -15.0, -10.0, -5.0):
        pred, _ = dechirp_demod(SF7, add_awgn(clean, snr, rng))
        sers.append(symbol_error_rate(m, pred))
    tol = 3 * np.sqrt(0.25 / trials)
    assert all(b <= a + tol for a, b in zip(sers, sers[1:]))


def test_symbol_error_rate():
    assert symbol_error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert symbol_error_rate([1, 2, 3], [0, 0, 0]) == 1.0
    assert symbol_error_rate(np.arange(10), np.r_[np.arange(5), np.arange(5) + 100]) == 0.5
    with pytest.raises(ShapeError):
        symbol_error_rate([1, 2], [1])


@settings(max_examples=50, deadline=None)
@given(sf=st.integers(5, 9), m=st.integers(0, 511), r=st.integers(0, 511), up=st.booleans())
def test_roll_relabels(sf, m, r, up):
    p = LoRaParams(sf, 125e3, "up" if up else "down")
    n = p.n_samples
    m, r = m % n, r % n
    rolled = np.roll(modulate_symbol(p, m), r)
    assert dechirp_demod(p, rolled)[0] == (m + r) % n


@settings(max_examples=50, deadline=None)
@given(sf=st.integers(5, 9), m=st.integers(0, 511), gain=st.floats(1e-3, 1e3),
       phase=st.floats(0, 2 * np.pi))
def test_demod_invariant_to_complex_gain(sf, m, gain, phase):
    p = LoRaParams(sf)
    m %= p.n_samples
    x = gain * np.exp(1j * phase) * modulate_symbol(p, m)
    assert dechirp_demod(p, x)[0] == m
