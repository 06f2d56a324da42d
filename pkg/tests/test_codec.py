import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FORMAT_NAMES, nearest_code_oracle, reference_table
from fp8ptq.codec import (
    E4M3,
    E4M3_GAUDI2,
    E5M2,
    NEAREST,
    Fp8Format,
    OverflowPolicy,
    RoundingMode,
    Variant,
    code_table,
    count_clipped,
    decode,
    encode,
    get_format,
    round_trip,
    uniform_stream,
)


def _bits(s, e, m, exp_bits, mant_bits):
    return (s << 7) | (e << mant_bits) | m


class TestFormats:
    def test_widths_add_to_eight(self):
        for fmt in (E4M3, E4M3_GAUDI2, E5M2):
            assert fmt.exp_bits + fmt.mant_bits + 1 == 8

    def test_bad_widths_rejected(self):
        with pytest.raises(ValueError):
            Fp8Format("bad", Variant.E5M2, 5, 3, 15, True)

    def test_descriptor_fields(self):
        assert (E4M3.max_finite, E4M3.has_inf, E4M3.nan_encoding) == (448.0, False, "top_mantissa_all_ones")
        assert (E4M3_GAUDI2.max_finite, E4M3_GAUDI2.has_inf) == (240.0, True)
        assert E4M3_GAUDI2.nan_encoding == "ieee_top_exponent"
        assert E5M2.has_inf and E5M2.exp_bias == 15

    def test_lookup_by_name(self):
        assert get_format("E5M2") is E5M2
        assert get_format(E4M3) is E4M3
        with pytest.raises(ValueError, match="unknown FP8 format"):
            get_format("e3m4")


class TestDecode:
    def test_ocp_max(self):
        assert decode(_bits(0, 0b1111, 0b110, 4, 3), E4M3) == 448.0

    def test_gaudi2_max(self):
        assert decode(_bits(0, 0b1110, 0b111, 4, 3), E4M3_GAUDI2) == 240.0

    @pytest.mark.parametrize("name", FORMAT_NAMES)
    def test_zero(self, name):
        assert decode(0x00, name) == 0.0
        assert math.copysign(1.0, decode(0x80, name)) == -1.0

    def test_e5m2_max_matches_enumeration(self):
        table = np.array(reference_table(E5M2))
        oracle_max = np.nanmax(table[np.isfinite(table)])
        assert oracle_max == 57344.0
        assert E5M2.max_finite == oracle_max
        assert decode(E5M2.max_code, E5M2) == oracle_max

    @pytest.mark.parametrize("name", FORMAT_NAMES)
    def test_all_codes_match_formula(self, name):
        fmt = get_format(name)
        ours = decode(np.arange(256, dtype=np.uint8), fmt)
        ref = np.array(reference_table(fmt))
        np.testing.assert_array_equal(np.isnan(ours), np.isnan(ref))
        mask = ~np.isnan(ref)
        np.testing.assert_array_equal(ours[mask], ref[mask])

    def test_specials(self):
        assert math.isnan(decode(0x7F, E4M3)) and math.isnan(decode(0xFF, E4M3))
        assert not any(np.isinf(decode(np.arange(256), E4M3)))
        assert decode(0x78, E4M3_GAUDI2) == math.inf
        assert decode(0xFC, E5M2) == -math.inf
        assert math.isnan(decode(0x7D, E5M2))

    @pytest.mark.parametrize("name", FORMAT_NAMES)
    def test_sign_symmetry(self, name):
        pos = decode(np.arange(128, dtype=np.uint8), name)
        neg = decode(np.arange(128, 256).astype(np.uint8), name)
        finite = np.isfinite(pos)
        np.testing.assert_array_equal(neg[finite], -pos[finite])

    @pytest.mark.parametrize("name", FORMAT_NAMES)
    def test_injective_and_monotone(self, name):
        fmt = get_format(name)
        mags = decode(np.arange(fmt.max_code + 1, dtype=np.uint8), fmt)
        assert np.all(np.diff(mags) > 0)
        signed = np.concatenate([-mags[:0:-1], mags])
        assert np.all(np.diff(signed) > 0)

    def test_out_of_range_codes(self):
        with pytest.raises(ValueError):
            decode(np.array([256]), E4M3)
        with pytest.raises(TypeError):
            decode(np.array([1.0]), E4M3)

    @pytest.mark.parametrize(
        "name, attr", [("e4m3", "float8_e4m3fn"), ("e5m2", "float8_e5m2"), ("e4m3_gaudi2", "float8_e4m3")]
    )
    def test_matches_ml_dtypes(self, name, attr):
        ml_dtypes = pytest.importorskip("ml_dtypes")
        if not hasattr(ml_dtypes, attr):
            pytest.skip(f"ml_dtypes lacks {attr}")
        ref = np.arange(256, dtype=np.uint8).view(getattr(ml_dtypes, attr)).astype(np.float64)
        ours = decode(np.arange(256, dtype=np.uint8), name)
        np.testing.assert_array_equal(np.isnan(ours), np.isnan(ref))
        np.testing.assert_array_equal(ours[~np.isnan(ref)], ref[~np.isnan(ref)])


class TestEncode:
    def test_exact_max(self):
        assert decode(encode(448.0, E4M3), E4M3) == 448.0

    def test_saturates(self):
        assert decode(encode(1e6, E4M3), E4M3) == 448.0
        assert decode(encode(-1e6, E4M3), E4M3) == -448.0
        assert decode(encode(1e9, E5M2), E5M2) == 57344.0

    def test_to_special(self):
        assert math.isnan(round_trip(1e6, E4M3, ovf="to_special"))
        assert round_trip(1e6, E4M3_GAUDI2, ovf="to_special") == math.inf
        assert round_trip(-1e6, E5M2, ovf="to_special") == -math.inf

    def test_overflow_threshold_is_after_rounding(self):
        # 460 rounds down to 448 before any overflow check; 470 rounds past it
        assert round_trip(460.0, E4M3, ovf="to_special") == 448.0
        assert round_trip(464.0, E4M3, ovf="to_special") == 448.0  # tie -> even mantissa
        assert math.isnan(round_trip(470.0, E4M3, ovf="to_special"))
        assert round_trip(247.0, E4M3_GAUDI2, ovf="to_special") == 240.0
        assert round_trip(248.0, E4M3_GAUDI2, ovf="to_special") == math.inf

    @pytest.mark.parametrize("name", FORMAT_NAMES)
    def test_zero_is_positive_code(self, name):
        assert encode(0.0, name) == 0
        assert encode(-0.0, name) == 0
        assert encode(0.0, name, RoundingMode.stochastic(3)) == 0

    def test_nan_input(self):
        assert encode(math.nan, E4M3) == E4M3.nan_code
        assert math.isnan(round_trip(math.nan, E5M2))

    def test_infinite_input(self):
        assert round_trip(math.inf, E5M2) == math.inf
        assert round_trip(-math.inf, E4M3_GAUDI2) == -math.inf
        assert round_trip(math.inf, E4M3) == 448.0
        assert math.isnan(round_trip(math.inf, E4M3, ovf="to_special"))

    def test_power_of_two(self):
        assert round_trip(0.0625, E4M3) == 0.0625

    def test_gaudi2_rounds_up_to_max(self):
        assert round_trip(239.9, E4M3_GAUDI2) == 240.0
        assert encode(239.9, E4M3_GAUDI2) == nearest_code_oracle([239.9], E4M3_GAUDI2)[0]

    def test_underflow(self):
        assert round_trip(E4M3.min_subnormal / 4, E4M3) == 0.0
        assert round_trip(E4M3.min_subnormal / 2, E4M3) == 0.0  # tie -> even (zero)
        assert round_trip(E4M3.min_subnormal * 0.75, E4M3) == E4M3.min_subnormal

    def test_ties_to_even(self):
        # 1.0625 lies halfway between 1.0 (M=000) and 1.125 (M=001)
        assert round_trip(1.0625, E4M3) == 1.0
        # 1.1875 lies between 1.125 (M=001) and 1.25 (M=010)
        assert round_trip(1.1875, E4M3) == 1.25

    @pytest.mark.parametrize("name", FORMAT_NAMES)
    def test_exhaustive_round_trip(self, name):
        fmt = get_format(name)
        codes = np.arange(256, dtype=np.uint8)
        back = encode(decode(codes, fmt), fmt)
        values = decode(codes, fmt)
        canonical = codes.copy()
        canonical[np.isnan(values)] = fmt.nan_code
        canonical[codes == 0x80] = 0
        np.testing.assert_array_equal(back, canonical)

    @pytest.mark.parametrize("name", FORMAT_NAMES)
    def test_matches_exhaustive_oracle(self, name, rng):
        fmt = get_format(name)
        x = rng.uniform(-1, 1, 20_000) * fmt.max_finite * 10.0 ** rng.uniform(-6, 0, 20_000)
        np.testing.assert_array_equal(encode(x, fmt), nearest_code_oracle(x, fmt))

    def test_scalar_and_array_shapes(self):
        assert isinstance(encode(1.0, E4M3), int)
        out = encode(np.ones((2, 3)), E4M3)
        assert out.shape == (2, 3) and out.dtype == np.uint8

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-448, 448, allow_nan=False), st.sampled_from(FORMAT_NAMES))
    def test_round_trip_idempotent(self, v, name):
        once = round_trip(v, name)
        assert round_trip(once, name) == once

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-1e5, 1e5, allow_nan=False), st.sampled_from(FORMAT_NAMES))
    def test_nearest_property(self, v, name):
        fmt = get_format(name)
        table = decode(np.arange(256, dtype=np.uint8), fmt)
        finite = table[np.isfinite(table)]
        v = float(np.clip(v, -fmt.max_finite, fmt.max_finite))
        assert abs(round_trip(v, fmt) - v) <= np.min(np.abs(finite - v))


class TestStochastic:
    def test_brackets(self, rng):
        x = rng.uniform(-400, 400, 5000)
        sr = round_trip(x, E4M3, RoundingMode.stochastic(7))
        table = decode(np.arange(256, dtype=np.uint8), E4M3)
        finite = np.sort(table[np.isfinite(table)])
        idx = np.searchsorted(finite, x)
        lo = finite[np.clip(idx - 1, 0, finite.size - 1)]
        hi = finite[np.clip(idx, 0, finite.size - 1)]
        exact = np.isin(x, finite)
        assert np.all((sr == lo) | (sr == hi) | exact)

    def test_unbiased_single_value(self):
        v = 1.03  # between 1.0 and 1.125
        n = 200_000
        draws = round_trip(np.full(n, v), E4M3, RoundingMode.stochastic(11))
        p = (v - 1.0) / 0.125
        sigma = 0.125 * math.sqrt(p * (1 - p) / n)
        assert abs(draws.mean() - v) < 4 * sigma

    def test_deterministic(self, rng):
        x = rng.normal(size=1000)
        a = encode(x, E5M2, RoundingMode.stochastic(5))
        b = encode(x, E5M2, RoundingMode.stochastic(5))
        c = encode(x, E5M2, RoundingMode.stochastic(6))
        np.testing.assert_array_equal(a, b)
        assert np.any(a != c)

    def test_depends_on_index_not_order(self, rng):
        x = rng.normal(size=64)
        whole = encode(x, E4M3, RoundingMode.stochastic(1))
        tail = encode(x[32:], E4M3, RoundingMode.stochastic(1), index_offset=32)
        np.testing.assert_array_equal(whole[32:], tail)

    def test_stream_uniform(self):
        u = uniform_stream(0, np.arange(100_000))
        assert u.min() >= 0 and u.max() < 1
        assert abs(u.mean() - 0.5) < 0.005
        np.testing.assert_array_equal(u, uniform_stream(0, np.arange(100_000)))

    def test_overflow_policy_applies(self):
        draws = round_trip(np.full(1000, 470.0), E4M3, RoundingMode.stochastic(0))
        assert np.all(draws == 448.0)
        draws = round_trip(np.full(1000, 470.0), E4M3, RoundingMode.stochastic(0), ovf="to_special")
        assert np.any(np.isnan(draws)) and np.any(draws == 448.0)

    def test_rounding_mode_validation(self):
        with pytest.raises(ValueError):
            RoundingMode("up")
        assert RoundingMode.from_value({"kind": "stochastic", "seed": 4}) == RoundingMode.stochastic(4)
        assert RoundingMode.from_value(None) is NEAREST


def test_count_clipped():
    assert count_clipped([1.0, 449.0, 464.0, 470.0, -1000.0, np.nan, np.inf], E4M3) == 2
    assert count_clipped([241.0, 247.0, 248.0, 249.0], E4M3_GAUDI2) == 2
    assert count_clipped([], E5M2) == 0


def test_code_table_rows():
    rows = code_table("e5m2")
    assert len(rows) == 256
    assert rows[0]["kind"] == "zero"
    assert rows[1]["kind"] == "subnormal"
    assert max(r["value"] for r in rows if r["kind"] == "normal") == 57344.0
    assert OverflowPolicy("saturate") is OverflowPolicy.SATURATE
