import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import decode_canonical_wav, lerp_resample, wav_bytes
from wav2ent.audio_io import (Waveform, load_for_model, parse_wav, resample_linear, standardize,
                              write_wav)
from wav2ent.errors import EmptyInput, MalformedHeader, UnsupportedFormat


def _chunk(tag: bytes, body: bytes) -> bytes:
    pad = b"\x00" if len(body) % 2 else b""
    return tag + struct.pack("<I", len(body)) + body + pad


def _riff(*chunks: bytes) -> bytes:
    body = b"WAVE" + b"".join(chunks)
    return b"RIFF" + struct.pack("<I", len(body)) + body


def _fmt(code=1, channels=1, rate=16000, bits=16):
    block = channels * bits // 8
    return _chunk(b"fmt ", struct.pack("<HHIIHH", code, channels, rate, rate * block, block, bits))


class TestParse:
    def test_zero_data(self):
        w = parse_wav(wav_bytes([0, 0, 0, 0], 16000))
        assert w.sample_rate == 16000
        assert w.samples.tolist() == [0.0, 0.0, 0.0, 0.0]
        assert w.samples.dtype == np.float32

    def test_half_scale(self):
        assert parse_wav(wav_bytes([16384], 16000)).samples.tolist() == [0.5]

    def test_extremes(self):
        w = parse_wav(wav_bytes([-32768, 32767], 8000))
        assert w.samples[0] == -1.0
        assert w.samples[1] == pytest.approx(32767 / 32768)

    def test_stereo_against_byte_oracle(self):
        data = wav_bytes([32767, -32768], 44100, channels=2)
        rate, channels, expected = decode_canonical_wav(data)
        w = parse_wav(data)
        assert (rate, channels) == (44100, 2)
        assert len(w) == 1
        assert w.samples[0] == pytest.approx(expected[0], abs=1e-9)
        assert w.samples[0] == pytest.approx(-0.5 / 32768)

    def test_unknown_chunks_are_skipped(self):
        pcm = struct.pack("<3h", 1000, -1000, 0)
        data = _riff(_chunk(b"LIST", b"abc"), _fmt(), _chunk(b"junk", b"\x01" * 7), _chunk(b"data", pcm))
        assert np.allclose(parse_wav(data).samples, [1000 / 32768, -1000 / 32768, 0])

    def test_declared_length_is_honored(self):
        pcm = struct.pack("<2h", 100, 200)
        data = _riff(_fmt(), _chunk(b"data", pcm)) + b"\x7f\x7f" * 5
        assert len(parse_wav(data)) == 2

    @pytest.mark.parametrize("data", [
        b"",
        b"RIFX" + b"\x00" * 40,
        b"RIFF\x00\x00\x00\x00WAVX",
        _riff(_fmt())[:-3],
        _riff(_fmt()),
        _riff(_chunk(b"data", b"\x00\x00"), _fmt()),
        _riff(_fmt(rate=0), _chunk(b"data", b"")),
    ])
    def test_malformed(self, data):
        with pytest.raises(MalformedHeader):
            parse_wav(data)

    @pytest.mark.parametrize("kw", [dict(code=3), dict(bits=8), dict(bits=24), dict(channels=3)])
    def test_unsupported(self, kw):
        with pytest.raises(UnsupportedFormat):
            parse_wav(_riff(_fmt(**kw), _chunk(b"data", b"\x00" * 12)))

    def test_truncated_data_chunk(self):
        data = _riff(_fmt(), b"data" + struct.pack("<I", 100) + b"\x00" * 10)
        with pytest.raises(MalformedHeader):
            parse_wav(data)


class TestWrite:
    def test_empty_is_bare_header(self):
        data = write_wav(Waveform(16000, np.zeros(0, np.float32)))
        assert len(data) == 44
        assert struct.unpack("<I", data[40:44])[0] == 0

    def test_half_matches_oracle_bytes(self):
        # round(0.5 * 32767) = 16384 (banker's rounding is not involved: 16383.5 -> 16384)
        assert write_wav(Waveform(16000, np.array([0.5], np.float32))) == wav_bytes([16384], 16000)

    def test_clamps(self):
        data = write_wav(Waveform(8000, np.array([3.0, -7.0], np.float32)))
        assert struct.unpack("<2h", data[44:]) == (32767, -32767)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-0.5, 0.5, allow_nan=False, width=32), max_size=200))
    def test_round_trip_within_one_quantum(self, xs):
        w = Waveform(16000, np.array(xs, np.float32))
        back = parse_wav(write_wav(w))
        assert back.sample_rate == 16000
        assert np.all(np.abs(back.samples - w.samples) <= 1.0 / 32768 + 1e-7)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-1.0, 1.0, allow_nan=False, width=32), max_size=200))
    def test_round_trip_full_scale_bound(self, xs):
        # writing scales by 32767 and reading by 32768: |x|/32768 drift plus half a step
        x = np.array(xs, np.float32)
        back = parse_wav(write_wav(Waveform(16000, x))).samples
        bound = (np.abs(x.astype(np.float64)) + 0.5) / 32768 + 1e-7
        assert np.all(np.abs(back - x) <= bound)

    def test_full_scale_drift_example(self):
        back = parse_wav(write_wav(Waveform(16000, np.array([1.0], np.float32)))).samples
        assert back[0] == np.float32(32767 / 32768)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-16383, 16383), max_size=200))
    def test_round_trip_exact_on_grid(self, ints):
        # exact below half scale; see the note on write scaling in the README
        w = Waveform(22050, np.array(ints, np.float32) / 32768)
        assert parse_wav(write_wav(w)) == w


class TestResample:
    def test_identity(self):
        w = Waveform(16000, np.array([0.1, -0.2, 0.3], np.float32))
        out = resample_linear(w, 16000)
        assert out == w and out.samples is not w.samples

    def test_midpoint_upsample(self):
        out = resample_linear(Waveform(8000, np.array([0.0, 1.0], np.float32)), 16000)
        assert out.sample_rate == 16000
        assert out.samples[:3].tolist() == [0.0, 0.5, 1.0]
        assert len(out) == 4

    def test_ramp_downsample_vs_oracle(self):
        x = np.linspace(-1, 1, 100).astype(np.float32)
        out = resample_linear(Waveform(16000, x), 8000)
        assert len(out) == 50
        assert np.allclose(out.samples, lerp_resample(x, 16000, 8000), atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 400), st.sampled_from([8000, 11025, 16000, 22050, 44100]),
           st.sampled_from([8000, 16000, 24000]))
    def test_length_and_oracle(self, n, src, dst):
        x = np.random.default_rng(n).uniform(-1, 1, n).astype(np.float32)
        out = resample_linear(Waveform(src, x), dst)
        assert len(out) == n * dst // src
        assert np.allclose(out.samples, lerp_resample(x, src, dst), atol=1e-6)

    def test_too_short(self):
        with pytest.raises(EmptyInput):
            resample_linear(Waveform(8000, np.array([0.5], np.float32)), 16000)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            resample_linear(Waveform(8000, np.zeros(4, np.float32)), 0)


class TestStandardize:
    def test_constant(self):
        out = standardize(Waveform(16000, np.full(3, 0.3, np.float32)))
        assert np.allclose(out.samples, 0.0, atol=1e-6)

    def test_two_points_by_hand(self):
        # mean 0.5, variance 0.25
        expect = 0.5 / np.sqrt(0.25 + 1e-5)
        out = standardize(Waveform(16000, np.array([0.0, 1.0], np.float32)))
        assert np.allclose(out.samples, [-expect, expect], atol=1e-7)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            standardize(Waveform(16000, np.zeros(0, np.float32)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=2, max_size=300))
    def test_zero_mean(self, xs):
        out = standardize(Waveform(16000, np.array(xs, np.float32)))
        assert abs(float(np.mean(out.samples, dtype=np.float64))) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_idempotent_for_loud_signals(self, seed):
        rng = np.random.default_rng(seed)
        x = (rng.choice([-1.0, 1.0], 256) * rng.uniform(0.75, 1.0, 256)).astype(np.float32)
        once = standardize(Waveform(16000, x))
        twice = standardize(once)
        assert np.max(np.abs(once.samples - twice.samples)) < 1e-5

    def test_epsilon_breaks_idempotence_for_quiet_signals(self):
        # variance 1e-5 equals epsilon: the first pass only reaches variance 1/2
        x = np.array([-1.0, 1.0] * 8, np.float32) * np.sqrt(1e-5).astype(np.float32)
        once = standardize(Waveform(16000, x))
        assert float(np.var(once.samples)) == pytest.approx(0.5, rel=1e-3)
        twice = standardize(once)
        assert np.max(np.abs(twice.samples - once.samples)) > 0.1


def test_load_for_model_resamples_and_standardizes():
    data = wav_bytes([0, 8000, -8000, 16000] * 50, 8000)
    w = load_for_model(data)
    assert w.sample_rate == 16000 and len(w) == 400
    assert abs(float(w.samples.mean())) < 1e-6
    assert abs(float(w.samples.std()) - 1.0) < 1e-3


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=120))
def test_arbitrary_bytes_never_escape_typed_errors(blob):
    for data in (blob, b"RIFF" + blob, _riff(_fmt()) + blob):
        try:
            w = parse_wav(data)
        except (MalformedHeader, UnsupportedFormat):
            continue
        assert np.all(np.isfinite(w.samples)) and np.all(np.abs(w.samples) <= 1.0)
