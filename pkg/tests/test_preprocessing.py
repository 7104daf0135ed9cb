import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from rcecg.preprocessing import (
    ConfigurationError,
    FilterSpec,
    apply_filter,
    build_targets,
    BeatSegment,
    default_window_policy,
    design_butterworth_bandpass,
    filter_record,
    relabel,
    segment_beats,
    segments_csv,
    select_time_slot,
)
from rcecg.wfdb_ingest import AnnotatedRecord, BeatAnnotation, RecordHeader, SignalBuffer

FS = 360.0


@pytest.fixture(scope="module")
def cascade():
    return design_butterworth_bandpass(FilterSpec())


def make_record(n, beats=(), fs=FS):
    header = RecordHeader("t", 1, fs, n, (), False)
    sig = SignalBuffer(np.zeros(n), "MLII", 1 / fs)
    return AnnotatedRecord(header, (sig,), tuple(BeatAnnotation(s, c) for s, c in beats))


def df2t_oracle(b, a, x):
    """Direct-form II transposed biquad written out sample by sample."""
    z1 = z2 = 0.0
    y = []
    for v in x:
        out = b[0] * v + z1
        z1 = b[1] * v - a[1] * out + z2
        z2 = b[2] * v - a[2] * out
        y.append(out)
    return y


class TestDesign:
    @pytest.mark.parametrize("f", [0.4, 45.0])
    def test_half_power_at_cutoffs(self, cascade, f):
        g = abs(cascade.frequency_response([f], FS)[0])
        assert g == pytest.approx(1 / np.sqrt(2), rel=1e-6)

    def test_zero_at_dc_and_nyquist(self, cascade):
        g = np.abs(cascade.frequency_response([0.0, FS / 2], FS))
        assert g[0] == 0.0
        assert g[1] < 1e-9

    def test_poles_strictly_inside_unit_circle(self, cascade):
        p = cascade.poles()
        assert len(p) == 6
        assert np.all(np.abs(p) < 1)

    def test_sections_sorted_by_pole_magnitude(self, cascade):
        mags = [np.abs(s.poles()).max() for s in cascade.sections]
        assert mags == sorted(mags)

    def test_three_sections_with_dc_nyquist_zeros(self, cascade):
        assert len(cascade.sections) == 3
        for s in cascade.sections:
            assert s.b[1] == 0 and s.b[0] == -s.b[2]

    def test_matches_scipy_butter_response(self, cascade):
        # independent design route, compared on the frequency response
        sos = sps.butter(3, [0.4, 45.0], btype="bandpass", fs=FS, output="sos")
        f = np.linspace(0.05, 179.0, 500)
        _, h_ref = sps.sosfreqz(sos, worN=f, fs=FS)
        np.testing.assert_allclose(cascade.frequency_response(f, FS), h_ref, atol=1e-9)

    def test_passband_flat(self, cascade):
        g = np.abs(cascade.frequency_response([5.0, 10.0, 20.0], FS))
        np.testing.assert_allclose(g, 1.0, atol=5e-3)

    @pytest.mark.parametrize("bad", [
        dict(low_cutoff=0.0), dict(low_cutoff=50.0), dict(high_cutoff=180.0), dict(order=0),
    ])
    def test_invalid_spec(self, bad):
        with pytest.raises(ValueError):
            design_butterworth_bandpass(FilterSpec(**bad))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 5.0), st.floats(20.0, 150.0), st.sampled_from([250.0, 360.0, 500.0]))
    def test_stable_for_any_valid_spec(self, lo, hi, fs):
        hi = min(hi, 0.45 * fs)
        c = design_butterworth_bandpass(FilterSpec(3, lo, hi, fs))
        assert np.all(np.abs(c.poles()) < 1)


class TestApply:
    def sig(self, x):
        return SignalBuffer(np.asarray(x, dtype=float), "MLII", 1 / FS)

    def test_zero_in_zero_out(self, cascade):
        assert np.all(apply_filter(cascade, self.sig(np.zeros(500))).samples == 0)

    def test_matches_df2t_oracle(self, cascade, rng):
        x = rng.standard_normal(400)
        y = x.tolist()
        for s in cascade.sections:
            y = df2t_oracle(s.b, s.a, y)
        np.testing.assert_allclose(apply_filter(cascade, self.sig(x)).samples, y, rtol=1e-10, atol=1e-13)

    def test_impulse_response_dtft(self, cascade):
        n = 40_000
        imp = np.zeros(n)
        imp[0] = 1.0
        h = apply_filter(cascade, self.sig(imp)).samples
        freqs = np.linspace(0.1, 179.9, 64)
        w = 2 * np.pi * freqs / FS
        dtft = np.exp(-1j * np.outer(w, np.arange(n))) @ h
        np.testing.assert_allclose(dtft, cascade.frequency_response(freqs, FS), atol=1e-6)

    def test_constant_input_decays(self, cascade):
        y = apply_filter(cascade, self.sig(np.ones(20 * int(FS)))).samples
        assert abs(y[-1]) < 1e-3
        assert np.abs(y[-360:]).max() < np.abs(y[:360]).max()

    def test_length_preserved_and_empty_rejected(self, cascade):
        assert len(apply_filter(cascade, self.sig(np.ones(7)))) == 7
        with pytest.raises(ValueError):
            apply_filter(cascade, self.sig([]))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
    def test_linear(self, cascade, a, b, seed):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal(300), r.standard_normal(300)
        lhs = apply_filter(cascade, self.sig(a * x + b * y)).samples
        rhs = a * apply_filter(cascade, self.sig(x)).samples + b * apply_filter(cascade, self.sig(y)).samples
        scale = max(1.0, np.abs(rhs).max())
        assert np.abs(lhs - rhs).max() <= 1e-9 * scale

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_time_invariant(self, cascade, k, seed):
        x = np.random.default_rng(seed).standard_normal(200)
        y = apply_filter(cascade, self.sig(x)).samples
        ys = apply_filter(cascade, self.sig(np.concatenate([np.zeros(k), x]))).samples
        assert np.array_equal(ys[k:], y)

    def test_filter_record_keeps_annotations(self, synth_record, synth_filtered):
        assert synth_filtered.annotations == synth_record.annotations
        assert len(synth_filtered.signals) == 2
        assert abs(synth_filtered.lead_ii.samples[3600:].mean()) < 0.05


class TestSlot:
    def test_full_slot_identity_on_interior(self, synth_record):
        slot = select_time_slot(synth_record, 0, synth_record.duration)
        assert slot.annotations == synth_record.annotations
        assert slot.num_samples == synth_record.num_samples

    def test_rebase_and_edge_drop(self):
        rec = make_record(3600, [(100, "N"), (1800, "V"), (3590, "N")])
        slot = select_time_slot(rec, 0.2, 10.0)
        assert [(a.sample_index, a.beat_code) for a in slot.annotations] == [(1800 - 72, "V")]

    def test_short_slot_has_no_beats(self):
        rec = make_record(3600, [(1800, "N")])
        slot = select_time_slot(rec, 4.99, 5.01)
        assert slot.annotations == () and slot.num_samples == 8

    @pytest.mark.parametrize("start, end", [(-1, 5), (5, 5), (6, 5), (0, 11)])
    def test_out_of_range(self, start, end):
        with pytest.raises(ValueError):
            select_time_slot(make_record(3600), start, end)


class TestSegments:
    def test_single_beat(self):
        segs = segment_beats(make_record(10_000, [(3600, "N")]))
        assert (segs[0].start_sample, segs[0].end_sample) == (3510, 3744)

    def test_overlap_midpoint(self):
        segs = segment_beats(make_record(10_000, [(3600, "N"), (3780, "N")]))
        assert segs[0].end_sample == segs[1].start_sample == 3690

    def test_clip_at_start(self):
        segs = segment_beats(make_record(1000, [(10, "N")]))
        assert segs[0].start_sample == 0

    def test_clip_at_end(self):
        segs = segment_beats(make_record(1000, [(990, "V")]))
        assert segs[0].end_sample == 1000

    def test_missing_policy_names_class(self):
        with pytest.raises(ConfigurationError, match="'V'"):
            segment_beats(make_record(1000, [(500, "V")]), {"N": (0.1, 0.1)})

    @settings(max_examples=60)
    @given(st.lists(st.tuples(st.integers(0, 20_000), st.sampled_from("NVLA")), max_size=60, unique_by=lambda t: t[0]))
    def test_one_segment_per_beat_non_overlapping(self, beats):
        beats = sorted(beats)
        segs = segment_beats(make_record(20_001, beats))
        assert len(segs) == len(beats)
        for s, (f, c) in zip(segs, beats):
            assert s.fiducial_sample == f and s.class_label == c
            assert 0 <= s.start_sample <= f < s.end_sample or s.start_sample == s.end_sample
        for a, b in zip(segs, segs[1:]):
            assert a.end_sample <= b.start_sample

    def test_segments_csv(self):
        text = segments_csv([BeatSegment(1, 5, 3, "V")])
        assert text == "start,end,fiducial,class\n1,5,3,V\n"

    def test_relabel(self):
        segs = relabel([BeatSegment(0, 1, 0, "A"), BeatSegment(1, 2, 1, "V")], ["N", "V"], "N")
        assert [s.class_label for s in segs] == ["N", "V"]

    def test_default_policy_covers_every_beat_code(self):
        from rcecg.wfdb_ingest import BEAT_SYMBOLS

        assert set(default_window_policy()) == set(BEAT_SYMBOLS)


class TestTargets:
    def test_single_pvc(self):
        Y = build_targets([BeatSegment(100, 200, 150, "V")], ["V"], 300).values
        assert Y[0, 100:200].sum() == 100 and Y.sum() == 100

    def test_empty(self):
        assert not build_targets([], ["N", "V"], 50).values.any()

    def test_unknown_class(self):
        with pytest.raises(ConfigurationError):
            build_targets([BeatSegment(0, 5, 2, "A")], ["N", "V"], 10)

    @settings(max_examples=60)
    @given(st.lists(st.tuples(st.integers(0, 5000), st.sampled_from("NV")), max_size=40, unique_by=lambda t: t[0]))
    def test_columns_sum_to_zero_or_one(self, beats):
        segs = segment_beats(make_record(5001, sorted(beats)))
        col = build_targets(segs, ["N", "V"], 5001).values.sum(axis=0)
        assert set(np.unique(col)) <= {0.0, 1.0}
