import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sleepkit import DataError
from sleepkit.records import (
    N_WINDOWS,
    Record,
    SleepStage,
    SynthProfile,
    check_hypnogram,
    load_record,
    map_labels,
    normalize_duration,
    save_record,
    synthesize_record,
)

W, L, D, R, PAD = 0, 1, 2, 3, 255


def test_rk_mapping():
    assert map_labels([0, 1, 2, 3, 4, 5], "RK").tolist() == [W, L, L, D, D, R]


def test_aasm_single_and_unscored():
    assert map_labels([3], "AASM").tolist() == [D]
    assert map_labels([9], "RK").tolist() == [PAD]


def test_unknown_code_names_window():
    with pytest.raises(DataError, match="window 2"):
        map_labels([0, 1, 7], "AASM")


@given(st.lists(st.sampled_from([0, 1, 2, 3]), min_size=1, max_size=50))
def test_four_class_mapping_idempotent(codes):
    once = map_labels(codes, "STAGE4")
    assert once.tolist() == codes
    assert map_labels(once, "STAGE4").tolist() == codes


@given(st.lists(st.sampled_from([0, 1, 2, 3, 5, 9]), min_size=1, max_size=50))
def test_aasm_total_over_declared_codes(codes):
    out = map_labels(codes, "AASM")
    assert set(out.tolist()) <= {W, L, D, R, PAD}


def test_hypnogram_pad_must_be_suffix():
    check_hypnogram(np.array([0, 1, 255, 255], dtype=np.uint8))
    with pytest.raises(DataError):
        check_hypnogram(np.array([0, 255, 1], dtype=np.uint8))


def _record(hours, fs):
    n = int(round(hours * 3600 * fs))
    n_win = int(round(hours * 120))
    return Record("r", np.ones(n), fs, hypnogram=np.ones(n_win, dtype=np.uint8))


def test_normalize_nine_hours_at_wav_rate():
    out = normalize_duration(_record(9, 1024 / 30))
    assert len(out.signal) == 1_228_800
    assert np.all(out.hypnogram[-120:] == PAD)
    assert np.all(out.hypnogram[:1080] == L)
    assert np.all(out.signal[1_105_920:] == 0)


def test_normalize_ten_hours_identity():
    rec = _record(10, 64.0)
    out = normalize_duration(rec)
    np.testing.assert_array_equal(out.signal, rec.signal)
    np.testing.assert_array_equal(out.hypnogram, rec.hypnogram)


def test_normalize_eleven_hours_keeps_start():
    rec = _record(11, 8.0)
    rec = Record("r", np.arange(len(rec.signal), dtype=float), 8.0, hypnogram=rec.hypnogram)
    out = normalize_duration(rec)
    assert len(out.hypnogram) == N_WINDOWS
    assert len(out.signal) == 36000 * 8
    assert out.signal[-1] == 36000 * 8 - 1


def test_normalize_empty_record():
    out = normalize_duration(Record("e", np.zeros(0), 10.0))
    assert np.all(out.hypnogram == PAD)
    assert np.all(out.signal == 0)


@given(hours=st.floats(0.01, 12.0), fs=st.sampled_from([1.0, 2.5, 8.0]))
def test_normalized_lengths(hours, fs):
    out = normalize_duration(_record(hours, fs))
    assert len(out.hypnogram) == 1200
    assert len(out.signal) == round(36000 * fs)
    check_hypnogram(out.hypnogram)


def test_load_csv_fixture(tmp_path):
    path = tmp_path / "rec.csv"
    path.write_text("\n".join(str(v) for v in range(10)))
    (tmp_path / "rec.meta.json").write_text(json.dumps({"fs": 5, "kind": "PPG"}))
    rec = load_record(path)
    assert len(rec.signal) == 10 and rec.fs == 5 and rec.id == "rec"


def test_load_rawf32_fixture(tmp_path):
    data = np.linspace(-1, 1, 512, dtype="<f4")
    path = tmp_path / "night.f32"
    path.write_bytes(data.tobytes())
    meta = {"id": "n1", "fs": 256, "kind": "ECG", "n_samples": 512, "label_scheme": "RK",
            "labels": [0, 4], "demographics": {"age": 61, "sex": 1}, "groups": {"ahi": "5-15"}}
    (tmp_path / "night.meta.json").write_text(json.dumps(meta))
    rec = load_record(path)
    assert len(rec.signal) == 512
    np.testing.assert_array_equal(rec.signal, data)
    assert rec.hypnogram.tolist() == [W, D]
    assert rec.demographics.tolist() == [61, 1]
    assert rec.groups == {"ahi": "5-15"}


def test_length_mismatch(tmp_path):
    path = tmp_path / "x.f32"
    path.write_bytes(np.zeros(99, "<f4").tobytes())
    (tmp_path / "x.meta.json").write_text(json.dumps({"fs": 1, "kind": "PPG", "n_samples": 100}))
    with pytest.raises(DataError, match="100"):
        load_record(path)


def test_malformed_sidecar_and_format(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("1\n2\n")
    (tmp_path / "x.meta.json").write_text("{not json")
    with pytest.raises(DataError, match="x.meta.json"):
        load_record(path)
    with pytest.raises(DataError):
        load_record(tmp_path / "x.wav")


def test_save_load_round_trip(tmp_path):
    rec = synthesize_record(4, SynthProfile(n_windows=4, fs=64.0))
    save_record(rec, tmp_path / "r.f32")
    back = load_record(tmp_path / "r.f32")
    np.testing.assert_array_equal(back.signal, rec.signal.astype(np.float32))
    np.testing.assert_array_equal(back.hypnogram, rec.hypnogram)
    assert back.groups == rec.groups


def test_synth_full_night():
    rec = synthesize_record(1, SynthProfile(fs=34.0))
    assert len(rec.hypnogram) == 1200
    assert len(rec.signal) == round(36000 * 34.0)
    assert set(np.unique(rec.hypnogram)) <= {W, L, D, R}


def test_synth_constant_rate_ibis():
    prof = SynthProfile(n_windows=20, fs=128.0, rate_mean=(60.0,) * 4, rate_sd=(0.0,) * 4,
                        rsa_depth=(0.0,) * 4, noise=(0.0,) * 4)
    rec = synthesize_record(3, prof)
    np.testing.assert_allclose(np.diff(rec.beat_times) * 1000, 1000.0, atol=1e-9)


def test_synth_deterministic():
    prof = SynthProfile(n_windows=10, fs=64.0)
    a, b = synthesize_record(7, prof), synthesize_record(7, prof)
    np.testing.assert_array_equal(a.signal, b.signal)
    np.testing.assert_array_equal(a.hypnogram, b.hypnogram)
    assert a.groups == b.groups
    assert not np.array_equal(a.signal, synthesize_record(8, prof).signal)


def test_synth_invalid_profile():
    with pytest.raises(DataError):
        synthesize_record(0, SynthProfile(rate_mean=(60.0, 0.0, 50.0, 60.0)))


def test_synth_partial_night_is_padded():
    rec = synthesize_record(2, SynthProfile(n_windows=20, fs=64.0, recorded_fraction=0.5))
    assert np.all(rec.hypnogram[10:] == PAD) and np.all(rec.hypnogram[:10] != PAD)
    assert rec.n_valid == 10 * 30 * 64


def test_stage_codes():
    assert [int(s) for s in SleepStage] == [0, 1, 2, 3, 255]
