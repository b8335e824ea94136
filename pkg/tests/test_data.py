import json

import numpy as np
import pytest

from attractorsep.data import (
    FAMILIES,
    SLOT_BANDS,
    CorpusSpec,
    MixtureRecord,
    build_corpus,
    generate_record,
    in_memory_corpus,
    load_corpus,
    load_manifest,
    mix,
    synthesize_source,
)
from attractorsep.errors import InvalidInputError


def band_energy_fraction(w, lo, hi):
    spec = np.abs(np.fft.rfft(w.samples)) ** 2
    freqs = np.fft.rfftfreq(len(w.samples), 1.0 / w.sample_rate)
    inside = (freqs >= lo) & (freqs <= hi)
    return spec[inside].sum() / spec.sum()


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("slot", [0, 1, 2])
def test_source_energy_stays_in_slot_band(family, slot):
    w = synthesize_source(family, {"slot": slot}, duration=1.0, rate=8000, seed=7)
    lo, hi = SLOT_BANDS[slot]
    # small leakage margin for windows/finite length
    assert band_energy_fraction(w, lo * 0.9, hi * 1.1) >= 0.95


@pytest.mark.parametrize("family", FAMILIES)
def test_source_deterministic_per_seed(family):
    a = synthesize_source(family, {"slot": 1}, 0.5, 8000, seed=3)
    b = synthesize_source(family, {"slot": 1}, 0.5, 8000, seed=3)
    c = synthesize_source(family, {"slot": 1}, 0.5, 8000, seed=4)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_source_has_unit_rms_and_expected_length():
    w = synthesize_source("am_noise", {"slot": 0}, 0.25, 8000, seed=0)
    assert len(w.samples) == 2000
    assert np.sqrt(np.mean(w.samples**2)) == pytest.approx(1.0, rel=1e-12)


def test_unknown_family_rejected():
    with pytest.raises(InvalidInputError):
        synthesize_source("square_wave", {"slot": 0}, 0.1, 8000, seed=0)


def two_sources(seed=0):
    return [
        synthesize_source("am_noise", {"slot": 0}, 0.5, 8000, seed=seed),
        synthesize_source("am_noise", {"slot": 1}, 0.5, 8000, seed=seed + 1),
    ]


def test_mix_zero_offset_gives_equal_rms():
    mixture, sources = mix(two_sources(), [0.0, 0.0])
    r1 = np.sqrt(np.mean(sources[0].samples ** 2))
    r2 = np.sqrt(np.mean(sources[1].samples ** 2))
    assert r1 == pytest.approx(r2, rel=1e-9)


def test_mix_five_db_offset_rms_ratio():
    mixture, sources = mix(two_sources(), [0.0, 5.0])
    r1 = np.sqrt(np.mean(sources[0].samples ** 2))
    r2 = np.sqrt(np.mean(sources[1].samples ** 2))
    assert r2 / r1 == pytest.approx(10 ** (5 / 20), rel=1e-6)


def test_mix_is_exact_sum_of_returned_sources():
    mixture, sources = mix(two_sources(), [0.0, -3.0])
    total = sources[0].samples + sources[1].samples
    assert np.max(np.abs(mixture.samples - total)) < 1e-12


def test_mix_peak_normalized():
    mixture, _ = mix(two_sources(), [0.0, 2.0])
    assert np.max(np.abs(mixture.samples)) == pytest.approx(0.9, rel=1e-12)


def test_mix_rejects_nonzero_reference_offset():
    with pytest.raises(InvalidInputError):
        mix(two_sources(), [1.0, 0.0])


def test_mix_rejects_length_mismatch():
    a, b = two_sources()
    from attractorsep.dsp import Waveform

    short = Waveform(samples=b.samples[:-1], sample_rate=b.sample_rate)
    with pytest.raises(InvalidInputError):
        mix([a, short], [0.0, 0.0])


def small_spec(**kw):
    base = dict(
        n_train=2,
        n_val=1,
        n_test=1,
        k_set=(2,),
        duration_s=0.3,
        sample_rate=8000,
        source_family="am_noise",
        seed=11,
    )
    base.update(kw)
    return CorpusSpec(**base)


def test_generate_record_exact_sum_on_grid():
    mixture, sources, k, offsets = generate_record(small_spec(), 0, 0)
    total = np.sum([s.samples for s in sources], axis=0)
    assert np.array_equal(mixture.samples, total)
    assert k == 2 and len(offsets) == 2 and offsets[0] == 0.0
    # grid snap means float32 storage is lossless
    for s in sources:
        assert np.array_equal(s.samples.astype(np.float32).astype(np.float64), s.samples)


def test_splits_use_disjoint_streams():
    spec = small_spec()
    train0, _, _, _ = generate_record(spec, 0, 0)
    val0, _, _, _ = generate_record(spec, 1, 0)
    assert not np.array_equal(train0.samples, val0.samples)


def test_build_corpus_round_trip_and_exact_sum(tmp_path):
    spec = small_spec()
    manifests = build_corpus(spec, tmp_path / "corpus")
    assert set(manifests) == {"train", "val", "test"}
    records = load_manifest(manifests["train"])
    assert len(records) == 2
    mixture, sources = (
        __import__("attractorsep.data", fromlist=["load_example"]).load_example(records[0])
    )
    total = np.sum([s.samples for s in sources], axis=0)
    assert np.array_equal(mixture.samples, total)
    assert np.max(np.abs(mixture.samples)) <= 0.91


def test_build_corpus_byte_identical_rebuild(tmp_path):
    spec = small_spec()
    build_corpus(spec, tmp_path / "a")
    build_corpus(spec, tmp_path / "b")
    rel = lambda root: sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())
    a_files, b_files = rel(tmp_path / "a"), rel(tmp_path / "b")
    assert a_files == b_files
    for f in a_files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_manifest_columns_two_speaker(tmp_path):
    manifests = build_corpus(small_spec(), tmp_path / "c")
    header = manifests["train"].read_text().splitlines()[0]
    assert header == "mix,src1,src2,k,snr_db"


def test_manifest_adds_src3_for_three_speaker(tmp_path):
    spec = small_spec(k_set=(2, 3), n_train=4)
    manifests = build_corpus(spec, tmp_path / "c3")
    lines = manifests["train"].read_text().splitlines()
    assert lines[0] == "mix,src1,src2,src3,k,snr_db"
    records = load_manifest(manifests["train"])
    ks = {r.k for r in records}
    assert ks <= {2, 3}
    for r in records:
        assert len(r.source_paths) == r.k
        assert len(r.snr_db) == r.k - 1


def test_corpus_spec_echo(tmp_path):
    spec = small_spec()
    build_corpus(spec, tmp_path / "d")
    echo = json.loads((tmp_path / "d" / "corpus_spec.json").read_text())
    assert echo["seed"] == 11
    assert echo["k_set"] == [2]
    assert echo["source_family"] == "am_noise"


def test_load_manifest_missing_file_rejected(tmp_path):
    manifests = build_corpus(small_spec(), tmp_path / "e")
    victim = next((tmp_path / "e" / "train").glob("s1_*.wav"))
    victim.unlink()
    with pytest.raises(InvalidInputError):
        load_manifest(manifests["train"])


def test_in_memory_matches_disk(tmp_path):
    spec = small_spec()
    build_corpus(spec, tmp_path / "f")
    disk = load_corpus(tmp_path / "f")
    mem = in_memory_corpus(spec)
    assert len(disk.train) == len(mem.train) == 2
    for (dm, ds), (mm, ms) in zip(disk.train, mem.train):
        assert np.array_equal(dm.samples, mm.samples)
        for a, b in zip(ds, ms):
            assert np.array_equal(a.samples, b.samples)


def test_mixture_record_validates_k():
    with pytest.raises(InvalidInputError):
        MixtureRecord(mixture_path="m.wav", source_paths=["a.wav"], k=2, snr_db=[0.0])


def test_spec_rejects_bad_k_set():
    with pytest.raises(InvalidInputError):
        small_spec(k_set=(1,))
    with pytest.raises(InvalidInputError):
        small_spec(k_set=(2, 4))
