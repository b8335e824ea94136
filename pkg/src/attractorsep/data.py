"""Synthetic mixture corpus: source families, SNR mixing, manifests.

Sources are synthetic "speakers": each identity occupies a frequency slot
(band) so mixtures overlap in time but separate in the T-F plane. Mixtures
are exact sample-wise sums of the stored sources; all samples are snapped
to a 2^-20 grid before writing so the identity survives float32 WAV
storage bit-for-bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import Waveform, read_wav, write_wav
from .errors import DegenerateInputError, InvalidInputError

FAMILIES = ("am_noise", "harmonic", "chirp")

# Frequency slots acting as speaker identities (Hz, within an 8 kHz band).
SLOT_BANDS = ((250.0, 1000.0), (1250.0, 2200.0), (2500.0, 3600.0))

# Sample grid: multiples of 2^-20 are exact in float32 for |x| < 8, so a
# mixture of up to three 0.9-peak sources round-trips WAV storage exactly.
_GRID = 2.0**20

_MIX_PEAK = 0.9


@dataclass
class MixtureRecord:
    """One manifest row."""

    mixture_path: str
    source_paths: list
    k: int
    snr_db: list

    def __post_init__(self):
        if self.k != len(self.source_paths):
            raise InvalidInputError("k must match the source path count")


@dataclass
class CorpusSpec:
    """Shape of a generated corpus.

    Attributes:
        n_train/n_val/n_test: mixtures per split.
        k_set: source counts to draw from, e.g. (2,) or (2, 3).
        duration_s: seconds per utterance.
        sample_rate: Hz.
        source_family: one of FAMILIES.
        seed: master seed; splits use disjoint seed streams derived from it.
    """

    n_train: int
    n_val: int
    n_test: int
    k_set: tuple = (2,)
    duration_s: float = 1.0
    sample_rate: int = 8000
    source_family: str = "am_noise"
    seed: int = 0

    def __post_init__(self):
        self.k_set = tuple(sorted(set(int(k) for k in self.k_set)))
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InvalidInputError("split sizes must be positive")
        if not self.k_set or self.k_set[0] < 2:
            raise InvalidInputError("k_set must contain counts >= 2")
        if self.k_set[-1] > len(SLOT_BANDS):
            raise InvalidInputError(
                f"at most {len(SLOT_BANDS)} concurrent sources supported"
            )
        if self.source_family not in FAMILIES:
            raise InvalidInputError(f"source_family must be one of {FAMILIES}")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise InvalidInputError("duration and sample rate must be positive")


def _slot_band(params: dict) -> tuple:
    if "band" in params:
        lo, hi = params["band"]
        return float(lo), float(hi)
    return SLOT_BANDS[int(params.get("slot", 0))]


def _bandlimit(x: np.ndarray, rate: int, lo: float, hi: float) -> np.ndarray:
    """Brickwall bandpass via the real FFT."""
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n=len(x))


def synthesize_source(
    family: str, params: dict, duration: float, rate: int, seed: int
) -> Waveform:
    """Deterministic synthetic source of one family.

    Families (band taken from params["slot"] or params["band"]):
      am_noise: band-limited white noise with a slow amplitude modulation.
      harmonic: tone stack on a vibrato fundamental, harmonics shaped 1/n.
      chirp:    triangle-swept tone covering the band.

    Args:
        family: one of FAMILIES.
        params: slot/band selection.
        duration: seconds.
        rate: sample rate in Hz.
        seed: drives all random choices; same seed, same samples.
    """
    if family not in FAMILIES:
        raise InvalidInputError(f"unknown source family {family!r}")
    rng = np.random.default_rng(seed)
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    lo, hi = _slot_band(params)

    if family == "am_noise":
        x = _bandlimit(rng.standard_normal(n), rate, lo, hi)
        f_am = rng.uniform(1.5, 4.0)
        x *= 0.6 + 0.4 * np.sin(2 * np.pi * f_am * t + rng.uniform(0, 2 * np.pi))
    elif family == "harmonic":
        # keep the vibrato excursion and all harmonics inside the band
        f0 = rng.uniform(lo * 1.05, min(hi * 0.95, lo * 2.0))
        vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(4.0, 6.0) * t)
        inst = f0 * vib
        phase0 = 2 * np.pi * np.cumsum(inst) / rate
        x = np.zeros(n)
        h = 1
        while h * f0 * 1.02 < hi * 0.95:
            x += np.sin(h * phase0 + rng.uniform(0, 2 * np.pi)) / h
            h += 1
    else:  # chirp
        margin = 0.05 * (hi - lo)
        f_lo, f_hi = lo + margin, hi - margin
        sweep_hz = rng.uniform(1.0, 2.5)
        tri = 2.0 * np.abs(sweep_hz * t + rng.uniform(0, 1) - np.floor(sweep_hz * t + 0.5 + rng.uniform(0, 1)))
        inst = f_lo + (f_hi - f_lo) * np.clip(tri, 0.0, 1.0)
        x = np.sin(2 * np.pi * np.cumsum(inst) / rate + rng.uniform(0, 2 * np.pi))

    rms = np.sqrt(np.mean(x * x))
    if rms <= 0:
        raise DegenerateInputError("synthesized source is silent")
    return Waveform(samples=x / rms, sample_rate=rate)


def mix(sources: list, snr_db_offsets: list):
    """Gain-scale sources to the given SNR offsets and sum them.

    Offsets are per-source RMS levels in dB relative to source 0 (whose
    offset must be 0). After scaling, the mixture peak is normalized to
    0.9 with the same gain applied to every source, so the returned
    mixture is exactly the sample-wise sum of the returned sources.

    Args:
        sources: equal-length waveforms.
        snr_db_offsets: one dB offset per source, first entry 0.

    Returns:
        (mixture_waveform, scaled_source_waveforms)
    """
    if len(sources) != len(snr_db_offsets):
        raise InvalidInputError("need one SNR offset per source")
    if snr_db_offsets[0] != 0:
        raise InvalidInputError("first source is the 0 dB reference")
    n = len(sources[0].samples)
    rate = sources[0].sample_rate
    for s in sources:
        if len(s.samples) != n or s.sample_rate != rate:
            raise InvalidInputError("sources must share length and sample rate")
    scaled = []
    for s, off in zip(sources, snr_db_offsets):
        rms = np.sqrt(np.mean(s.samples**2))
        if rms <= 0:
            raise DegenerateInputError("cannot mix a silent source")
        scaled.append(s.samples / rms * 10.0 ** (off / 20.0))
    raw = np.sum(scaled, axis=0)
    peak = np.max(np.abs(raw))
    if peak <= 0:
        raise DegenerateInputError("mixture cancels to silence")
    gain = _MIX_PEAK / peak
    out_sources = [Waveform(samples=g * gain, sample_rate=rate) for g in scaled]
    mixture = Waveform(
        samples=np.sum([w.samples for w in out_sources], axis=0), sample_rate=rate
    )
    return mixture, out_sources


def _quantize(w: Waveform) -> Waveform:
    return Waveform(samples=np.round(w.samples * _GRID) / _GRID, sample_rate=w.sample_rate)


def generate_record(spec: CorpusSpec, split_index: int, index: int):
    """Mixture and sources for one corpus record, deterministic in
    (spec.seed, split_index, index).

    Returns:
        (mixture, sources, k, offsets) with every waveform on the storage
        grid, so mixture == sum(sources) exactly even after float32 WAVs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split_index, index]))
    k = int(rng.choice(spec.k_set))
    slots = rng.permutation(len(SLOT_BANDS))[:k]
    offsets = [0.0] + [float(rng.uniform(-5.0, 5.0)) for _ in range(k - 1)]
    sources = [
        synthesize_source(
            spec.source_family,
            {"slot": int(slot)},
            spec.duration_s,
            spec.sample_rate,
            seed=int(rng.integers(2**63)),
        )
        for slot in slots
    ]
    _, scaled = mix(sources, offsets)
    snapped = [_quantize(s) for s in scaled]
    mixture = Waveform(
        samples=np.sum([s.samples for s in snapped], axis=0),
        sample_rate=spec.sample_rate,
    )
    return mixture, snapped, k, offsets


def generate_split(spec: CorpusSpec, split: str) -> list:
    """All records of one split as in-memory (mixture, sources) pairs."""
    split_index, count = _split_plan(spec)[split]
    return [generate_record(spec, split_index, i)[:2] for i in range(count)]


def _split_plan(spec: CorpusSpec) -> dict:
    return {
        "train": (0, spec.n_train),
        "val": (1, spec.n_val),
        "test": (2, spec.n_test),
    }


def build_corpus(spec: CorpusSpec, out_dir) -> dict:
    """Write WAVs and manifest CSVs for all three splits.

    Layout: <out_dir>/<split>/mix_0000.wav plus s1_0000.wav... per record,
    one manifest CSV per split, and a corpus_spec.json echo.

    Returns:
        dict split -> manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    max_k = spec.k_set[-1]
    manifests = {}
    for split, (split_index, count) in _split_plan(spec).items():
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        rows = []
        for i in range(count):
            mixture, sources, k, offsets = generate_record(spec, split_index, i)
            mix_path = split_dir / f"mix_{i:04d}.wav"
            write_wav(mix_path, mixture, fmt="float32")
            src_paths = []
            for j, s in enumerate(sources, start=1):
                p = split_dir / f"s{j}_{i:04d}.wav"
                write_wav(p, s, fmt="float32")
                src_paths.append(p)
            rows.append((mix_path, src_paths, k, offsets))
        manifest = out_dir / f"{split}.csv"
        _write_manifest(manifest, rows, max_k, out_dir)
        manifests[split] = manifest
    (out_dir / "corpus_spec.json").write_text(
        json.dumps(
            {
                "n_train": spec.n_train,
                "n_val": spec.n_val,
                "n_test": spec.n_test,
                "k_set": list(spec.k_set),
                "duration_s": spec.duration_s,
                "sample_rate": spec.sample_rate,
                "source_family": spec.source_family,
                "seed": spec.seed,
            },
            indent=2,
        )
        + "\n"
    )
    return manifests


def _write_manifest(path: Path, rows, max_k: int, base: Path) -> None:
    src_cols = [f"src{j}" for j in range(1, max_k + 1)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mix"] + src_cols + ["k", "snr_db"])
        for mix_path, src_paths, k, offsets in rows:
            srcs = [str(p.relative_to(base)) for p in src_paths]
            srcs += [""] * (max_k - len(srcs))
            snr = ";".join(f"{o:.4f}" for o in offsets[1:])
            writer.writerow([str(mix_path.relative_to(base))] + srcs + [k, snr])


def load_manifest(path) -> list:
    """Parse a manifest CSV into MixtureRecords with validated paths."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            srcs = [
                str(base / row[c])
                for c in reader.fieldnames
                if c.startswith("src") and row[c]
            ]
            rec = MixtureRecord(
                mixture_path=str(base / row["mix"]),
                source_paths=srcs,
                k=int(row["k"]),
                snr_db=[float(x) for x in row["snr_db"].split(";") if x],
            )
            for p in [rec.mixture_path] + rec.source_paths:
                if not Path(p).exists():
                    raise InvalidInputError(f"manifest references missing file {p}")
            records.append(rec)
    return records


def load_example(record: MixtureRecord):
    """Waveforms for one manifest row."""
    return read_wav(record.mixture_path), [read_wav(p) for p in record.source_paths]


@dataclass
class SeparationDataset:
    """In-memory corpus: lists of (mixture, sources) pairs per split."""

    train: list
    val: list
    test: list


def load_corpus(corpus_dir) -> SeparationDataset:
    """Load a directory produced by build_corpus into memory."""
    corpus_dir = Path(corpus_dir)
    splits = {}
    for split in ("train", "val", "test"):
        records = load_manifest(corpus_dir / f"{split}.csv")
        splits[split] = [load_example(r) for r in records]
    return SeparationDataset(**splits)


def in_memory_corpus(spec: CorpusSpec) -> SeparationDataset:
    """Generate a corpus without touching disk (identical samples to
    build_corpus output)."""
    return SeparationDataset(
        train=generate_split(spec, "train"),
        val=generate_split(spec, "val"),
        test=generate_split(spec, "test"),
    )
