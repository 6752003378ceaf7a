import dataclasses
from collections import Counter

import numpy as np
import pytest

from radarasr.corpus import (CorpusSpec, ToyVocabulary, build_corpus, generate_utterance, lowpass,
                             read_corpus, sample_transcripts, write_corpus)
from radarasr.errors import UnknownToken
from radarasr.radarsim import cross_correlation_peak

SMALL = CorpusSpec(utterance_count=20)


def test_vocabulary_ids():
    v = ToyVocabulary()
    assert v.size == 17 and v.blank == 0 and v.sos == v.eos == 18
    ids = v.encode("ab p")
    assert ids == [1, 2, 17, 16] and v.decode(ids) == "ab p"
    with pytest.raises(UnknownToken):
        v.encode("z")


def test_signatures_distinct_and_in_band():
    sig = CorpusSpec().token_signatures
    assert len({tuple(r) for r in sig}) == len(sig)
    assert np.all(sig >= 200) and np.all(sig <= 4000)
    assert np.all(sig[:, 0] < 1500) and np.all(sig[:, 1] > 1500)


def test_generate_is_deterministic():
    a = generate_utterance(SMALL, [3, 1, 4], seed=11)
    b = generate_utterance(SMALL, [3, 1, 4], seed=11)
    assert a.audio.samples.tobytes() == b.audio.samples.tobytes()
    assert a.radio.samples.tobytes() == b.radio.samples.tobytes()


def test_single_token_duration():
    u = generate_utterance(SMALL, [5], seed=0)
    assert len(u.audio.samples) == int(round((0.060 + 2 * 0.020) * 16000))
    assert abs(len(u.radio.samples) - len(u.audio.samples)) <= 160


def test_unknown_token():
    with pytest.raises(UnknownToken):
        generate_utterance(SMALL, [99], seed=0)


def _band_energy(x, lo):
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1 / 16000)
    return power[freqs >= lo].sum()


def test_radio_high_band_attenuated():
    # receiver noise is broadband by design, so the band check uses the noiseless channel
    spec = dataclasses.replace(SMALL, radio_snr_db=np.inf)
    for seed, ids in enumerate(([1, 2, 3], [4, 5, 6, 7], [17, 8])):
        u = generate_utterance(spec, ids, seed)
        ratio_db = 10 * np.log10(_band_energy(u.audio.samples, 1500) / _band_energy(u.radio.samples, 1500))
        assert ratio_db >= 40


def test_noiseless_radio_aligned_with_lowpassed_audio():
    spec = dataclasses.replace(SMALL, radio_snr_db=np.inf)
    u = generate_utterance(spec, [2, 9, 14, 6], seed=3)
    assert cross_correlation_peak(lowpass(spec, u.audio.samples), u.radio.samples) == 0


def test_build_corpus_split_and_determinism(tmp_path):
    c1 = build_corpus(SMALL)
    c2 = build_corpus(SMALL)
    assert len(c1.train) == 18 and len(c1.test) == 2
    for u, v in zip(c1.train + c1.test, c2.train + c2.test):
        assert u.token_ids == v.token_ids
        assert u.radio.samples.tobytes() == v.radio.samples.tobytes()
    write_corpus(c1, tmp_path)
    back = read_corpus(tmp_path, SMALL)
    assert [u.token_ids for u in back.train] == [u.token_ids for u in c1.train]
    assert back.test[0].audio.samples.tobytes() == c1.test[0].audio.samples.tobytes()
    first = (tmp_path / "manifest.tsv").read_text().splitlines()[0].split("\t")
    assert first[0] == "utt00000" and first[1] == "train" and first[3].endswith(".audio.bin")


def test_split_counts_for_100():
    spec = CorpusSpec(utterance_count=100)
    n = len(sample_transcripts(spec))
    assert n == 100 and int(round(0.9 * n)) == 90


def test_token_histogram_uniform():
    spec = CorpusSpec(utterance_count=10_000)
    counts = Counter(t for ids in sample_transcripts(spec) for t in ids)
    total = sum(counts.values())
    p = 1 / spec.vocabulary.size
    sigma = np.sqrt(total * p * (1 - p))
    assert set(counts) == set(range(1, spec.vocabulary.size + 1))
    assert all(abs(c - total * p) < 3 * sigma for c in counts.values())


def test_default_train_split_covers_vocabulary():
    spec = CorpusSpec()
    train = sample_transcripts(spec)[: int(round(0.9 * spec.utterance_count))]
    assert {t for ids in train for t in ids} == set(range(1, spec.vocabulary.size + 1))
