"""Synthetic text-dependent corpora in feature space.

Each utterance is a phrase-specific smooth trajectory over normalized time,
plus a constant speaker offset, plus white Gaussian noise. Background
(training) speakers and their pass-phrases are disjoint from the evaluation
ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import Trial, TrialList


class SynthError(ValueError):
    pass


@dataclass
class SyntheticCorpusSpec:
    n_speakers: int = 20
    n_phrases: int = 5
    n_enroll: int = 3
    n_test: int = 2
    n_background_speakers: int = 20
    n_background_phrases: int = 5
    n_background_utts: int = 3
    min_frames: int = 80
    max_frames: int = 120
    dim: int = 57
    speaker_scale: float = 0.6
    phrase_scale: float = 1.0
    noise_scale: float = 1.0
    n_harmonics: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("n_speakers", "n_phrases", "n_enroll", "n_test", "min_frames", "dim"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be >= 1")
        if self.max_frames < self.min_frames:
            raise SynthError("max_frames < min_frames")
        if min(self.speaker_scale, self.phrase_scale, self.noise_scale) < 0:
            raise SynthError("scales must be non-negative")


@dataclass
class Corpus:
    background: dict  # utt -> (T, D)
    background_info: dict  # utt -> (speaker, phrase)
    evaluation: dict  # utt -> (T, D)
    evaluation_info: dict
    enroll: dict  # model id -> list of evaluation utts
    model_info: dict  # model id -> (speaker, phrase)
    trials: TrialList = field(default_factory=TrialList)


def trial_type(model_spk, model_phrase, spk, phrase) -> str:
    if model_spk == spk:
        return "genuine" if model_phrase == phrase else "target-wrong"
    return "impostor-correct" if model_phrase == phrase else "impostor-wrong"


def expected_trial_counts(spec: SyntheticCorpusSpec) -> dict:
    S, P, n = spec.n_speakers, spec.n_phrases, spec.n_test
    return {
        "genuine": S * P * n,
        "target-wrong": S * P * (P - 1) * n,
        "impostor-correct": S * P * (S - 1) * n,
        "impostor-wrong": S * P * (S - 1) * (P - 1) * n,
    }


class _Generator:
    def __init__(self, spec: SyntheticCorpusSpec):
        self.spec = spec
        root = np.random.SeedSequence(spec.seed)
        phrase_ss, spk_ss, self.utt_ss = root.spawn(3)
        prng = np.random.default_rng(phrase_ss)
        K, D = spec.n_harmonics, spec.dim
        n_phr = spec.n_phrases + spec.n_background_phrases
        self.amp = prng.standard_normal((n_phr, K, D)) * spec.phrase_scale
        self.phase = prng.uniform(0, 2 * np.pi, (n_phr, K, D))
        n_spk = spec.n_speakers + spec.n_background_speakers
        self.offsets = np.random.default_rng(spk_ss).standard_normal((n_spk, D)) * spec.speaker_scale
        self.rng = np.random.default_rng(self.utt_ss)

    def utterance(self, spk: int, phrase: int) -> np.ndarray:
        s = self.spec
        T = int(self.rng.integers(s.min_frames, s.max_frames + 1))
        tau = (np.arange(T) + 0.5) / T
        k = np.arange(1, s.n_harmonics + 1)
        arg = 2 * np.pi * k[None, :, None] * tau[:, None, None] / 2 + self.phase[phrase][None]
        traj = np.sum(self.amp[phrase][None] * np.sin(arg), axis=1)
        noise = self.rng.standard_normal((T, s.dim)) * s.noise_scale
        return traj + self.offsets[spk] + noise


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, all_types: bool = True) -> Corpus:
    if all_types and (spec.n_speakers < 2 or spec.n_phrases < 2):
        raise SynthError("all four trial types need at least 2 speakers and 2 phrases")
    gen = _Generator(spec)
    background, bg_info = {}, {}
    for b in range(spec.n_background_speakers):
        spk_index = spec.n_speakers + b
        for q in range(spec.n_background_phrases):
            for u in range(spec.n_background_utts):
                utt = f"bg{b:03d}-q{q:02d}-u{u:02d}"
                background[utt] = gen.utterance(spk_index, spec.n_phrases + q)
                bg_info[utt] = (f"bg{b:03d}", f"q{q:02d}")

    evaluation, eval_info, enroll, model_info = {}, {}, {}, {}
    tests = []
    for s in range(spec.n_speakers):
        for p in range(spec.n_phrases):
            model = f"spk{s:03d}-p{p:02d}"
            enroll[model] = []
            model_info[model] = (f"spk{s:03d}", f"p{p:02d}")
            for u in range(spec.n_enroll):
                utt = f"spk{s:03d}-p{p:02d}-e{u:02d}"
                evaluation[utt] = gen.utterance(s, p)
                eval_info[utt] = model_info[model]
                enroll[model].append(utt)
            for u in range(spec.n_test):
                utt = f"spk{s:03d}-p{p:02d}-t{u:02d}"
                evaluation[utt] = gen.utterance(s, p)
                eval_info[utt] = model_info[model]
                tests.append(utt)

    trials = [Trial(model, utt, trial_type(*model_info[model], *eval_info[utt]))
              for model in enroll for utt in tests]
    return Corpus(background, bg_info, evaluation, eval_info, enroll, model_info,
                  TrialList(trials))
