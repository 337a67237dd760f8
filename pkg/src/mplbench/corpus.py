"""Deterministic synthetic corpus with factorized content and speaker
structure.

Each content unit c owns a unit-norm embedding e_c; each speaker s owns a
transform A_s = I + speaker_strength * G_s (G_s standard normal scaled by
1/sqrt(F)) and a bias b_s = speaker_strength * normal vector. A frame of
unit c spoken by s is A_s @ e_c + b_s + noise. Utterances are sequences of
units with uniform random durations; content labels are constant within a
unit span. Every speaker and every content unit appears in every split.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .container import read_container, write_container

MAGIC = b"MPLD"
VERSION = 1

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class CorpusSpec:
    num_speakers: int = 8
    num_content_units: int = 10
    feature_dim: int = 24
    units_per_utterance: tuple = (4, 8)
    frames_per_unit: tuple = (3, 6)
    speaker_strength: float = 0.3
    noise_sigma: float = 0.2
    num_utterances: tuple = (600, 100, 100)  # train/dev/test
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 2 or self.num_content_units < 2:
            raise ValueError("need at least 2 speakers and 2 content units")
        for lo, hi in (self.units_per_utterance, self.frames_per_unit):
            if not (0 < lo <= hi):
                raise ValueError("ranges must be nonempty with positive lower bounds")
        if self.speaker_strength < 0 or self.noise_sigma < 0:
            raise ValueError("strengths must be nonnegative")

    def max_frames(self) -> int:
        return self.units_per_utterance[1] * self.frames_per_unit[1]


@dataclass
class Utterance:
    utterance_id: str
    features: np.ndarray  # T x F
    content_labels: np.ndarray  # T ints
    speaker_id: int

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class GeneratorParams:
    content_embeddings: np.ndarray  # C x F, unit rows
    speaker_transforms: np.ndarray  # S x F x F
    speaker_biases: np.ndarray  # S x F


@dataclass
class Corpus:
    spec: CorpusSpec
    splits: dict  # name -> list[Utterance]
    generator: GeneratorParams | None = None


def generate_corpus(spec: CorpusSpec) -> Corpus:
    s, c, f = spec.num_speakers, spec.num_content_units, spec.feature_dim
    for split, n in zip(SPLITS, spec.num_utterances):
        if n < s:
            raise ValueError(
                f"split {split!r} has {n} utterances but {s} speakers: coverage impossible"
            )
    rng = np.random.default_rng(spec.seed)

    e = rng.normal(size=(c, f))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    g = rng.normal(size=(s, f, f)) / np.sqrt(f)
    transforms = np.eye(f)[None] + spec.speaker_strength * g
    biases = spec.speaker_strength * rng.normal(size=(s, f))

    u_lo, u_hi = spec.units_per_utterance
    d_lo, d_hi = spec.frames_per_unit

    splits = {}
    for split, n in zip(SPLITS, spec.num_utterances):
        speakers = rng.permutation(np.arange(n) % s)
        unit_seqs = [rng.integers(0, c, size=rng.integers(u_lo, u_hi + 1)) for _ in range(n)]
        # patch sequences so every content unit appears in the split
        present = set(np.concatenate(unit_seqs).tolist())
        for k, missing in enumerate(sorted(set(range(c)) - present)):
            seq = unit_seqs[k % n]
            seq[k % len(seq)] = missing
        utts = []
        for i in range(n):
            sp = int(speakers[i])
            feats, labels = [], []
            for unit in unit_seqs[i]:
                dur = int(rng.integers(d_lo, d_hi + 1))
                base = transforms[sp] @ e[unit] + biases[sp]
                noise = spec.noise_sigma * rng.normal(size=(dur, f))
                feats.append(base[None, :] + noise)
                labels.extend([int(unit)] * dur)
            utts.append(Utterance(
                utterance_id=f"{split}-{i:05d}",
                features=np.concatenate(feats, axis=0),
                content_labels=np.asarray(labels, dtype=np.int64),
                speaker_id=sp,
            ))
        splits[split] = utts
    return Corpus(spec=spec, splits=splits,
                  generator=GeneratorParams(e, transforms, biases))


def corpus_stats(corpus: Corpus) -> dict:
    if not any(corpus.splits.values()):
        raise ValueError("corpus is empty")
    stats = {}
    for split, utts in corpus.splits.items():
        total = sum(u.num_frames for u in utts)
        label_hist = np.zeros(corpus.spec.num_content_units, dtype=np.int64)
        speaker_counts = np.zeros(corpus.spec.num_speakers, dtype=np.int64)
        for u in utts:
            np.add.at(label_hist, u.content_labels, 1)
            speaker_counts[u.speaker_id] += 1
        stats[split] = {
            "num_utterances": len(utts),
            "total_frames": total,
            "label_histogram": label_hist.tolist(),
            "speaker_utterance_counts": speaker_counts.tolist(),
        }
    return stats


def save_corpus(corpus: Corpus, path):
    spec_d = asdict(corpus.spec)
    index = {
        split: [
            {"id": u.utterance_id, "speaker": u.speaker_id, "frames": u.num_frames}
            for u in utts
        ]
        for split, utts in corpus.splits.items()
    }
    blocks = {}
    for utts in corpus.splits.values():
        for u in utts:
            blocks[f"feat_{u.utterance_id}"] = np.ascontiguousarray(
                u.features, dtype="<f8").tobytes()
            blocks[f"lab_{u.utterance_id}"] = np.ascontiguousarray(
                u.content_labels, dtype="<u4").tobytes()
    write_container(path, MAGIC, VERSION, {"spec": spec_d, "index": index}, blocks)


def load_corpus(path) -> Corpus:
    manifest, blocks = read_container(path, MAGIC, VERSION)
    sd = manifest["spec"]
    spec = CorpusSpec(
        num_speakers=sd["num_speakers"],
        num_content_units=sd["num_content_units"],
        feature_dim=sd["feature_dim"],
        units_per_utterance=tuple(sd["units_per_utterance"]),
        frames_per_unit=tuple(sd["frames_per_unit"]),
        speaker_strength=sd["speaker_strength"],
        noise_sigma=sd["noise_sigma"],
        num_utterances=tuple(sd["num_utterances"]),
        seed=sd["seed"],
    )
    f = spec.feature_dim
    splits = {}
    for split, rows in manifest["index"].items():
        utts = []
        for r in rows:
            feats = np.frombuffer(blocks[f"feat_{r['id']}"], dtype="<f8") \
                .reshape(r["frames"], f).copy()
            labels = np.frombuffer(blocks[f"lab_{r['id']}"], dtype="<u4") \
                .astype(np.int64)
            utts.append(Utterance(utterance_id=r["id"], features=feats,
                                  content_labels=labels, speaker_id=r["speaker"]))
        splits[split] = utts
    return Corpus(spec=spec, splits=splits, generator=None)
