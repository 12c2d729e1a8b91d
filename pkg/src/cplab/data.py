"""Synthetic CTC-realizable corpus with labeled / unlabeled / dev / test splits.

Every token id owns a fixed unit prototype vector. An utterance renders
its transcript token by token, repeating the prototype for a random number
of frames, pads both ends with a few noise-only (blank) frames and adds
Gaussian noise everywhere. Adjacent tokens in a transcript are always
distinct, so collapsing the frame-level token sequence recovers the
transcript exactly.

On-disk layout (version 1)
--------------------------
``manifest.json``
    ``{"format": "cplab-corpus", "version": 1, "config": {...},
    "prototypes": [[...], ...], "feature_file": "features.bin",
    "utterances": [{"id", "split", "n_frames", "offset", "golden",
    "durations", "silence"}, ...]}``
    ``offset`` counts rows (frames) into the feature matrix; ``silence`` is
    the ``[leading, trailing]`` blank frame count.
``features.bin``
    8-byte magic ``b"CPLFEAT\\0"``, then little-endian ``uint32`` version,
    ``uint32`` feat_dim, ``uint64`` total row count, followed by all frames
    as little-endian float64, row-major.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

SPLITS = ("labeled", "unlabeled", "dev", "test")
FORMAT_VERSION = 1
_MAGIC = b"CPLFEAT\0"
_HEADER = struct.Struct("<8sIIQ")


@dataclass
class CorpusConfig:
    vocab_tokens: int = 8
    feat_dim: int = 16
    prototype_seed: int = 0
    max_prototype_dot: float = 0.4
    d_min: int = 4
    d_max: int = 7
    noise_sigma: float = 0.32
    len_min: int = 4
    len_max: int = 8
    # noise-only margins before and after the tokens, labeled blank
    silence_min: int = 2
    silence_max: int = 4
    min_frames: int = 16
    max_frames: int = 64
    n_labeled: int = 24
    n_unlabeled: int = 216
    n_dev: int = 64
    n_test: int = 64
    corpus_seed: int = 1
    word_boundary: int = 0
    # domain shift for the unlabeled split, off when None
    unlabeled_noise_sigma: float | None = None
    unlabeled_d_range: tuple[int, int] | None = None

    def validate(self) -> None:
        if self.vocab_tokens < 2:
            raise ValueError("vocab_tokens must be >= 2 (adjacent tokens must differ)")
        if self.feat_dim < 1:
            raise ValueError("feat_dim must be >= 1")
        if self.d_min < 1 or self.d_max < self.d_min:
            raise ValueError(f"need 1 <= d_min <= d_max, got [{self.d_min}, {self.d_max}]")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.unlabeled_noise_sigma is not None and self.unlabeled_noise_sigma < 0:
            raise ValueError("unlabeled_noise_sigma must be >= 0")
        if self.silence_min < 0 or self.silence_max < self.silence_min:
            raise ValueError("need 0 <= silence_min <= silence_max")
        if self.len_min < 1 or self.len_max < self.len_min:
            raise ValueError(f"need 1 <= len_min <= len_max, got [{self.len_min}, {self.len_max}]")
        for name in ("n_labeled", "n_unlabeled", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.word_boundary < self.vocab_tokens:
            raise ValueError("word_boundary must be a token id")
        if not 0 < self.max_prototype_dot <= 1:
            raise ValueError("max_prototype_dot must be in (0, 1]")
        for lo, hi in [(self.d_min, self.d_max)] + (
            [tuple(self.unlabeled_d_range)] if self.unlabeled_d_range else []
        ):
            shortest = self.len_max * lo + 2 * self.silence_min
            longest = self.len_min * hi + 2 * self.silence_max
            if shortest > self.max_frames:
                raise ValueError(
                    f"longest transcript needs at least {shortest} frames, "
                    f"exceeding max_frames = {self.max_frames}"
                )
            if longest < self.min_frames:
                raise ValueError(
                    f"shortest transcript renders at most {longest} frames, "
                    f"below min_frames = {self.min_frames}"
                )


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    golden: list[int]
    split: str
    durations: list[int] = field(default_factory=list, repr=False)
    silence: tuple[int, int] = (0, 0)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def frame_labels(self, blank: int = -1) -> np.ndarray:
        """True per-frame labels, ``blank`` on the silent margins."""
        lead, trail = self.silence
        body = np.repeat(np.asarray(self.golden, dtype=np.int64), self.durations)
        return np.concatenate([np.full(lead, blank), body, np.full(trail, blank)]).astype(np.int64)


@dataclass
class Corpus:
    config: CorpusConfig
    prototypes: np.ndarray
    utterances: list[Utterance]

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [u for u in self.utterances if u.split == name]

    def features(self, name: str) -> dict[str, np.ndarray]:
        return {u.id: u.features for u in self.split(name)}

    def transcripts(self, name: str) -> dict[str, list[int]]:
        """Golden transcripts; for ``unlabeled`` these are oracle-only."""
        return {u.id: list(u.golden) for u in self.split(name)}

    @property
    def vocab_size(self) -> int:
        """Output classes including the trailing blank."""
        return self.config.vocab_tokens + 1

    @property
    def blank(self) -> int:
        return self.config.vocab_tokens

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        if self.config != other.config or not np.array_equal(self.prototypes, other.prototypes):
            return False
        if len(self.utterances) != len(other.utterances):
            return False
        return all(
            a.id == b.id
            and a.split == b.split
            and a.golden == b.golden
            and np.array_equal(a.features, b.features)
            for a, b in zip(self.utterances, other.utterances)
        )


def draw_prototypes(cfg: CorpusConfig, max_tries: int = 10_000) -> np.ndarray:
    """Random unit vectors whose pairwise |dot| stays below the configured bound."""
    rng = np.random.default_rng(cfg.prototype_seed)
    for _ in range(max_tries):
        p = rng.normal(size=(cfg.vocab_tokens, cfg.feat_dim))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        dots = np.abs(p @ p.T)
        np.fill_diagonal(dots, 0.0)
        if dots.max() < cfg.max_prototype_dot:
            return p
    raise ValueError(
        f"could not draw {cfg.vocab_tokens} prototypes in R^{cfg.feat_dim} "
        f"with |dot| < {cfg.max_prototype_dot}"
    )


def _sample_transcript(rng: np.random.Generator, cfg: CorpusConfig) -> list[int]:
    n = int(rng.integers(cfg.len_min, cfg.len_max + 1))
    out = [int(rng.integers(cfg.vocab_tokens))]
    for _ in range(n - 1):
        # uniform over the tokens that differ from the previous one
        tok = int(rng.integers(cfg.vocab_tokens - 1))
        out.append(tok + (tok >= out[-1]))
    return out


def _sample_durations(
    rng: np.random.Generator, n: int, lo: int, hi: int, cfg: CorpusConfig
) -> tuple[list[int], tuple[int, int]]:
    while True:
        d = rng.integers(lo, hi + 1, size=n)
        sil = rng.integers(cfg.silence_min, cfg.silence_max + 1, size=2)
        if cfg.min_frames <= d.sum() + sil.sum() <= cfg.max_frames:
            return [int(x) for x in d], (int(sil[0]), int(sil[1]))


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    cfg.validate()
    protos = draw_prototypes(cfg)
    rng = np.random.default_rng(cfg.corpus_seed)
    utts = []
    prefix = {"labeled": "L", "unlabeled": "U", "dev": "D", "test": "T"}
    for split in SPLITS:
        n = getattr(cfg, f"n_{split}")
        sigma = cfg.noise_sigma
        lo, hi = cfg.d_min, cfg.d_max
        if split == "unlabeled":
            if cfg.unlabeled_noise_sigma is not None:
                sigma = cfg.unlabeled_noise_sigma
            if cfg.unlabeled_d_range is not None:
                lo, hi = cfg.unlabeled_d_range
        for i in range(n):
            golden = _sample_transcript(rng, cfg)
            durs, sil = _sample_durations(rng, len(golden), lo, hi, cfg)
            clean = np.concatenate([
                np.zeros((sil[0], cfg.feat_dim)),
                np.repeat(protos[golden], durs, axis=0),
                np.zeros((sil[1], cfg.feat_dim)),
            ])
            feats = clean + sigma * rng.normal(size=clean.shape)
            utts.append(Utterance(f"{prefix[split]}{i:05d}", feats, golden, split, durs, sil))
    return Corpus(cfg, protos, utts)


def nearest_prototype_accuracy(corpus: Corpus, split: str = "dev") -> float:
    """Per-frame accuracy of the nearest-prototype classifier on token frames of ``split``."""
    hits = total = 0
    for u in corpus.split(split):
        lead, trail = u.silence
        x = u.features[lead : u.n_frames - trail]
        d2 = ((x[:, None, :] - corpus.prototypes[None]) ** 2).sum(-1)
        hits += int((d2.argmin(1) == u.frame_labels()[lead : u.n_frames - trail]).sum())
        total += x.shape[0]
    return hits / total


class Batcher:
    """Infinite, seed-deterministic stream of utterance-id batches.

    Static mode yields ``batch_size`` ids per batch (the last batch of a pass
    may be smaller). Dynamic mode packs utterances greedily, in shuffled
    order, while the total frame count stays within ``max_frames``.
    """

    def __init__(
        self,
        lengths: dict[str, int],
        rng: np.random.Generator,
        batch_size: int | None = 8,
        max_frames: int | None = None,
    ):
        if not lengths:
            raise ValueError("cannot batch an empty split")
        if (batch_size is None) == (max_frames is None):
            raise ValueError("give exactly one of batch_size or max_frames")
        if batch_size is not None and batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if max_frames is not None and max(lengths.values()) > max_frames:
            raise ValueError("an utterance is longer than max_frames")
        self.ids = sorted(lengths)
        self.lengths = lengths
        self.rng = rng
        self.batch_size = batch_size
        self.max_frames = max_frames

    def epoch(self) -> list[list[str]]:
        order = [self.ids[i] for i in self.rng.permutation(len(self.ids))]
        if self.batch_size is not None:
            bs = self.batch_size
            return [order[i : i + bs] for i in range(0, len(order), bs)]
        batches, cur, used = [], [], 0
        for uid in order:
            n = self.lengths[uid]
            if cur and used + n > self.max_frames:
                batches.append(cur)
                cur, used = [], 0
            cur.append(uid)
            used += n
        if cur:
            batches.append(cur)
        return batches

    def __iter__(self) -> Iterator[list[str]]:
        while True:
            yield from self.epoch()


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sum(u.n_frames for u in corpus.utterances)
    entries, offset = [], 0
    with open(out / "features.bin", "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, FORMAT_VERSION, corpus.config.feat_dim, rows))
        for u in corpus.utterances:
            fh.write(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
            entries.append(
                {
                    "id": u.id,
                    "split": u.split,
                    "n_frames": u.n_frames,
                    "offset": offset,
                    "golden": u.golden,
                    "durations": u.durations,
                    "silence": list(u.silence),
                }
            )
            offset += u.n_frames
    manifest = {
        "format": "cplab-corpus",
        "version": FORMAT_VERSION,
        "config": dataclasses.asdict(corpus.config),
        "prototypes": corpus.prototypes.tolist(),
        "feature_file": "features.bin",
        "utterances": entries,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "cplab-corpus":
        raise ValueError(f"{path} is not a cplab corpus")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported corpus version {manifest.get('version')}")
    raw_cfg = dict(manifest["config"])
    if raw_cfg.get("unlabeled_d_range") is not None:
        raw_cfg["unlabeled_d_range"] = tuple(raw_cfg["unlabeled_d_range"])
    cfg = CorpusConfig(**raw_cfg)
    with open(path / manifest["feature_file"], "rb") as fh:
        magic, version, feat_dim, rows = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC or version != FORMAT_VERSION:
            raise ValueError("bad feature file header")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * feat_dim:
        raise ValueError("feature file is truncated")
    data = data.reshape(rows, feat_dim).astype(np.float64)
    utts = [
        Utterance(
            e["id"],
            data[e["offset"] : e["offset"] + e["n_frames"]].copy(),
            list(e["golden"]),
            e["split"],
            list(e.get("durations", [])),
            tuple(e.get("silence", (0, 0))),
        )
        for e in manifest["utterances"]
    ]
    return Corpus(cfg, np.asarray(manifest["prototypes"], dtype=np.float64), utts)
