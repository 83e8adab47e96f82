"""Dialog corpora: manifests, binary feature files, vocabulary and batching.

A corpus is a list of :class:`DialogueRecord` (caption, ten QA pairs and the
questioner's summary) plus a mapping ``video_id -> FeatureSet`` holding the
precomputed visual grid features of four frames and one audio vector.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

NUM_ROUNDS = 10
NUM_FRAMES = 4
NUM_REGIONS = 49
VISUAL_DIM = 512
AUDIO_DIM = 256
SPLITS = ("train", "val", "test")

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
RESERVED = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = range(4)

# decode caps; the paper gives none
MAX_QUESTION_LEN = 20
MAX_ANSWER_LEN = 20
MAX_DESCRIPTION_LEN = 30


class ManifestError(ValueError):
    """A manifest record is malformed. ``video_id`` names the record when known."""

    def __init__(self, message, video_id=None):
        super().__init__(message if video_id is None else f"{video_id}: {message}")
        self.video_id = video_id


class FeatureFileError(ValueError):
    pass


class MissingFeatureError(KeyError):
    def __init__(self, video_id):
        super().__init__(video_id)
        self.video_id = video_id

    def __str__(self):
        return f"no features for video {self.video_id!r}"


@dataclass(frozen=True)
class DialogueRecord:
    video_id: str
    caption: str
    qa_pairs: tuple[tuple[str, str], ...]
    summary: str
    split: str = "train"

    def __post_init__(self):
        if len(self.qa_pairs) != NUM_ROUNDS:
            raise ManifestError(
                f"expected {NUM_ROUNDS} QA pairs, got {len(self.qa_pairs)}", self.video_id
            )
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}", self.video_id)
        texts = [self.caption, self.summary] + [t for pair in self.qa_pairs for t in pair]
        if any(not isinstance(t, str) or not t.strip() for t in texts):
            raise ManifestError("caption, summary and QA texts must be non-empty", self.video_id)

    @property
    def questions(self):
        return [q for q, _ in self.qa_pairs]

    @property
    def answers(self):
        return [a for _, a in self.qa_pairs]

    def to_json(self):
        return {
            "video_id": self.video_id,
            "caption": self.caption,
            "summary": self.summary,
            "dialog": [{"question": q, "answer": a} for q, a in self.qa_pairs],
        }


@dataclass
class FeatureSet:
    """``visual`` is [4, 49, 512] (frame 0 = start, frame 3 = end); ``audio`` is [256]."""

    visual: np.ndarray
    audio: np.ndarray

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float32)
        self.audio = np.asarray(self.audio, dtype=np.float32)
        if self.visual.shape != (NUM_FRAMES, NUM_REGIONS, VISUAL_DIM):
            raise ValueError(f"visual features must be [4, 49, 512], got {list(self.visual.shape)}")
        if self.audio.shape != (AUDIO_DIM,):
            raise ValueError(f"audio features must be [256], got {list(self.audio.shape)}")
        if not (np.isfinite(self.visual).all() and np.isfinite(self.audio).all()):
            raise ValueError("features contain non-finite values")

    @property
    def start_frame(self):
        return self.visual[0]

    @property
    def end_frame(self):
        return self.visual[-1]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _split_from_path(path):
    stem = Path(path).stem
    return stem if stem in SPLITS else "train"


def load_manifest(path, split=None) -> list[DialogueRecord]:
    """Read a ``{"dialogs": [...]}`` manifest.

    The split defaults to the file stem when it is one of train/val/test.
    """
    split = split or _split_from_path(path)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("dialogs"), list):
        raise ManifestError(f"{path}: top-level field 'dialogs' must be a list")

    records, seen = [], set()
    for k, entry in enumerate(doc["dialogs"]):
        video_id = entry.get("video_id") if isinstance(entry, dict) else None
        if not isinstance(video_id, str) or not video_id:
            raise ManifestError(f"record #{k} has no video_id")
        for key in ("caption", "summary", "dialog"):
            if key not in entry:
                raise ManifestError(f"missing field {key!r}", video_id)
        if not isinstance(entry["dialog"], list):
            raise ManifestError("'dialog' must be a list", video_id)
        pairs = []
        for turn in entry["dialog"]:
            if not isinstance(turn, dict) or "question" not in turn or "answer" not in turn:
                raise ManifestError("dialog turns need 'question' and 'answer'", video_id)
            pairs.append((turn["question"], turn["answer"]))
        if video_id in seen:
            raise ManifestError("duplicate video_id", video_id)
        seen.add(video_id)
        records.append(
            DialogueRecord(video_id, entry["caption"], tuple(pairs), entry["summary"], split)
        )
    return records


def save_manifest(path, records: Iterable[DialogueRecord]):
    doc = {"dialogs": [r.to_json() for r in records]}
    Path(path).write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# binary feature files
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"QACF"
MAX_RANK = 8


def write_feature_file(path, array):
    arr = np.asarray(array)
    if arr.ndim > MAX_RANK:
        raise FeatureFileError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    arr = np.asarray(arr, dtype="<f4", order="C")   # keeps rank 0, unlike ascontiguousarray
    header = FEATURE_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise FeatureFileError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", data, 4)
    if rank > MAX_RANK:
        raise FeatureFileError(f"{path}: rank {rank} exceeds {MAX_RANK}")
    offset = 8 + 4 * rank
    if len(data) < offset:
        raise FeatureFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = 1
    for d in dims:
        count *= d
    expected = offset + 4 * count
    if len(data) != expected:
        raise FeatureFileError(
            f"{path}: payload size mismatch, expected {expected} bytes, found {len(data)}"
        )
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


def feature_paths(directory, video_id):
    directory = Path(directory)
    return directory / f"{video_id}.vis.qacf", directory / f"{video_id}.aud.qacf"


def save_features(directory, video_id, feats: FeatureSet):
    vis, aud = feature_paths(directory, video_id)
    write_feature_file(vis, feats.visual)
    write_feature_file(aud, feats.audio)


class FeatureStore(Mapping):
    """Lazy ``video_id -> FeatureSet`` view over a directory of ``.qacf`` files."""

    def __init__(self, directory, cache=True):
        self.directory = Path(directory)
        self._cache = {} if cache else None

    def __getitem__(self, video_id):
        if self._cache is not None and video_id in self._cache:
            return self._cache[video_id]
        vis, aud = feature_paths(self.directory, video_id)
        if not (vis.exists() and aud.exists()):
            raise MissingFeatureError(video_id)
        feats = FeatureSet(read_feature_file(vis), read_feature_file(aud))
        if self._cache is not None:
            self._cache[video_id] = feats
        return feats

    def __contains__(self, video_id):
        return all(p.exists() for p in feature_paths(self.directory, video_id))

    def __iter__(self):
        for p in sorted(self.directory.glob("*.vis.qacf")):
            yield p.name[: -len(".vis.qacf")]

    def __len__(self):
        return sum(1 for _ in self)


# ---------------------------------------------------------------------------
# vocabulary and tokenization
# ---------------------------------------------------------------------------

_WORD_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)*")


def split_words(text):
    """Lowercase and split on whitespace and punctuation."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def token(self, idx):
        return self.itos[idx]

    def to_json(self):
        return dict(self.stoi)

    @classmethod
    def from_json(cls, mapping):
        itos = [tok for tok, _ in sorted(mapping.items(), key=lambda kv: kv[1])]
        if itos[: len(RESERVED)] != list(RESERVED) or [mapping[t] for t in itos] != list(range(len(itos))):
            raise ValueError("vocabulary ids must be dense and start with the reserved tokens")
        return cls(itos[len(RESERVED):])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=0))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def record_texts(record: DialogueRecord):
    yield record.caption
    for q, a in record.qa_pairs:
        yield q
        yield a
    yield record.summary


def build_vocabulary(records: Iterable[DialogueRecord], min_count=1) -> Vocabulary:
    """Vocabulary over the train split only, keeping tokens seen ``min_count`` times."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for rec in records:
        if rec.split != "train":
            continue
        for text in record_texts(rec):
            counts.update(split_words(text))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty training corpus")
    # frequency order, ties alphabetical, so the mapping is reproducible
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def tokenize(text, vocab: Vocabulary, framed=True) -> list[int]:
    ids = [vocab.id(w) for w in split_words(text)]
    return [SOS_ID, *ids, EOS_ID] if framed else ids


def detokenize(ids, vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i in (PAD_ID, SOS_ID):
            continue
        words.append(vocab.token(i))
    return " ".join(words)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    video_ids: list[str]
    visual: torch.Tensor          # [B, 4, 49, 512]
    audio: torch.Tensor           # [B, 256]
    caption: torch.Tensor         # [B, Lc]
    caption_len: torch.Tensor     # [B]
    questions: torch.Tensor       # [B, 10, Lq]
    question_len: torch.Tensor    # [B, 10]
    answers: torch.Tensor         # [B, 10, La]
    answer_len: torch.Tensor      # [B, 10]
    summary: torch.Tensor         # [B, Ls]
    summary_len: torch.Tensor     # [B]
    start_rounds: torch.Tensor    # [B], 1..11 (11 = all ten pairs given)
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.video_ids)

    def to(self, dtype):
        self.visual = self.visual.to(dtype)
        self.audio = self.audio.to(dtype)
        return self

    def select(self, index):
        """Sub-batch of the rows in ``index`` (a list of ints)."""
        idx = torch.as_tensor(index, dtype=torch.long)
        kw = {}
        for name in ("visual", "audio", "caption", "caption_len", "questions", "question_len",
                     "answers", "answer_len", "summary", "summary_len", "start_rounds"):
            kw[name] = getattr(self, name).index_select(0, idx)
        return Batch([self.video_ids[i] for i in index], extras=dict(self.extras), **kw)


def _pad(seqs, width=None):
    width = width or max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    for row, s in enumerate(seqs):
        out[row, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out, torch.as_tensor([len(s) for s in seqs], dtype=torch.long)


def pad_batch(records: Sequence[DialogueRecord], features: Mapping, vocab: Vocabulary,
              start_rounds=None) -> Batch:
    """Tokenize and zero-pad every text field to the per-batch maximum length."""
    if not records:
        raise ValueError("empty batch")
    if start_rounds is None:
        start_rounds = [1] * len(records)
    feats = []
    for rec in records:
        try:
            feats.append(features[rec.video_id])
        except KeyError:
            raise MissingFeatureError(rec.video_id) from None

    caption, caption_len = _pad([tokenize(r.caption, vocab) for r in records])
    summary, summary_len = _pad([tokenize(r.summary, vocab) for r in records])
    q_tok = [[tokenize(q, vocab) for q in r.questions] for r in records]
    a_tok = [[tokenize(a, vocab) for a in r.answers] for r in records]
    lq = max(len(t) for row in q_tok for t in row)
    la = max(len(t) for row in a_tok for t in row)
    questions, question_len = zip(*(_pad(row, lq) for row in q_tok))
    answers, answer_len = zip(*(_pad(row, la) for row in a_tok))

    return Batch(
        video_ids=[r.video_id for r in records],
        visual=torch.from_numpy(np.stack([f.visual for f in feats])),
        audio=torch.from_numpy(np.stack([f.audio for f in feats])),
        caption=caption,
        caption_len=caption_len,
        questions=torch.stack(questions),
        question_len=torch.stack(question_len),
        answers=torch.stack(answers),
        answer_len=torch.stack(answer_len),
        summary=summary,
        summary_len=summary_len,
        start_rounds=torch.as_tensor(list(start_rounds), dtype=torch.long),
    )


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

ACTORS = ("man", "woman", "boy", "girl", "chef", "student")
ROOMS = ("kitchen", "bedroom", "garage", "hallway", "office", "bathroom")
ACTIONS = ("cooking", "reading", "cleaning", "drinking", "writing", "sweeping")
OBJECTS = ("cup", "book", "towel", "phone", "broom", "laptop")
SOUNDS = ("music", "barking", "television", "rain", "laughter", "traffic")

ATTRIBUTES = {
    "actor": ACTORS,
    "room": ROOMS,
    "action": ACTIONS,
    "object": OBJECTS,
    "sound": SOUNDS,
}
FRAME_ATTRIBUTES = ("actor", "room")          # visible in frames 0 and 3
HIDDEN_ATTRIBUTES = ("action", "object", "sound")

CAPTION_TEMPLATE = "A {actor} is {action} with a {object} in the {room} while {sound} can be heard."
SUMMARY_TEMPLATE = "A {actor} is {action} with a {object} in the {room} and there is {sound}."
QA_TEMPLATES = (
    ("What is the {actor} doing?", "The {actor} is {action}."),
    ("What is the {actor} holding?", "A {object}."),
    ("Can you hear anything?", "Yes, I hear {sound}."),
    ("Is anyone else in the {room}?", "No, only the {actor}."),
    ("What happens next?", "The {actor} keeps {action} with the {object}."),
    ("What is that sound?", "It is {sound}."),
    ("Does the {actor} leave the {room}?", "No, the {actor} stays."),
    ("Which object is used?", "The {object}."),
    ("Is there any talking?", "No, just {sound}."),
    ("Anything else?", "That is all."),
)

_BASIS_SEED = 20200823
_NOISE = 0.1


def _attribute_bases():
    rng = np.random.default_rng(_BASIS_SEED)
    bases = {}
    for name, values in ATTRIBUTES.items():
        dim = AUDIO_DIM if name == "sound" else VISUAL_DIM
        bases[name] = rng.standard_normal((len(values), dim)).astype(np.float32)
    return bases


_BASES = _attribute_bases()


def _scene_frame(rng, first, second):
    w1 = rng.uniform(0.5, 1.0, size=(NUM_REGIONS, 1))
    w2 = rng.uniform(0.5, 1.0, size=(NUM_REGIONS, 1))
    noise = _NOISE * rng.standard_normal((NUM_REGIONS, VISUAL_DIM))
    return w1 * first + w2 * second + noise


def synth_dataset(n, seed, split_sizes=None):
    """Generate ``n`` synthetic dialogs with matching features.

    Each video has a latent scene of five attributes. Frames 0 and 3 show only
    the actor and the room, frames 1 and 2 only the action and the object, and
    the audio carries the sound, so the hidden three attributes reach the
    questioner only through the answers.

    ``split_sizes`` maps split names to counts (e.g. ``{"train": 200, "test": 56}``),
    assigned in order; by default everything is ``train``.

    Returns ``(records, features, scenes)`` where ``scenes`` maps video_id to
    the attribute dict.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    split_sizes = dict(split_sizes or {"train": n})
    if sum(split_sizes.values()) != n:
        raise ValueError("split sizes must add up to n")
    splits = [name for name, k in split_sizes.items() for _ in range(k)]

    records, features, scenes = [], {}, {}
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        idx = {name: int(rng.integers(len(vals))) for name, vals in ATTRIBUTES.items()}
        scene = {name: ATTRIBUTES[name][k] for name, k in idx.items()}
        video_id = f"syn{seed}_{i:05d}"

        vec = {name: _BASES[name][k] for name, k in idx.items()}
        visual = np.stack([
            _scene_frame(rng, vec["actor"], vec["room"]),
            _scene_frame(rng, vec["action"], vec["object"]),
            _scene_frame(rng, vec["action"], vec["object"]),
            _scene_frame(rng, vec["actor"], vec["room"]),
        ])
        audio = vec["sound"] + _NOISE * rng.standard_normal(AUDIO_DIM)

        records.append(DialogueRecord(
            video_id=video_id,
            caption=CAPTION_TEMPLATE.format(**scene),
            qa_pairs=tuple((q.format(**scene), a.format(**scene)) for q, a in QA_TEMPLATES),
            summary=SUMMARY_TEMPLATE.format(**scene),
            split=splits[i],
        ))
        features[video_id] = FeatureSet(visual.astype(np.float32), audio.astype(np.float32))
        scenes[video_id] = scene
    return records, features, scenes


def write_corpus(out_dir, records, features, vocab=None):
    """Write ``<split>.json`` manifests and ``features/*.qacf`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    by_split = {}
    for rec in records:
        by_split.setdefault(rec.split, []).append(rec)
    for split, recs in by_split.items():
        save_manifest(out / f"{split}.json", recs)
    for rec in records:
        save_features(out / "features", rec.video_id, features[rec.video_id])
    if vocab is not None:
        vocab.save(out / "vocab.json")


def load_corpus(data_dir):
    """Inverse of :func:`write_corpus`: ``({split: records}, FeatureStore)``."""
    data = Path(data_dir)
    splits = {s: load_manifest(data / f"{s}.json", s) for s in SPLITS if (data / f"{s}.json").exists()}
    if not splits:
        raise ManifestError(f"no train/val/test manifests under {data}")
    return splits, FeatureStore(data / "features")
