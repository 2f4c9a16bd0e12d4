"""Synthetic tasks, JSONL ingestion, vocabulary, batching, and few-shot sampling.

JSONL schema, one object per line:

    sequence tasks   {"text": "w1 w2 m0_0 ...", "label": 1}
    token tasks      {"tokens": ["w1", "e0_3", ...], "tags": ["O", "B-E0", ...]}

Vocab files list the non-reserved tokens, one per line, sorted. Ids 0, 1, 2
are reserved for PAD, UNK and CLS; file line i gets id 3 + i.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BudgetError, ConfigError, DataError
from .model import IGNORE_INDEX, TaskBatch

PAD, UNK, CLS = "<pad>", "<unk>", "<cls>"
RESERVED = (PAD, UNK, CLS)
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2
TASK_KINDS = ("sequence", "token")
FEW_SHOT_LADDER = tuple(8 * 2**i for i in range(10))  # 8 .. 4096


class Vocab:
    def __init__(self, tokens=()):
        toks = sorted(set(tokens) - set(RESERVED))
        self.tokens: tuple[str, ...] = tuple(toks)
        self._ids = {t: i + len(RESERVED) for i, t in enumerate(toks)}

    def __len__(self):
        return len(RESERVED) + len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, tokens) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def token(self, i: int) -> str:
        if i < len(RESERVED):
            return RESERVED[i]
        return self.tokens[i - len(RESERVED)]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(t for t in lines if t)


@dataclass(frozen=True)
class LabeledExample:
    text: str
    seq_label: int | None = None
    token_labels: tuple[int, ...] | None = None

    def __post_init__(self):
        if (self.seq_label is None) == (self.token_labels is None):
            raise DataError("an example carries exactly one of seq_label / token_labels")
        if self.token_labels is not None:
            object.__setattr__(self, "token_labels", tuple(int(x) for x in self.token_labels))
            if len(self.token_labels) != len(self.tokens):
                raise DataError(
                    f"{len(self.tokens)} tokens but {len(self.token_labels)} token labels"
                )

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True)
class Dataset:
    kind: str
    examples: tuple[LabeledExample, ...]
    vocab: Vocab
    label_names: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DataError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "examples", tuple(self.examples))
        object.__setattr__(self, "label_names", tuple(self.label_names))

    def __len__(self):
        return len(self.examples)

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    @property
    def head_kind(self) -> str:
        return self.kind

    @property
    def max_len(self) -> int:
        """Longest sequence including the prepended CLS token."""
        return 1 + max((len(e.tokens) for e in self.examples), default=0)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.kind, tuple(self.examples[i] for i in indices), self.vocab, self.label_names)

    def class_members(self) -> dict[int, list[int]]:
        """Example indices per class. Token tasks group by entity type (O excluded)."""
        if self.kind == "sequence":
            out = {c: [] for c in range(self.num_labels)}
            for i, e in enumerate(self.examples):
                out[e.seq_label].append(i)
            return out
        types = entity_types(self.label_names)
        out = {t: [] for t in range(len(types))}
        type_of = {
            j: types.index(name[2:]) for j, name in enumerate(self.label_names) if name != "O"
        }
        for i, e in enumerate(self.examples):
            for t in sorted({type_of[j] for j in e.token_labels if j in type_of}):
                out[t].append(i)
        return out

    def class_counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.class_members().items()}

    def to_records(self) -> list[dict]:
        if self.kind == "sequence":
            return [{"text": e.text, "label": e.seq_label} for e in self.examples]
        return [
            {"tokens": e.tokens, "tags": [self.label_names[j] for j in e.token_labels]}
            for e in self.examples
        ]

    def to_bytes(self) -> bytes:
        lines = [json.dumps(r, sort_keys=True) for r in self.to_records()]
        return ("\n".join(lines) + "\n").encode("utf-8")

    def to_jsonl(self, path):
        Path(path).write_bytes(self.to_bytes())


def entity_types(label_names) -> list[str]:
    seen = []
    for name in label_names:
        if name != "O" and name[2:] not in seen:
            seen.append(name[2:])
    return seen


def bio_valid(tags: list[str]) -> bool:
    """No I-X unless the previous tag is B-X or I-X."""
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            return False
        if tag != "O" and tag[:2] not in ("B-", "I-"):
            return False
        prev = tag
    return True


def bio_spans(tags: list[str]) -> set[tuple[int, int, str]]:
    """(start, end_exclusive, type) spans decoded from a BIO sequence."""
    spans, start, kind = set(), None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        if start is not None and not (tag.startswith("I-") and tag[2:] == kind):
            spans.add((start, i, kind))
            start = None
        if tag.startswith("B-") or (tag.startswith("I-") and start is None):
            start, kind = i, tag[2:]
    return spans


# -- generators ----------------------------------------------------------------


def sequence_task_vocab(num_classes: int, vocab_size: int, marker_len: int = 2):
    n_fill = vocab_size - num_classes * marker_len
    if n_fill < 1:
        raise ConfigError(
            f"vocab_size {vocab_size} leaves no filler tokens after {num_classes}x{marker_len} markers"
        )
    fillers = [f"w{i}" for i in range(n_fill)]
    markers = [[f"m{c}_{j}" for j in range(marker_len)] for c in range(num_classes)]
    return fillers, markers


def gen_sequence_task(
    seed: int,
    n: int,
    num_classes: int = 2,
    vocab_size: int = 40,
    seq_len: int = 12,
    noise: float = 0.0,
    marker_len: int = 2,
) -> Dataset:
    """Sequence classification with a planted per-class marker n-gram.

    Each example holds its class's ``marker_len`` marker tokens at a random
    offset among filler tokens. With probability ``noise`` each marker token
    is independently replaced by a random filler, so a sequence whose markers
    were all replaced carries no label information.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if seq_len < marker_len + 1:
        raise ConfigError(f"seq_len {seq_len} too small for a {marker_len}-token marker")
    if not 0.0 <= noise <= 1.0:
        raise ConfigError(f"noise must be a probability, got {noise}")
    fillers, markers = sequence_task_vocab(num_classes, vocab_size, marker_len)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    lo = max(marker_len + 1, seq_len // 2)
    examples = []
    for y in labels:
        length = int(rng.integers(lo, seq_len + 1))
        toks = [fillers[i] for i in rng.integers(0, len(fillers), length)]
        start = int(rng.integers(0, length - marker_len + 1))
        for j, m in enumerate(markers[y]):
            toks[start + j] = fillers[rng.integers(0, len(fillers))] if rng.random() < noise else m
        examples.append(LabeledExample(" ".join(toks), seq_label=int(y)))
    vocab = Vocab(fillers + [m for ms in markers for m in ms])
    return Dataset("sequence", tuple(examples), vocab, tuple(f"class{c}" for c in range(num_classes)))


def ner_label_names(entity_types: int) -> tuple[str, ...]:
    names = ["O"]
    for t in range(entity_types):
        names += [f"B-E{t}", f"I-E{t}"]
    return tuple(names)


def gen_ner_task(
    seed: int,
    n: int,
    entity_types: int = 3,
    seq_len: int = 12,
    o_fraction: float = 0.7,
    max_span: int = 3,
    type_vocab: int = 6,
    filler_vocab: int = 30,
) -> Dataset:
    """BIO token tagging; entity tokens come from per-type sub-vocabularies.

    The number of entity tokens per sequence is Binomial(seq_len, 1 - o_fraction),
    split into spans of length 1..max_span. Spans never touch: at least one O
    separates neighbours, so boundaries are recoverable from the tokens alone.
    """
    if entity_types < 1:
        raise ConfigError(f"entity_types must be >= 1, got {entity_types}")
    if seq_len < 1 or max_span < 1 or not 0.0 < o_fraction <= 1.0:
        raise ConfigError("need seq_len >= 1, max_span >= 1, o_fraction in (0, 1]")
    names = ner_label_names(entity_types)
    ids = {name: i for i, name in enumerate(names)}
    fillers = [f"w{i}" for i in range(filler_vocab)]
    ent = [[f"e{t}_{i}" for i in range(type_vocab)] for t in range(entity_types)]
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(n):
        n_ent = int(rng.binomial(seq_len, 1.0 - o_fraction))
        spans = []
        while n_ent > 0:
            length = int(min(n_ent, rng.integers(1, max_span + 1)))
            spans.append(length)
            n_ent -= length
        # drop spans until they fit with separators between them
        while spans and sum(spans) + len(spans) - 1 > seq_len:
            spans.pop()
        n_o = seq_len - sum(spans)
        gaps = sorted(rng.choice(n_o + 1, size=len(spans), replace=False)) if spans else []
        toks, tags = [], []
        gi = 0
        for pos in range(n_o + 1):
            while gi < len(spans) and gaps[gi] == pos:
                t = int(rng.integers(0, entity_types))
                for j in range(spans[gi]):
                    toks.append(ent[t][rng.integers(0, type_vocab)])
                    tags.append(ids[("B-" if j == 0 else "I-") + f"E{t}"])
                gi += 1
            if pos < n_o:
                toks.append(fillers[rng.integers(0, filler_vocab)])
                tags.append(0)
        examples.append(LabeledExample(" ".join(toks), token_labels=tuple(tags)))
    vocab = Vocab(fillers + [e for es in ent for e in es])
    return Dataset("token", tuple(examples), vocab, names)


# -- JSONL ingestion -------------------------------------------------------------


def load_jsonl(path, kind: str, vocab: Vocab | None = None, label_names=None, num_labels=None) -> Dataset:
    """Read a JSONL corpus.

    ``vocab=None`` builds a vocabulary from the file; passing one reuses it and
    maps unseen tokens to UNK. For sequence tasks ``num_labels`` (or
    ``label_names``) bounds the label range; for token tasks ``label_names``
    fixes the tag set, otherwise it is "O" plus the sorted tags seen.
    """
    if kind not in TASK_KINDS:
        raise DataError(f"task kind must be one of {TASK_KINDS}, got {kind!r}")
    path = Path(path)
    records = []
    errors = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            errors.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        need = ("text", "label") if kind == "sequence" else ("tokens", "tags")
        missing = [k for k in need if not isinstance(obj, dict) or k not in obj]
        if missing:
            errors.append(f"line {lineno}: missing field(s) {', '.join(missing)}")
            continue
        records.append((lineno, obj))
    if errors:
        raise DataError(f"{path}: " + "; ".join(errors))
    if not records:
        raise DataError(f"{path}: empty file")

    if kind == "sequence":
        if label_names is not None:
            names = tuple(label_names)
        else:
            n = num_labels if num_labels is not None else 1 + max(int(o["label"]) for _, o in records)
            names = tuple(f"class{c}" for c in range(n))
        examples = []
        for lineno, o in records:
            y = o["label"]
            if not isinstance(y, int) or isinstance(y, bool) or not 0 <= y < len(names):
                errors.append(f"line {lineno}: label {y!r} out of range [0, {len(names)})")
                continue
            examples.append(LabeledExample(" ".join(str(o["text"]).split()), seq_label=y))
        tokens = (t for e in examples for t in e.tokens)
    else:
        if label_names is not None:
            names = tuple(label_names)
        else:
            seen = {t for _, o in records for t in o["tags"]} - {"O"}
            names = ("O",) + tuple(sorted(seen))
        index = {name: i for i, name in enumerate(names)}
        examples = []
        for lineno, o in records:
            toks, tags = list(o["tokens"]), list(o["tags"])
            if len(toks) != len(tags):
                errors.append(f"line {lineno}: {len(toks)} tokens but {len(tags)} tags")
                continue
            unknown = [t for t in tags if t not in index]
            if unknown:
                errors.append(f"line {lineno}: tag(s) {unknown} not in label set")
                continue
            if any(not t or any(ch.isspace() for ch in t) for t in toks):
                errors.append(f"line {lineno}: tokens must be non-empty and contain no whitespace")
                continue
            examples.append(LabeledExample(" ".join(toks), token_labels=tuple(index[t] for t in tags)))
        tokens = (t for e in examples for t in e.tokens)
    if errors:
        raise DataError(f"{path}: " + "; ".join(errors))
    vocab = vocab if vocab is not None else Vocab(tokens)
    return Dataset(kind, tuple(examples), vocab, names)


# -- batching --------------------------------------------------------------------


@dataclass
class EncodedDataset:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def batch(self, index) -> TaskBatch:
        index = np.asarray(index)
        # trim trailing all-pad columns so short batches stay cheap
        width = max(int(self.mask[index].sum(axis=1).max()), 1)
        labels = self.labels[index]
        if labels.ndim == 2:
            labels = labels[:, :width]
        return TaskBatch(self.ids[index, :width], self.mask[index, :width], labels)


def encode_dataset(ds: Dataset, max_len: int | None = None) -> EncodedDataset:
    """CLS-prefixed, right-padded id matrix. Token labels at CLS/pad are ignored."""
    width = max_len or ds.max_len
    n = len(ds)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    labels = np.full((n, width) if ds.kind == "token" else (n,), IGNORE_INDEX, dtype=np.int64)
    for i, e in enumerate(ds.examples):
        toks = ds.vocab.encode(e.tokens)[: width - 1]
        ids[i, 0] = CLS_ID
        ids[i, 1 : 1 + len(toks)] = toks
        mask[i, : 1 + len(toks)] = True
        if ds.kind == "sequence":
            labels[i] = e.seq_label
        else:
            labels[i, 1 : 1 + len(toks)] = e.token_labels[: width - 1]
    return EncodedDataset(ids, mask, labels)


def iter_batches(enc: EncodedDataset, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(len(enc)) if rng is not None else np.arange(len(enc))
    for start in range(0, len(enc), batch_size):
        yield enc.batch(order[start : start + batch_size])


# -- few-shot sampling -----------------------------------------------------------


@dataclass(frozen=True)
class FewShotSpec:
    k_per_class: int
    seed: int = 0
    sweep: bool = False

    def __post_init__(self):
        if self.k_per_class < 1:
            raise BudgetError(f"k_per_class must be positive, got {self.k_per_class}")
        if self.sweep and self.k_per_class not in FEW_SHOT_LADDER:
            raise BudgetError(f"sweep-mode k_per_class must be one of {FEW_SHOT_LADDER}")


def few_shot_ladder(max_k: int | None = None, ladder=FEW_SHOT_LADDER) -> list[int]:
    return [k for k in ladder if max_k is None or k <= max_k]


def sample_few_shot(ds: Dataset, spec: FewShotSpec) -> Dataset:
    """Exactly ``k_per_class`` examples per class, nested across k for a fixed seed.

    Each class's members are put in a seeded random order and the first k are
    taken, so a smaller k always selects a subset of a larger one. For token
    tasks a "class" is an entity type and membership means the sequence holds
    at least one token of that type; sequences already taken for an earlier
    type are skipped.
    """
    members = ds.class_members()
    k = spec.k_per_class
    chosen: list[int] = []
    taken: set[int] = set()
    for c, idx in members.items():
        rng = np.random.default_rng([spec.seed, c])
        order = [idx[i] for i in rng.permutation(len(idx))]
        pick = [i for i in order if i not in taken][:k]
        if len(pick) < k:
            name = ds.label_names[c] if ds.kind == "sequence" else entity_types(ds.label_names)[c]
            raise BudgetError(f"class {name!r} has {len(pick)} available examples, fewer than k={k}")
        chosen += pick
        taken.update(pick)
    rng = np.random.default_rng([spec.seed, len(members), k])
    chosen = [chosen[i] for i in rng.permutation(len(chosen))]
    return ds.subset(chosen)


def min_class_count(ds: Dataset) -> int:
    return min(ds.class_counts().values())


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
