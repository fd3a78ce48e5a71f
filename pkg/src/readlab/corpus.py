"""Dataset ingestion, tokenization, vocabulary and splits.

Input formats:
  * ``LABEL<TAB>text`` one example per line (pre-flattened SST-style files).
  * TREC convention: ``COARSE:fine text`` one per line; ``label_field``
    selects the coarse or the fine label.

Everything here is a pure function over immutable inputs; all randomness
comes from explicit seeds.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import CorpusError

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)

DEFAULT_MAX_LEN = 64


def tokenize(text: str) -> list[str]:
    """Lowercase + whitespace split."""
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> id mapping with four fixed specials at ids 0..3."""

    token_to_id: Mapping[str, int]
    id_to_token: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < self.size:
            raise CorpusError(f"token id {idx} out of range for vocabulary of size {self.size}")
        return self.id_to_token[idx]

    def save(self, path: str | Path) -> None:
        """One non-special token per line; line number = id - 4."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[len(SPECIAL_TOKENS):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = [line.rstrip("\n") for line in open(path, encoding="utf-8")]
        id_to_token = SPECIAL_TOKENS + tuple(tokens)
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token)


@dataclass(frozen=True)
class Example:
    """A single text with an optional gold label and optional encoded ids."""

    text: str
    label: int | None = None
    tokens: tuple[int, ...] | None = None


@dataclass
class DatasetSplit:
    labeled: list[Example]
    unlabeled: list[Example]
    test: list[Example]
    k: int
    # originating indices, kept for audit manifests
    labeled_indices: list[int] = field(default_factory=list)
    unlabeled_indices: list[int] = field(default_factory=list)


def build_vocab(examples: Sequence[Example | str], min_freq: int = 1) -> Vocabulary:
    """Frequency-ordered vocabulary (ties broken lexicographically).

    Tokens with corpus frequency >= min_freq get ids after the 4 specials,
    in descending frequency order. Deterministic given identical input.
    """
    if min_freq < 1:
        raise CorpusError(f"min_freq must be >= 1, got {min_freq}")
    counts: collections.Counter[str] = collections.Counter()
    for ex in examples:
        text = ex if isinstance(ex, str) else ex.text
        counts.update(tokenize(text))
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    id_to_token = SPECIAL_TOKENS + tuple(kept)
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def encode(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """Lowercase, whitespace-tokenize, truncate to max_len; EOS if room remains."""
    if max_len < 1:
        raise CorpusError(f"max_len must be >= 1, got {max_len}")
    ids = [vocab.lookup(tok) for tok in tokenize(text)[:max_len]]
    if len(ids) < max_len:
        ids.append(EOS_ID)
    return ids


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of encode up to UNK substitution; PAD/BOS/EOS are dropped."""
    words = []
    for idx in ids:
        if idx == EOS_ID:
            break
        if idx in (PAD_ID, BOS_ID):
            continue
        words.append(vocab.token(idx))
    return " ".join(words)


def encode_examples(examples: Sequence[Example], vocab: Vocabulary,
                    max_len: int = DEFAULT_MAX_LEN) -> list[Example]:
    return [replace(ex, tokens=tuple(encode(ex.text, vocab, max_len))) for ex in examples]


# ---------------------------------------------------------------------------
# File ingestion


def _read_lines(path: str | Path, encoding: str) -> list[str]:
    raw = Path(path).read_bytes()
    try:
        return raw.decode(encoding).splitlines()
    except UnicodeDecodeError:
        # original TREC distributions are Latin-1
        return raw.decode("latin-1").splitlines()


def load_label_text(path: str | Path, label_field: str = "coarse",
                    encoding: str = "utf-8",
                    label_map: Mapping[str, int] | None = None,
                    ) -> tuple[list[Example], dict[str, int]]:
    """Load one `LABEL<TAB>text` or `COARSE:fine text` example per line.

    When ``label_map`` is given it is frozen: an unseen label name is a hard
    error (test files must not invent labels). Otherwise the map is built in
    first-seen order and returned for reuse.

    Returns (examples, label_map); Example.label holds the integer index.
    """
    if label_field not in ("coarse", "fine"):
        raise CorpusError(f"label_field must be 'coarse' or 'fine', got {label_field!r}")
    frozen = label_map is not None
    lmap: dict[str, int] = dict(label_map) if label_map else {}
    examples: list[Example] = []
    for lineno, line in enumerate(_read_lines(path, encoding), start=1):
        if not line.strip():
            continue
        if "\t" in line:
            name, _, text = line.partition("\t")
            name = name.strip()
        else:
            head, _, text = line.partition(" ")
            if ":" not in head:
                raise CorpusError(
                    f"{path}:{lineno}: expected LABEL<TAB>text or COARSE:fine text")
            coarse, _, fine = head.partition(":")
            name = coarse if label_field == "coarse" else head
        text = text.strip()
        if not name or not text:
            raise CorpusError(f"{path}:{lineno}: empty label or text")
        if name not in lmap:
            if frozen:
                raise CorpusError(
                    f"{path}:{lineno}: unknown label {name!r} (frozen label map)")
            lmap[name] = len(lmap)
        examples.append(Example(text=text, label=lmap[name]))
    if not examples:
        raise CorpusError(f"{path}: no examples")
    return examples, lmap


# ---------------------------------------------------------------------------
# Splitting


def split_labeled(examples: Sequence[Example], fraction: float, seed: int, k: int,
                  test: Sequence[Example] = ()) -> DatasetSplit:
    """Stratified labeled/unlabeled split.

    Keeps floor(fraction * n_c) examples per class c (minimum 1 where the
    class is present); the remainder becomes the unlabeled pool with labels
    stripped. Selection is a seeded shuffle per class, so the result is
    deterministic per (seed, fraction) and the labeled-set class histogram
    does not depend on the seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise CorpusError(f"fraction must be in (0, 1], got {fraction}")
    if not examples:
        raise CorpusError("cannot split an empty example list")
    by_class: dict[int, list[int]] = collections.defaultdict(list)
    for idx, ex in enumerate(examples):
        if ex.label is None:
            raise CorpusError(f"example {idx} has no label; split needs labeled input")
        if not 0 <= ex.label < k:
            raise CorpusError(f"example {idx} has label {ex.label} outside 0..{k - 1}")
        by_class[ex.label].append(idx)

    rng = np.random.default_rng(seed)
    labeled_idx: list[int] = []
    unlabeled_idx: list[int] = []
    for cls in sorted(by_class):
        idxs = np.array(by_class[cls])
        rng.shuffle(idxs)
        n_keep = max(1, int(np.floor(fraction * len(idxs))))
        labeled_idx.extend(int(i) for i in idxs[:n_keep])
        unlabeled_idx.extend(int(i) for i in idxs[n_keep:])
    if not labeled_idx:
        raise CorpusError("labeled split is empty; increase fraction")
    labeled_idx.sort()
    unlabeled_idx.sort()

    labeled = [examples[i] for i in labeled_idx]
    unlabeled = [replace(examples[i], label=None) for i in unlabeled_idx]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, test=list(test), k=k,
                        labeled_indices=labeled_idx, unlabeled_indices=unlabeled_idx)


def write_split_manifest(split: DatasetSplit, path: str | Path) -> None:
    """Audit TSV: `<index>\\t<L|U|T>`. Train rows carry originating indices;
    test rows are indexed within the test list."""
    with open(path, "w", encoding="utf-8") as fh:
        for idx in split.labeled_indices:
            fh.write(f"{idx}\tL\n")
        for idx in split.unlabeled_indices:
            fh.write(f"{idx}\tU\n")
        for idx in range(len(split.test)):
            fh.write(f"{idx}\tT\n")


# ---------------------------------------------------------------------------
# Synthetic grammar corpus

# One class = a list of (pattern, slot fillers). Patterns use {slot} holes.
GrammarTemplate = tuple[str, Mapping[str, Sequence[str]]]


def _word_list(stems: Sequence[str], suffixes: Sequence[str]) -> list[str]:
    return [s + e for s in stems for e in suffixes]


def default_grammar(num_classes: int = 2) -> list[list[GrammarTemplate]]:
    """Two topic classes hidden behind identical sentence frames.

    Both classes use the same templates and the same function words; the
    class signal sits entirely in which content words fill the slots. The
    content vocabularies are wide enough that a very small labeled split
    covers only a fraction of them, so closing the gap requires the
    unlabeled co-occurrence structure. That is the regime the trainer's
    semi-supervised variants are meant to exploit.
    """
    nouns_a = _word_list(
        ["otter", "heron", "badger", "lynx", "marmot", "plover", "stoat", "vole"],
        ["", "ling", "kin", "let", "il", "oy", "un", "ar"])
    verbs_a = _word_list(["burrow", "forage", "moult", "wade", "roost", "graze"],
                         ["s", "ed", "eth", "en"])
    nouns_b = _word_list(
        ["copper", "barley", "lumber", "cotton", "nickel", "freight", "solar", "amber"],
        ["", "ite", "ode", "ium", "ex", "is", "or", "al"])
    verbs_b = _word_list(["rally", "drift", "steady", "surge", "firm", "ease"],
                         ["s", "ed", "eth", "en"])

    def frames(nouns, verbs):
        slots = {"n1": nouns, "n2": nouns, "v": verbs}
        return [("how does the {n1} {v} near the {n2}", slots),
                ("why do the {n1} and the {n2} {v}", slots),
                ("when will the {n1} {v} by the {n2}", slots),
                ("the {n1} {v} near the {n2} again", slots),
                ("could the {n1} {v} without the {n2}", slots)]

    pool = [frames(nouns_a, verbs_a), frames(nouns_b, verbs_b)]
    if not 2 <= num_classes <= len(pool):
        raise CorpusError(f"default grammar supports 2..{len(pool)} classes")
    return pool[:num_classes]


def synth_grammar(seed: int, n: int,
                  class_templates: Sequence[Sequence[GrammarTemplate]] | None = None,
                  ) -> list[Example]:
    """Deterministic class-balanced corpus sampled from slotted templates.

    Class sizes differ by at most 1; sampling over (template, slot fillers)
    is uniform and driven entirely by the seed.
    """
    templates = class_templates if class_templates is not None else default_grammar()
    if len(templates) < 2:
        raise CorpusError("need at least 2 template classes")
    rng = np.random.default_rng(seed)
    examples: list[Example] = []
    for i in range(n):
        cls = i % len(templates)
        pattern, slots = templates[cls][rng.integers(len(templates[cls]))]
        fillers = {name: words[rng.integers(len(words))] for name, words in slots.items()}
        examples.append(Example(text=pattern.format(**fillers), label=cls))
    return examples
