"""Canonical data model for annotated stories and deterministic dataset I/O.

Stories are flat token sequences containing ``[B]`` marker tokens; each marker
carries an ordered list of labeled propositions. Serialization is JSON Lines
with a fixed key order so that identical datasets produce identical bytes.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
BOS_TOKEN = "[BOS]"
EOS_TOKEN = "[EOS]"
BREAK_TOKEN = "[B]"
MARK_TOKEN = "[MARK]"
PROP_TOKEN = "[PROP]"

#: Reserved vocabulary ids, in order: [PAD]=0 ... [PROP]=6.
RESERVED_TOKENS = (
    PAD_TOKEN,
    UNK_TOKEN,
    BOS_TOKEN,
    EOS_TOKEN,
    BREAK_TOKEN,
    MARK_TOKEN,
    PROP_TOKEN,
)


class DatasetError(Exception):
    """Malformed dataset file or invariant violation."""


class TruthLabel(Enum):
    """Three-way truth value of a proposition at a breakpoint."""

    ENTAILED = "true"
    CONTRADICTED = "false"
    UNKNOWN = "unknown"

    @classmethod
    def from_str(cls, s: str) -> "TruthLabel":
        for label in cls:
            if label.value == s:
                return label
        raise DatasetError(f"unknown truth label {s!r}")


# Capitalized function words that are not entity names; the tokenizer folds
# these to lowercase while leaving name-like title-case tokens intact.
_CAP_FUNCTION_WORDS = frozenset(
    {
        "He", "She", "It", "They", "The", "An", "Who", "Where", "What",
        "When", "How", "Then", "No", "Nobody", "After", "Next", "Later",
    }
)

_ATOMIC = re.compile(r"^(\[\w+\]|\$\w+)$")
_PUNCT = ".,?!()"


def _case_fold(token: str) -> str:
    if _ATOMIC.match(token):
        return token
    if token in _CAP_FUNCTION_WORDS:
        return token.lower()
    if len(token) == 1 and token.isupper():
        return token
    if token[:1].isupper() and token[1:].islower():
        return token  # name-like
    return token.lower()


def tokenize(text: str) -> list[str]:
    """Whitespace + punctuation tokenizer, lower-cased except entity names.

    Bracketed specials (``[B]``) and ``$``-prefixed prompt tokens stay atomic;
    possessive ``'s`` becomes its own token.
    """
    out: list[str] = []
    for chunk in text.split():
        if _ATOMIC.match(chunk):
            out.append(chunk)
            continue
        pieces: list[str] = []
        # peel leading punctuation
        while chunk and chunk[0] in _PUNCT:
            pieces.append(chunk[0])
            chunk = chunk[1:]
        trailing: list[str] = []
        while chunk and chunk[-1] in _PUNCT:
            trailing.insert(0, chunk[-1])
            chunk = chunk[:-1]
        if chunk.endswith("'s"):
            core, chunk = chunk[:-2], ""
            if core:
                pieces.append(core)
            pieces.append("'s")
        elif chunk:
            pieces.append(chunk)
        pieces.extend(trailing)
        out.extend(_case_fold(p) for p in pieces if p)
    return out


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class Proposition:
    """A queryable statement with its gold truth label."""

    text: str
    label: TruthLabel


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str


@dataclass(frozen=True)
class BreakpointAnnotation:
    """One ``[B]`` marker: 1-based ordinal, token position, and its propositions."""

    index: int
    token_position: int
    propositions: tuple[Proposition, ...]


@dataclass(frozen=True)
class Example:
    id: str
    story_tokens: tuple[str, ...]
    breakpoints: tuple[BreakpointAnnotation, ...]
    constraints: tuple[str, ...]
    qa: tuple[QAPair, ...]
    meta: Mapping[str, str]

    @property
    def marker_positions(self) -> list[int]:
        return [bp.token_position for bp in self.breakpoints]

    def gold_assignment(self) -> dict[tuple[int, str], TruthLabel]:
        return {
            (bp.index, prop.text): prop.label
            for bp in self.breakpoints
            for prop in bp.propositions
        }


@dataclass
class Dataset:
    examples: list[Example]
    vocab: "Vocab | None" = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)


@dataclass(frozen=True)
class Vocab:
    """Dense token→id map with 7 reserved leading ids."""

    tokens: tuple[str, ...]

    @property
    def index(self) -> dict[str, int]:
        cached = getattr(self, "_index_cache", None)
        if cached is None:
            cached = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, 1)  # [UNK]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        idx = self.index
        return [idx.get(t, 1) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def example_tokens(e: Example) -> Iterator[str]:
    """All tokens an example contributes to the vocabulary."""
    yield from e.story_tokens
    for bp in e.breakpoints:
        for prop in bp.propositions:
            yield from tokenize(prop.text)
    for qa in e.qa:
        yield from tokenize(qa.question)
        yield from tokenize(qa.answer)


#: Type-tag tokens emitted by the abstraction targets; appended to every
#: vocabulary after the corpus tokens so they are never [UNK] at train time.
GENERATION_TAG_TOKENS = ("PERSON", "OBJECT", "LOCATION")


def build_vocab(d: Dataset) -> Vocab:
    """Frequency-then-lexicographic vocabulary over every text field."""
    if not d.examples:
        raise DatasetError("cannot build a vocabulary from an empty dataset")
    counts: Counter[str] = Counter()
    for e in d.examples:
        for tok in example_tokens(e):
            if tok not in RESERVED_TOKENS:
                counts[tok] += 1
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    tags = tuple(t for t in GENERATION_TAG_TOKENS if t not in counts)
    return Vocab(tokens=RESERVED_TOKENS + tuple(ordered) + tags)


def _example_record(e: Example) -> dict:
    return {
        "id": e.id,
        "story": detokenize(e.story_tokens),
        "breakpoints": [
            {
                "index": bp.index,
                "propositions": [
                    {"text": p.text, "label": p.label.value} for p in bp.propositions
                ],
            }
            for bp in e.breakpoints
        ],
        "constraints": list(e.constraints),
        "qa": [{"question": q.question, "answer": q.answer} for q in e.qa],
        "meta": {k: e.meta[k] for k in sorted(e.meta)},
    }


def example_from_record(rec: dict) -> Example:
    story_tokens = tuple(rec["story"].split(" ")) if rec["story"] else ()
    positions = [i for i, t in enumerate(story_tokens) if t == BREAK_TOKEN]
    raw_bps = rec["breakpoints"]
    if len(positions) != len(raw_bps):
        raise DatasetError(
            f"example {rec.get('id', '?')}: {len(positions)} marker tokens "
            f"but {len(raw_bps)} breakpoint annotations"
        )
    breakpoints = []
    for ordinal, (pos, raw) in enumerate(zip(positions, raw_bps), start=1):
        if raw["index"] != ordinal:
            raise DatasetError(
                f"example {rec.get('id', '?')}: breakpoint index {raw['index']} "
                f"out of order (expected {ordinal})"
            )
        props = tuple(
            Proposition(text=p["text"], label=TruthLabel.from_str(p["label"]))
            for p in raw["propositions"]
        )
        breakpoints.append(
            BreakpointAnnotation(index=ordinal, token_position=pos, propositions=props)
        )
    return Example(
        id=rec["id"],
        story_tokens=story_tokens,
        breakpoints=tuple(breakpoints),
        constraints=tuple(rec.get("constraints", ())),
        qa=tuple(QAPair(q["question"], q["answer"]) for q in rec.get("qa", ())),
        meta=dict(rec.get("meta", {})),
    )


def save_dataset(d: Dataset, path: str | Path) -> None:
    """One example per line, fixed key order, UTF-8; byte-deterministic."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for e in d.examples:
            fh.write(json.dumps(_example_record(e), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def load_dataset(path: str | Path) -> Dataset:
    """Parse and validate a JSON Lines dataset; rejects on the first bad line."""
    path = Path(path)
    examples: list[Example] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({err.msg})") from err
            try:
                e = example_from_record(rec)
            except (KeyError, TypeError) as err:
                raise DatasetError(f"{path}:{lineno}: missing field {err}") from err
            violations = validate_example(e)
            if violations:
                raise DatasetError(f"{path}:{lineno}: example {e.id}: {violations[0]}")
            if e.id in seen_ids:
                raise DatasetError(f"{path}:{lineno}: duplicate example id {e.id}")
            seen_ids.add(e.id)
            examples.append(e)
    return Dataset(examples=examples)


def validate_example(e: Example) -> list[str]:
    """Every invariant violation, as human-readable strings; [] means valid."""
    from . import constraints as _constraints  # deferred: constraints imports corpus

    out: list[str] = []
    positions = [i for i, t in enumerate(e.story_tokens) if t == BREAK_TOKEN]
    if len(positions) != len(e.breakpoints):
        out.append(
            f"{len(positions)} marker tokens in story but {len(e.breakpoints)} breakpoints"
        )
        return out
    for ordinal, (pos, bp) in enumerate(zip(positions, e.breakpoints), start=1):
        if bp.index != ordinal:
            out.append(f"breakpoint ordinal {bp.index} != expected {ordinal}")
        if bp.token_position != pos:
            out.append(
                f"breakpoint {ordinal} token_position {bp.token_position} != marker at {pos}"
            )
        for prop in bp.propositions:
            if not prop.text:
                out.append(f"breakpoint {ordinal}: empty proposition text")
            elif BREAK_TOKEN in tokenize(prop.text):
                out.append(
                    f"breakpoint {ordinal}: proposition {prop.text!r} contains a marker token"
                )
    for qa in e.qa:
        if not qa.answer:
            out.append(f"QA pair {qa.question!r} has an empty answer")

    texts_at = {bp.index: {p.text for p in bp.propositions} for bp in e.breakpoints}
    gold = e.gold_assignment()
    for src in e.constraints:
        try:
            expr = _constraints.parse_constraint(src)
        except _constraints.ConstraintError as err:
            out.append(f"constraint {src!r}: {err}")
            continue
        bad_atom = False
        for atom in _constraints.atoms_of(expr):
            if atom.breakpoint_index > len(e.breakpoints):
                out.append(
                    f"constraint references breakpoint {atom.breakpoint_index} "
                    f"but story has {len(e.breakpoints)}"
                )
                bad_atom = True
            elif atom.proposition_text not in texts_at.get(atom.breakpoint_index, ()):
                out.append(
                    f"constraint references {atom.proposition_text!r} absent at "
                    f"breakpoint {atom.breakpoint_index}"
                )
                bad_atom = True
        if bad_atom:
            continue
        if not _constraints.eval_constraint(expr, gold):
            out.append(f"gold labels violate constraint {src!r}")
    return out


@dataclass(frozen=True)
class SplitSpec:
    """Either a seeded ratio split or a meta-key holdout split.

    With ``by_key`` set, examples whose ``meta[by_key]`` is in ``test_values``
    all go to test; the rest are split train/dev by ``dev_fraction``.
    """

    ratios: tuple[float, float, float] | None = None
    by_key: str | None = None
    test_values: frozenset = frozenset()
    dev_fraction: float = 0.0
    seed: int = 0


def split_dataset(d: Dataset, policy: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    if (policy.ratios is None) == (policy.by_key is None):
        raise DatasetError("split policy must set exactly one of ratios / by_key")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(policy.seed)))
    if policy.ratios is not None:
        order = list(rng.permutation(len(d.examples)))
        n = len(order)
        n_dev = int(n * policy.ratios[1])
        n_test = int(n * policy.ratios[2])
        n_train = n - n_dev - n_test
        idx_train = sorted(order[:n_train])
        idx_dev = sorted(order[n_train : n_train + n_dev])
        idx_test = sorted(order[n_train + n_dev :])
    else:
        test_idx = [
            i for i, e in enumerate(d.examples)
            if e.meta.get(policy.by_key) in policy.test_values
        ]
        rest = [i for i in range(len(d.examples)) if i not in set(test_idx)]
        order = [rest[i] for i in rng.permutation(len(rest))]
        n_dev = int(len(rest) * policy.dev_fraction)
        idx_dev = sorted(order[:n_dev])
        idx_train = sorted(order[n_dev:])
        idx_test = test_idx
    if not idx_train:
        raise DatasetError("split policy selects an empty train set")
    pick = lambda idx: Dataset(examples=[d.examples[i] for i in idx], meta=dict(d.meta))
    return pick(idx_train), pick(idx_dev), pick(idx_test)


def example_rng(base_seed: int, example_index: int) -> np.random.Generator:
    """Named splittable PRNG: Philox keyed by (seed, example index)."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(example_index,))
    return np.random.Generator(np.random.Philox(ss))
