"""Examples, vocabularies and the JSON-lines corpus format."""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence, Union

from .numeric import rng_for

PAD, UNK, MASK, SEP = "[PAD]", "[UNK]", "[MASK]", "[SEP]"
RESERVED = (PAD, UNK, MASK, SEP)
NONE_VALUE = "none"
SPLITS = ("train", "validation", "test")
DEFAULT_MAX_TOKENS = 128

_TOKEN_RE = re.compile(r"\[[A-Z]+\]|\w+|[^\w\s]")


class CorpusError(ValueError):
    """Malformed corpus line."""


class SchemaError(ValueError):
    """Record that parses but violates the ontology or split rules."""


class SplitError(ValueError):
    pass


class TaskKind(str, enum.Enum):
    INTENT = "intent"
    DST = "dst"
    DIALOG_ACT = "dialog_act"
    RESPONSE_SELECTION = "response_selection"


def tokenize(text: str) -> list[str]:
    """Lowercase word/punctuation split; bracketed upper-case specials are kept."""
    return [t if t.startswith("[") and t.endswith("]") and len(t) > 2 else t.lower()
            for t in _TOKEN_RE.findall(text)]


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(self._itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self._stoi.get(token)
        if idx is None:
            idx = len(self._itos)
            self._itos.append(token)
            self._stoi[token] = idx
        return idx

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token):
        return token in self._stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._itos == other._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(t) for t in tokens)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self._itos)

    pad_id = property(lambda self: 0)
    unk_id = property(lambda self: 1)
    mask_id = property(lambda self: 2)
    sep_id = property(lambda self: 3)

    @property
    def reserved_ids(self) -> tuple[int, ...]:
        return tuple(range(len(RESERVED)))


# Label values. Each task kind has exactly one label type.

@dataclass(frozen=True)
class SingleClass:
    index: int


@dataclass(frozen=True)
class MultiLabel:
    active: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(sorted(set(int(a) for a in self.active))))


@dataclass(frozen=True)
class SlotAssignment:
    """One value index per (domain, slot) pair; unmentioned pairs hold the none value."""
    values: tuple[int, ...]


@dataclass(frozen=True)
class ResponseRef:
    index: int


LabelValue = Union[SingleClass, MultiLabel, SlotAssignment, ResponseRef]

_LABEL_TYPE = {
    TaskKind.INTENT: SingleClass,
    TaskKind.DIALOG_ACT: MultiLabel,
    TaskKind.DST: SlotAssignment,
    TaskKind.RESPONSE_SELECTION: ResponseRef,
}


@dataclass(frozen=True)
class Example:
    id: str
    tokens: tuple[int, ...]
    label: LabelValue | None = None
    split: str = "train"
    candidate_pool: tuple[int, ...] | None = None
    is_dialog: bool = False

    def with_label(self, label):
        return replace(self, label=label)


@dataclass(frozen=True)
class SlotPair:
    domain: str
    slot: str
    values: tuple[str, ...]

    @property
    def none_index(self) -> int:
        return self.values.index(NONE_VALUE)


@dataclass(frozen=True)
class Ontology:
    task: TaskKind
    classes: tuple[str, ...] = ()
    out_of_scope: str | None = None
    da_intents: tuple[str, ...] = ()
    slots: tuple[SlotPair, ...] = ()
    responses: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Ontology":
        task = TaskKind(obj["task"])
        slots = []
        for s in obj.get("slots", ()):
            values = tuple(s["values"])
            if NONE_VALUE not in values:
                values = values + (NONE_VALUE,)
            slots.append(SlotPair(s["domain"], s["slot"], values))
        onto = cls(
            task=task,
            classes=tuple(obj.get("classes", ())),
            out_of_scope=obj.get("out_of_scope"),
            da_intents=tuple(obj.get("da_intents", ())),
            slots=tuple(slots),
            responses=tuple(obj.get("responses", ())),
        )
        if onto.out_of_scope is not None and onto.out_of_scope not in onto.classes:
            raise SchemaError(f"out_of_scope class {onto.out_of_scope!r} not among classes")
        return onto

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "classes": list(self.classes),
            "out_of_scope": self.out_of_scope,
            "da_intents": list(self.da_intents),
            "slots": [{"domain": s.domain, "slot": s.slot, "values": list(s.values)} for s in self.slots],
            "responses": list(self.responses),
        }

    @property
    def oos_index(self) -> int | None:
        return None if self.out_of_scope is None else self.classes.index(self.out_of_scope)

    def texts(self) -> list[str]:
        out = [v for s in self.slots for v in s.values]
        out.extend(self.responses)
        return out


@dataclass
class Dataset:
    task_kind: TaskKind
    examples: tuple[Example, ...]
    ontology: Ontology
    vocab: Vocab
    max_tokens: int = DEFAULT_MAX_TOKENS
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def split(self, name: str) -> list[Example]:
        return [e for e in self.examples if e.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def validation(self):
        return self.split("validation")

    @property
    def test(self):
        return self.split("test")

    def labeled(self) -> list[Example]:
        return [e for e in self.examples if e.label is not None]

    def unlabeled(self) -> list[Example]:
        return [e for e in self.examples if e.label is None]

    @property
    def value_tokens(self) -> tuple[tuple[tuple[int, ...], ...], ...]:
        """Token ids of every ontology value, per (domain, slot) pair."""
        if "values" not in self._cache:
            self._cache["values"] = tuple(
                tuple(self.vocab.encode(tokenize(v)) or (self.vocab.unk_id,) for v in s.values)
                for s in self.ontology.slots
            )
        return self._cache["values"]

    @property
    def response_tokens(self) -> tuple[tuple[int, ...], ...]:
        if "responses" not in self._cache:
            self._cache["responses"] = tuple(
                self.vocab.encode(tokenize(r)) or (self.vocab.unk_id,) for r in self.ontology.responses
            )
        return self._cache["responses"]

    def n_outputs(self) -> int:
        kind = self.task_kind
        if kind is TaskKind.INTENT:
            return len(self.ontology.classes)
        if kind is TaskKind.DIALOG_ACT:
            return len(self.ontology.da_intents)
        if kind is TaskKind.DST:
            return len(self.ontology.slots)
        return len(self.ontology.responses)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.task_kind == other.task_kind
                and self.examples == other.examples and self.ontology == other.ontology
                and self.vocab == other.vocab and self.max_tokens == other.max_tokens)


def encode_text(vocab: Vocab, text: str | None = None, turns: Sequence[str] | None = None,
                max_tokens: int = DEFAULT_MAX_TOKENS) -> tuple[int, ...]:
    """Token ids for a single utterance or a dialog history.

    Turns are joined with ``[SEP]``; histories longer than ``max_tokens`` lose
    their oldest tokens first.
    """
    if turns is not None:
        toks: list[str] = []
        for i, turn in enumerate(turns):
            if i:
                toks.append(SEP)
            toks.extend(tokenize(turn))
    else:
        toks = tokenize(text or "")
    ids = vocab.encode(toks)
    return ids[-max_tokens:] if len(ids) > max_tokens else ids


# Label (de)serialization

def parse_label(raw, ontology: Ontology) -> LabelValue | None:
    if raw is None:
        return None
    kind = ontology.task
    if kind is TaskKind.INTENT:
        if not isinstance(raw, int) or isinstance(raw, bool) or not 0 <= raw < len(ontology.classes):
            raise SchemaError(f"intent label {raw!r} outside [0, {len(ontology.classes)})")
        return SingleClass(raw)
    if kind is TaskKind.DIALOG_ACT:
        n = len(ontology.da_intents)
        if not isinstance(raw, list) or not all(isinstance(a, int) and 0 <= a < n for a in raw):
            raise SchemaError(f"dialog-act label {raw!r} must list indices in [0, {n})")
        return MultiLabel(tuple(raw))
    if kind is TaskKind.DST:
        values = [s.none_index for s in ontology.slots]
        if not isinstance(raw, list):
            raise SchemaError(f"state label {raw!r} must be a list of pair/value objects")
        for item in raw:
            try:
                j, i = item["pair"], item["value"]
            except (TypeError, KeyError):
                raise SchemaError(f"malformed state entry {item!r}") from None
            if not 0 <= j < len(ontology.slots) or not 0 <= i < len(ontology.slots[j].values):
                raise SchemaError(f"state entry {item!r} outside the ontology")
            values[j] = i
        return SlotAssignment(tuple(values))
    if not isinstance(raw, int) or isinstance(raw, bool) or not 0 <= raw < len(ontology.responses):
        raise SchemaError(f"response label {raw!r} outside [0, {len(ontology.responses)})")
    return ResponseRef(raw)


def label_to_json(label: LabelValue | None, ontology: Ontology):
    if label is None:
        return None
    if isinstance(label, SingleClass):
        return label.index
    if isinstance(label, MultiLabel):
        return list(label.active)
    if isinstance(label, SlotAssignment):
        return [{"pair": j, "value": v} for j, v in enumerate(label.values)
                if v != ontology.slots[j].none_index]
    return label.index


def check_label(label: LabelValue | None, kind: TaskKind):
    if label is not None and not isinstance(label, _LABEL_TYPE[kind]):
        raise SchemaError(f"{type(label).__name__} label in a {kind.value} dataset")


# JSON-lines I/O

def _read_records(path: Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict) or "id" not in rec or ("text" not in rec and "turns" not in rec):
                raise CorpusError(f"{path}:{lineno}: record needs 'id' and 'text' or 'turns'")
            rec["_line"] = lineno
            records.append(rec)
    return records


def load_jsonl(path, ontology=None, vocab: Vocab | None = None,
               max_tokens: int = DEFAULT_MAX_TOKENS) -> Dataset:
    """Load a corpus file.

    ``ontology`` is an :class:`Ontology`, a mapping, or a path; by default the
    sibling ``<name>.ontology.json`` is used. Without a ``vocab`` one is built
    from the file and ontology texts in order of first appearance.
    """
    path = Path(path)
    if ontology is None:
        ontology = path.with_name(path.name.split(".")[0] + ".ontology.json")
    if isinstance(ontology, (str, Path)):
        with open(ontology, encoding="utf-8") as fh:
            ontology = json.load(fh)
    if not isinstance(ontology, Ontology):
        ontology = Ontology.from_dict(ontology)
    records = _read_records(path)

    if vocab is None:
        vocab = Vocab()
        for rec in records:
            for turn in rec.get("turns") or [rec.get("text", "")]:
                for t in tokenize(turn):
                    vocab.add(t)
        for text in ontology.texts():
            for t in tokenize(text):
                vocab.add(t)

    seen: set[str] = set()
    examples = []
    for rec in records:
        where = f"{path}:{rec['_line']}"
        ex_id = str(rec["id"])
        if ex_id in seen:
            raise SchemaError(f"{where}: duplicate id {ex_id!r}")
        seen.add(ex_id)
        split = rec.get("split", "train")
        if split not in SPLITS:
            raise SchemaError(f"{where}: unknown split {split!r}")
        try:
            label = parse_label(rec.get("label"), ontology)
        except SchemaError as exc:
            raise SchemaError(f"{where}: {exc}") from None
        tokens = encode_text(vocab, rec.get("text"), rec.get("turns"), max_tokens)
        if not tokens:
            raise SchemaError(f"{where}: example {ex_id!r} has no tokens")
        pool = rec.get("candidates")
        if pool is not None:
            if not all(isinstance(c, int) and 0 <= c < len(ontology.responses) for c in pool):
                raise SchemaError(f"{where}: candidate pool outside the response list")
            pool = tuple(pool)
        examples.append(Example(ex_id, tokens, label, split, pool, "turns" in rec))
    return Dataset(ontology.task, tuple(examples), ontology, vocab, max_tokens)


def example_to_record(ex: Example, dataset: Dataset) -> dict:
    words = dataset.vocab.decode(ex.tokens)
    rec: dict = {"id": ex.id}
    if ex.is_dialog:
        turns, cur = [], []
        for w in words:
            if w == SEP:
                turns.append(" ".join(cur))
                cur = []
            else:
                cur.append(w)
        turns.append(" ".join(cur))
        rec["turns"] = turns
    else:
        rec["text"] = " ".join(words)
    rec["label"] = label_to_json(ex.label, dataset.ontology)
    rec["split"] = ex.split
    if ex.candidate_pool is not None:
        rec["candidates"] = list(ex.candidate_pool)
    return rec


def save_jsonl(dataset: Dataset, path, ontology_path=None) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            fh.write(json.dumps(example_to_record(ex, dataset)) + "\n")
    if ontology_path is None:
        ontology_path = path.with_name(path.name.split(".")[0] + ".ontology.json")
    with open(ontology_path, "w", encoding="utf-8") as fh:
        json.dump(dataset.ontology.to_dict(), fh, indent=1)


# Few-shot splits

@dataclass(frozen=True)
class Split:
    labeled: tuple[Example, ...]
    unlabeled: tuple[Example, ...]
    # Ground truth of the unlabeled pool. Only evaluation code reads this.
    hidden: Mapping[str, LabelValue]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def few_shot_split(dataset: Dataset, labeled_fraction: float, seed: int) -> Split:
    """Sample the initial labeled pool from the labeled train examples.

    Intent datasets get at least one example per class. Train examples that
    were unlabeled in the file always go to the unlabeled pool.
    """
    if not 0 < labeled_fraction <= 1:
        raise SplitError(f"labeled fraction {labeled_fraction} outside (0, 1]")
    train = [e for e in dataset.train if e.label is not None]
    native_unlabeled = [e for e in dataset.train if e.label is None]
    if not train:
        raise SplitError("no labeled train examples")
    target = max(1, round_half_up(labeled_fraction * len(train)))
    rng = rng_for(seed, "few-shot-split")
    order = rng.permutation(len(train))

    chosen: list[int] = []
    if dataset.task_kind is TaskKind.INTENT:
        n_classes = len(dataset.ontology.classes)
        first_of: dict[int, int] = {}
        for i in order:
            first_of.setdefault(train[i].label.index, int(i))
        if len(first_of) < n_classes or target < n_classes:
            missing = n_classes - len(first_of)
            raise SplitError(
                f"cannot place one example per class: {target} slots for {n_classes} classes"
                + (f", {missing} classes absent from train" if missing else ""))
        chosen = list(first_of.values())
    picked = set(chosen)
    for i in order:
        if len(chosen) >= target:
            break
        if int(i) not in picked:
            chosen.append(int(i))
            picked.add(int(i))

    labeled_idx = sorted(picked)
    labeled = tuple(train[i] for i in labeled_idx)
    rest = [train[i] for i in range(len(train)) if i not in picked]
    unlabeled = tuple(e.with_label(None) for e in rest) + tuple(native_unlabeled)
    hidden = MappingProxyType({e.id: e.label for e in rest})
    return Split(labeled, unlabeled, hidden)
