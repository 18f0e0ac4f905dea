"""Templated synthetic corpora standing in for the benchmark datasets.

Every generator is deterministic given its seed. The intent generator is the
one the end-to-end checks use: each class owns one keyword and a few topic
words, and utterances are filler templates with those slotted in. Topic pools
are disjoint, so the Bayes-optimal classifier is perfect even when the keyword
has been dropped by noise.
"""

from __future__ import annotations

from .corpus import (
    NONE_VALUE,
    Dataset,
    Example,
    MultiLabel,
    Ontology,
    ResponseRef,
    SingleClass,
    SlotAssignment,
    SlotPair,
    TaskKind,
    Vocab,
)
from .numeric import rng_for

MIN_FILLERS = 16


def _split_names(size, validation_size, test_size):
    validation_size = size // 10 if validation_size is None else validation_size
    test_size = size // 5 if test_size is None else test_size
    return ["train"] * size + ["validation"] * validation_size + ["test"] * test_size


def synth_generate(n_classes: int = 20, vocab_size: int = 200, templates_per_class: int = 4,
                   noise_rate: float = 0.25, size: int = 5000, seed: int = 0, *,
                   topic_words: int = 3, validation_size: int | None = None,
                   test_size: int | None = None, filler_keep: float = 0.7,
                   out_of_scope: bool = False) -> Dataset:
    """Intent corpus with ``size`` train examples plus validation/test splits.

    ``noise_rate`` is the chance an utterance loses its class keyword (the
    topic word still identifies the class). ``vocab_size`` counts content
    words, excluding reserved tokens.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    n_fillers = vocab_size - n_classes * (1 + topic_words)
    if n_fillers < MIN_FILLERS:
        raise ValueError(
            f"vocab_size {vocab_size} too small: {n_classes} classes x {1 + topic_words} class words "
            f"leave {n_fillers} fillers (< {MIN_FILLERS})")
    rng = rng_for(seed, "synth-intent")
    keywords = [f"kw{c}" for c in range(n_classes)]
    topics = [[f"tp{c}x{t}" for t in range(topic_words)] for c in range(n_classes)]
    fillers = [f"w{i}" for i in range(n_fillers)]
    vocab = Vocab(keywords + [w for ws in topics for w in ws] + fillers)

    # A template is a filler sentence with a keyword slot and a topic slot.
    templates = []
    for _ in range(n_classes):
        per_class = []
        for _ in range(templates_per_class):
            length = int(rng.integers(5, 9))
            slots = rng.choice(length, size=2, replace=False)
            words = [fillers[i] for i in rng.integers(0, n_fillers, size=length)]
            per_class.append((words, int(slots[0]), int(slots[1])))
        templates.append(per_class)

    classes = [f"intent_{c}" for c in range(n_classes)]
    if out_of_scope:
        classes.append("oos")
    n_labels = len(classes)
    splits = _split_names(size, validation_size, test_size)
    labels = [i % n_labels for i in range(len(splits))]
    labels = [labels[i] for i in rng.permutation(len(labels))]

    examples = []
    for i, (split, c) in enumerate(zip(splits, labels)):
        if c == n_classes:
            length = int(rng.integers(4, 8))
            words = [fillers[j] for j in rng.integers(0, n_fillers, size=length)]
        else:
            base, kw_pos, tp_pos = templates[c][int(rng.integers(templates_per_class))]
            words = [w if rng.random() < filler_keep else fillers[int(rng.integers(n_fillers))]
                     for w in base]
            words[tp_pos] = topics[c][int(rng.integers(topic_words))]
            if rng.random() >= noise_rate:
                words[kw_pos] = keywords[c]
        examples.append(Example(f"{split}-{i:05d}", vocab.encode(words), SingleClass(c), split))
    ontology = Ontology(TaskKind.INTENT, classes=tuple(classes),
                        out_of_scope="oos" if out_of_scope else None)
    return Dataset(TaskKind.INTENT, tuple(examples), ontology, vocab)


def _two_turn(rng, fillers, content, system_len=4):
    user = [fillers[int(j)] for j in rng.integers(0, len(fillers), size=int(rng.integers(2, 5)))]
    for w in content:
        user.insert(int(rng.integers(0, len(user) + 1)), w)
    system = [fillers[int(j)] for j in rng.integers(0, len(fillers), size=system_len)]
    return system + ["[SEP]"] + user


def synth_dialog_acts(n_acts: int = 6, size: int = 400, seed: int = 0, *, n_fillers: int = 40,
                      validation_size: int | None = None, test_size: int | None = None) -> Dataset:
    """Two-turn dialogs whose next system acts are cued by act keywords."""
    rng = rng_for(seed, "synth-da")
    cues = [f"act{a}" for a in range(n_acts)]
    fillers = [f"w{i}" for i in range(n_fillers)]
    vocab = Vocab(cues + fillers)
    examples = []
    for i, split in enumerate(_split_names(size, validation_size, test_size)):
        k = int(rng.integers(1, 3))
        active = sorted(int(a) for a in rng.choice(n_acts, size=k, replace=False))
        words = _two_turn(rng, fillers, [cues[a] for a in active])
        examples.append(Example(f"{split}-{i:05d}", vocab.encode(words), MultiLabel(tuple(active)),
                                split, is_dialog=True))
    ontology = Ontology(TaskKind.DIALOG_ACT, da_intents=tuple(f"da_{a}" for a in range(n_acts)))
    return Dataset(TaskKind.DIALOG_ACT, tuple(examples), ontology, vocab)


def synth_state_tracking(n_pairs: int = 3, values_per_pair: int = 4, size: int = 400, seed: int = 0, *,
                         n_fillers: int = 40, validation_size: int | None = None,
                         test_size: int | None = None) -> Dataset:
    """Dialogs that mention values for a random subset of (domain, slot) pairs."""
    rng = rng_for(seed, "synth-dst")
    slots = tuple(SlotPair("dom", f"slot{j}", tuple(f"v{j}x{i}" for i in range(values_per_pair)) + (NONE_VALUE,))
                  for j in range(n_pairs))
    fillers = [f"w{i}" for i in range(n_fillers)]
    vocab = Vocab([v for s in slots for v in s.values] + fillers)
    examples = []
    for i, split in enumerate(_split_names(size, validation_size, test_size)):
        values, content = [], []
        for s in slots:
            if rng.random() < 0.5:
                v = int(rng.integers(values_per_pair))
                content.append(s.values[v])
                values.append(v)
            else:
                values.append(s.none_index)
        words = _two_turn(rng, fillers, content)
        examples.append(Example(f"{split}-{i:05d}", vocab.encode(words), SlotAssignment(tuple(values)),
                                split, is_dialog=True))
    ontology = Ontology(TaskKind.DST, slots=slots)
    return Dataset(TaskKind.DST, tuple(examples), ontology, vocab)


def synth_response_selection(n_responses: int = 150, size: int = 400, seed: int = 0, *,
                             n_fillers: int = 40, validation_size: int | None = None,
                             test_size: int | None = None) -> Dataset:
    """Contexts that share a key word with their true response."""
    rng = rng_for(seed, "synth-rs")
    keys = [f"r{i}" for i in range(n_responses)]
    fillers = [f"w{i}" for i in range(n_fillers)]
    vocab = Vocab(keys + fillers)
    responses = tuple(" ".join([keys[i]] + [fillers[int(j)] for j in rng.integers(0, n_fillers, size=3)])
                      for i in range(n_responses))
    examples = []
    for i, split in enumerate(_split_names(size, validation_size, test_size)):
        r = int(rng.integers(n_responses))
        words = _two_turn(rng, fillers, [keys[r]])
        examples.append(Example(f"{split}-{i:05d}", vocab.encode(words), ResponseRef(r), split,
                                is_dialog=True))
    ontology = Ontology(TaskKind.RESPONSE_SELECTION, responses=responses)
    return Dataset(TaskKind.RESPONSE_SELECTION, tuple(examples), ontology, vocab)
