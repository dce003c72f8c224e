"""Knowledge-graph data model: loading, inverse-relation augmentation, filtering.

Datasets are tab-separated files: triples `head⇥relation⇥tail[⇥YYYY-MM-DD]`,
entity text `id⇥name⇥description`, relation text `id⇥name[⇥description]`.
Id assignment is first-appearance order over (train, valid, test, text files)
so identical input files always yield identical id tables.
"""

from __future__ import annotations

import datetime
import os
from collections import defaultdict
from dataclasses import dataclass, field


class DataError(ValueError):
    """Malformed dataset input; message carries file and line number."""


INVERSE_NAME_SUFFIX = " inverse"

TRAIN_FILE = "train.txt"
VALID_FILE = "valid.txt"
TEST_FILE = "test.txt"
ENTITY_TEXT_FILE = "entity_text.tsv"
RELATION_TEXT_FILE = "relation_text.tsv"


@dataclass(frozen=True)
class Fact:
    head: int
    relation: int
    tail: int
    meta: str | None = None  # "YYYY-MM-DD" day-precision timestamp


@dataclass
class TextRecord:
    name: str = ""
    description: str = ""


class IdTable:
    """Stable string-key -> dense-id table, first-appearance order."""

    def __init__(self):
        self.key_to_id: dict[str, int] = {}
        self.keys: list[str] = []

    def intern(self, key):
        i = self.key_to_id.get(key)
        if i is None:
            i = len(self.keys)
            self.key_to_id[key] = i
            self.keys.append(key)
        return i

    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return key in self.key_to_id


@dataclass
class KnowledgeGraph:
    entities: IdTable
    relations: IdTable
    train: list[Fact]
    valid: list[Fact]
    test: list[Fact]
    entity_text: list[TextRecord]
    relation_text: list[TextRecord]
    temporal: bool
    augmented: bool = False
    n_raw_relations: int = 0

    @property
    def n_entities(self):
        return len(self.entities)

    @property
    def n_relations(self):
        return len(self.relations)

    def inverse_of(self, rel_id):
        """Involution pairing each raw relation id with its inverse id."""
        if not self.augmented:
            raise ValueError("graph not augmented; inverse ids do not exist yet")
        r = self.n_raw_relations
        return rel_id + r if rel_id < r else rel_id - r

    def all_facts(self):
        return self.train + self.valid + self.test


class FilterIndex:
    """(head, relation, meta) -> set of tails known true across all splits."""

    def __init__(self):
        self._index = defaultdict(set)

    def add(self, head, relation, meta, tail):
        self._index[(head, relation, meta)].add(tail)

    def candidates(self, head, relation, meta=None):
        return self._index.get((head, relation, meta), set())

    def __len__(self):
        return len(self._index)

    def items(self):
        return self._index.items()


def _parse_meta(token, path, lineno):
    try:
        datetime.date.fromisoformat(token)
    except ValueError:
        raise DataError(f"{path}:{lineno}: unparseable timestamp {token!r} (expected YYYY-MM-DD)") from None
    return token


def load_facts(path, temporal=False, entities=None, relations=None):
    """Parse a triples file into Facts, interning ids into the given tables."""
    if entities is None:
        entities = IdTable()
    if relations is None:
        relations = IdTable()
    if not os.path.exists(path):
        raise DataError(f"missing triples file: {path}")
    want = 4 if temporal else 3
    facts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != want:
                raise DataError(
                    f"{path}:{lineno}: expected {want} tab-separated columns, got {len(cols)}")
            h = entities.intern(cols[0])
            r = relations.intern(cols[1])
            t = entities.intern(cols[2])
            meta = _parse_meta(cols[3], path, lineno) if temporal else None
            facts.append(Fact(h, r, t, meta))
    return facts


def _load_text(path, table, records, max_cols, required=True):
    if not os.path.exists(path):
        if required:
            raise DataError(f"missing text file: {path}")
        return
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 2 or len(cols) > max_cols:
                raise DataError(
                    f"{path}:{lineno}: expected 2..{max_cols} tab-separated columns, got {len(cols)}")
            i = table.intern(cols[0])
            while len(records) <= i:
                records.append(TextRecord())
            records[i] = TextRecord(cols[1], cols[2] if len(cols) > 2 else "")


def load_dataset(data_dir, temporal=False):
    """Load a dataset directory into an unaugmented KnowledgeGraph.

    Enforces the transductive setting: every entity and relation used in
    valid/test must appear in at least one training fact.
    """
    entities, relations = IdTable(), IdTable()
    train = load_facts(os.path.join(data_dir, TRAIN_FILE), temporal, entities, relations)
    valid = load_facts(os.path.join(data_dir, VALID_FILE), temporal, entities, relations)
    test = load_facts(os.path.join(data_dir, TEST_FILE), temporal, entities, relations)

    seen_e = {f.head for f in train} | {f.tail for f in train}
    seen_r = {f.relation for f in train}
    bad_e = sorted({i for f in valid + test for i in (f.head, f.tail)} - seen_e)
    bad_r = sorted({f.relation for f in valid + test} - seen_r)
    if bad_e or bad_r:
        names = [entities.keys[i] for i in bad_e] + [relations.keys[i] for i in bad_r]
        raise DataError(
            "valid/test ids never seen in train (transductive setting required): "
            + ", ".join(names[:10]))

    entity_text: list[TextRecord] = []
    relation_text: list[TextRecord] = []
    _load_text(os.path.join(data_dir, ENTITY_TEXT_FILE), entities, entity_text, 3)
    _load_text(os.path.join(data_dir, RELATION_TEXT_FILE), relations, relation_text, 3)
    while len(entity_text) < len(entities):
        entity_text.append(TextRecord())
    while len(relation_text) < len(relations):
        relation_text.append(TextRecord())

    return KnowledgeGraph(entities, relations, train, valid, test,
                          entity_text, relation_text, temporal,
                          n_raw_relations=len(relations))


def augment_inverse(graph):
    """Give every raw relation a distinct inverse id; refuses to run twice.

    Inverse queries (?, r, t, m) are posed later as (t, r_inv, ?, m); this
    only extends the relation id space and text table.
    """
    if graph.augmented:
        raise ValueError("graph already augmented with inverse relations")
    n_raw = len(graph.relations)
    graph.n_raw_relations = n_raw
    for i in range(n_raw):
        key = graph.relations.keys[i]
        graph.relations.intern(key + "_inv")
        base = graph.relation_text[i]
        name = (base.name or key) + INVERSE_NAME_SUFFIX
        graph.relation_text.append(TextRecord(name, ""))
    graph.augmented = True
    return graph


def build_filter_index(graph):
    """Union of (query -> tail) pairs over all splits, both direction forms."""
    if not graph.augmented:
        raise ValueError("build_filter_index requires an augmented graph")
    index = FilterIndex()
    for fact in graph.all_facts():
        index.add(fact.head, fact.relation, fact.meta, fact.tail)
        index.add(fact.tail, graph.inverse_of(fact.relation), fact.meta, fact.head)
    return index


def expand_queries(graph, facts):
    """Both query directions for a fact list: (head, rel, target, meta, forward?)."""
    out = []
    for f in facts:
        out.append((f.head, f.relation, f.tail, f.meta, True))
        out.append((f.tail, graph.inverse_of(f.relation), f.head, f.meta, False))
    return out
