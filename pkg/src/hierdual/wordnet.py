"""WordNet 3.0 noun hypernym DAG from the raw ``data.noun`` / ``index.noun`` database files."""

from __future__ import annotations

from typing import Iterable, Iterator, Optional, TextIO

from .hierarchy import Hierarchy, HierarchyError

HYPERNYM_POINTERS = ("@", "@i")


def _records(lines: Iterable[str]) -> Iterator[list[str]]:
    for line in lines:
        # license header lines start with two spaces
        if not line or line[0] == " ":
            continue
        yield line.split(" | ", 1)[0].split()


def parse_data_noun(stream: TextIO) -> tuple[list[str], list[str], list[tuple[str, str]]]:
    """Synset offsets in file order, each synset's first lemma, and ``(child, parent)`` hypernym edges.

    Both ordinary (``@``) and instance (``@i``) hypernym pointers become edges.
    """
    offsets, lemmas, edges = [], [], []
    for lineno, fields in enumerate(_records(stream), start=1):
        try:
            offset = fields[0]
            words = int(fields[3], 16)
            lemma = fields[4].lower()
            pos = 4 + 2 * words
            count = int(fields[pos])
            pos += 1
            for _ in range(count):
                symbol, target, target_pos = fields[pos], fields[pos + 1], fields[pos + 2]
                if symbol in HYPERNYM_POINTERS and target_pos == "n":
                    edges.append((offset, target))
                pos += 4
        except (IndexError, ValueError):
            raise HierarchyError(f"malformed data.noun record {lineno}") from None
        offsets.append(offset)
        lemmas.append(lemma)
    return offsets, lemmas, edges


def parse_index_noun(stream: TextIO) -> dict[str, int]:
    """Sense numbers keyed by ``"lemma offset"``; senses are numbered from 1 in index order."""
    senses = {}
    for fields in _records(stream):
        lemma = fields[0]
        synset_cnt = int(fields[2])
        for rank, offset in enumerate(fields[-synset_cnt:], start=1):
            senses[f"{lemma} {offset}"] = rank
    return senses


def load_wordnet_nouns(
    data_noun: TextIO, index_noun: Optional[TextIO] = None, cap: Optional[int] = None
) -> Hierarchy:
    """Noun hypernym hierarchy: one node per synset, edges from each synset to its hypernyms.

    With ``index_noun`` nodes are labelled ``lemma.n.NN`` (first lemma and
    its sense number); otherwise ``n<offset>``.
    """
    offsets, lemmas, edges = parse_data_noun(data_noun)
    if not offsets:
        raise HierarchyError("empty data.noun")
    position = {off: i for i, off in enumerate(offsets)}
    if index_noun is not None:
        senses = parse_index_noun(index_noun)
        labels = []
        for off, lemma in zip(offsets, lemmas):
            rank = senses.get(f"{lemma} {off}")
            labels.append(f"{lemma}.n.{rank:02d}" if rank else f"n{off}")
    else:
        labels = [f"n{off}" for off in offsets]
    try:
        pairs = [(position[c], position[p]) for c, p in edges]
    except KeyError as exc:
        raise HierarchyError(f"hypernym pointer to unknown synset {exc.args[0]}") from None
    return Hierarchy.from_edges(len(offsets), pairs, labels=labels, cap=cap)
