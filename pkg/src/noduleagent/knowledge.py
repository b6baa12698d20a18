"""noduleagent/knowledge.py.

Graph retrieval over a pathology corpus: documents are segmented into
sentences, an extractor pulls glossary entities out of every sentence, terms
that co-occur in a sentence are joined by an edge weighted by the number of
such sentences, communities of the term graph are summarized, and queries
are answered from the best-overlapping community summaries.
"""

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from os.path import basename, splitext
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import retworkx

from noduleagent.exceptions import DataError
from noduleagent.static.prompts import COMMUNITY_PROMPT, EXTRACT_PROMPT, RETRIEVAL_PROMPT
from noduleagent.static.vocabulary import GLOSSARY
from noduleagent.utilities import (
    dump_json,
    find_phrase,
    memoized_property,
    stem_all,
    tokenize,
)

logger = logging.getLogger(__name__)

MAX_PROPAGATION_ROUNDS = 100
SUPPORTING_SENTENCES = 3
DEFAULT_TOP_K = 3

_SENTENCE_BREAK = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class Sentence:
    sentence_id: int
    doc_id: str
    text: str


@dataclass
class Document:
    doc_id: str
    title: str
    text: str
    sentence_ids: List[int] = field(default_factory=list)


@dataclass
class Corpus:
    documents: List[Document] = field(default_factory=list)
    sentences: List[Sentence] = field(default_factory=list)

    def add_document(self, doc_id, text, title=None):
        if any(d.doc_id == doc_id for d in self.documents):
            raise DataError(f"duplicate document id {doc_id!r}")
        lines = text.splitlines()
        headings = [l.lstrip("#").strip() for l in lines if l.startswith("#")]
        body = " ".join(" ".join(l for l in lines if not l.startswith("#")).split())

        title = title or (headings[0] if headings else doc_id)
        document = Document(doc_id=doc_id, title=title, text=text)
        for piece in _SENTENCE_BREAK.split(body) if body else []:
            sentence = Sentence(len(self.sentences), doc_id, piece)
            self.sentences.append(sentence)
            document.sentence_ids.append(sentence.sentence_id)
        self.documents.append(document)
        return document


def ingest_documents(paths: Sequence[str]) -> Corpus:
    """Reads plain-text or Markdown files; the file stem is the document id
    and the first heading, when present, the title."""
    corpus = Corpus()
    for path in paths:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except (OSError, UnicodeDecodeError) as err:
            raise DataError(f"unreadable document {path}: {err}") from err
        corpus.add_document(splitext(basename(path))[0], text)
    logger.info(
        "ingested %d documents, %d sentences", len(corpus.documents), len(corpus.sentences)
    )
    return corpus


def match_terms(text: str, glossary: Sequence[str] = GLOSSARY) -> List[str]:
    """Glossary terms occurring in `text`, sorted.

    Matching is on stemmed tokens, case-insensitive, longest term first where
    terms overlap ("adenocarcinoma in situ" hides "adenocarcinoma").
    """
    tokens = stem_all(tokenize(text))
    spans = []
    for term in glossary:
        stems = stem_all(tokenize(term))
        for start in find_phrase(tokens, stems):
            spans.append((start, -len(stems), term))
    found, covered = set(), 0
    for start, negative_width, term in sorted(spans):
        if start >= covered:
            found.add(term)
            covered = start - negative_width
    return sorted(found)


class LexiconExtractor:
    """Entities are the glossary terms of a sentence; every pair of them is
    related by that sentence."""

    def __init__(self, glossary: Sequence[str] = GLOSSARY):
        self.glossary = tuple(glossary)

    def extract(self, sentence: Sentence) -> Tuple[List[str], List[Tuple[str, str]]]:
        entities = match_terms(sentence.text, self.glossary)
        pairs = [(a, b) for i, a in enumerate(entities) for b in entities[i + 1 :]]
        return entities, pairs


class LLMExtractor:
    """Entities and relations come from an `extractor` backend."""

    def __init__(self, backend):
        self.backend = backend

    def extract(self, sentence: Sentence):
        response = self.backend.call(
            {
                "prompt": EXTRACT_PROMPT.format(
                    sentence_id=sentence.sentence_id, text=sentence.text
                ),
                "sentence_id": sentence.sentence_id,
                "text": sentence.text,
            }
        )
        entities = sorted({e.strip().lower() for e in response["entities"] if e.strip()})
        pairs = [(a.strip().lower(), b.strip().lower()) for a, b in response["relations"]]
        return entities, [(a, b) for a, b in pairs if a != b]


@dataclass
class CommunitySummary:
    community_id: int
    terms: List[str]
    text: str


@dataclass
class KnowledgeGraph:
    """Entities are indexed by position in `entities`, which is sorted.
    `relations` maps an ordered id pair to the sorted ids of the sentences
    supporting it; the weight of a relation is their number.

    NOTE: This object is meant to be read-only after instantiation.
    """

    entities: List[str]
    relations: Dict[Tuple[int, int], List[int]]
    sentences: Dict[int, str]
    communities: List[List[int]] = field(default_factory=list)

    def weight(self, a, b):
        return len(self.relations.get((min(a, b), max(a, b)), []))

    def entity_id(self, term):
        return self.entities.index(term)

    @memoized_property
    def pygraph(self):
        graph = retworkx.PyGraph()
        graph.add_nodes_from(list(self.entities))
        for (a, b), sentence_ids in sorted(self.relations.items()):
            graph.add_edge(a, b, len(sentence_ids))
        return graph


def build_graph(corpus: Corpus, extractor=None) -> KnowledgeGraph:
    extractor = extractor or LexiconExtractor()
    extracted = [(s, *extractor.extract(s)) for s in corpus.sentences]

    terms = set()
    for _, entities, pairs in extracted:
        terms.update(entities)
        terms.update(t for pair in pairs for t in pair)
    terms = sorted(terms)
    ids = {term: index for index, term in enumerate(terms)}

    support: Dict[Tuple[int, int], set] = {}
    for sentence, _, pairs in extracted:
        for a, b in pairs:
            key = (min(ids[a], ids[b]), max(ids[a], ids[b]))
            if key[0] != key[1]:
                support.setdefault(key, set()).add(sentence.sentence_id)

    relations = {key: sorted(sentence_ids) for key, sentence_ids in support.items()}
    used = {sid for sentence_ids in relations.values() for sid in sentence_ids}
    graph = KnowledgeGraph(
        entities=terms,
        relations=relations,
        sentences={s.sentence_id: s.text for s in corpus.sentences if s.sentence_id in used},
    )
    graph.communities = detect_communities(graph)
    logger.info(
        "knowledge graph: %d entities, %d relations, %d communities",
        len(terms),
        len(relations),
        len(graph.communities),
    )
    return graph


def detect_communities(graph: KnowledgeGraph) -> List[List[int]]:
    """Deterministic label propagation.

    Every entity starts with its own id as label.  Entities are visited in id
    order and adopt the label with the largest total edge weight among their
    neighbours, ties going to the smallest label, until nothing changes or
    the round cap is hit.  Propagation runs per connected component, so a
    community never spans two components.
    """
    pygraph = graph.pygraph
    labels = {node: node for node in pygraph.node_indexes()}
    for component in retworkx.connected_components(pygraph):
        members = sorted(component)
        for _ in range(MAX_PROPAGATION_ROUNDS):
            changed = False
            for node in members:
                weights = Counter()
                for neighbor, weight in pygraph.adj(node).items():
                    weights[labels[neighbor]] += weight
                if not weights:
                    continue
                top = max(weights.values())
                label = min(l for l, w in weights.items() if w == top)
                if label != labels[node]:
                    labels[node] = label
                    changed = True
            if not changed:
                break

    communities: Dict[int, List[int]] = {}
    for node in sorted(labels):
        communities.setdefault(labels[node], []).append(node)
    return sorted(communities.values(), key=lambda members: members[0])


def summarize_communities(graph: KnowledgeGraph, partition, backend) -> List[CommunitySummary]:
    """One summary per community, from its terms and its most-supported
    sentences (by the number of community relations they back)."""
    summaries = []
    for community_id, members in enumerate(partition):
        member_set = set(members)
        backing = Counter()
        for (a, b), sentence_ids in graph.relations.items():
            if a in member_set and b in member_set:
                backing.update(sentence_ids)
        top = sorted(backing, key=lambda sid: (-backing[sid], sid))[:SUPPORTING_SENTENCES]
        terms = [graph.entities[m] for m in members]
        sentences = [graph.sentences[sid] for sid in top]
        response = backend.call(
            {
                "prompt": COMMUNITY_PROMPT.format(
                    terms=", ".join(terms), sentences="\n".join(sentences)
                ),
                "task": "community",
                "terms": terms,
                "sentences": sentences,
            }
        )
        summaries.append(CommunitySummary(community_id, terms, response["text"]))
    return summaries


@dataclass
class KnowledgeAnswer:
    text: str
    citations: List[int]
    scores: Dict[int, int]

    def to_json(self):
        return {
            "text": self.text,
            "citations": list(self.citations),
            "scores": {str(k): v for k, v in self.scores.items()},
        }


def overlap_scores(query: str, summaries: Sequence[CommunitySummary]) -> Dict[int, int]:
    """Number of member terms of each community that the query mentions."""
    query_stems = set(stem_all(tokenize(query)))
    scores = {}
    for summary in summaries:
        scores[summary.community_id] = sum(
            1
            for term in summary.terms
            if set(stem_all(tokenize(term))) <= query_stems
        )
    return scores


def answer_query(
    query: str,
    summaries: Sequence[CommunitySummary],
    nodule_image: Optional[np.ndarray],
    backend,
    top_k: int = DEFAULT_TOP_K,
) -> KnowledgeAnswer:
    """Ranks communities by term overlap with the query (ties to the smaller
    id) and answers from the `top_k` best summaries.  Retrieval is textual;
    the nodule image only accompanies the backend call."""
    if top_k < 1:
        raise ValueError(f"top_k must be positive, got {top_k}")
    if not summaries:
        raise DataError("no community summaries to answer from")

    scores = overlap_scores(query, summaries)
    ranked = sorted(summaries, key=lambda s: (-scores[s.community_id], s.community_id))
    chosen = ranked[:top_k]
    images = {} if nodule_image is None else {"nodule": np.asarray(nodule_image)}
    response = backend.call(
        {
            "prompt": RETRIEVAL_PROMPT.format(
                keywords=query, summaries="\n".join(s.text for s in chosen)
            ),
            "images": images,
            "task": "answer",
            "query": query,
            "summaries": [
                {"community_id": s.community_id, "terms": s.terms, "text": s.text}
                for s in chosen
            ],
        }
    )
    return KnowledgeAnswer(
        text=response["text"],
        citations=[s.community_id for s in chosen],
        scores={s.community_id: scores[s.community_id] for s in chosen},
    )


class KnowledgeBase:
    """A built graph together with its community summaries."""

    def __init__(self, graph: KnowledgeGraph, summaries: List[CommunitySummary]):
        self.graph = graph
        self.summaries = summaries

    @classmethod
    def build(cls, corpus: Corpus, summarizer, extractor=None):
        graph = build_graph(corpus, extractor)
        return cls(graph, summarize_communities(graph, graph.communities, summarizer))

    def answer(self, query, nodule_image, backend, top_k=DEFAULT_TOP_K):
        return answer_query(query, self.summaries, nodule_image, backend, top_k)


def save_graph(knowledge: KnowledgeBase, path):
    graph = knowledge.graph
    dump_json(
        {
            "entities": [
                {"entity_id": i, "term": term} for i, term in enumerate(graph.entities)
            ],
            "relations": [
                {"source": a, "target": b, "weight": len(sids), "sentence_ids": sids}
                for (a, b), sids in sorted(graph.relations.items())
            ],
            "sentences": {str(k): v for k, v in sorted(graph.sentences.items())},
            "communities": graph.communities,
            "summaries": [
                {"community_id": s.community_id, "terms": s.terms, "text": s.text}
                for s in knowledge.summaries
            ],
        },
        path,
    )
    return path


def load_graph(path) -> KnowledgeBase:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        entities = [e["term"] for e in sorted(data["entities"], key=lambda e: e["entity_id"])]
        graph = KnowledgeGraph(
            entities=entities,
            relations={
                (r["source"], r["target"]): list(r["sentence_ids"]) for r in data["relations"]
            },
            sentences={int(k): v for k, v in data["sentences"].items()},
            communities=[list(c) for c in data["communities"]],
        )
        summaries = [CommunitySummary(**s) for s in data["summaries"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise DataError(f"unreadable knowledge graph {path}: {err}") from err
    return KnowledgeBase(graph, summaries)
