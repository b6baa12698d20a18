"""noduleagent/das.py.

The doctor agent system: K agents grade a nodule independently, then revise
in rounds after reading each other's opinions and a round summary, until
their grades are unanimous or the round cap is reached.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from noduleagent.backend import Backend, fanout, responses
from noduleagent.backend.fanout import DEFAULT_WORKERS
from noduleagent.exceptions import BackendError, ConfigError, DataError
from noduleagent.imaging import NoduleSize, focal_crop
from noduleagent.knowledge import KnowledgeAnswer, KnowledgeBase
from noduleagent.memory import CaseMemory
from noduleagent.radiologist import DEFAULT_MARGIN_FACTOR, CTReport, report_keywords
from noduleagent.static.prompts import AGENT_PROMPT, REVISE_PROMPT, ROUND_SUMMARY_PROMPT
from noduleagent.static.vocabulary import PERSONAS

logger = logging.getLogger(__name__)

SCHEMES = {
    "three-class": ("pre-invasive", "minimally-invasive", "invasive"),
    "two-class": ("benign", "malignant"),
}
"""Grading schemes, each listed from least to most severe."""

DEFAULT_MAX_ROUNDS = 4
FALLBACK_TOLERANCE = 1e-9
HISTORY_KINDS = ("Conversation", "Summary")


@dataclass(frozen=True)
class MalignancyGrade:
    scheme: str
    value: str

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise DataError(f"unknown grading scheme {self.scheme!r}")
        if self.value not in SCHEMES[self.scheme]:
            raise DataError(f"{self.value!r} is not a {self.scheme} grade")

    @property
    def severity(self):
        return SCHEMES[self.scheme].index(self.value)


def grade_from_lidc_score(score) -> MalignancyGrade:
    """Binarizes a 1-5 malignancy rating: above 3 is malignant."""
    if not 1 <= score <= 5:
        raise DataError(f"malignancy rating {score} outside 1-5")
    return MalignancyGrade("two-class", "malignant" if score > 3 else "benign")


@dataclass(frozen=True)
class AgentOpinion:
    agent_id: str
    round: int
    grade: MalignancyGrade
    rationale: str
    confidence: float
    citations: tuple = ()

    def to_json(self):
        return {
            "round": self.round,
            "agent_id": self.agent_id,
            "grade": self.grade.value,
            "confidence": self.confidence,
            "rationale": self.rationale,
            "citations": list(self.citations),
        }


@dataclass
class NoduleRecord:
    """What the agents see of a nodule: an image crop, its size, its report."""

    case_id: str
    image: np.ndarray
    size: NoduleSize
    report: CTReport

    @classmethod
    def from_detection(
        cls, case_id, volume, detection, report: CTReport, margin_factor=DEFAULT_MARGIN_FACTOR
    ):
        """The focal crop of the widest cross-section with the detection's
        size and `report`."""
        largest = max(detection.masks, key=lambda m: m.positive_count)
        crop = focal_crop(volume.slice(largest.z_index), largest, margin_factor)
        return cls(case_id=case_id, image=np.array(crop.pixels), size=detection.size, report=report)


@dataclass
class DASConfig:
    agents: List[Backend]
    summarizer: Backend
    scheme: str = "three-class"
    max_rounds: int = DEFAULT_MAX_ROUNDS
    top_k: int = 3
    workers: Optional[int] = DEFAULT_WORKERS

    def __post_init__(self):
        if not self.agents:
            raise ConfigError("the discussion needs at least one agent")
        if self.max_rounds < 1:
            raise ConfigError(f"max_rounds must be positive, got {self.max_rounds}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown grading scheme {self.scheme!r}")


@dataclass
class DiscussionState:
    case_id: str
    scheme: str
    opinions: List[List[AgentOpinion]] = field(default_factory=list)
    summaries: List[str] = field(default_factory=list)
    consensus_reached: bool = False
    knowledge: Optional[KnowledgeAnswer] = None
    history: List[int] = field(default_factory=list)

    @property
    def round(self):
        return len(self.opinions)

    @property
    def latest(self):
        return self.opinions[-1]

    def transcript(self, final=None):
        return {
            "case_id": self.case_id,
            "scheme": self.scheme,
            "knowledge": None if self.knowledge is None else self.knowledge.to_json(),
            "history": list(self.history),
            "events": [o.to_json() for round_ in self.opinions for o in round_],
            "summaries": [
                {"round": index + 1, "text": text} for index, text in enumerate(self.summaries)
            ],
            "consensus": self.consensus_reached,
            "final": None if final is None else final.to_json(),
        }


@dataclass(frozen=True)
class FinalDiagnosis:
    grade: MalignancyGrade
    summary: str
    rounds_used: int
    consensus: bool

    @property
    def fallback(self):
        return not self.consensus

    def to_json(self):
        return {
            "grade": self.grade.value,
            "scheme": self.grade.scheme,
            "summary": self.summary,
            "rounds_used": self.rounds_used,
            "consensus": self.consensus,
            "fallback": self.fallback,
        }


def persona(index):
    return PERSONAS[index % len(PERSONAS)]


def _opinions_from(agents, replies, round_, scheme):
    return [
        AgentOpinion(
            agent_id=agent.backend_id,
            round=round_,
            grade=MalignancyGrade(scheme, reply["grade"]),
            rationale=reply["rationale"],
            confidence=float(reply["confidence"]),
            citations=tuple(reply["citations"]),
        )
        for agent, reply in zip(agents, replies)
    ]


def _context(record: NoduleRecord, state: DiscussionState):
    knowledge = state.knowledge
    return {
        "images": {"nodule": record.image},
        "grades": list(SCHEMES[state.scheme]),
        "size": record.size.to_json(),
        "report": record.report.text,
        "attributes": record.report.attributes.to_json(),
        "knowledge": {
            "text": "" if knowledge is None else knowledge.text,
            "citations": [] if knowledge is None else list(knowledge.citations),
        },
        "history": list(state.history),
    }


def retrieve_knowledge(record: NoduleRecord, knowledge: Optional[KnowledgeBase], backend, top_k):
    """Queries the knowledge base with the report's diagnostic keywords."""
    if knowledge is None or not knowledge.summaries:
        return None
    query = " ".join(report_keywords(record.report)) or "lung nodule"
    return knowledge.answer(query, record.image, backend, top_k)


def initial_opinions(agents, record: NoduleRecord, state: DiscussionState, workers=DEFAULT_WORKERS):
    """Round-1 opinions, one per agent, in agent order."""
    context = _context(record, state)
    size = record.size
    history_text = ", ".join(f"#{s}" for s in state.history) or "none"

    def build(index):
        return {
            **context,
            "prompt": AGENT_PROMPT.format(
                persona=persona(index),
                grades=", ".join(context["grades"]),
                long_mm=size.long_diameter_mm,
                short_mm=size.short_diameter_mm,
                height_mm=size.height_mm,
                report=record.report.text,
                knowledge=context["knowledge"]["text"] or "none",
                history=history_text,
            ),
            "agent_index": index,
            "round": 1,
            "persona": persona(index),
            "own": None,
            "peers": [],
            "summary": "",
        }

    replies = responses(fanout(agents, build, workers))
    return _opinions_from(agents, replies, 1, state.scheme)


def _format_peers(opinions):
    return "\n".join(
        f"[{o.agent_id}] {o.grade.value} ({o.confidence:.2f}): {o.rationale}" for o in opinions
    )


def revise(agents, record: NoduleRecord, state: DiscussionState, round_, workers=DEFAULT_WORKERS):
    """Round-`round_` opinions: each agent sees its own previous opinion, its
    peers' previous opinions and the previous round summary."""
    if round_ < 2 or state.round != round_ - 1:
        raise ValueError(f"cannot revise into round {round_} from round {state.round}")
    previous = state.latest
    context = _context(record, state)

    def build(index):
        peers = [o for j, o in enumerate(previous) if j != index]
        return {
            **context,
            "prompt": REVISE_PROMPT.format(
                round=round_,
                own=f"{previous[index].grade.value} ({previous[index].confidence:.2f})",
                peers=_format_peers(peers),
                summary=state.summaries[-1],
            ),
            "agent_index": index,
            "round": round_,
            "persona": persona(index),
            "own": previous[index].to_json(),
            "peers": [o.to_json() for o in peers],
            "summary": state.summaries[-1],
        }

    replies = responses(fanout(agents, build, workers))
    return _opinions_from(agents, replies, round_, state.scheme)


def summarize_round(summarizer: Backend, opinions: Sequence[AgentOpinion]) -> str:
    if not opinions:
        raise ValueError("cannot summarize a round without opinions")
    round_ = opinions[0].round
    response = summarizer.call(
        {
            "prompt": ROUND_SUMMARY_PROMPT.format(
                count=len(opinions), round=round_, opinions=_format_peers(opinions)
            ),
            "task": "round",
            "round": round_,
            "opinions": [o.to_json() for o in opinions],
        }
    )
    return response["text"]


def check_consensus(opinions: Sequence[AgentOpinion]) -> bool:
    if not opinions:
        raise ValueError("consensus is undefined without opinions")
    return len({o.grade for o in opinions}) == 1


def fallback_grade(opinions: Sequence[AgentOpinion]) -> MalignancyGrade:
    """Confidence-weighted plurality; near-ties go to the more severe grade."""
    weights = defaultdict(list)
    for opinion in opinions:
        weights[opinion.grade].append(opinion.confidence)
    totals = {grade: math.fsum(c) for grade, c in weights.items()}
    best = max(totals.values())
    tied = [g for g, total in totals.items() if total >= best - FALLBACK_TOLERANCE]
    return max(tied, key=lambda g: g.severity)


def _commit(memory, state, opinions, summary):
    if memory is None:
        return
    for opinion in opinions:
        memory.put(state.case_id, "Conversation", opinion.to_json())
    memory.put(state.case_id, "Summary", {"round": opinions[0].round, "text": summary})


def diagnose(
    config: DASConfig,
    record: NoduleRecord,
    knowledge: Optional[KnowledgeBase] = None,
    memory: Optional[CaseMemory] = None,
):
    """Runs the discussion to unanimity or the round cap.

    Returns the FinalDiagnosis and the DiscussionState.  A backend failure
    propagates with the state so far attached as `err.state`; every completed
    round is already in memory by then.
    """
    state = DiscussionState(case_id=record.case_id, scheme=config.scheme)
    try:
        keywords = report_keywords(record.report)
        if memory is not None:
            state.history = [
                r.sequence
                for r in memory.recall(record.case_id, keywords)
                if r.kind in HISTORY_KINDS
            ]
        state.knowledge = retrieve_knowledge(record, knowledge, config.summarizer, config.top_k)

        opinions = initial_opinions(config.agents, record, state, config.workers)
        while True:
            summary = summarize_round(config.summarizer, opinions)
            state.opinions.append(opinions)
            state.summaries.append(summary)
            _commit(memory, state, opinions, summary)
            logger.info("%s round %d: %s", record.case_id, state.round, summary)

            if check_consensus(opinions):
                state.consensus_reached = True
                break
            if state.round >= config.max_rounds:
                break
            opinions = revise(config.agents, record, state, state.round + 1, config.workers)
    except BackendError as err:
        err.state = state
        raise

    if state.consensus_reached:
        grade = state.latest[0].grade
    else:
        grade = fallback_grade(state.latest)
        logger.warning(
            "%s: no consensus after %d rounds, falling back to %s",
            record.case_id,
            state.round,
            grade.value,
        )
    final = FinalDiagnosis(
        grade=grade,
        summary=state.summaries[-1],
        rounds_used=state.round,
        consensus=state.consensus_reached,
    )
    return final, state
