"""noduleagent/evaluation.py.

Report faithfulness by attribute question answering, grading accuracy and
macro-F1, detection mAP/F1 with the spotter stage ablation, and the grading
ablations: modules removed, panel size varied and detections degraded.
"""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from noduleagent.backend import Backend
from noduleagent.backend.schemas import LLM_SCORE_ASPECTS
from noduleagent.das import (
    DEFAULT_MAX_ROUNDS,
    SCHEMES,
    DASConfig,
    FinalDiagnosis,
    NoduleRecord,
    diagnose,
)
from noduleagent.exceptions import DataError
from noduleagent.imaging import Mask2D, Volume, mask_iou, measure_nodule
from noduleagent.knowledge import KnowledgeBase
from noduleagent.radiologist import (
    DEFAULT_MARGIN_FACTOR,
    CTReport,
    build_describe_request,
    generate_report,
    parse_report,
)
from noduleagent.spotter import ClusterParams, NoduleDetection, SpotterStages, spot
from noduleagent.static.prompts import DLC_JUDGE_PROMPT, LLM_SCORE_PROMPT
from noduleagent.static.vocabulary import (
    ATTRIBUTE_KEYS,
    BOOLEAN_FIELDS,
    CATEGORICAL_FIELDS,
    DISTRACTORS,
    LOBE_NAMES,
    POSITIVE_TEMPLATES,
    size_bucket,
)
from noduleagent.utilities import dump_json

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class AttributeQuestion:
    text: str
    polarity: str
    key: str
    value: object
    gold: str


def build_attribute_questions(annotation: Dict) -> List[AttributeQuestion]:
    """One positive question per annotated finding, then the distractors the
    annotation does not contradict."""
    unknown = sorted(set(annotation) - set(ATTRIBUTE_KEYS))
    if unknown:
        raise DataError(f"unknown annotation keys {unknown}")

    questions = []
    for key in ATTRIBUTE_KEYS:
        value = annotation.get(key)
        if value is None or value is False:
            continue
        if key in CATEGORICAL_FIELDS:
            if value not in CATEGORICAL_FIELDS[key]:
                raise DataError(f"{value!r} is not a controlled {key} value")
            shown = LOBE_NAMES[value] if key == "lobe" else value
        elif key in BOOLEAN_FIELDS:
            if value is not True:
                raise DataError(f"{key} must be a boolean, got {value!r}")
            shown = value
        else:
            value = shown = size_bucket(float(value))
        questions.append(
            AttributeQuestion(
                text=POSITIVE_TEMPLATES[key].format(value=shown),
                polarity="positive",
                key=key,
                value=value,
                gold="yes",
            )
        )

    for key, value, text in DISTRACTORS:
        if annotation.get(key) == value:
            continue
        questions.append(AttributeQuestion(text, "negative", key, value, "no"))
    return questions


def _lexicon_answer(report: CTReport, question: AttributeQuestion):
    attributes = parse_report(report.text)
    stated = getattr(attributes, question.key)
    if question.key == "size_mm":
        return stated is not None and stated > 0 and size_bucket(stated) == question.value
    if question.key in BOOLEAN_FIELDS:
        return stated is True
    return stated == question.value


def answer_question(report: CTReport, question: AttributeQuestion, answerer=None) -> str:
    """"yes" when the report asserts the questioned finding.

    The default answerer is the negation-aware report lexicon; a judge backend
    may be passed instead.
    """
    if answerer is None:
        return "yes" if _lexicon_answer(report, question) else "no"
    response = answerer.call(
        {
            "prompt": DLC_JUDGE_PROMPT.format(report=report.text, question=question.text),
            "task": "qa",
            "question": question.text,
            "report": report.text,
        }
    )
    return response["answer"].strip().lower()


@dataclass
class QuestionVerdict:
    case_id: str
    question: str
    polarity: str
    gold: str
    answer: str

    @property
    def correct(self):
        return self.answer == self.gold


@dataclass
class DLCResult:
    pos_accuracy: float
    neg_accuracy: float
    lungdlc: float
    verdicts: List[QuestionVerdict] = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, pos_accuracy, neg_accuracy, verdicts=()):
        return cls(
            pos_accuracy=pos_accuracy,
            neg_accuracy=neg_accuracy,
            lungdlc=(pos_accuracy + neg_accuracy) / 2,
            verdicts=list(verdicts),
        )

    @classmethod
    def from_verdicts(cls, verdicts: Sequence[QuestionVerdict]):
        accuracies = {}
        for polarity in ("positive", "negative"):
            subset = [v for v in verdicts if v.polarity == polarity]
            if not subset:
                raise DataError(f"no {polarity} questions to score")
            accuracies[polarity] = sum(v.correct for v in subset) / len(subset)
        return cls.from_accuracies(accuracies["positive"], accuracies["negative"], verdicts)

    def to_json(self):
        return {
            "pos_accuracy": self.pos_accuracy,
            "neg_accuracy": self.neg_accuracy,
            "lungdlc": self.lungdlc,
            "questions": len(self.verdicts),
        }


def lungdlc_score(
    cases: Sequence[Tuple[str, CTReport, Sequence[AttributeQuestion]]], answerer=None
) -> DLCResult:
    """Mean of the positive and the negative question accuracies."""
    verdicts = [
        QuestionVerdict(
            case_id=case_id,
            question=question.text,
            polarity=question.polarity,
            gold=question.gold,
            answer=answer_question(report, question, answerer),
        )
        for case_id, report, questions in cases
        for question in questions
    ]
    result = DLCResult.from_verdicts(verdicts)
    logger.info(
        "LungDLC %.4f (pos %.4f, neg %.4f) over %d questions",
        result.lungdlc,
        result.pos_accuracy,
        result.neg_accuracy,
        len(verdicts),
    )
    return result


@dataclass
class GradeMetrics:
    accuracy: float
    macro_f1: float
    count: int

    def to_json(self):
        return asdict(self)


def grade_metrics(predicted: Sequence[str], gold: Sequence[str], grades=None) -> GradeMetrics:
    """Accuracy and macro-F1 over the classes present in either list.

    `grades`, when given, is the legal label set of the scheme.
    """
    predicted, gold = list(predicted), list(gold)
    if len(predicted) != len(gold):
        raise DataError(f"{len(predicted)} predictions for {len(gold)} gold grades")
    if not gold:
        raise DataError("no grades to score")
    if grades is not None:
        stray = sorted(set(predicted + gold) - set(grades))
        if stray:
            raise DataError(f"labels {stray} are outside the grading scheme")
    labels = sorted(set(predicted) | set(gold))
    return GradeMetrics(
        accuracy=float(accuracy_score(gold, predicted)),
        macro_f1=float(
            f1_score(gold, predicted, labels=labels, average="macro", zero_division=0)
        ),
        count=len(gold),
    )


@dataclass
class DetectionMetrics:
    mean_average_precision: float
    f1: float
    precision: float
    recall: float
    true_positives: int
    false_positives: int
    false_negatives: int

    def to_json(self):
        return asdict(self)


def average_precision(recall, precision):
    """Area under the precision envelope, over every recall change."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def detection_metrics(
    predictions: Sequence[Tuple[Mask2D, float]],
    gold: Sequence[Mask2D],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> DetectionMetrics:
    """Per-slice matching of scored predicted masks against gold masks.

    Predictions are taken by descending score (stable), each matching the
    unmatched gold mask of its slice with the highest IoU, when that IoU is at
    least `iou_threshold`.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise DataError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")

    order = sorted(range(len(predictions)), key=lambda i: -predictions[i][1])
    matched = set()
    hits = []
    for i in order:
        mask, _ = predictions[i]
        best, best_iou = None, iou_threshold
        for j, target in enumerate(gold):
            if j in matched or target.z_index != mask.z_index:
                continue
            iou = mask_iou(mask, target)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = j, iou
        if best is not None:
            matched.add(best)
        hits.append(best is not None)

    tp = sum(hits)
    fp = len(hits) - tp
    fn = len(gold) - tp
    if not gold:
        ap = 1.0 if not predictions else 0.0
    elif not predictions:
        ap = 0.0
    else:
        cumulative = np.cumsum(hits)
        recall = cumulative / len(gold)
        precision = cumulative / np.arange(1, len(hits) + 1)
        ap = average_precision(recall, precision)

    denominator = 2 * tp + fp + fn
    return DetectionMetrics(
        mean_average_precision=ap,
        f1=1.0 if denominator == 0 else 2 * tp / denominator,
        precision=tp / len(hits) if hits else (1.0 if not gold else 0.0),
        recall=tp / len(gold) if gold else 1.0,
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
    )


def scored_masks(detections) -> List[Tuple[Mask2D, float]]:
    """Per-slice masks of detections, scored by their panel score."""
    return [
        (mask, judgement.score)
        for detection in detections
        for mask, judgement in zip(detection.masks, detection.judgements)
    ]


ABLATION_STAGES = (
    ("experts", SpotterStages(clustering=False, judging=False)),
    ("experts+clustering", SpotterStages(clustering=True, judging=False)),
    ("experts+clustering+judges", SpotterStages(clustering=True, judging=True)),
)


def ablation_detection(
    volume,
    gold: Sequence[Mask2D],
    experts,
    judges,
    params: ClusterParams = ClusterParams(),
    link_iou: float = 0.3,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    workers=None,
) -> Dict[str, DetectionMetrics]:
    """Detection metrics with the spotter stages enabled one after another."""
    results = {}
    for name, stages in ABLATION_STAGES:
        detections = spot(volume, experts, judges, params, link_iou, stages, workers)
        results[name] = detection_metrics(scored_masks(detections), gold, iou_threshold)
        logger.info("ablation %s: %s", name, results[name])
    return results


@dataclass
class GradingCase:
    """A nodule of known grade.  `masks` are its gold per-slice masks on
    `volume`, on consecutive slices."""

    case_id: str
    volume: Volume
    masks: List[Mask2D]
    gold_grade: str


@dataclass
class GradingPanel:
    """Backends and settings shared by the grading ablations."""

    describer: Backend
    agents: List[Backend]
    summarizer: Backend
    scheme: str = "three-class"
    max_rounds: int = DEFAULT_MAX_ROUNDS
    margin_factor: float = DEFAULT_MARGIN_FACTOR
    knowledge: Optional[KnowledgeBase] = None
    workers: Optional[int] = None

    @classmethod
    def from_backends(cls, backends, config):
        return cls(
            describer=backends.describer,
            agents=list(backends.agents),
            summarizer=backends.summarizer,
            scheme=config.scheme,
            max_rounds=config.max_rounds,
            margin_factor=config.margin_factor,
            workers=config.workers,
        )


def grade_case(
    panel: GradingPanel,
    case: GradingCase,
    masks: Optional[Sequence[Mask2D]] = None,
    report=True,
    discussion=True,
    agent_count: Optional[int] = None,
) -> FinalDiagnosis:
    """Describes and grades one nodule from `masks` (the gold masks by
    default).

    Without `report` the agents get an empty report.  Without `discussion`
    the first agent grades alone in a single round.
    """
    masks = list(case.masks if masks is None else masks)
    detection = NoduleDetection(
        masks=masks, judgements=[], size=measure_nodule(masks, case.volume.spacing_mm)
    )
    if report:
        request = build_describe_request(detection, case.volume, panel.margin_factor)
        ct_report = generate_report(panel.describer, request)
    else:
        ct_report = CTReport("")
    record = NoduleRecord.from_detection(
        case.case_id, case.volume, detection, ct_report, panel.margin_factor
    )

    agents = panel.agents[:agent_count] if agent_count else list(panel.agents)
    max_rounds = panel.max_rounds
    if not discussion:
        agents, max_rounds = agents[:1], 1
    config = DASConfig(
        agents=agents,
        summarizer=panel.summarizer,
        scheme=panel.scheme,
        max_rounds=max_rounds,
        workers=panel.workers,
    )
    final, _ = diagnose(config, record, panel.knowledge)
    return final


def _grading_metrics(panel, cases, **switches):
    if not cases:
        raise DataError("no grading cases")
    predicted = [grade_case(panel, case, **switches).grade.value for case in cases]
    return grade_metrics(predicted, [c.gold_grade for c in cases], SCHEMES[panel.scheme])


MODULE_ABLATIONS = (
    ("full", {}),
    ("without-report", {"report": False}),
    ("without-discussion", {"discussion": False}),
)


def ablation_modules(cases: Sequence[GradingCase], panel: GradingPanel) -> Dict[str, GradeMetrics]:
    """Grading metrics of the whole pipeline, without the radiologist report,
    and without the multi-agent discussion."""
    results = {}
    for name, switches in MODULE_ABLATIONS:
        results[name] = _grading_metrics(panel, cases, **switches)
        logger.info("module ablation %s: %s", name, results[name])
    return results


def ablation_agent_count(
    cases: Sequence[GradingCase], panel: GradingPanel, counts: Optional[Sequence[int]] = None
) -> Dict[int, GradeMetrics]:
    """Grading metrics with the first K agents of the panel, for every K in
    `counts` (1 up to the panel size by default)."""
    counts = range(1, len(panel.agents) + 1) if counts is None else counts
    results = {}
    for count in counts:
        if not 1 <= count <= len(panel.agents):
            raise ValueError(f"agent count {count} outside 1..{len(panel.agents)}")
        results[count] = _grading_metrics(panel, cases, agent_count=count)
        logger.info("%d agents: %s", count, results[count])
    return results


def shift_to_iou(masks: Sequence[Mask2D], target: float) -> Tuple[List[Mask2D], float]:
    """`masks` moved along +x, one pixel at a time, until their mean IoU with
    the originals is at most `target`.

    The shift stops short of pushing any mask off its slice, so the achieved
    IoU, returned alongside, can stay above `target`.
    """
    masks = list(masks)
    if not masks:
        raise DataError("cannot shift an empty nodule")
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target IoU must lie in [0, 1], got {target}")
    shifted, achieved = masks, 1.0
    nx = masks[0].shape[1]
    for dx in range(1, nx):
        if achieved <= target:
            break
        moved = []
        for mask in masks:
            bits = np.zeros_like(mask.bits)
            bits[:, dx:] = mask.bits[:, : nx - dx]
            moved.append(Mask2D.from_array(mask.z_index, bits))
        if any(m is None for m in moved):
            break
        shifted = moved
        achieved = math.fsum(mask_iou(a, b) for a, b in zip(masks, moved)) / len(masks)
    return shifted, achieved


DETECTION_IOUS = (1.0, 0.8, 0.6, 0.4, 0.2)


@dataclass
class DetectionQualityPoint:
    target_iou: float
    mean_iou: float
    metrics: GradeMetrics

    def to_json(self):
        return {
            "target_iou": self.target_iou,
            "mean_iou": self.mean_iou,
            **self.metrics.to_json(),
        }


def ablation_detection_quality(
    cases: Sequence[GradingCase], panel: GradingPanel, ious: Sequence[float] = DETECTION_IOUS
) -> List[DetectionQualityPoint]:
    """Grading metrics when the nodule masks handed downstream overlap the
    gold masks by the IoUs in `ious`."""
    if not cases:
        raise DataError("no grading cases")
    points = []
    for target in ious:
        predicted, achieved = [], []
        for case in cases:
            masks, iou = shift_to_iou(case.masks, target)
            predicted.append(grade_case(panel, case, masks=masks).grade.value)
            achieved.append(iou)
        metrics = grade_metrics(predicted, [c.gold_grade for c in cases], SCHEMES[panel.scheme])
        point = DetectionQualityPoint(target, math.fsum(achieved) / len(achieved), metrics)
        logger.info("detection IoU %.2f (achieved %.3f): %s", target, point.mean_iou, metrics)
        points.append(point)
    return points


def llm_score(report: CTReport, judge) -> Dict[str, float]:
    """Four-aspect judge rating of a report and its mean."""
    response = judge.call(
        {
            "prompt": LLM_SCORE_PROMPT.format(report=report.text),
            "task": "score",
            "report": report.text,
        }
    )
    aspects = {a: float(response["aspects"][a]) for a in LLM_SCORE_ASPECTS}
    return {**aspects, "llm_score": math.fsum(aspects.values()) / len(aspects)}


@dataclass
class EvaluationCase:
    """One line of an evaluation JSONL file."""

    case_id: str
    annotation: Dict = field(default_factory=dict)
    report: Optional[CTReport] = None
    predicted_grade: Optional[str] = None
    gold_grade: Optional[str] = None

    @classmethod
    def inflate(cls, data):
        report = data.get("report")
        if isinstance(report, str):
            report = CTReport(text=report, attributes=parse_report(report))
        elif isinstance(report, dict):
            report = CTReport.inflate(report)
        return cls(
            case_id=str(data["case_id"]),
            annotation=dict(data.get("annotation") or {}),
            report=report,
            predicted_grade=data.get("predicted_grade"),
            gold_grade=data.get("gold_grade"),
        )


def load_cases(path) -> List[EvaluationCase]:
    cases = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    cases.append(EvaluationCase.inflate(json.loads(line)))
    except (OSError, json.JSONDecodeError, KeyError) as err:
        raise DataError(f"unreadable evaluation file {path}: {err}") from err
    return cases


def write_verdicts_csv(verdicts: Sequence[QuestionVerdict], path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["case_id", "polarity", "question", "gold", "answer", "correct"])
        for v in verdicts:
            writer.writerow(
                [v.case_id, v.polarity, v.question, v.gold, v.answer, int(v.correct)]
            )
    return path


def write_metrics_json(metrics, path):
    dump_json(metrics, path)
    return path
