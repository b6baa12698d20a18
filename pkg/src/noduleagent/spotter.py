"""noduleagent/spotter.py.

Nodule detection: a mixture of expert detectors proposes masks on every
axial slice, density clustering under the Jaccard distance groups masks that
describe the same finding, each cluster is averaged into one candidate, a
panel of judges votes on the candidate, and accepted masks on adjacent slices
are linked into three-dimensional detections.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import DBSCAN

from noduleagent.backend import Backend, fanout, responses
from noduleagent.backend.fanout import DEFAULT_WORKERS
from noduleagent.exceptions import (
    DataError,
    DegenerateClusterError,
    DimensionMismatch,
    NoduleAgentError,
)
from noduleagent.imaging import (
    Mask2D,
    NoduleSize,
    Slice2D,
    Volume,
    mask_iou,
    masks_shape,
    measure_nodule,
)
from noduleagent.io.base import MaskRLE
from noduleagent.render import render_candidate
from noduleagent.static.prompts import JUDGE_PROMPT

logger = logging.getLogger(__name__)

DETECT_PROMPT = "Segment every lung nodule visible on this axial CT slice."

# distances between distinct masks are at least 1 / (2 * pixel count)
_MIN_EPSILON = 1e-12


@dataclass(frozen=True)
class ClusterParams:
    """DBSCAN parameters.  `epsilon` is a Jaccard distance, so masks closer
    than an IoU of 1 - epsilon are neighbours."""

    epsilon: float = 0.5
    min_pts: int = 2

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.min_pts < 1:
            raise ValueError(f"min_pts must be positive, got {self.min_pts}")

    @classmethod
    def inflate(cls, data):
        return cls(epsilon=float(data["epsilon"]), min_pts=int(data["min_pts"]))


@dataclass
class ClusterResult:
    """Clusters as sorted index lists in label order, the noise indices, and
    one averaged mask per cluster (None when averaging left nothing)."""

    clusters: List[List[int]]
    noise: List[int]
    averaged: List[Optional[Mask2D]]

    @property
    def candidates(self) -> List[Tuple[List[int], Mask2D]]:
        """(members, averaged mask) for every non-degenerate cluster."""
        return [
            (members, mask)
            for members, mask in zip(self.clusters, self.averaged)
            if mask is not None
        ]


@dataclass(frozen=True)
class SpotterStages:
    """Stage switches used to ablate the spotter.

    With `clustering` off every expert mask is a candidate; with `judging` off
    every candidate is accepted, scored by the number of masks behind it.
    """

    clustering: bool = True
    judging: bool = True


@dataclass(frozen=True)
class JudgeVote:
    judge_id: str
    sign: int
    confidence: float

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise DataError(f"vote of {self.judge_id} has sign {self.sign}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(
                f"vote of {self.judge_id} has confidence {self.confidence} outside [0, 1]"
            )

    def to_json(self):
        return {"judge_id": self.judge_id, "sign": self.sign, "confidence": self.confidence}


@dataclass(frozen=True)
class JudgementResult:
    votes: Tuple[JudgeVote, ...]
    score: float
    accepted: bool

    @classmethod
    def from_votes(cls, votes: Sequence[JudgeVote]):
        """Sums the signed confidences.  A score of exactly zero rejects."""
        votes = tuple(votes)
        score = math.fsum(v.sign * v.confidence for v in votes)
        return cls(votes=votes, score=score, accepted=score > 0)

    @classmethod
    def unjudged(cls, support: int):
        """Acceptance without a panel, scored by the supporting mask count."""
        return cls(votes=(), score=float(support), accepted=True)

    def to_json(self):
        return {
            "votes": [v.to_json() for v in self.votes],
            "score": self.score,
            "accepted": self.accepted,
        }

    @classmethod
    def inflate(cls, data):
        votes = tuple(
            JudgeVote(v["judge_id"], int(v["sign"]), float(v["confidence"]))
            for v in data["votes"]
        )
        return cls(votes=votes, score=float(data["score"]), accepted=bool(data["accepted"]))


@dataclass
class SliceFinding:
    """An accepted candidate on one slice."""

    mask: Mask2D
    judgement: JudgementResult


@dataclass
class NoduleDetection:
    masks: List[Mask2D]
    judgements: List[JudgementResult]
    size: NoduleSize

    @property
    def z_range(self):
        return self.masks[0].z_index, self.masks[-1].z_index

    @property
    def slice_count(self):
        return len(self.masks)

    @property
    def score(self):
        return max(j.score for j in self.judgements)


def detection_to_record(detection: NoduleDetection):
    """JSON record of a detection: slice range, per-slice masks and verdicts,
    and the size measurement."""
    first, last = detection.z_range
    return {
        "slices": [first, last],
        "masks": [m.to_rle() for m in detection.masks],
        "judgements": [
            {"z": m.z_index, **j.to_json()}
            for m, j in zip(detection.masks, detection.judgements)
        ],
        "size": detection.size.to_json(),
    }


def detection_from_record(record) -> NoduleDetection:
    try:
        return NoduleDetection(
            masks=[Mask2D.from_rle(m) for m in record["masks"]],
            judgements=[JudgementResult.inflate(j) for j in record["judgements"]],
            size=NoduleSize.inflate(record["size"]),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"malformed detection record: {err}") from err


def _check_cluster_input(masks):
    masks_shape(masks)
    z_indices = {m.z_index for m in masks}
    if len(z_indices) > 1:
        raise DimensionMismatch(f"masks span slices {sorted(z_indices)}")


def distance_matrix(masks: Sequence[Mask2D]):
    """Pairwise Jaccard distances."""
    stack = np.stack([m.bits.ravel() for m in masks]).astype(np.int64)
    intersection = stack @ stack.T
    counts = np.diag(intersection)
    union = counts[:, None] + counts[None, :] - intersection
    return 1.0 - intersection / union


def average_cluster(members: Sequence[Mask2D]) -> Mask2D:
    """Per-pixel vote of the members: a pixel survives when at least half of
    them set it.  Signals `DegenerateClusterError` if none survives."""
    members = list(members)
    if not members:
        raise DataError("cannot average an empty cluster")
    masks_shape(members)
    counts = np.sum([m.bits for m in members], axis=0)
    averaged = Mask2D.from_array(members[0].z_index, 2 * counts >= len(members))
    if averaged is None:
        raise DegenerateClusterError(
            f"averaging {len(members)} masks on slice {members[0].z_index} left no pixels"
        )
    return averaged


def cluster_masks(masks: Sequence[Mask2D], params: ClusterParams = ClusterParams()):
    """DBSCAN over the Jaccard distance.

    A mask counts itself among its neighbours.  Clusters are labelled in the
    order their first core mask appears in the input, and a border mask joins
    the first cluster that reaches it.
    """
    masks = list(masks)
    if not masks:
        return ClusterResult(clusters=[], noise=[], averaged=[])
    _check_cluster_input(masks)

    labels = DBSCAN(
        eps=max(params.epsilon, _MIN_EPSILON),
        min_samples=params.min_pts,
        metric="precomputed",
    ).fit_predict(distance_matrix(masks))

    clusters: Dict[int, List[int]] = {}
    noise = []
    for index, label in enumerate(labels):
        if label == -1:
            noise.append(index)
        else:
            clusters.setdefault(int(label), []).append(index)
    ordered = [clusters[label] for label in sorted(clusters)]

    averaged = []
    for members in ordered:
        try:
            averaged.append(average_cluster([masks[i] for i in members]))
        except DegenerateClusterError as err:
            logger.warning("dropping cluster %s: %s", members, err)
            averaged.append(None)

    return ClusterResult(clusters=ordered, noise=noise, averaged=averaged)


def detect_all(experts: Sequence[Backend], slice_: Slice2D, workers=DEFAULT_WORKERS):
    """Every expert's masks, ordered by expert and then by the expert's own
    order.  Empty masks are discarded."""
    request = {
        "prompt": DETECT_PROMPT,
        "images": {"slice": slice_.pixels},
        "z_index": slice_.z_index,
        "spacing_mm": list(slice_.spacing_mm),
    }
    masks = []
    for expert, response in zip(experts, responses(fanout(experts, lambda i: request, workers))):
        for record in response["masks"]:
            rle = MaskRLE.inflate(record)
            mask = Mask2D.from_array(rle.z, rle.decode())
            if mask is None:
                logger.debug("%s returned an empty mask", expert.backend_id)
                continue
            if mask.shape != slice_.shape:
                raise DimensionMismatch(
                    f"{expert.backend_id} returned a {mask.shape} mask "
                    f"for a {slice_.shape} slice"
                )
            if mask.z_index != slice_.z_index:
                raise DataError(
                    f"{expert.backend_id} returned a mask for slice {mask.z_index}"
                )
            masks.append(mask)
    return masks


def judge_candidate(
    judges: Sequence[Backend], slice_: Slice2D, candidate: Mask2D, workers=DEFAULT_WORKERS
) -> JudgementResult:
    """Collects one signed, confidence-weighted vote per judge."""
    if candidate.shape != slice_.shape:
        raise DimensionMismatch(f"candidate {candidate.shape} vs slice {slice_.shape}")
    request = {
        "prompt": JUDGE_PROMPT.format(z_index=slice_.z_index, area=candidate.positive_count),
        "images": {
            "slice": slice_.pixels,
            "overlay": render_candidate(slice_.pixels, candidate.bits),
        },
        "masks": {"candidate": candidate.bits},
        "task": "vote",
        "z_index": slice_.z_index,
    }
    votes = [
        JudgeVote(judge.backend_id, int(r["sign"]), float(r["confidence"]))
        for judge, r in zip(judges, responses(fanout(judges, lambda i: request, workers)))
    ]
    return JudgementResult.from_votes(votes)


def link_detections(findings_by_slice: Dict[int, List[SliceFinding]], link_iou: float = 0.3):
    """Chains accepted findings on consecutive slices.

    Slices are visited in ascending order; each finding extends the track
    ending on the previous slice with the highest IoU at or above `link_iou`
    (ties to the earliest track, one extension per track and slice), and
    otherwise opens a new track.
    """
    if not 0.0 < link_iou <= 1.0:
        raise ValueError(f"link_iou must lie in (0, 1], got {link_iou}")
    tracks: List[List[SliceFinding]] = []
    for z in sorted(findings_by_slice):
        extended = set()
        for finding in findings_by_slice[z]:
            best, best_iou = None, link_iou
            for index, track in enumerate(tracks):
                last = track[-1].mask
                if index in extended or last.z_index != z - 1:
                    continue
                iou = mask_iou(last, finding.mask)
                if iou >= best_iou and (best is None or iou > best_iou):
                    best, best_iou = index, iou
            if best is None:
                tracks.append([finding])
            else:
                tracks[best].append(finding)
                extended.add(best)
    return tracks


def _slice_findings(slice_, experts, judges, params, stages, workers):
    masks = detect_all(experts, slice_, workers)
    if not masks:
        return []

    if stages.clustering:
        result = cluster_masks(masks, params)
        candidates = [(mask, len(members)) for members, mask in result.candidates]
        logger.info(
            "slice %d: %d masks, %d clusters, %d noise",
            slice_.z_index,
            len(masks),
            len(result.clusters),
            len(result.noise),
        )
    else:
        candidates = [(mask, 1) for mask in masks]

    findings = []
    for mask, support in candidates:
        if stages.judging:
            judgement = judge_candidate(judges, slice_, mask, workers)
        else:
            judgement = JudgementResult.unjudged(support)
        logger.info(
            "slice %d: candidate of %d pixels scored %.4f",
            slice_.z_index,
            mask.positive_count,
            judgement.score,
        )
        if judgement.accepted:
            findings.append(SliceFinding(mask, judgement))
    return findings


def spot(
    volume: Volume,
    experts: Sequence[Backend],
    judges: Sequence[Backend],
    params: ClusterParams = ClusterParams(),
    link_iou: float = 0.3,
    stages: SpotterStages = SpotterStages(),
    workers=DEFAULT_WORKERS,
) -> List[NoduleDetection]:
    """Runs the spotter over every slice of `volume`."""
    if not experts:
        raise ValueError("spot needs at least one expert")
    if stages.judging and not judges:
        raise ValueError("spot needs at least one judge unless judging is disabled")
    if not 0.0 < link_iou <= 1.0:
        raise ValueError(f"link_iou must lie in (0, 1], got {link_iou}")

    findings_by_slice = {}
    for z in range(volume.nz):
        slice_ = volume.slice(z)
        try:
            findings = _slice_findings(slice_, experts, judges, params, stages, workers)
        except NoduleAgentError as err:
            raise err.annotate(f"slice {z}")
        if findings:
            findings_by_slice[z] = findings

    detections = []
    for track in link_detections(findings_by_slice, link_iou):
        masks = [f.mask for f in track]
        detections.append(
            NoduleDetection(
                masks=masks,
                judgements=[f.judgement for f in track],
                size=measure_nodule(masks, volume.spacing_mm),
            )
        )
    logger.info("spotted %d nodules over %d slices", len(detections), volume.nz)
    return detections
