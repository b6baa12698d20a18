"""noduleagent/radiologist.py.

Localized CT reports: focal-prompt request assembly for a describer backend,
and lexicon parsing of report text into controlled-vocabulary attributes.
"""

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

from noduleagent.backend import Backend
from noduleagent.exceptions import SchemaViolation
from noduleagent.imaging import FocalCrop, Mask2D, NoduleSize, Slice2D, Volume, focal_crop
from noduleagent.spotter import NoduleDetection
from noduleagent.static.prompts import MEDPROMPT
from noduleagent.static.vocabulary import (
    BOOLEAN_FIELDS,
    CATEGORICAL_FIELDS,
    CLAUSE_BREAKS,
    LEXICON,
    NEGATION_TRIGGERS,
    NEGATION_WINDOW,
    SIZE_PATTERN,
)
from noduleagent.utilities import find_phrase, request_hash, tokenize

logger = logging.getLogger(__name__)

DEFAULT_MARGIN_FACTOR = 1.5


@dataclass
class ReportAttributes:
    """Structured findings of a report.  None means "not mentioned"."""

    lobe: Optional[str] = None
    density: Optional[str] = None
    shape: Optional[str] = None
    margin: Optional[str] = None
    cavitation: Optional[bool] = None
    vacuole: Optional[bool] = None
    air_bronchogram: Optional[bool] = None
    pleural_indentation: Optional[bool] = None
    vascular_convergence: Optional[bool] = None
    size_mm: Optional[float] = None

    def to_json(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def inflate(cls, data):
        return cls(**data)

    def is_empty(self):
        return not self.to_json()


@dataclass
class CTReport:
    text: str
    attributes: ReportAttributes = field(default_factory=ReportAttributes)
    provenance: Dict[str, str] = field(default_factory=dict)

    def to_json(self):
        return {
            "text": self.text,
            "attributes": self.attributes.to_json(),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def inflate(cls, data):
        return cls(
            text=data["text"],
            attributes=ReportAttributes.inflate(data.get("attributes", {})),
            provenance=dict(data.get("provenance", {})),
        )


@dataclass
class DescribeRequest:
    """Focal crops of a nodule in ascending z, aligned one-to-one with the
    full slices and the full-slice masks, plus the prompt."""

    focal_crops: List[FocalCrop]
    full_slices: List[Slice2D]
    masks: List[Mask2D]
    prompt: str
    size: NoduleSize
    position: Dict[str, float]

    def to_backend_request(self):
        images, masks = {}, {}
        for i, (crop, slice_, mask) in enumerate(
            zip(self.focal_crops, self.full_slices, self.masks)
        ):
            images[f"crop_{i}"] = crop.pixels
            images[f"slice_{i}"] = slice_.pixels
            masks[f"crop_mask_{i}"] = crop.mask_bits
            masks[f"mask_{i}"] = mask.bits
        return {
            "prompt": self.prompt,
            "images": images,
            "masks": masks,
            "z_indices": [c.z_index for c in self.focal_crops],
            "bboxes": [list(c.bbox) for c in self.focal_crops],
            "size": self.size.to_json(),
            "position": dict(self.position),
        }

    @property
    def request_hash(self):
        return request_hash(self.to_backend_request())


def med_prompt(detection: NoduleDetection) -> str:
    count = detection.slice_count
    slice_phrase = "a single axial slice" if count == 1 else f"{count} consecutive slices"
    size = detection.size
    return MEDPROMPT.format(
        slice_phrase=slice_phrase,
        long_mm=size.long_diameter_mm,
        short_mm=size.short_diameter_mm,
        height_mm=size.height_mm,
    )


def build_describe_request(
    detection: NoduleDetection, volume: Volume, margin_factor: float = DEFAULT_MARGIN_FACTOR
) -> DescribeRequest:
    crops, slices = [], []
    for mask in detection.masks:
        slice_ = volume.slice(mask.z_index)
        slices.append(slice_)
        crops.append(focal_crop(slice_, mask, margin_factor))

    nx, _, nz = volume.dims
    largest = max(detection.masks, key=lambda m: m.positive_count)
    first, last = detection.z_range
    position = {
        "x_fraction": (largest.centroid[0] + 0.5) / nx,
        "z_fraction": ((first + last) / 2 + 0.5) / nz,
    }
    return DescribeRequest(
        focal_crops=crops,
        full_slices=slices,
        masks=list(detection.masks),
        prompt=med_prompt(detection),
        size=detection.size,
        position=position,
    )


def generate_report(backend: Backend, request: DescribeRequest) -> CTReport:
    payload = request.to_backend_request()
    response = backend.call(payload)
    text = response["text"].strip()
    if not text:
        raise SchemaViolation("describer returned an empty report", backend.backend_id)
    digest = request_hash(payload)
    logger.info("report from %s for request %s", backend.backend_id, digest[:12])
    return CTReport(
        text=text,
        attributes=parse_report(text),
        provenance={"backend_id": backend.backend_id, "request_hash": digest},
    )


@dataclass(frozen=True)
class _Hit:
    attribute: str
    value: object
    start: int
    negated: bool


def _tokens_with_clauses(text):
    tokens, clauses = [], []
    for index, clause in enumerate(re.split(CLAUSE_BREAKS, text)):
        for token in tokenize(clause):
            tokens.append(token)
            clauses.append(index)
    return tokens, clauses


def _negated(tokens, clauses, start):
    for trigger in NEGATION_TRIGGERS:
        for p in range(max(0, start - NEGATION_WINDOW), start - len(trigger) + 1):
            if clauses[p] == clauses[start] and tuple(tokens[p : p + len(trigger)]) == trigger:
                return True
    return False


def _lexicon_hits(text) -> List[_Hit]:
    tokens, clauses = _tokens_with_clauses(text)
    found = []
    for order, (field_name, value, phrase) in enumerate(LEXICON):
        for start in find_phrase(tokens, list(phrase)):
            end = start + len(phrase)
            if clauses[start] == clauses[end - 1]:
                found.append((start, -len(phrase), order, end))

    hits, covered = [], 0
    for start, _, order, end in sorted(found):
        if start < covered:
            continue
        field_name, value, _ = LEXICON[order]
        hits.append(_Hit(field_name, value, start, _negated(tokens, clauses, start)))
        covered = end
    return hits


def _size_mm(text):
    match = re.search(SIZE_PATTERN, text.lower())
    if match is None:
        return None
    value = float(match.group(1))
    return value * 10 if match.group(2) == "cm" else value


def parse_report(text: str) -> ReportAttributes:
    """Controlled-vocabulary attributes of a report.

    Single-valued fields take their first non-negated mention.  A boolean
    finding is True when mentioned without negation anywhere, and False when
    only negated mentions exist.
    """
    values = {}
    for hit in _lexicon_hits(text):
        if hit.attribute in CATEGORICAL_FIELDS:
            if not hit.negated and hit.attribute not in values:
                values[hit.attribute] = hit.value
        elif not hit.negated:
            values[hit.attribute] = True
        elif hit.attribute not in values:
            values[hit.attribute] = False
    size = _size_mm(text)
    if size is not None:
        values["size_mm"] = size
    return ReportAttributes(**values)


KEYWORD_NAMES = {
    "air_bronchogram": "air bronchogram",
    "pleural_indentation": "pleural indentation",
    "vascular_convergence": "vascular convergence",
}


def report_keywords(report: CTReport) -> List[str]:
    """Diagnostic keywords of a report, in vocabulary order: density, shape
    and margin values, then the findings reported as present."""
    attributes = report.attributes
    keywords = [
        getattr(attributes, name)
        for name in ("density", "shape", "margin")
        if getattr(attributes, name) is not None
    ]
    keywords += [
        KEYWORD_NAMES.get(name, name) for name in BOOLEAN_FIELDS if getattr(attributes, name)
    ]
    return list(dict.fromkeys(keywords))
