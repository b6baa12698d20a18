"""noduleagent/backend/mock.py.

Deterministic offline backends, one family per role.  Every mock is a pure
function of its spec (seed and options) and the request, apart from the
ordinal counter of `ScriptedBackend`.
"""

import json
import logging
import threading
from collections import Counter
from typing import Dict

import numpy as np
from scipy import ndimage

from noduleagent.backend.backend_abc import Backend, BackendSpec
from noduleagent.exceptions import (
    BackendTimeout,
    BackendTransportError,
    ConfigError,
    SchemaViolation,
)
from noduleagent.io.base import MaskRLE
from noduleagent.knowledge import match_terms
from noduleagent.static.vocabulary import (
    GLOSSARY,
    LOBE_NAMES,
    density_from_hu,
    lobe_from_position,
    shape_from_axes,
)
from noduleagent.utilities import request_hash

logger = logging.getLogger(__name__)


class RecordingBackend(Backend):
    """Keeps the hash of every request it answers in `calls`."""

    def __init__(self, spec: BackendSpec):
        super().__init__(spec)
        self.calls = []
        self._lock = threading.Lock()

    def _record(self, request):
        digest = request_hash(request)
        with self._lock:
            ordinal = len(self.calls)
            self.calls.append(digest)
        return ordinal, digest


class ScriptedBackend(RecordingBackend):
    """Replays a fixture: a JSON object mapping request hashes, or call
    ordinals written as decimal strings, to responses.  The key "*" is the
    fallback.  A response of the form {"__error__": "timeout"} or
    {"__error__": "transport"} raises the corresponding failure instead.

    The script comes from `spec.options["script"]` or the `spec.fixture` file.
    """

    def __init__(self, spec: BackendSpec):
        super().__init__(spec)
        if "script" in spec.options:
            script = spec.options["script"]
        elif spec.fixture:
            try:
                with open(spec.fixture, "r", encoding="utf-8") as f:
                    script = json.load(f)
            except (OSError, json.JSONDecodeError) as err:
                raise ConfigError(
                    f"backend {spec.backend_id}: unreadable fixture {spec.fixture}: {err}"
                ) from err
        else:
            raise ConfigError(f"backend {spec.backend_id}: scripted mock needs a script")
        if not isinstance(script, dict):
            raise ConfigError(f"backend {spec.backend_id}: script must be a JSON object")
        self.script = script

    def _invoke(self, request):
        ordinal, digest = self._record(request)
        for key in (digest, str(ordinal), "*"):
            if key in self.script:
                response = self.script[key]
                break
        else:
            raise BackendTransportError(
                f"script has no response for call {ordinal} ({digest[:12]})",
                self.backend_id,
            )

        if isinstance(response, dict) and "__error__" in response:
            if response["__error__"] == "timeout":
                raise BackendTimeout("scripted timeout", self.backend_id)
            raise BackendTransportError("scripted transport failure", self.backend_id)
        # hand out copies so callers cannot edit the script
        return json.loads(json.dumps(response))


def _components(bits, min_area):
    labels, count = ndimage.label(bits)
    for label in range(1, count + 1):
        component = labels == label
        if np.count_nonzero(component) >= min_area:
            yield component


class ThresholdDetector(RecordingBackend):
    """Intensity-threshold expert: pixels at or above `threshold_hu` (default
    -300 HU), split into 4-connected components of at least `min_area` pixels.

    `perturb` ("none", "dilate", "erode", "shift") alters every component so
    that several experts built from this class disagree slightly.
    """

    def _invoke(self, request):
        self._record(request)
        options = self.spec.options
        threshold = options.get("threshold_hu", -300)
        min_area = options.get("min_area", 1)
        perturb = options.get("perturb", "none")

        pixels = request["images"]["slice"]
        z_index = int(request["z_index"])
        masks = []
        for component in _components(pixels >= threshold, min_area):
            if perturb == "dilate":
                component = ndimage.binary_dilation(component)
            elif perturb == "erode":
                eroded = ndimage.binary_erosion(component)
                component = eroded if eroded.any() else component
            elif perturb == "shift":
                dx, dy = options.get("shift", [1, 0])
                shifted = ndimage.shift(component.astype(np.uint8), (dy, dx), order=0, cval=0)
                component = shifted > 0
                if not component.any():
                    continue
            elif perturb != "none":
                raise ConfigError(f"backend {self.backend_id}: unknown perturbation {perturb!r}")
            masks.append(MaskRLE.encode(z_index, component).to_json())
        return {"masks": masks}


class IntensityJudge(RecordingBackend):
    """Votes +1 when the mean intensity under the candidate is at least
    `accept_hu` (default -400 HU).  Confidence grows with the distance from
    that threshold.  `invert` flips the opinion, for adversarial panels."""

    def _invoke(self, request):
        self._record(request)
        if request["task"] != "vote":
            raise SchemaViolation(
                f"intensity judge cannot serve task {request['task']!r}", self.backend_id
            )
        options = self.spec.options
        accept_hu = options.get("accept_hu", -400)
        scale = options.get("scale_hu", 800)

        pixels = request["images"]["slice"]
        candidate = request["masks"]["candidate"]
        mean = float(pixels[candidate].mean())
        sign = 1 if mean >= accept_hu else -1
        if options.get("invert", False):
            sign = -sign
        confidence = round(float(np.clip(abs(mean - accept_hu) / scale, 0.05, 1.0)), 4)
        return {"sign": sign, "confidence": confidence}


class TemplateDescriber(RecordingBackend):
    """Writes a formal 4-5 sentence report from the crops: lobe from the
    nodule position, density from the mean intensity under the masks, shape
    from the axis ratio and cavitation from holes in the masks."""

    def _invoke(self, request):
        self._record(request)
        z_indices = request["z_indices"]
        size = request["size"]
        position = request.get("position", {"x_fraction": 0.25, "z_fraction": 0.5})

        values, holes = [], False
        for i in range(len(z_indices)):
            pixels = request["images"][f"crop_{i}"]
            bits = request["masks"][f"crop_mask_{i}"]
            values.append(pixels[bits])
            holes = holes or bool(np.any(ndimage.binary_fill_holes(bits) & ~bits))
        mean_hu = float(np.concatenate(values).mean()) if values else 0.0

        lobe = lobe_from_position(position["x_fraction"], position["z_fraction"])
        density = density_from_hu(mean_hu)
        shape = shape_from_axes(size["long_diameter_mm"], size["short_diameter_mm"])
        margin = "smooth" if shape in ("round", "oval") else "lobulated"
        extent = (
            "on a single axial slice"
            if len(z_indices) == 1
            else f"spanning {len(z_indices)} consecutive axial slices"
        )

        sentences = [
            f"A {density} nodule is seen in the {LOBE_NAMES[lobe]}, {extent}.",
            f"It measures {size['long_diameter_mm']:.1f} x "
            f"{size['short_diameter_mm']:.1f} mm in the axial plane with a "
            f"craniocaudal extent of {size['height_mm']:.1f} mm.",
            f"The nodule has {_article(shape)} {shape} shape with {margin} margins.",
            "A central cavity is present."
            if holes
            else "There are no cavities or vacuoles within the lesion.",
            "No pleural indentation is identified.",
        ]
        return {"text": " ".join(sentences)}


def _article(word):
    return "an" if word[0] in "aeiou" else "a"


DENSITY_SEVERITY = {"ground-glass": 0.15, "part-solid": 0.45, "solid": 0.65}


class HeuristicAgent(RecordingBackend):
    """Rule-based discussant.

    In the first round the grade follows a severity score built from density,
    long diameter and margin, jittered by up to `jitter` (seeded per agent).
    In later rounds the agent adopts the confidence-weighted majority of its
    own and its peers' previous grades, ties going to the more severe grade,
    unless `stubborn` is set.
    """

    def _severity(self, request):
        attributes = request.get("attributes", {})
        size = request["size"]
        severity = DENSITY_SEVERITY.get(attributes.get("density"), 0.45)
        severity += min(size["long_diameter_mm"] / 30.0, 1.0) * 0.3
        if attributes.get("margin") in ("spiculated", "lobulated"):
            severity += 0.1
        if attributes.get("pleural_indentation") or attributes.get("vascular_convergence"):
            severity += 0.05
        rng = np.random.default_rng(self.spec.seed)
        jitter = self.spec.options.get("jitter", 0.15)
        return severity + rng.uniform(-jitter, jitter), rng

    def _invoke(self, request):
        self._record(request)
        grades = list(request["grades"])
        citations = list(request.get("knowledge", {}).get("citations", []))

        if request["round"] == 1 or request.get("own") is None:
            severity, rng = self._severity(request)
            index = int(np.clip(np.floor(severity * len(grades)), 0, len(grades) - 1))
            confidence = round(0.55 + 0.4 * float(rng.random()), 4)
            density = request.get("attributes", {}).get("density", "indeterminate")
            return {
                "grade": grades[index],
                "confidence": confidence,
                "rationale": (
                    f"{_article(density).capitalize()} {density} nodule with long diameter "
                    f"{request['size']['long_diameter_mm']:.1f} mm is most consistent "
                    f"with {grades[index]}."
                ),
                "citations": citations,
            }

        own = request["own"]
        if self.spec.options.get("stubborn", False):
            return {
                "grade": own["grade"],
                "confidence": own["confidence"],
                "rationale": f"Maintains {own['grade']} after reviewing the peers.",
                "citations": citations,
            }

        weights: Dict[str, float] = Counter()
        for opinion in [own] + list(request.get("peers", [])):
            weights[opinion["grade"]] += opinion["confidence"]
        total = sum(weights.values())
        # ties go to the more severe grade
        grade = max(weights, key=lambda g: (weights[g], grades.index(g)))
        confidence = round(weights[grade] / total, 4) if total > 0 else own["confidence"]
        return {
            "grade": grade,
            "confidence": confidence,
            "rationale": (
                f"Revised to {grade} after weighing the panel "
                f"({weights[grade]:.2f} of {total:.2f} confidence)."
            ),
            "citations": citations,
        }


def grade_tally(grades):
    """Formats counts like `invasive: 4, pre-invasive: 1`, most frequent
    first, then by name."""
    counts = Counter(grades)
    ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return ", ".join(f"{grade}: {count}" for grade, count in ordered)


class TallySummarizer(RecordingBackend):
    """Extractive summarizer for the three summarizer tasks."""

    def _invoke(self, request):
        self._record(request)
        task = request["task"]
        if task == "round":
            opinions = request["opinions"]
            lines = [f"Grade tally: {grade_tally(o['grade'] for o in opinions)}."]
            lines += [f"{o['agent_id']}: {o['rationale']}" for o in opinions]
            return {"text": " ".join(lines)}
        if task == "community":
            terms = ", ".join(request["terms"])
            sentences = " ".join(request.get("sentences", [])[:3])
            return {"text": f"Related terms: {terms}. {sentences}".strip()}
        summaries = request.get("summaries", [])
        body = " ".join(s["text"] for s in summaries)
        return {"text": f"Regarding {request['query']}: {body}".strip()}


class LexiconExtractorBackend(RecordingBackend):
    """Glossary matcher behind the extractor contract: every matched term is
    an entity and every pair of them a relation."""

    def _invoke(self, request):
        self._record(request)
        glossary = self.spec.options.get("glossary", GLOSSARY)
        entities = match_terms(request["text"], glossary)
        relations = [
            [a, b] for i, a in enumerate(entities) for b in entities[i + 1 :]
        ]
        return {"entities": entities, "relations": relations}


MOCK_KINDS = {
    "scripted": ScriptedBackend,
    "threshold": ThresholdDetector,
    "intensity": IntensityJudge,
    "template": TemplateDescriber,
    "heuristic": HeuristicAgent,
    "tally": TallySummarizer,
    "lexicon": LexiconExtractorBackend,
}
"""Mock implementations by `BackendSpec.kind`."""

DEFAULT_KINDS = {
    "detector": "threshold",
    "judge": "intensity",
    "describer": "template",
    "agent": "heuristic",
    "summarizer": "tally",
    "extractor": "lexicon",
}
