"""noduleagent/backend/schemas.py.

Request and response contracts for each backend role.

Every request is a dict carrying a free-text "prompt", an "images" map of
named pixel arrays, an optional "masks" map of named boolean arrays, and the
role-specific fields checked below.  Every response is a JSON object.
"""

import numbers

import numpy as np

from noduleagent.exceptions import SchemaViolation

JUDGE_TASKS = ("vote", "qa", "score")
SUMMARIZER_TASKS = ("round", "community", "answer")
LLM_SCORE_ASPECTS = ("fluency", "relevance", "consistency", "rationality")

REQUEST_FIELDS = {
    "detector": ("z_index",),
    "judge": ("task",),
    "describer": ("z_indices", "size"),
    "agent": ("agent_index", "round", "grades"),
    "summarizer": ("task",),
    "extractor": ("sentence_id", "text"),
}


class _Check:
    """Accumulates the path of the value under inspection into error
    messages."""

    def __init__(self, role, direction, backend_id):
        self.role = role
        self.direction = direction
        self.backend_id = backend_id

    def fail(self, message):
        raise SchemaViolation(f"{self.role} {self.direction}: {message}", self.backend_id)

    def require(self, data, key, kind=None):
        if not isinstance(data, dict) or key not in data:
            self.fail(f"missing field {key!r}")
        value = data[key]
        if kind is not None and not isinstance(value, kind):
            self.fail(f"field {key!r} has type {type(value).__name__}")
        return value

    def unit_interval(self, data, key):
        value = self.require(data, key, numbers.Real)
        if isinstance(value, bool) or not 0.0 <= float(value) <= 1.0:
            self.fail(f"field {key!r} = {value!r} outside [0, 1]")
        return float(value)


def validate_request(role, request, backend_id=None):
    check = _Check(role, "request", backend_id)
    if not isinstance(request, dict):
        check.fail("not a mapping")
    check.require(request, "prompt", str)
    images = request.get("images", {})
    if not isinstance(images, dict) or any(
        not isinstance(v, np.ndarray) for v in images.values()
    ):
        check.fail("images must map names to arrays")
    masks = request.get("masks", {})
    if not isinstance(masks, dict) or any(
        not isinstance(v, np.ndarray) or v.dtype != bool for v in masks.values()
    ):
        check.fail("masks must map names to boolean arrays")

    for key in REQUEST_FIELDS[role]:
        check.require(request, key)

    if role == "detector" and "slice" not in images:
        check.fail("detector requests carry the slice image")
    if role == "judge" and request["task"] not in JUDGE_TASKS:
        check.fail(f"unknown judge task {request['task']!r}")
    if role == "judge" and request["task"] == "vote" and "candidate" not in masks:
        check.fail("vote requests carry the candidate mask")
    if role == "summarizer" and request["task"] not in SUMMARIZER_TASKS:
        check.fail(f"unknown summarizer task {request['task']!r}")
    if role == "agent" and not request["grades"]:
        check.fail("agent requests list the legal grades")
    return request


def _validate_rle(check, record):
    z = check.require(record, "z", int)
    dims = check.require(record, "dims", list)
    runs = check.require(record, "runs", list)
    if len(dims) != 2 or any(not isinstance(d, int) or d <= 0 for d in dims):
        check.fail(f"mask dims {dims!r} are not two positive integers")
    for run in runs:
        if not isinstance(run, (list, tuple)) or len(run) != 2:
            check.fail(f"mask run {run!r} is not a [start, length] pair")
    return z


def validate_response(role, request, response, backend_id=None):
    check = _Check(role, "response", backend_id)
    if not isinstance(response, dict):
        check.fail("not a JSON object")

    if role == "detector":
        for record in check.require(response, "masks", list):
            _validate_rle(check, record)

    elif role == "judge":
        task = request.get("task", "vote")
        if task == "vote":
            sign = check.require(response, "sign", numbers.Integral)
            if isinstance(sign, bool) or sign not in (-1, 1):
                check.fail(f"sign {sign!r} is not +1 or -1")
            check.unit_interval(response, "confidence")
        elif task == "qa":
            answer = check.require(response, "answer", str)
            if answer.strip().lower() not in ("yes", "no"):
                check.fail(f"answer {answer!r} is not yes/no")
        else:
            aspects = check.require(response, "aspects", dict)
            for aspect in LLM_SCORE_ASPECTS:
                check.unit_interval(aspects, aspect)

    elif role in ("describer", "summarizer"):
        check.require(response, "text", str)

    elif role == "agent":
        grade = check.require(response, "grade", str)
        if grade not in request["grades"]:
            check.fail(f"grade {grade!r} not among {request['grades']}")
        check.unit_interval(response, "confidence")
        check.require(response, "rationale", str)
        citations = check.require(response, "citations", list)
        if any(isinstance(c, bool) or not isinstance(c, int) for c in citations):
            check.fail("citations must be community ids")

    elif role == "extractor":
        entities = check.require(response, "entities", list)
        if any(not isinstance(e, str) for e in entities):
            check.fail("entities must be strings")
        for relation in check.require(response, "relations", list):
            if (
                not isinstance(relation, (list, tuple))
                or len(relation) != 2
                or any(r not in entities for r in relation)
            ):
                check.fail(f"relation {relation!r} does not join two listed entities")

    return response
