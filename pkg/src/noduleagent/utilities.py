"""noduleagent/utilities.py.

Depository for generic python utility snippets.
"""

import hashlib
import json
import os
import re
from functools import wraps
from typing import List

import numpy as np

memoized_attr_bucket = "_memoized_attrs"


def memoized_property(fget):
    attr_name = f"_{fget.__name__}"

    @wraps(fget)
    def fget_memoized(self):
        if not hasattr(self, attr_name):
            setattr(self, attr_name, fget(self))
            if hasattr(self, memoized_attr_bucket):
                getattr(self, memoized_attr_bucket).append(attr_name)
            else:
                setattr(self, memoized_attr_bucket, [attr_name])
        return getattr(self, attr_name)

    return property(fget_memoized)


def _canonicalize(value):
    """Rewrites `value` into plain JSON data.  Arrays are replaced by a digest
    of their shape, dtype and bytes."""
    if isinstance(value, np.ndarray):
        digest = hashlib.sha256(np.ascontiguousarray(value).tobytes()).hexdigest()
        return {"__array__": [list(value.shape), str(value.dtype), digest]}
    if isinstance(value, dict):
        return {str(k): _canonicalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonicalize(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def canonical_json(value) -> str:
    """Deterministic JSON text: sorted keys, no whitespace, arrays digested."""
    return json.dumps(_canonicalize(value), sort_keys=True, separators=(",", ":"))


def request_hash(request) -> str:
    """SHA-256 of the canonical JSON form of a backend request."""
    return hashlib.sha256(canonical_json(request).encode("utf-8")).hexdigest()


def dump_json(value, path):
    """Writes `value` as stable, human-diffable JSON (sorted keys, two-space
    indent, trailing newline)."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(value, f, sort_keys=True, indent=2)
        f.write("\n")


_TOKEN = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")


def tokenize(text: str) -> List[str]:
    """Lowercased word tokens; hyphenated compounds ("part-solid") stay whole."""
    return _TOKEN.findall(text.lower())


# NOTE: order matters, longest suffixes first.
_SUFFIXES = ("ations", "ation", "ated", "ies", "ing", "ed", "s")


def stem(token: str) -> str:
    """A small suffix stemmer.

    Strips one of a handful of inflectional suffixes when at least four
    characters remain, so that "spiculated" and "spiculation" both become
    "spicul" and "margins" becomes "margin".
    """
    for suffix in _SUFFIXES:
        if token.endswith(suffix) and len(token) - len(suffix) >= 4:
            if suffix == "ies":
                return token[: -len(suffix)] + "y"
            return token[: -len(suffix)]
    return token


def stem_all(tokens: List[str]) -> List[str]:
    return [stem(t) for t in tokens]


def find_phrase(haystack: List[str], needle: List[str]) -> List[int]:
    """Start positions at which the token sequence `needle` occurs."""
    width = len(needle)
    if width == 0:
        return []
    return [
        i
        for i in range(len(haystack) - width + 1)
        if haystack[i : i + width] == needle
    ]
