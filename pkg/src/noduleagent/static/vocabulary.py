"""noduleagent/static/vocabulary.py.

The controlled vocabulary shared by report parsing, the mock describer, the
synthetic annotations and the attribute-QA evaluator.
"""

import math

LOBES = ("right-upper", "right-middle", "right-lower", "left-upper", "left-lower")
DENSITIES = ("solid", "part-solid", "ground-glass")
SHAPES = ("round", "oval", "irregular", "lobulated")
MARGINS = ("smooth", "spiculated", "lobulated", "ill-defined")

CATEGORICAL_FIELDS = {
    "lobe": LOBES,
    "density": DENSITIES,
    "shape": SHAPES,
    "margin": MARGINS,
}
"""Single-valued attributes and their legal values."""

BOOLEAN_FIELDS = (
    "cavitation",
    "vacuole",
    "air_bronchogram",
    "pleural_indentation",
    "vascular_convergence",
)

ATTRIBUTE_KEYS = tuple(CATEGORICAL_FIELDS) + BOOLEAN_FIELDS + ("size_mm",)

LOBE_NAMES = {
    "right-upper": "right upper lobe",
    "right-middle": "right middle lobe",
    "right-lower": "right lower lobe",
    "left-upper": "left upper lobe",
    "left-lower": "left lower lobe",
}


def _lexicon():
    entries = []

    def add(field, value, *phrases):
        for phrase in phrases:
            entries.append((field, value, tuple(phrase.split())))

    for lobe, name in LOBE_NAMES.items():
        side, level = lobe.split("-")
        add("lobe", lobe, name, f"{level} lobe of the {side} lung")
    add("lobe", "right-upper", "rul")
    add("lobe", "right-middle", "rml", "middle lobe")
    add("lobe", "right-lower", "rll")
    add("lobe", "left-upper", "lul", "lingula")
    add("lobe", "left-lower", "lll")

    add("density", "solid", "solid", "soft-tissue density", "soft tissue density")
    add("density", "part-solid", "part-solid", "part solid", "semi-solid", "subsolid",
        "mixed density", "mixed ground-glass")
    add("density", "ground-glass", "ground-glass", "ground glass", "pure ground-glass",
        "non-solid", "nonsolid", "ggo")

    add("shape", "round", "round", "rounded", "spherical", "nodular round")
    add("shape", "oval", "oval", "ovoid", "elliptical")
    add("shape", "irregular", "irregular", "irregularly shaped", "irregular shape")
    add("shape", "lobulated", "lobulated shape", "lobulated contour", "lobulated outline")

    add("margin", "smooth", "smooth", "well-defined", "well defined", "well-circumscribed",
        "circumscribed", "sharp margins", "sharply marginated")
    add("margin", "spiculated", "spiculated", "spiculation", "spiculations", "spicules",
        "spiculae", "spiky")
    add("margin", "lobulated", "lobulated", "lobulation", "lobulations")
    add("margin", "ill-defined", "ill-defined", "ill defined", "poorly defined",
        "poorly marginated", "blurred")

    add("cavitation", True, "cavity", "cavities", "cavitation", "cavitary", "cavitated")
    add("vacuole", True, "vacuole", "vacuoles", "vacuolar", "vacuolation",
        "bubble-like lucency", "bubble-like lucencies")
    add("air_bronchogram", True, "air bronchogram", "air bronchograms", "air-bronchogram",
        "air-bronchograms")
    add("pleural_indentation", True, "pleural indentation", "pleural retraction",
        "pleural tag", "pleural tags")
    add("vascular_convergence", True, "vascular convergence", "vessel convergence",
        "converging vessels")
    return tuple(entries)


LEXICON = _lexicon()
"""(field, value, phrase tokens) triples recognised in report text.

NOTE: Overlapping hits are resolved longest-first, so "lobulated contour"
reads as a shape while a bare "lobulated" reads as a margin.
"""

NEGATION_TRIGGERS = (("no",), ("without",), ("absence", "of"))
NEGATION_WINDOW = 4
"""A finding is negated when a trigger starts within this many tokens before
it, inside the same sentence."""

CLAUSE_BREAKS = r"[.;:!?()]"

SIZE_PATTERN = r"(\d+(?:\.\d+)?)(?:\s*(?:x|×|by)\s*\d+(?:\.\d+)?)*\s*(mm|cm)\b"

SIZE_BUCKETS = ((0.0, 6.0, "<6 mm"), (6.0, 10.0, "6-10 mm"), (10.0, 20.0, "10-20 mm"),
                (20.0, math.inf, ">=20 mm"))


def size_bucket(size_mm):
    for low, high, label in SIZE_BUCKETS:
        if low <= size_mm < high:
            return label
    raise ValueError(f"size {size_mm} is not a positive length")


def lobe_from_position(x_fraction, z_fraction):
    """Lobar location from relative axial position and depth.

    Image left is patient right (radiological convention) and slice 0 is the
    most cranial.  The right lung is split in thirds, the left lung in halves.
    """
    side = "right" if x_fraction < 0.5 else "left"
    if side == "right":
        level = "upper" if z_fraction < 1 / 3 else "middle" if z_fraction < 2 / 3 else "lower"
    else:
        level = "upper" if z_fraction < 0.5 else "lower"
    return f"{side}-{level}"


def density_from_hu(mean_hu):
    """Density class of a mean attenuation."""
    if mean_hu >= -100:
        return "solid"
    if mean_hu >= -500:
        return "part-solid"
    return "ground-glass"


def shape_from_axes(long_mm, short_mm):
    ratio = short_mm / long_mm
    if ratio >= 0.85:
        return "round"
    if ratio >= 0.6:
        return "oval"
    return "irregular"


POSITIVE_TEMPLATES = {
    "lobe": "Is the nodule located in the {value}?",
    "density": "Does the report describe a {value} density?",
    "shape": "Does the report describe a {value} shape?",
    "margin": "Does the report describe a {value} margin?",
    "cavitation": "Does the report describe cavitation?",
    "vacuole": "Does the report describe vacuoles?",
    "air_bronchogram": "Does the report describe an air bronchogram?",
    "pleural_indentation": "Does the report describe pleural indentation?",
    "vascular_convergence": "Does the report describe vascular convergence?",
    "size_mm": "Does the report give a size in the {value} range?",
}

DISTRACTORS = (
    ("cavitation", True, "Does the report claim cavitation?"),
    ("vacuole", True, "Does the report claim vacuoles?"),
    ("air_bronchogram", True, "Does the report claim an air bronchogram?"),
    ("pleural_indentation", True, "Does the report claim pleural indentation?"),
    ("vascular_convergence", True, "Does the report claim vascular convergence?"),
    ("margin", "spiculated", "Does the report claim a spiculated margin?"),
)
"""Negative questions: fabricated findings a faithful report must not assert.

A distractor is skipped when the annotation asserts exactly that value.
"""

GLOSSARY = (
    "adenocarcinoma",
    "adenocarcinoma in situ",
    "air bronchogram",
    "atypical adenomatous hyperplasia",
    "benign",
    "calcification",
    "cavitation",
    "density",
    "doubling time",
    "ground-glass",
    "growth",
    "invasive",
    "lepidic",
    "lobulation",
    "malignancy",
    "margin",
    "minimally invasive",
    "nodule",
    "part-solid",
    "pleural indentation",
    "pre-invasive",
    "size",
    "smooth",
    "solid",
    "spiculation",
    "vacuole",
    "vascular convergence",
)
"""Pathology terms recognised by the lexicon knowledge extractor."""

PERSONAS = (
    "thoracic radiologist",
    "pulmonary pathologist",
    "thoracic oncologist",
    "thoracic surgeon",
    "pulmonologist",
)
"""Agent personas, assigned cyclically by agent index."""
