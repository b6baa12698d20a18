"""noduleagent/pipeline.py.

End-to-end orchestration of one CT volume.  Every stage reads and writes a
fixed output layout, so stages may also be run one at a time:

    <out>/detections.json
    <out>/nodules/<k>/report.json
    <out>/nodules/<k>/transcript.json
    <out>/nodules/<k>/diagnosis.json
    <out>/memory/<case_id>.jsonl
    <out>/error.json                   (only after a failure)
"""

import json
import logging
import os
import re
import shutil
from os.path import basename, exists, join, splitext
from typing import List, Optional

from noduleagent.config import PipelineBackends, PipelineConfig
from noduleagent.das import DASConfig, NoduleRecord, diagnose
from noduleagent.exceptions import DataError, NoduleAgentError
from noduleagent.imaging import Volume
from noduleagent.io.volume import load_volume
from noduleagent.knowledge import (
    KnowledgeBase,
    LexiconExtractor,
    LLMExtractor,
    ingest_documents,
    load_graph,
)
from noduleagent.memory import CaseMemory
from noduleagent.radiologist import CTReport, build_describe_request, generate_report
from noduleagent.spotter import (
    NoduleDetection,
    detection_from_record,
    detection_to_record,
    spot,
)
from noduleagent.utilities import dump_json

logger = logging.getLogger(__name__)

DETECTIONS_FILE = "detections.json"
ERROR_FILE = "error.json"


def nodule_dir(out_dir, k):
    return join(out_dir, "nodules", str(k))


def case_id_for(volume_path, k):
    stem = re.sub(r"[^A-Za-z0-9._-]", "_", splitext(basename(volume_path))[0]) or "volume"
    return f"{stem}-nodule-{k}"


def open_memory(config: PipelineConfig, out_dir, fresh=False) -> CaseMemory:
    """The case memory of a run.  Without a configured `memory_root` the store
    lives under `out_dir`, and `fresh` empties it first so that a rerun into
    the same directory recalls nothing from the previous one.  A configured
    root is shared across runs and never emptied."""
    root = config.memory_root
    if root is None:
        root = join(out_dir, "memory")
        if fresh and exists(root):
            logger.info("clearing the memory of a previous run at %s", root)
            shutil.rmtree(root)
    return CaseMemory(root, clock=config.clock())


def load_knowledge(config: PipelineConfig, backends: PipelineBackends) -> Optional[KnowledgeBase]:
    """The prebuilt graph named by the config, else a graph built from the
    configured corpus, else nothing."""
    if config.knowledge_graph:
        return load_graph(config.knowledge_graph)
    if not config.corpus:
        return None
    extractor = (
        LLMExtractor(backends.extractor) if backends.extractor is not None else LexiconExtractor()
    )
    corpus = ingest_documents(config.corpus)
    knowledge = KnowledgeBase.build(corpus, backends.summarizer, extractor)
    logger.info(
        "knowledge graph: %d entities, %d communities",
        len(knowledge.graph.entities),
        len(knowledge.summaries),
    )
    return knowledge


def spot_volume(config, backends, volume: Volume, out_dir) -> List[NoduleDetection]:
    detections = spot(
        volume,
        backends.experts,
        backends.judges,
        config.cluster,
        config.link_iou,
        config.stages,
        config.workers,
    )
    os.makedirs(out_dir, exist_ok=True)
    dump_json(
        {"detections": [detection_to_record(d) for d in detections]},
        join(out_dir, DETECTIONS_FILE),
    )
    logger.info("%d detections written to %s", len(detections), out_dir)
    return detections


def read_detections(out_dir) -> List[NoduleDetection]:
    path = join(out_dir, DETECTIONS_FILE)
    try:
        with open(path, "r", encoding="utf-8") as f:
            records = json.load(f)["detections"]
    except (OSError, json.JSONDecodeError, KeyError) as err:
        raise DataError(f"unreadable detections {path}: {err}") from err
    return [detection_from_record(r) for r in records]


def describe_detection(config, backends, volume, detection, case_id, out_dir, k, memory=None):
    """Writes the report of detection `k` and logs its image, size and
    report to memory."""
    request = build_describe_request(detection, volume, config.margin_factor)
    report = generate_report(backends.describer, request)
    if memory is not None:
        memory.put(
            case_id,
            "NoduleImage",
            {
                "z_indices": [m.z_index for m in detection.masks],
                "masks": [m.to_rle() for m in detection.masks],
            },
        )
        memory.put(case_id, "NoduleSize", detection.size.to_json())
        memory.put(
            case_id,
            "CTReport",
            {"text": report.text, "provenance": report.provenance},
        )
    os.makedirs(nodule_dir(out_dir, k), exist_ok=True)
    dump_json({"case_id": case_id, **report.to_json()}, join(nodule_dir(out_dir, k), "report.json"))
    return report


def read_report(out_dir, k) -> CTReport:
    path = join(nodule_dir(out_dir, k), "report.json")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return CTReport.inflate(json.load(f))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise DataError(f"unreadable report {path}: {err}") from err


def nodule_record(case_id, volume, detection, report, margin_factor) -> NoduleRecord:
    return NoduleRecord.from_detection(case_id, volume, detection, report, margin_factor)


def diagnose_detection(config, backends, record, out_dir, k, knowledge=None, memory=None):
    das_config = DASConfig(
        agents=backends.agents,
        summarizer=backends.summarizer,
        scheme=config.scheme,
        max_rounds=config.max_rounds,
        top_k=config.top_k,
        workers=config.workers,
    )
    target = nodule_dir(out_dir, k)
    os.makedirs(target, exist_ok=True)
    try:
        final, state = diagnose(das_config, record, knowledge, memory)
    except NoduleAgentError as err:
        state = getattr(err, "state", None)
        if state is not None:
            dump_json(state.transcript(), join(target, "transcript.json"))
        raise
    dump_json(state.transcript(final), join(target, "transcript.json"))
    dump_json({"case_id": record.case_id, **final.to_json()}, join(target, "diagnosis.json"))
    logger.info("%s: %s after %d rounds", record.case_id, final.grade.value, final.rounds_used)
    return final


def write_error_manifest(out_dir, err: NoduleAgentError, stage=None):
    """Machine-readable account of a failed run."""
    state = getattr(err, "state", None)
    manifest = {
        "type": type(err).__name__,
        "message": str(err),
        "exit_code": err.exit_code,
        "stage": stage,
        "context": list(err.context),
        "partial_transcript": None if state is None else state.transcript(),
    }
    os.makedirs(out_dir, exist_ok=True)
    dump_json(manifest, join(out_dir, ERROR_FILE))
    err.manifest_path = join(out_dir, ERROR_FILE)
    return manifest


def run_pipeline(config: PipelineConfig, volume_path, out_dir):
    """Spots, describes and diagnoses every nodule of one volume.

    A failure leaves the artifacts written so far, adds `error.json` and
    propagates.  Returns the final diagnoses by nodule index.
    """
    stage = "load"
    if exists(join(out_dir, ERROR_FILE)):
        os.remove(join(out_dir, ERROR_FILE))
    try:
        volume = load_volume(volume_path)
        backends = config.build_backends()
        memory = open_memory(config, out_dir, fresh=True)

        stage = "spot"
        detections = spot_volume(config, backends, volume, out_dir)
        if not detections:
            return []

        stage = "knowledge"
        knowledge = load_knowledge(config, backends)

        finals = []
        for k, detection in enumerate(detections):
            case_id = case_id_for(volume_path, k)
            try:
                stage = "describe"
                report = describe_detection(
                    config, backends, volume, detection, case_id, out_dir, k, memory
                )
                stage = "diagnose"
                record = nodule_record(case_id, volume, detection, report, config.margin_factor)
                finals.append(
                    diagnose_detection(config, backends, record, out_dir, k, knowledge, memory)
                )
            except NoduleAgentError as err:
                raise err.annotate(f"nodule {k}")
        return finals
    except NoduleAgentError as err:
        write_error_manifest(out_dir, err, stage)
        logger.error("pipeline failed during %s: %s", stage, err)
        raise
