"""noduleagent/cli.py.

Command line surface.  Every subcommand is a thin wrapper over the module
operations and shares `--config`, `--out`, `--seed` and `-v`.

Exit codes: 0 success, 2 configuration error, 3 backend failure, 4 data
error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from glob import glob
from os.path import join

from noduleagent.config import PipelineConfig, config_path, load_config
from noduleagent.das import SCHEMES
from noduleagent.evaluation import (
    ablation_detection,
    build_attribute_questions,
    detection_metrics,
    grade_metrics,
    load_cases,
    lungdlc_score,
    scored_masks,
    write_metrics_json,
    write_verdicts_csv,
)
from noduleagent.exceptions import DataError, NoduleAgentError
from noduleagent.io.volume import load_volume
from noduleagent.knowledge import load_graph, save_graph
from noduleagent.pipeline import (
    case_id_for,
    describe_detection,
    diagnose_detection,
    load_knowledge,
    nodule_record,
    open_memory,
    read_detections,
    read_report,
    run_pipeline,
    spot_volume,
    write_error_manifest,
)
from noduleagent.synth import SynthSpec, read_gold_masks, synth_fixture, write_fixture
from noduleagent.utilities import dump_json

logger = logging.getLogger(__name__)


def _resolve_config(args) -> PipelineConfig:
    path = config_path(args.config)
    if path is None:
        logger.warning("no configuration given; using the all-mock configuration")
        config = PipelineConfig.default_mock(seed=args.seed or 0)
    else:
        config = load_config(path)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
    return config


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"unreadable JSON file {path}: {err}") from err


def _emit(result):
    print(json.dumps(result, indent=2, sort_keys=True))


def cmd_synth(args):
    spec = SynthSpec.inflate(_read_json(args.spec)) if args.spec else SynthSpec.single_blob()
    fixture = synth_fixture(spec, seed=args.seed or 0)
    write_fixture(fixture, args.out)
    _emit({"out": args.out, "nodules": len(fixture.gold_masks)})


def cmd_spot(args):
    config = _resolve_config(args)
    volume = load_volume(args.volume)
    detections = spot_volume(config, config.build_backends(), volume, args.out)
    _emit({"detections": len(detections)})


def cmd_describe(args):
    config = _resolve_config(args)
    volume = load_volume(args.volume)
    backends = config.build_backends()
    memory = open_memory(config, args.out, fresh=True)
    detections = read_detections(args.out)
    for k, detection in enumerate(detections):
        describe_detection(
            config, backends, volume, detection, case_id_for(args.volume, k), args.out, k, memory
        )
    _emit({"reports": len(detections)})


def cmd_diagnose(args):
    config = _resolve_config(args)
    volume = load_volume(args.volume)
    backends = config.build_backends()
    memory = open_memory(config, args.out)
    detections = read_detections(args.out)
    knowledge = load_knowledge(config, backends) if detections else None
    grades = {}
    for k, detection in enumerate(detections):
        record = nodule_record(
            case_id_for(args.volume, k),
            volume,
            detection,
            read_report(args.out, k),
            config.margin_factor,
        )
        final = diagnose_detection(config, backends, record, args.out, k, knowledge, memory)
        grades[record.case_id] = final.grade.value
    _emit(grades)


def cmd_pipeline(args):
    config = _resolve_config(args)
    finals = run_pipeline(config, args.volume, args.out)
    _emit({str(k): f.to_json() for k, f in enumerate(finals)})


def cmd_kg_build(args):
    config = _resolve_config(args)
    config = replace(config, knowledge_graph=None)
    if args.corpus:
        config = replace(config, corpus=list(args.corpus))
    backends = config.build_backends()
    if not config.corpus:
        raise DataError("no corpus documents to build a graph from")
    knowledge = load_knowledge(config, backends)
    path = save_graph(knowledge, join(args.out, "knowledge_graph.json"))
    _emit(
        {
            "graph": path,
            "entities": len(knowledge.graph.entities),
            "communities": len(knowledge.summaries),
        }
    )


def cmd_kg_query(args):
    config = _resolve_config(args)
    backends = config.build_backends()
    knowledge = load_graph(args.graph) if args.graph else load_knowledge(config, backends)
    if knowledge is None:
        raise DataError("no knowledge graph or corpus configured")
    answer = knowledge.answer(args.query, None, backends.summarizer, args.top_k or config.top_k)
    if args.out:
        dump_json(answer.to_json(), join(args.out, "answer.json"))
    _emit(answer.to_json())


def _pipeline_dlc_cases(pipeline_out, annotations):
    cases = []
    for k, annotation in enumerate(annotations):
        try:
            report = read_report(pipeline_out, k)
        except DataError:
            logger.warning("nodule %d has no report; skipped", k)
            continue
        cases.append((f"nodule-{k}", report, build_attribute_questions(annotation)))
    return cases


def cmd_eval_dlc(args):
    config = _resolve_config(args)
    answerer = None
    if args.judge:
        answerer = config.build_backends().answerer
        if answerer is None:
            raise DataError("--judge needs an `answerer` backend in the configuration")
    if args.cases:
        cases = [
            (case.case_id, case.report, build_attribute_questions(case.annotation))
            for case in load_cases(args.cases)
            if case.report is not None
        ]
    else:
        cases = _pipeline_dlc_cases(args.pipeline_out, _read_json(args.annotation))
    result = lungdlc_score(cases, answerer)
    write_metrics_json(result.to_json(), join(args.out, "dlc_metrics.json"))
    write_verdicts_csv(result.verdicts, join(args.out, "dlc_verdicts.csv"))
    _emit(result.to_json())


def cmd_eval_grade(args):
    config = _resolve_config(args)
    if args.cases:
        cases = [c for c in load_cases(args.cases) if c.gold_grade is not None]
        predicted = [c.predicted_grade for c in cases]
        gold = [c.gold_grade for c in cases]
    else:
        paths = sorted(glob(join(args.pipeline_out, "nodules", "*", "diagnosis.json")))
        by_case = {d["case_id"]: d["grade"] for d in map(_read_json, paths)}
        gold_by_case = _read_json(args.gold)
        missing = sorted(set(gold_by_case) - set(by_case))
        if missing:
            raise DataError(f"no diagnosis for cases {missing}")
        gold = [gold_by_case[c] for c in sorted(gold_by_case)]
        predicted = [by_case[c] for c in sorted(gold_by_case)]
    metrics = grade_metrics(predicted, gold, SCHEMES[config.scheme])
    write_metrics_json(metrics.to_json(), join(args.out, "grade_metrics.json"))
    _emit(metrics.to_json())


def cmd_eval_detect(args):
    config = _resolve_config(args)
    gold = read_gold_masks(args.gold)
    if args.ablation:
        volume = load_volume(args.volume)
        backends = config.build_backends()
        results = ablation_detection(
            volume,
            gold,
            backends.experts,
            backends.judges,
            config.cluster,
            config.link_iou,
            config.iou_threshold,
            config.workers,
        )
        report = {name: m.to_json() for name, m in results.items()}
    else:
        detections = read_detections(args.pipeline_out or args.out)
        report = detection_metrics(scored_masks(detections), gold, config.iou_threshold).to_json()
    write_metrics_json(report, join(args.out, "detection_metrics.json"))
    _emit(report)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="noduleagent", description="Lung nodule detection, reporting and grading."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="write a synthetic volume")
    synth.add_argument("--spec", help="blob specification JSON")
    synth.set_defaults(handler=cmd_synth)

    for name, handler, text in (
        ("spot", cmd_spot, "detect nodules"),
        ("describe", cmd_describe, "write reports for spotted nodules"),
        ("diagnose", cmd_diagnose, "grade described nodules"),
        ("pipeline", cmd_pipeline, "run every stage"),
    ):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("--volume", required=True, help="volume header JSON")
        sub.set_defaults(handler=handler)

    kg = commands.add_parser("kg", help="knowledge graph").add_subparsers(
        dest="kg_command", required=True
    )
    kg_build = kg.add_parser("build", parents=[common])
    kg_build.add_argument("--corpus", nargs="*", help="text or Markdown documents")
    kg_build.set_defaults(handler=cmd_kg_build)
    kg_query = kg.add_parser("query", parents=[common])
    kg_query.add_argument("--graph", help="graph JSON written by `kg build`")
    kg_query.add_argument("--query", required=True)
    kg_query.add_argument("--top-k", type=int, default=None)
    kg_query.set_defaults(handler=cmd_kg_query)

    evaluate = commands.add_parser("eval", help="evaluation").add_subparsers(
        dest="eval_command", required=True
    )
    dlc = evaluate.add_parser("dlc", parents=[common])
    dlc_source = dlc.add_mutually_exclusive_group(required=True)
    dlc_source.add_argument("--cases", help="evaluation JSONL")
    dlc_source.add_argument("--pipeline-out", help="pipeline output directory")
    dlc.add_argument("--annotation", help="annotation JSON list, with --pipeline-out")
    dlc.add_argument("--judge", action="store_true", help="answer with the judge backend")
    dlc.set_defaults(handler=cmd_eval_dlc)

    grade = evaluate.add_parser("grade", parents=[common])
    grade_source = grade.add_mutually_exclusive_group(required=True)
    grade_source.add_argument("--cases", help="evaluation JSONL")
    grade_source.add_argument("--pipeline-out", help="pipeline output directory")
    grade.add_argument("--gold", help="JSON map of case id to gold grade, with --pipeline-out")
    grade.set_defaults(handler=cmd_eval_grade)

    detect = evaluate.add_parser("detect", parents=[common])
    detect.add_argument("--gold", required=True, help="gold_masks.json")
    detect.add_argument("--pipeline-out", help="directory holding detections.json")
    detect.add_argument("--volume", help="volume header JSON, with --ablation")
    detect.add_argument("--ablation", action="store_true", help="compare spotter stages")
    detect.set_defaults(handler=cmd_eval_detect)
    return parser


def _check_pairs(parser, args):
    if getattr(args, "pipeline_out", None) and getattr(args, "eval_command", None) == "dlc":
        if not args.annotation:
            parser.error("--pipeline-out needs --annotation")
    if getattr(args, "pipeline_out", None) and getattr(args, "eval_command", None) == "grade":
        if not args.gold:
            parser.error("--pipeline-out needs --gold")
    if getattr(args, "ablation", False) and not args.volume:
        parser.error("--ablation needs --volume")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_pairs(parser, args)
    logging.basicConfig(
        level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.handler(args)
    except NoduleAgentError as err:
        if getattr(err, "manifest_path", None) is None:
            write_error_manifest(args.out, err, args.command)
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
