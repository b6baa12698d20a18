import json
import tempfile
from os.path import join

from noduleagent.config import PipelineConfig
from noduleagent.evaluation import build_attribute_questions, lungdlc_score
from noduleagent.pipeline import nodule_dir, read_report, run_pipeline
from noduleagent.synth import SynthSpec, synth_fixture, write_fixture

# an all-mock run over one synthetic nodule; no model endpoints are contacted
config = PipelineConfig.default_mock(seed=0)
fixture = synth_fixture(SynthSpec.single_blob(), seed=0)

workdir = tempfile.mkdtemp(prefix="noduleagent-demo-")
write_fixture(fixture, join(workdir, "fixture"))
out_dir = join(workdir, "run")

print("==== Spotting, describing and diagnosing ====")
finals = run_pipeline(config, join(workdir, "fixture", "volume.json"), out_dir)
print(f"{len(finals)} nodule(s) found; artifacts under {out_dir}")

for k, final in enumerate(finals):
    report = read_report(out_dir, k)
    print(f"==== Nodule {k} ====")
    print(report.text)
    print(f"grade: {final.grade.value} after {final.rounds_used} round(s)"
          + (" (fallback vote)" if final.fallback else ""))
    with open(join(nodule_dir(out_dir, k), "transcript.json"), "r", encoding="utf-8") as f:
        transcript = json.load(f)
    for event in transcript["events"]:
        print(f"  round {event['round']} {event['agent_id']}: "
              f"{event['grade']} ({event['confidence']:.2f})")

print("==== Report faithfulness against the synthetic annotation ====")
cases = [
    (f"nodule-{k}", read_report(out_dir, k), build_attribute_questions(annotation))
    for k, annotation in enumerate(fixture.annotations)
]
print(json.dumps(lungdlc_score(cases).to_json(), indent=2))
