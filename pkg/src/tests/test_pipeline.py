"""test/test_pipeline.py.

Tests for noduleagent/pipeline.py, noduleagent/cli.py and
noduleagent/synth.py .
"""

import filecmp
import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from os.path import exists, join

import ddt

from noduleagent.cli import main
from noduleagent.config import PipelineConfig
from noduleagent.exceptions import DataError
from noduleagent.io.volume import load_volume
from noduleagent.pipeline import *
from noduleagent.synth import Blob, SynthSpec, read_gold_masks, synth_fixture, write_fixture

epsilon = 0.001


def run_cli(*argv):
    """Exit code and parsed standard output of one command."""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    text = out.getvalue()
    return code, json.loads(text) if text.strip() else None


def relative_files(root):
    found = []
    for base, _, names in os.walk(root):
        found += [os.path.relpath(join(base, n), root) for n in names]
    return sorted(found)


@ddt.ddt
class TestSynth(unittest.TestCase):
    """Check the synthetic fixtures."""

    def test_single_blob_annotation(self):
        fixture = synth_fixture(SynthSpec.single_blob(), seed=0)
        self.assertEqual([m.z_index for m in fixture.gold_masks[0]], [3, 4, 5, 6, 7])
        annotation = fixture.annotations[0]
        self.assertEqual(annotation["lobe"], "right-middle")
        self.assertEqual(annotation["density"], "solid")
        self.assertEqual(annotation["shape"], "oval")
        self.assertEqual(annotation["margin"], "smooth")
        self.assertAlmostEqual(annotation["size_mm"], 11.0)
        self.assertNotIn("cavitation", annotation)

    def test_noise_follows_seed(self):
        first = synth_fixture(SynthSpec.single_blob(), seed=1)
        again = synth_fixture(SynthSpec.single_blob(), seed=1)
        other = synth_fixture(SynthSpec.single_blob(), seed=2)
        self.assertEqual(first.volume, again.volume)
        self.assertNotEqual(first.volume, other.volume)
        self.assertEqual(first.gold_masks, other.gold_masks)

    def test_cavity_and_density(self):
        spec = SynthSpec(
            dims=(48, 48, 10),
            blobs=[Blob(center=(34.0, 12.0, 3.0), radii=(8.0, 8.0, 2.5), hu=-300, cavity=0.4)],
        )
        annotation = synth_fixture(spec).annotations[0]
        self.assertEqual(annotation["density"], "part-solid")
        self.assertEqual(annotation["shape"], "round")
        self.assertEqual(annotation["lobe"], "left-upper")
        self.assertIs(annotation["cavitation"], True)

    @ddt.data(
        [Blob((2.0, 20.0, 5.0), (4.0, 4.0, 2.0))],
        [Blob((20.0, 20.0, 5.0), (4.0, 4.0, 2.0)), Blob((24.0, 20.0, 5.0), (4.0, 4.0, 2.0))],
    )
    def test_bad_blobs(self, blobs):
        with self.assertRaises(DataError):
            synth_fixture(SynthSpec(blobs=blobs))

    def test_blob_between_voxels(self):
        spec = SynthSpec(blobs=[Blob((20.5, 20.5, 5.5), (0.3, 0.3, 0.3))])
        with self.assertRaisesRegex(DataError, "covers no voxel"):
            synth_fixture(spec)

    def test_blob_contract(self):
        with self.assertRaises(DataError):
            Blob((10.0, 10.0, 5.0), (0.0, 3.0, 2.0))
        with self.assertRaises(DataError):
            Blob((10.0, 10.0, 5.0), (3.0, 3.0, 2.0), cavity=1.0)

    def test_written_fixture(self):
        fixture = synth_fixture(SynthSpec.single_blob())
        with tempfile.TemporaryDirectory() as tmp:
            write_fixture(fixture, tmp)
            self.assertEqual(load_volume(join(tmp, "volume.json")), fixture.volume)
            self.assertEqual(read_gold_masks(join(tmp, "gold_masks.json")), fixture.gold_masks[0])
            with open(join(tmp, "annotation.json"), "r", encoding="utf-8") as f:
                self.assertEqual(json.load(f), fixture.annotations)


class TestPipeline(unittest.TestCase):
    """Check end-to-end runs on a synthetic volume."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.fixture_dir = join(self.tmp.name, "fixture")
        write_fixture(synth_fixture(SynthSpec.single_blob(), seed=0), self.fixture_dir)
        self.volume = join(self.fixture_dir, "volume.json")

    def out(self, name):
        return join(self.tmp.name, name)

    def test_run_writes_every_artifact(self):
        finals = run_pipeline(PipelineConfig.default_mock(), self.volume, self.out("run"))
        self.assertEqual(len(finals), 1)
        nodule = nodule_dir(self.out("run"), 0)
        for name in ("report.json", "transcript.json", "diagnosis.json"):
            self.assertTrue(exists(join(nodule, name)), name)
        self.assertFalse(exists(join(self.out("run"), ERROR_FILE)))
        with open(join(nodule, "diagnosis.json"), "r", encoding="utf-8") as f:
            diagnosis = json.load(f)
        self.assertEqual(diagnosis["case_id"], "volume-nodule-0")
        self.assertEqual(diagnosis["grade"], finals[0].grade.value)

        memory = open_memory(PipelineConfig.default_mock(), self.out("run"))
        kinds = [r.kind for r in memory.records("volume-nodule-0")]
        self.assertEqual(kinds[:3], ["NoduleImage", "NoduleSize", "CTReport"])
        self.assertEqual(kinds[-1], "Summary")

    def test_runs_are_reproducible(self):
        for run in range(5):
            run_pipeline(PipelineConfig.default_mock(seed=4), self.volume, self.out(f"r{run}"))
        files = relative_files(self.out("r0"))
        for run in range(1, 5):
            self.assertEqual(files, relative_files(self.out(f"r{run}")))
            _, mismatch, errors = filecmp.cmpfiles(
                self.out("r0"), self.out(f"r{run}"), files, shallow=False
            )
            self.assertEqual((mismatch, errors), ([], []))

    def test_rerun_starts_from_empty_memory(self):
        run_pipeline(PipelineConfig.default_mock(), self.volume, self.out("run"))
        transcript = join(nodule_dir(self.out("run"), 0), "transcript.json")
        stored = join(self.out("run"), "memory", "volume-nodule-0.jsonl")
        with open(transcript, "rb") as f:
            first_transcript = f.read()
        with open(stored, "rb") as f:
            first_memory = f.read()
        run_pipeline(PipelineConfig.default_mock(), self.volume, self.out("run"))
        with open(transcript, "rb") as f:
            self.assertEqual(f.read(), first_transcript)
        with open(stored, "rb") as f:
            self.assertEqual(f.read(), first_memory)

    def test_configured_memory_is_kept(self):
        config = PipelineConfig.default_mock()
        config.memory_root = self.out("shared-memory")
        run_pipeline(config, self.volume, self.out("run"))
        count = len(open_memory(config, self.out("run")).records("volume-nodule-0"))
        run_pipeline(config, self.volume, self.out("run"))
        records = open_memory(config, self.out("run")).records("volume-nodule-0")
        self.assertEqual(len(records), 2 * count)
        self.assertFalse(exists(join(self.out("run"), "memory")))

    def test_empty_volume_has_no_detections(self):
        spec = SynthSpec(blobs=[])
        empty_dir = self.out("empty-fixture")
        write_fixture(synth_fixture(spec), empty_dir)
        finals = run_pipeline(PipelineConfig.default_mock(), join(empty_dir, "volume.json"), self.out("e"))
        self.assertEqual(finals, [])
        self.assertEqual(read_detections(self.out("e")), [])

    def test_staged_run_matches_pipeline(self):
        for command in ("spot", "describe", "diagnose"):
            code, _ = run_cli(command, "--volume", self.volume, "--out", self.out("staged"))
            self.assertEqual(code, 0, command)
        code, _ = run_cli("pipeline", "--volume", self.volume, "--out", self.out("whole"))
        self.assertEqual(code, 0)
        for name in ("report.json", "diagnosis.json"):
            self.assertTrue(
                filecmp.cmp(
                    join(nodule_dir(self.out("staged"), 0), name),
                    join(nodule_dir(self.out("whole"), 0), name),
                    shallow=False,
                ),
                name,
            )

    def test_case_ids(self):
        self.assertEqual(case_id_for("/data/scan 01.json", 2), "scan_01-nodule-2")


class TestCommandLine(unittest.TestCase):
    """Check the command line surface and its exit codes."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.fixture_dir = join(self.tmp.name, "fixture")
        code, reply = run_cli("synth", "--out", self.fixture_dir)
        self.assertEqual((code, reply["nodules"]), (0, 1))
        self.volume = join(self.fixture_dir, "volume.json")

    def out(self, name):
        return join(self.tmp.name, name)

    def read(self, *parts):
        with open(join(*parts), "r", encoding="utf-8") as f:
            return json.load(f)

    def write_config(self, agent_spec):
        data = PipelineConfig.default_mock().to_json()
        data["backends"]["agent"] = agent_spec
        path = self.out("config.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
        return path

    def test_pipeline_and_evaluation(self):
        code, finals = run_cli("pipeline", "--volume", self.volume, "--out", self.out("run"))
        self.assertEqual(code, 0)
        self.assertEqual(list(finals), ["0"])

        code, dlc = run_cli(
            "eval", "dlc",
            "--pipeline-out", self.out("run"),
            "--annotation", join(self.fixture_dir, "annotation.json"),
            "--out", self.out("eval"),
        )
        self.assertEqual(code, 0)
        self.assertEqual(dlc["lungdlc"], 1.0)
        self.assertTrue(exists(join(self.out("eval"), "dlc_verdicts.csv")))

        code, detection = run_cli(
            "eval", "detect",
            "--gold", join(self.fixture_dir, "gold_masks.json"),
            "--pipeline-out", self.out("run"),
            "--out", self.out("eval"),
        )
        self.assertEqual(code, 0)
        self.assertEqual(detection["f1"], 1.0)
        self.assertEqual(self.read(self.out("eval"), "detection_metrics.json"), detection)

    def test_grade_evaluation_from_pipeline(self):
        run_cli("pipeline", "--volume", self.volume, "--out", self.out("run"))
        grade = self.read(nodule_dir(self.out("run"), 0), "diagnosis.json")["grade"]
        gold_path = self.out("gold.json")
        with open(gold_path, "w", encoding="utf-8") as f:
            json.dump({"volume-nodule-0": grade}, f)
        code, metrics = run_cli(
            "eval", "grade", "--pipeline-out", self.out("run"), "--gold", gold_path,
            "--out", self.out("eval"),
        )
        self.assertEqual(code, 0)
        self.assertEqual((metrics["accuracy"], metrics["count"]), (1.0, 1))

    def test_ablation(self):
        code, results = run_cli(
            "eval", "detect", "--ablation",
            "--gold", join(self.fixture_dir, "gold_masks.json"),
            "--volume", self.volume,
            "--out", self.out("ablation"),
        )
        self.assertEqual(code, 0)
        self.assertEqual(
            list(results), sorted(["experts", "experts+clustering", "experts+clustering+judges"])
        )

    def test_knowledge_graph_commands(self):
        code, built = run_cli("kg", "build", "--out", self.out("kg"))
        self.assertEqual(code, 0)
        self.assertGreater(built["communities"], 0)
        code, answer = run_cli(
            "kg", "query", "--graph", built["graph"], "--query", "solid spiculated nodule",
            "--top-k", "2", "--out", self.out("kg"),
        )
        self.assertEqual(code, 0)
        self.assertEqual(len(answer["citations"]), min(2, built["communities"]))
        self.assertTrue(exists(join(self.out("kg"), "answer.json")))

    def test_missing_volume_is_a_data_error(self):
        code, _ = run_cli("pipeline", "--volume", self.out("absent.json"), "--out", self.out("run"))
        self.assertEqual(code, 4)
        manifest = self.read(self.out("run"), ERROR_FILE)
        self.assertEqual((manifest["type"], manifest["stage"]), ("VolumeFormatError", "load"))

    def test_bad_config_is_a_config_error(self):
        path = self.write_config({"role": "agent", "kind": "crystal-ball"})
        code, _ = run_cli("pipeline", "--config", path, "--volume", self.volume, "--out", self.out("run"))
        self.assertEqual(code, 2)
        self.assertEqual(self.read(self.out("run"), ERROR_FILE)["exit_code"], 2)

    def test_unreadable_config(self):
        code, _ = run_cli("spot", "--config", self.out("nope.json"), "--volume", self.volume,
                          "--out", self.out("run"))
        self.assertEqual(code, 2)
        self.assertEqual(self.read(self.out("run"), ERROR_FILE)["stage"], "spot")

    def test_backend_failure_keeps_artifacts(self):
        path = self.write_config(
            {"role": "agent", "kind": "scripted", "options": {"script": {"*": {"__error__": "timeout"}}}}
        )
        code, _ = run_cli("pipeline", "--config", path, "--volume", self.volume, "--out", self.out("run"))
        self.assertEqual(code, 3)
        manifest = self.read(self.out("run"), ERROR_FILE)
        self.assertEqual(manifest["stage"], "diagnose")
        self.assertEqual(manifest["context"], ["nodule 0"])
        self.assertEqual(manifest["partial_transcript"]["events"], [])
        self.assertTrue(exists(join(self.out("run"), DETECTIONS_FILE)))
        self.assertTrue(exists(join(nodule_dir(self.out("run"), 0), "report.json")))
        self.assertFalse(exists(join(nodule_dir(self.out("run"), 0), "diagnosis.json")))

        code, _ = run_cli("pipeline", "--volume", self.volume, "--out", self.out("run"))
        self.assertEqual(code, 0)
        self.assertFalse(exists(join(self.out("run"), ERROR_FILE)))

    def test_argument_pairs(self):
        with redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit):
                main(["eval", "detect", "--ablation", "--gold", "g.json"])
            with self.assertRaises(SystemExit):
                main(["eval", "grade", "--pipeline-out", "run"])
