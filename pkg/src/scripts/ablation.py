from noduleagent.config import PipelineConfig
from noduleagent.evaluation import (
    GradingCase,
    GradingPanel,
    ablation_agent_count,
    ablation_detection,
    ablation_detection_quality,
    ablation_modules,
)
from noduleagent.synth import Blob, SynthSpec, synth_fixture

# spotter stage ablation over a few synthetic volumes: a solid nodule, a
# ground-glass one the default threshold expert misses, and a cavitated one
specs = {
    "solid": SynthSpec.single_blob(),
    "ground-glass": SynthSpec(blobs=[Blob((40.0, 24.0, 6.0), (6.0, 5.0, 2.5), hu=-450)]),
    "cavitated": SynthSpec(blobs=[Blob((22.0, 40.0, 5.0), (7.0, 7.0, 2.5), cavity=0.4)]),
}

config = PipelineConfig.default_mock(seed=0)
backends = config.build_backends()

for name, spec in specs.items():
    print(f"==== {name} ====")
    for seed in range(3):
        fixture = synth_fixture(spec, seed=seed)
        gold = [m for masks in fixture.gold_masks for m in masks]
        results = ablation_detection(
            fixture.volume,
            gold,
            backends.experts,
            backends.judges,
            config.cluster,
            config.link_iou,
            config.iou_threshold,
            config.workers,
        )
        for stage, metrics in results.items():
            print(
                f"seed {seed} {stage:>26}: mAP {metrics.mean_average_precision:.3f} "
                f"F1 {metrics.f1:.3f} (tp {metrics.true_positives}, "
                f"fp {metrics.false_positives}, fn {metrics.false_negatives})"
            )

# grading ablations on the gold masks of the same volumes; the grades are
# what a reader would assign the synthetic lesions
gold_grades = {"solid": "invasive", "ground-glass": "pre-invasive", "cavitated": "invasive"}
cases = [
    GradingCase(f"{name}-{seed}", fixture.volume, fixture.gold_masks[0], gold_grades[name])
    for name, spec in specs.items()
    for seed in range(3)
    for fixture in [synth_fixture(spec, seed=seed)]
]
panel = GradingPanel.from_backends(backends, config)

print("==== modules ====")
for name, metrics in ablation_modules(cases, panel).items():
    print(f"{name:>20}: accuracy {metrics.accuracy:.3f} macro-F1 {metrics.macro_f1:.3f}")

print("==== agents ====")
for count, metrics in ablation_agent_count(cases, panel).items():
    print(f"{count} agents: accuracy {metrics.accuracy:.3f} macro-F1 {metrics.macro_f1:.3f}")

print("==== detection quality ====")
for point in ablation_detection_quality(cases, panel):
    print(
        f"IoU {point.target_iou:.1f} (achieved {point.mean_iou:.3f}): "
        f"accuracy {point.metrics.accuracy:.3f}"
    )
