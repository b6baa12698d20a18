"""test/test_spotter.py.

Tests for noduleagent/spotter.py .
"""

import itertools
import unittest

import ddt
import numpy as np

from noduleagent.backend import BackendSpec, build_backend
from noduleagent.config import PipelineConfig
from noduleagent.exceptions import DataError, DegenerateClusterError, FanoutError
from noduleagent.imaging import Mask2D, Slice2D, mask_distance, mask_iou
from noduleagent.spotter import *
from noduleagent.synth import SynthSpec, synth_fixture

epsilon = 0.001


def block(x0, x1, y0, y1, shape=(12, 12), z_index=0):
    bits = np.zeros(shape, dtype=bool)
    bits[y0:y1, x0:x1] = True
    return Mask2D(z_index, bits)


def scripted(backend_id, role, script):
    return build_backend(
        BackendSpec(backend_id, role, kind="scripted", options={"script": script})
    )


def dbscan_oracle(masks, eps, min_pts):
    """Textbook DBSCAN: core masks and the partition of the core masks."""
    n = len(masks)
    neighbours = [
        {j for j in range(n) if mask_distance(masks[i], masks[j]) <= eps} for i in range(n)
    ]
    core = {i for i in range(n) if len(neighbours[i]) >= min_pts}
    groups, seen = [], set()
    for i in sorted(core):
        if i in seen:
            continue
        group, frontier = set(), [i]
        while frontier:
            j = frontier.pop()
            if j in group:
                continue
            group.add(j)
            frontier.extend(k for k in neighbours[j] if k in core and k not in group)
        seen |= group
        groups.append(frozenset(group))
    return core, neighbours, set(groups)


SEEDS = [block(1, 5, 1, 5), block(6, 11, 6, 10), block(0, 3, 8, 12)]


def noisy_copy(rng, seed):
    flips = rng.random(seed.shape) < 0.04
    return Mask2D.from_array(0, seed.bits ^ flips) or Mask2D(0, seed.bits.copy())


def random_masks(rng, seeds):
    """Between one and nine noisy copies of randomly chosen seed masks."""
    return [noisy_copy(rng, seeds[rng.integers(len(seeds))]) for _ in range(rng.integers(1, 10))]


def random_votes(rng):
    count = int(rng.integers(1, 6))
    return [
        JudgeVote(f"j{i}", int(rng.choice([-1, 1])), float(rng.uniform(0.01, 1.0)))
        for i in range(count)
    ]


@ddt.ddt
class TestClustering(unittest.TestCase):
    """Check density clustering and cluster averaging."""

    def test_empty_input(self):
        result = cluster_masks([])
        self.assertEqual((result.clusters, result.noise, result.averaged), ([], [], []))

    def test_identical_masks_form_one_cluster(self):
        mask = block(2, 6, 2, 6)
        result = cluster_masks([mask, mask, mask], ClusterParams(0.0, 2))
        self.assertEqual(result.clusters, [[0, 1, 2]])
        self.assertEqual(result.averaged, [mask])

    def test_two_findings_and_noise(self):
        masks = [
            block(0, 4, 0, 4),
            block(8, 12, 8, 12),
            block(0, 4, 1, 4),
            block(8, 12, 8, 11),
            block(0, 2, 8, 10),
        ]
        result = cluster_masks(masks, ClusterParams(0.5, 2))
        self.assertEqual(result.clusters, [[0, 2], [1, 3]])
        self.assertEqual(result.noise, [4])

    def test_min_pts_one_has_no_noise(self):
        masks = [block(0, 2, 0, 2), block(6, 8, 6, 8)]
        result = cluster_masks(masks, ClusterParams(0.5, 1))
        self.assertEqual(result.clusters, [[0], [1]])
        self.assertEqual(result.noise, [])

    def test_masks_on_different_slices_rejected(self):
        with self.assertRaises(DataError):
            cluster_masks([block(0, 2, 0, 2, z_index=0), block(0, 2, 0, 2, z_index=1)])

    def test_distance_matrix(self):
        masks = [block(0, 3, 0, 3), block(1, 4, 0, 3), block(8, 9, 8, 9)]
        matrix = distance_matrix(masks)
        for i, j in itertools.product(range(3), repeat=2):
            self.assertAlmostEqual(matrix[i, j], mask_distance(masks[i], masks[j]))

    @ddt.data((0.3, 2), (0.5, 2), (0.5, 3), (0.7, 4), (0.0, 2))
    @ddt.unpack
    def test_against_brute_force(self, eps, min_pts):
        rng = np.random.default_rng(int(eps * 10) + min_pts)
        for _ in range(100):
            masks = random_masks(rng, SEEDS)
            result = cluster_masks(masks, ClusterParams(eps, min_pts))
            core, neighbours, groups = dbscan_oracle(masks, eps, min_pts)

            got = {frozenset(i for i in members if i in core) for members in result.clusters}
            self.assertEqual(got, groups)
            clustered = {i for members in result.clusters for i in members}
            self.assertEqual(set(result.noise), set(range(len(masks))) - clustered)
            for members in result.clusters:
                for i in set(members) - core:
                    self.assertTrue(neighbours[i] & set(members) & core)
            firsts = [min(i for i in members if i in core) for members in result.clusters]
            self.assertEqual(firsts, sorted(firsts))

    @ddt.data((0.3, 2), (0.5, 3), (0.7, 2), (0.7, 4))
    @ddt.unpack
    def test_input_order_only_relabels(self, eps, min_pts):
        rng = np.random.default_rng(17 + min_pts)
        params = ClusterParams(eps, min_pts)
        for _ in range(50):
            masks = random_masks(rng, SEEDS)
            order = [int(i) for i in rng.permutation(len(masks))]
            original = cluster_masks(masks, params)
            permuted = cluster_masks([masks[i] for i in order], params)
            relabelled = {frozenset(order[i] for i in members) for members in permuted.clusters}

            self.assertEqual({order[i] for i in permuted.noise}, set(original.noise))
            core, neighbours, _ = dbscan_oracle(masks, eps, min_pts)
            self.assertEqual(
                {members & core for members in relabelled},
                {frozenset(members) & core for members in original.clusters},
            )
            shared_border = any(
                sum(1 for members in original.clusters if neighbours[i] & core & set(members)) > 1
                for i in set(range(len(masks))) - core
            )
            if not shared_border:
                self.assertEqual(relabelled, {frozenset(m) for m in original.clusters})

    @ddt.data(False, True)
    def test_border_mask_joins_first_cluster(self, reverse):
        def stripe(x0):
            return block(x0, x0 + 8, 0, 2, shape=(2, 16))

        # a shift of 2 is within epsilon 0.5, a shift of 4 is not
        masks = [stripe(0), stripe(0), stripe(2), stripe(4), stripe(6), stripe(8), stripe(8)]
        if reverse:
            masks.reverse()
        result = cluster_masks(masks, ClusterParams(0.5, 4))
        self.assertEqual(result.clusters, [[0, 1, 2, 3], [4, 5, 6]])
        self.assertEqual(result.noise, [])
        core, neighbours, _ = dbscan_oracle(masks, 0.5, 4)
        self.assertNotIn(3, core)
        self.assertEqual(neighbours[3] & core, {2, 4})

    @ddt.data(1, 2, 3, 5)
    def test_average_of_copies_is_the_copy(self, count):
        mask = block(2, 7, 3, 6)
        averaged = average_cluster([mask] * count)
        self.assertEqual(averaged, mask)
        self.assertAlmostEqual(mask_iou(averaged, mask), 1.0, delta=epsilon)

    def test_average_of_two_bounds_their_overlap(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a, b = noisy_copy(rng, SEEDS[1]), noisy_copy(rng, SEEDS[1])
            averaged = average_cluster([a, b])
            floor = mask_iou(a, b)
            self.assertGreaterEqual(mask_iou(averaged, a), floor - 1e-12)
            self.assertGreaterEqual(mask_iou(averaged, b), floor - 1e-12)

    def test_average_is_pixel_majority(self):
        a, b, c = block(0, 4, 0, 4), block(1, 5, 0, 4), block(2, 6, 0, 4)
        self.assertEqual(average_cluster([a, b, c]), block(1, 5, 0, 4))
        self.assertEqual(average_cluster([a, b]), block(0, 5, 0, 4))

    def test_degenerate_average(self):
        masks = [block(0, 1, 0, 1), block(3, 4, 3, 4), block(6, 7, 6, 7)]
        with self.assertRaises(DegenerateClusterError):
            average_cluster(masks)
        result = cluster_masks(masks, ClusterParams(1.0, 3))
        self.assertEqual(result.clusters, [[0, 1, 2]])
        self.assertEqual(result.averaged, [None])
        self.assertEqual(result.candidates, [])

    @ddt.data((-0.1, 2), (1.1, 2), (0.5, 0))
    @ddt.unpack
    def test_bad_params(self, eps, min_pts):
        with self.assertRaises(ValueError):
            ClusterParams(eps, min_pts)


@ddt.ddt
class TestJudging(unittest.TestCase):
    """Check the signed, confidence-weighted judge panel."""

    def setUp(self):
        self.slice_ = Slice2D(0, np.full((12, 12), -1000), (1, 1, 1))
        self.candidate = block(2, 6, 2, 6)

    def panel(self, *votes):
        return [
            scripted(f"judge-{i}", "judge", {"*": {"sign": s, "confidence": c}})
            for i, (s, c) in enumerate(votes)
        ]

    def test_accepts_positive_sum(self):
        result = judge_candidate(self.panel((1, 0.9), (-1, 0.2), (1, 0.1)), self.slice_, self.candidate)
        self.assertAlmostEqual(result.score, 0.8)
        self.assertTrue(result.accepted)
        self.assertEqual([v.judge_id for v in result.votes], ["judge-0", "judge-1", "judge-2"])

    def test_zero_score_rejects(self):
        result = judge_candidate(self.panel((1, 0.5), (-1, 0.5)), self.slice_, self.candidate)
        self.assertEqual(result.score, 0.0)
        self.assertFalse(result.accepted)

    def test_single_negative_judge_rejects(self):
        self.assertFalse(judge_candidate(self.panel((-1, 0.3)), self.slice_, self.candidate).accepted)

    def test_flipping_every_sign_flips_acceptance(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            votes = random_votes(rng)
            flipped = [JudgeVote(v.judge_id, -v.sign, v.confidence) for v in votes]
            result = JudgementResult.from_votes(votes)
            if result.score != 0:
                self.assertNotEqual(result.accepted, JudgementResult.from_votes(flipped).accepted)

    def test_scaling_confidences_keeps_acceptance(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            votes = random_votes(rng)
            factor = rng.uniform(0.05, 1.0 / max(v.confidence for v in votes))
            scaled = [JudgeVote(v.judge_id, v.sign, min(1.0, v.confidence * factor)) for v in votes]
            self.assertEqual(
                JudgementResult.from_votes(votes).accepted,
                JudgementResult.from_votes(scaled).accepted,
            )

    @ddt.data(((1, 0.5), (-1, 0.5)), ((1, 0.9), (1, 0.8), (-1, 0.6)), ((-1, 0.4),))
    def test_panel_symmetries(self, votes):
        accepted = judge_candidate(self.panel(*votes), self.slice_, self.candidate).accepted
        halved = judge_candidate(
            self.panel(*[(s, c / 2) for s, c in votes]), self.slice_, self.candidate
        )
        self.assertEqual(halved.accepted, accepted)
        flipped = judge_candidate(self.panel(*[(-s, c) for s, c in votes]), self.slice_, self.candidate)
        if flipped.score != 0:
            self.assertNotEqual(flipped.accepted, accepted)
        else:
            self.assertFalse(flipped.accepted or accepted)

    def test_judge_failure_propagates(self):
        judges = self.panel((1, 0.9)) + [scripted("judge-x", "judge", {"*": {"__error__": "timeout"}})]
        with self.assertRaises(FanoutError) as ctx:
            judge_candidate(judges, self.slice_, self.candidate)
        self.assertEqual(ctx.exception.failed_indices, [1])

    def test_inflate_judgement(self):
        result = JudgementResult.from_votes([JudgeVote("j", 1, 0.25)])
        self.assertEqual(JudgementResult.inflate(result.to_json()), result)

    def test_vote_contract(self):
        with self.assertRaises(DataError):
            JudgeVote("j", 0, 0.5)
        with self.assertRaises(DataError):
            JudgeVote("j", 1, 1.5)


class TestLinking(unittest.TestCase):
    """Check the chaining of accepted findings across slices."""

    def finding(self, z, x0, x1):
        return SliceFinding(block(x0, x1, 0, 4, z_index=z), JudgementResult.unjudged(1))

    def test_adjacent_overlapping_findings_link(self):
        tracks = link_detections(
            {2: [self.finding(2, 0, 4)], 3: [self.finding(3, 1, 5)], 4: [self.finding(4, 1, 5)]}
        )
        self.assertEqual([[f.mask.z_index for f in t] for t in tracks], [[2, 3, 4]])

    def test_gap_breaks_track(self):
        tracks = link_detections({2: [self.finding(2, 0, 4)], 4: [self.finding(4, 0, 4)]})
        self.assertEqual(len(tracks), 2)

    def test_low_overlap_breaks_track(self):
        tracks = link_detections({0: [self.finding(0, 0, 4)], 1: [self.finding(1, 3, 7)]}, 0.3)
        self.assertEqual(len(tracks), 2)

    def test_best_overlap_wins(self):
        tracks = link_detections(
            {
                0: [self.finding(0, 0, 4), self.finding(0, 6, 10)],
                1: [self.finding(1, 5, 9)],
            }
        )
        self.assertEqual([len(t) for t in tracks], [1, 2])

    def test_one_extension_per_track(self):
        tracks = link_detections({0: [self.finding(0, 0, 6)], 1: [self.finding(1, 0, 6), self.finding(1, 0, 5)]})
        self.assertEqual([len(t) for t in tracks], [2, 1])


class TestSpot(unittest.TestCase):
    """Check the spotter end to end on a synthetic volume."""

    @classmethod
    def setUpClass(cls):
        cls.fixture = synth_fixture(SynthSpec.single_blob(), seed=0)
        cls.backends = PipelineConfig.default_mock().build_backends()

    def test_recovers_the_blob(self):
        detections = spot(self.fixture.volume, self.backends.experts, self.backends.judges)
        self.assertEqual(len(detections), 1)
        detection = detections[0]
        self.assertEqual(detection.z_range, (3, 7))
        self.assertEqual(detection.masks, self.fixture.gold_masks[0])
        self.assertTrue(all(j.accepted for j in detection.judgements))
        self.assertAlmostEqual(detection.size.height_mm, 10.0)

    def test_record_reads_back(self):
        detection = spot(self.fixture.volume, self.backends.experts, self.backends.judges)[0]
        record = detection_to_record(detection)
        self.assertEqual(record["slices"], [3, 7])
        again = detection_from_record(record)
        self.assertEqual(again.masks, detection.masks)
        self.assertEqual(again.size, detection.size)

    def test_adversarial_panel_rejects_everything(self):
        judge = build_backend(
            BackendSpec("contrarian", "judge", kind="intensity", options={"invert": True})
        )
        self.assertEqual(spot(self.fixture.volume, self.backends.experts, [judge]), [])

    def test_without_judges(self):
        detections = spot(
            self.fixture.volume,
            self.backends.experts,
            [],
            stages=SpotterStages(clustering=True, judging=False),
        )
        self.assertEqual(len(detections), 1)
        self.assertTrue(all(not j.votes for j in detections[0].judgements))

    def test_expert_failure_names_the_slice(self):
        broken = scripted("broken", "detector", {"*": {"__error__": "transport"}})
        with self.assertRaises(FanoutError) as ctx:
            spot(self.fixture.volume, [broken], self.backends.judges)
        self.assertEqual(ctx.exception.context, ["slice 0"])
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_preconditions(self):
        with self.assertRaises(ValueError):
            spot(self.fixture.volume, [], self.backends.judges)
        with self.assertRaises(ValueError):
            spot(self.fixture.volume, self.backends.experts, [])

    def test_min_pts_above_expert_count_leaves_only_noise(self):
        experts = self.backends.experts
        params = ClusterParams(0.5, len(experts) + 1)
        self.assertEqual(spot(self.fixture.volume, experts, self.backends.judges, params), [])
