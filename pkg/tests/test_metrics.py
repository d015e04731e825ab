import sys
import unittest
from pathlib import Path

import numpy as np

# Add project root to sys.path to allow direct imports of project modules
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

from metrics import (SceneSegmentation, ap_by_scene_length, average_precision, boundaries_to_scenes,
                     evaluate_predictions, f1_at, miou, predicted_segmentation, scenes_to_boundaries)


def _brute_ap(scores, labels):
    # Precision counted over every shot scoring at least as high as the positive.
    precisions = []
    for s_i, y_i in zip(scores, labels):
        if y_i:
            above = [y for s, y in zip(scores, labels) if s >= s_i]
            precisions.append(sum(above) / len(above))
    return sum(precisions) / len(precisions)


class TestAveragePrecision(unittest.TestCase):

    def test_perfect_ranking(self):
        self.assertEqual(average_precision([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0]), 1.0)

    def test_worst_ranking(self):
        self.assertAlmostEqual(average_precision([0.1, 0.9], [1, 0]), 0.5)

    def test_constant_scores_give_positive_rate(self):
        labels = [0, 0, 1, 0, 1, 0, 0, 0]
        self.assertAlmostEqual(average_precision([0.5] * 8, labels), 2 / 8)

    def test_no_positives(self):
        with self.assertRaises(ValueError):
            average_precision([0.1, 0.2], [0, 0])

    def test_length_mismatch(self):
        with self.assertRaises(ValueError):
            average_precision([0.1, 0.2], [1])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            labels = rng.integers(0, 2, size=n)
            labels[rng.integers(0, n)] = 1
            # Coarse scores so that ties are common.
            scores = rng.integers(0, 6, size=n) / 5.0
            self.assertAlmostEqual(average_precision(scores, labels), _brute_ap(scores, labels), delta=1e-9)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            scores = rng.random(20)
            labels = rng.integers(0, 2, size=20)
            labels[0] = 1
            self.assertAlmostEqual(average_precision(scores, labels),
                                   average_precision(np.exp(3 * scores) + 1, labels), delta=1e-12)


class TestSegmentation(unittest.TestCase):

    def test_boundaries_to_scenes(self):
        self.assertEqual(boundaries_to_scenes([0, 1, 0, 0, 1]).scenes, ((0, 1), (2, 4)))
        self.assertEqual(boundaries_to_scenes([0, 0, 0]).scenes, ((0, 2),))
        self.assertEqual(boundaries_to_scenes([1, 1]).scenes, ((0, 0), (1, 1)))

    def test_empty_rejected(self):
        with self.assertRaises(ValueError):
            boundaries_to_scenes([])

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            labels = rng.integers(0, 2, size=int(rng.integers(1, 20))).tolist()
            labels[-1] = 1
            self.assertEqual(scenes_to_boundaries(boundaries_to_scenes(labels)), labels)

    def test_invalid_segmentation(self):
        with self.assertRaises(ValueError):
            SceneSegmentation(((0, 1), (3, 4)))
        with self.assertRaises(ValueError):
            SceneSegmentation(((1, 4),))
        with self.assertRaises(ValueError):
            scenes_to_boundaries(SceneSegmentation(((0, 2),)), num_shots=4)


class TestMiou(unittest.TestCase):

    def test_identical(self):
        seg = boundaries_to_scenes([0, 1, 0, 1])
        self.assertEqual(miou(seg, seg), 1.0)

    def test_split_scene(self):
        gt = boundaries_to_scenes([0, 0, 0, 1])
        pred = boundaries_to_scenes([0, 1, 0, 1])
        # gt -> pred: 0.5; pred -> gt: mean(0.5, 0.5)
        self.assertAlmostEqual(miou(pred, gt), 0.5)
        self.assertAlmostEqual(miou(pred, gt, mode="gt"), 0.5)

    def test_asymmetric_modes(self):
        gt = boundaries_to_scenes([0, 1, 0, 0, 0, 0, 0, 1])
        pred = boundaries_to_scenes([0, 0, 0, 0, 0, 0, 0, 1])
        self.assertAlmostEqual(miou(pred, gt, mode="gt"), (2 / 8 + 6 / 8) / 2)
        self.assertAlmostEqual(miou(pred, gt), 0.5 * ((2 / 8 + 6 / 8) / 2 + 6 / 8))

    def test_symmetric_mode_is_symmetric(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(1, 15))
            a = boundaries_to_scenes(rng.integers(0, 2, size=n))
            b = boundaries_to_scenes(rng.integers(0, 2, size=n))
            self.assertAlmostEqual(miou(a, b), miou(b, a), delta=1e-12)
            self.assertTrue(0.0 < miou(a, b) <= 1.0)

    def test_shot_count_mismatch(self):
        with self.assertRaises(ValueError):
            miou(boundaries_to_scenes([0, 1]), boundaries_to_scenes([0, 0, 1]))


class TestF1AndEvaluation(unittest.TestCase):

    def test_f1_examples(self):
        self.assertEqual(f1_at([0.9, 0.1, 0.8], [1, 0, 1]), 1.0)
        self.assertEqual(f1_at([0.1, 0.1], [1, 0]), 0.0)
        # tp=1 fp=1 fn=1
        self.assertAlmostEqual(f1_at([0.9, 0.7, 0.2], [1, 0, 1]), 0.5)
        self.assertEqual(f1_at([0.5], [1], threshold=0.5), 1.0)

    def test_predicted_segmentation(self):
        self.assertEqual(predicted_segmentation([0.9, 0.1, 0.6, 0.2]).scenes, ((0, 0), (1, 2), (3, 3)))

    def test_evaluate_predictions(self):
        per_video = {
            "a": ([0.9, 0.1, 0.2, 0.8], [1, 0, 0, 1]),
            "b": ([0.1, 0.2, 0.3], [0, 0, 1]),
        }
        out = evaluate_predictions(per_video)
        self.assertEqual(out["ap"], 1.0)
        self.assertEqual(out["ap_video_mean"], 1.0)
        self.assertEqual([row["video_id"] for row in out["per_video"]], ["a", "b"])
        self.assertEqual(out["per_video"][0]["miou"], 1.0)
        # Video b predicts nothing above 0.5 but the forced last boundary still matches gt.
        self.assertEqual(out["per_video"][1]["miou"], 1.0)
        self.assertAlmostEqual(out["f1"], 2 * 1.0 * (2 / 3) / (1.0 + 2 / 3))

    def test_evaluate_needs_videos(self):
        with self.assertRaises(ValueError):
            evaluate_predictions({})

    def test_ap_by_scene_length(self):
        labels = [0, 1] + [0] * 11 + [1]
        scores = [0.1, 0.9] + [0.2] * 11 + [0.8]
        out = ap_by_scene_length(scores, labels)
        self.assertEqual(out, {"short": 1.0, "long": 1.0})
        only_short = ap_by_scene_length([0.1, 0.9], [0, 1])
        self.assertIsNone(only_short["long"])


if __name__ == '__main__':
    unittest.main()
