import os
import sys
import unittest
from pathlib import Path

import numpy as np

# Add project root to sys.path to allow direct imports of project modules
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

from data_io import WindowSample
from errors import ShapeMismatchError
from kernel import ParamStore
from mcd import (center_row, context_similarity, encode_and_classify, flattened_size, init_masrc_params,
                 init_mcd_params, masrc_forward, masrc_forward_with_cache, masrc_loss_and_grads, model_gradient_suite,
                 random_window)
from schemas import ABLATION_PRESETS, ModalityConfig


class TestContextSimilarity(unittest.TestCase):

    def test_shape_and_constant_inputs(self):
        m = context_similarity(np.ones((14, 4)), np.ones((14, 6)))
        self.assertEqual(m.shape, (7, 7))
        np.testing.assert_allclose(m, 2.0)

    def test_orthogonal_halves(self):
        x = np.array([[1.0, 0.0]] * 7 + [[0.0, 1.0]] * 7)
        self.assertFalse(context_similarity(x, x).any())

    def test_single_modality(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((8, 3))
        m = context_similarity(x, None)
        u = x / np.linalg.norm(x, axis=1, keepdims=True)
        np.testing.assert_allclose(m, u[:4] @ u[4:].T, atol=1e-12)

    def test_symmetric_in_modalities_and_scale_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = rng.standard_normal((10, 4)), rng.standard_normal((10, 4))
            m = context_similarity(a, b)
            np.testing.assert_allclose(m, context_similarity(b, a), atol=1e-12)
            scaled = context_similarity(a * rng.uniform(0.1, 10.0, size=(10, 1)), b)
            np.testing.assert_allclose(m, scaled, atol=1e-9)
            self.assertLessEqual(np.abs(m).max(), 2.0 + 1e-12)

    def test_odd_window_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            context_similarity(np.ones((5, 2)), None)

    def test_needs_a_modality(self):
        with self.assertRaises(ValueError):
            context_similarity(None, None)


class TestEncoder(unittest.TestCase):

    def test_flattened_size(self):
        self.assertEqual(flattened_size(7), 64)
        self.assertEqual(flattened_size(8), 64 * 2 * 2)
        with self.assertRaises(ShapeMismatchError):
            flattened_size(3)

    def test_zero_matrix_and_zero_biases_give_one_half(self):
        store = ParamStore()
        init_mcd_params(store, 7, np.random.default_rng(0), zero_head=False, dtype=np.float64)
        self.assertEqual(encode_and_classify(np.zeros((7, 7)), store), 0.5)

    def test_zero_head_gives_one_half_for_any_matrix(self):
        store = ParamStore()
        init_mcd_params(store, 7, np.random.default_rng(0))
        m = np.random.default_rng(1).uniform(-2, 2, size=(7, 7)).astype(np.float32)
        self.assertEqual(encode_and_classify(m, store), 0.5)

    def test_non_square_rejected(self):
        store = ParamStore()
        init_mcd_params(store, 7, np.random.default_rng(0))
        with self.assertRaises(ShapeMismatchError):
            encode_and_classify(np.zeros((7, 6)), store)


class TestComposedModel(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(2)
        self.sample = random_window(self.rng, 14, 8, 6)

    def test_center_row(self):
        self.assertEqual(center_row(14), 6)
        self.assertEqual(center_row(4), 1)

    def test_probability_range(self):
        for seed in range(5):
            params = init_masrc_params(ModalityConfig(), 8, 6, 14, seed=seed, zero_head=False)
            prob = masrc_forward(random_window(self.rng, 14, 8, 6), params, ModalityConfig())
            self.assertTrue(1e-7 <= prob <= 1 - 1e-7)

    def test_fresh_model_predicts_one_half(self):
        params = init_masrc_params(ModalityConfig(), 8, 6, 14)
        self.assertEqual(masrc_forward(self.sample, params, ModalityConfig()), 0.5)

    def test_deterministic_initialisation_and_forward(self):
        a = init_masrc_params(ModalityConfig(), 8, 6, 14, seed=3, zero_head=False)
        b = init_masrc_params(ModalityConfig(), 8, 6, 14, seed=3, zero_head=False)
        self.assertTrue(a.equals(b))
        self.assertEqual(masrc_forward(self.sample, a, ModalityConfig()),
                         masrc_forward(self.sample, b, ModalityConfig()))

    def test_entity_only_ignores_place_features(self):
        config = ModalityConfig(modality="entity")
        params = init_masrc_params(config, 8, 6, 14, zero_head=False)
        self.assertFalse(any(name.startswith("place.") for name in params))
        other = WindowSample(center_index=self.sample.center_index, entity_window=self.sample.entity_window,
                             place_window=self.rng.standard_normal((14, 6)))
        self.assertEqual(masrc_forward(self.sample, params, config), masrc_forward(other, params, config))

    def test_mlp_detector_reads_the_center_row(self):
        config = ABLATION_PRESETS["mlp_only"]
        params = init_masrc_params(config, 8, 6, 14, zero_head=False)
        self.assertEqual(params["mlp.fc1.weight"].shape, (14, 128))
        self.assertNotIn("mcd.conv1.weight", params)
        entity = np.array(self.sample.entity_window)
        entity[0] += 5.0
        moved = WindowSample(center_index=6, entity_window=entity, place_window=self.sample.place_window)
        self.assertEqual(masrc_forward(self.sample, params, config), masrc_forward(moved, params, config))

    def test_mcd_only_has_no_feature_sized_slots(self):
        params = init_masrc_params(ABLATION_PRESETS["mcd_only"], 8, 6, 14)
        self.assertTrue(all(name.startswith("mcd.") for name in params))

    def test_every_preset_runs(self):
        for name, config in ABLATION_PRESETS.items():
            params = init_masrc_params(config, 8, 6, 14, zero_head=False)
            loss, prob, grads = masrc_loss_and_grads(self.sample, params, config, 4, 1)
            self.assertTrue(np.isfinite(loss), name)
            self.assertEqual(set(grads), set(params.names()), name)

    def test_place_graph_stage_presets(self):
        d2w = init_masrc_params(ABLATION_PRESETS["d2w_only"], 8, 6, 14)
        self.assertIn("place.pcg.d2w.w1", d2w)
        self.assertFalse(any(".w2d." in name or ".gcn2." in name for name in d2w if name.startswith("place.")))
        w2d = init_masrc_params(ABLATION_PRESETS["w2d_only"], 8, 6, 14)
        self.assertIn("place.pcg.w2d.w2", w2d)
        self.assertNotIn("place.pcg.d2w.w1", w2d)
        with self.assertRaises(ValueError):
            ModalityConfig(use_d2w=False, use_w2d=False)

    def test_affiliation_rule_reaches_the_place_graph(self):
        config = ABLATION_PRESETS["affiliation_proximity"]
        params = init_masrc_params(config, 8, 6, 14, zero_head=False)
        _, cache = masrc_forward_with_cache(self.sample, params, config)
        partition = [c for branch, _, c in cache["branches"] if branch == "place"][0]["partition"]
        for i, j in partition.affiliation.items():
            nearest = min(abs(i - w) for w in partition.wide_set)
            self.assertEqual(abs(i - j), nearest)

    def test_bad_window_rejected(self):
        with self.assertRaises(ValueError):
            init_masrc_params(ModalityConfig(), 8, 6, 7)


class TestModelGradients(unittest.TestCase):

    def test_full_model_matches_finite_differences(self):
        seeds = 5 if os.getenv("MASRC_SLOW_TESTS") else 2
        for report in model_gradient_suite(seeds=seeds):
            self.assertTrue(report.passed, report.failures())
            self.assertTrue(any(name.startswith("entity.ejg.") for name in report.slots))
            self.assertTrue(any(name.startswith("place.pcg.") for name in report.slots))

    def test_single_pass_place_graphs_match_finite_differences(self):
        for name in ("d2w_only", "w2d_only", "affiliation_similarity"):
            for report in model_gradient_suite(seeds=1, config=ABLATION_PRESETS[name]):
                self.assertTrue(report.passed, (name, report.failures()))

    def test_swapped_graphs_match_finite_differences(self):
        config = ABLATION_PRESETS["entity_short_place_long"]
        for report in model_gradient_suite(seeds=1, config=config):
            self.assertTrue(report.passed, report.failures())


if __name__ == '__main__':
    unittest.main()
