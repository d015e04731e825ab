import json
import math
import os
import sys
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

# Add project root to sys.path to allow direct imports of project modules
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

import training
from data_io import ShotSequence, iter_windows, split_dataset, synth_generate
from errors import ConfigError, NumericError
from kernel import ParamStore
from mcd import init_masrc_params, masrc_loss_and_grads
from schemas import ABLATION_PRESETS, SynthConfig, TrainConfig
from training import (OptimizerState, adam_step, batch_gradients, evaluate, lr_at, predict_scores, run_seeds,
                      train)

SLOW = bool(os.getenv("MASRC_SLOW_TESTS"))


def _tiny_dataset(seed=0):
    config = SynthConfig(num_videos=4, scenes_per_video=3, min_shots_per_scene=3, max_shots_per_scene=5,
                         dim_entity=4, dim_place=4)
    return split_dataset(synth_generate(config, seed), 1)


def _tiny_config(**update) -> TrainConfig:
    base = dict(window=8, k=3, batch_size=16, epochs=2, hidden=8, peak_lr=1e-3, show_progress=False)
    base.update(update)
    return TrainConfig(**base)


class TestSchedule(unittest.TestCase):

    def test_warmup_then_cosine(self):
        self.assertEqual(lr_at(0, 100, 10, 1e-3), 0.0)
        self.assertAlmostEqual(lr_at(5, 100, 10, 1e-3), 5e-4)
        self.assertAlmostEqual(lr_at(10, 100, 10, 1e-3), 1e-3)
        self.assertAlmostEqual(lr_at(55, 100, 10, 1.0), 0.5)
        self.assertLess(lr_at(99, 100, 10, 1.0), 1e-3)

    def test_warmup_covering_everything(self):
        self.assertAlmostEqual(lr_at(3, 4, 4, 1.0), 0.75)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            lr_at(100, 100, 10, 1e-3)
        with self.assertRaises(ValueError):
            lr_at(0, 100, 0, 1e-3)


class TestAdam(unittest.TestCase):

    def _store(self, value, grad):
        store = ParamStore()
        store.add("w", np.array(value, dtype=np.float64))
        store.accumulate({"w": np.array(grad, dtype=np.float64)})
        return store

    def test_first_step_magnitude_is_lr(self):
        store = self._store([0.0, 0.0], [1.0, -4.0])
        state = OptimizerState.for_params(store)
        adam_step(store, state, 1e-3)
        np.testing.assert_allclose(store["w"], [-1e-3, 1e-3], rtol=1e-6)
        self.assertEqual(state.step, 1)

    def test_zero_gradient_leaves_params_unchanged(self):
        store = self._store([0.3, -0.2], [0.0, 0.0])
        adam_step(store, OptimizerState.for_params(store), 1e-3)
        np.testing.assert_array_equal(store["w"], [0.3, -0.2])

    def test_non_finite_gradient_aborts_without_update(self):
        store = self._store([1.0, 2.0], [np.nan, 1.0])
        state = OptimizerState.for_params(store)
        with self.assertRaises(NumericError):
            adam_step(store, state, 1e-3)
        np.testing.assert_array_equal(store["w"], [1.0, 2.0])
        self.assertEqual(state.step, 0)

    def test_dtype_preserved(self):
        store = ParamStore()
        store.add("w", np.ones(3, dtype=np.float32))
        store.accumulate({"w": np.ones(3, dtype=np.float32)})
        adam_step(store, OptimizerState.for_params(store), 1e-3)
        self.assertEqual(store["w"].dtype, np.float32)


class TestRegimeChecks(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.unlabelled = ShotSequence(video_id="u", entity_features=rng.standard_normal((10, 4)) + 3,
                                       place_features=rng.standard_normal((10, 4)) + 3,
                                       labels=[0, 0, 1, 0, 0, 0, 1, 0, 0, 1])

    def test_empty_dataset(self):
        with self.assertRaises(ConfigError):
            train([], _tiny_config())

    def test_self_supervised_needs_pseudo_labels(self):
        with self.assertRaises(ConfigError):
            train([self.unlabelled], _tiny_config(regime="self_supervised"))

    def test_transfer_needs_pseudo_labels(self):
        with self.assertRaisesRegex(ConfigError, "pseudo_labels"):
            train([self.unlabelled], _tiny_config(regime="transfer"))

    def test_mixed_dimensions(self):
        other = synth_generate(SynthConfig(num_videos=1, scenes_per_video=2, dim_entity=6, dim_place=4), 0)
        with self.assertRaises(ConfigError):
            train([self.unlabelled] + other, _tiny_config())

    def test_evaluate_needs_labels(self):
        seq = ShotSequence(video_id="n", entity_features=np.ones((5, 4)), place_features=np.ones((5, 4)))
        params = init_masrc_params(_tiny_config().modality, 4, 4, 8)
        with self.assertRaises(ConfigError):
            evaluate(params, [seq], _tiny_config())


class TestBatchAndPrediction(unittest.TestCase):

    def setUp(self):
        self.train_seqs, _ = _tiny_dataset()
        self.config = _tiny_config()
        self.params = init_masrc_params(self.config.modality, 4, 4, 8, hidden=8, zero_head=False)

    def test_batch_gradients_are_the_window_mean(self):
        samples = list(iter_windows(self.train_seqs[0], 8))[:5]
        targets = [int(s.label) for s in samples]
        loss, probs, grads = batch_gradients(self.params, samples, targets, self.config)
        singles = [masrc_loss_and_grads(s, self.params, self.config.modality, 3, y) for s, y in zip(samples, targets)]
        self.assertAlmostEqual(loss, float(np.mean([r[0] for r in singles])), places=6)
        self.assertEqual(probs, [r[1] for r in singles])
        for name in self.params:
            expected = np.mean([r[2][name] for r in singles], axis=0)
            np.testing.assert_allclose(grads[name], expected, rtol=1e-5, atol=1e-6)

    def test_threaded_batch_matches_serial(self):
        samples = list(iter_windows(self.train_seqs[1], 8))
        targets = [int(s.label) for s in samples]
        serial = batch_gradients(self.params, samples, targets, self.config, workers=1)
        threaded = batch_gradients(self.params, samples, targets, self.config, workers=3)
        self.assertEqual(serial[0], threaded[0])
        for name in self.params:
            np.testing.assert_array_equal(serial[2][name], threaded[2][name])

    def test_predict_scores_covers_every_shot(self):
        seq = self.train_seqs[0]
        scores = predict_scores(self.params, seq, self.config)
        self.assertEqual(scores.shape, (seq.num_shots,))
        self.assertTrue(np.all((scores > 0) & (scores < 1)))


class TestTrain(unittest.TestCase):

    def setUp(self):
        self.train_seqs, self.val_seqs = _tiny_dataset()

    def test_fresh_baseline_and_first_loss(self):
        """
        The output layer starts at zero, so every fresh score is exactly 0.5.
        Tied scores give an AP equal to the label prevalence and a loss of log 2,
        whatever the rest of the network computes.
        """
        # One batch per epoch: the first update happens at lr 0 after the loss is taken.
        result = train(self.train_seqs, _tiny_config(batch_size=512, epochs=1), self.val_seqs)
        baseline = result.records[0]
        self.assertEqual((baseline.epoch, baseline.split), (0, "val"))
        prevalence = sum(int(s.labels.sum()) for s in self.val_seqs) / sum(s.num_shots for s in self.val_seqs)
        self.assertAlmostEqual(baseline.ap, prevalence, places=9)
        self.assertAlmostEqual(result.records[1].loss, math.log(2), places=5)
        self.assertEqual(result.records[1].split, "train")

    def test_training_loss_falls_over_first_epochs(self):
        synth = SynthConfig(num_videos=6, num_val_videos=1, scenes_per_video=4, min_shots_per_scene=3,
                            max_shots_per_scene=6, dim_entity=4, dim_place=4)
        train_seqs, val_seqs = split_dataset(synth_generate(synth, 0), synth.num_val_videos)
        result = train(train_seqs, _tiny_config(epochs=5, patience=10), val_seqs)
        losses = [r.loss for r in result.records if r.split == "train"]
        self.assertEqual(len(losses), 5)
        for epoch in range(1, 5):
            self.assertLessEqual(losses[epoch], losses[epoch - 1] * 1.05, f"epoch {epoch + 1}: {losses}")
        self.assertLess(losses[-1], losses[0])

    def test_deterministic(self):
        a = train(self.train_seqs, _tiny_config(), self.val_seqs)
        b = train(self.train_seqs, _tiny_config(), self.val_seqs)
        self.assertEqual(a.records, b.records)
        self.assertTrue(a.params.equals(b.params))

    def test_workers_do_not_change_results(self):
        a = train(self.train_seqs, _tiny_config(), self.val_seqs, workers=1)
        b = train(self.train_seqs, _tiny_config(), self.val_seqs, workers=2)
        self.assertEqual(a.records, b.records)
        self.assertTrue(a.params.equals(b.params))

    def test_records_layout(self):
        result = train(self.train_seqs, _tiny_config(epochs=2, patience=5), self.val_seqs)
        self.assertEqual([(r.epoch, r.split) for r in result.records],
                         [(0, "val"), (1, "train"), (1, "val"), (2, "train"), (2, "val")])
        val_aps = [r.ap for r in result.records if r.split == "val"]
        self.assertEqual(result.best_val_ap, max(val_aps))
        self.assertEqual(result.best_epoch, val_aps.index(max(val_aps)))

    def test_without_validation_selects_on_training_videos(self):
        result = train(self.train_seqs, _tiny_config(epochs=1))
        self.assertEqual(result.records[0].split, "train_eval")

    def test_best_params_are_returned(self):
        result = train(self.train_seqs, _tiny_config(epochs=2), self.val_seqs)
        metrics, _ = evaluate(result.params, self.val_seqs, _tiny_config())
        self.assertAlmostEqual(metrics["ap"], result.best_val_ap, places=12)

    def test_init_params_are_not_mutated(self):
        init = init_masrc_params(_tiny_config().modality, 4, 4, 8, hidden=8)
        snapshot = init.copy()
        train(self.train_seqs, _tiny_config(epochs=1), self.val_seqs, init_params=init)
        self.assertTrue(init.equals(snapshot))

    def test_transfer_fine_tunes_from_pretrained(self):
        starts = []
        original = training._run_phase

        def spy(params, *args, **kwargs):
            starts.append(params.copy())
            return original(params, *args, **kwargs)

        config = _tiny_config(regime="transfer", epochs=1, pretrain_epochs=2)
        with mock.patch.object(training, "_run_phase", side_effect=spy):
            result = train(self.train_seqs, config, self.val_seqs)
        self.assertEqual(len(starts), 2)
        self.assertTrue(starts[1].equals(result.pretrained))
        phases = [r.phase for r in result.records]
        self.assertEqual(phases.count("pretrain"), 5)
        self.assertEqual(phases.count("finetune"), 3)

    def test_run_seeds(self):
        out = run_seeds(self.train_seqs, self.val_seqs, _tiny_config(epochs=1), seeds=[0, 1])
        self.assertEqual(sorted(out["per_seed"]), [0, 1])
        self.assertAlmostEqual(out["mean_ap"], np.mean(list(out["per_seed"].values())))


@unittest.skipUnless(SLOW, "set MASRC_SLOW_TESTS=1 for desk-scale training runs")
class TestDeskScale(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        synth = SynthConfig(**json.loads((project_root / "configs" / "synth.json").read_text(encoding="utf-8")))
        cls.train_seqs, cls.val_seqs = split_dataset(synth_generate(synth, 0), synth.num_val_videos)
        cls.config = TrainConfig(batch_size=32, peak_lr=1e-3, epochs=20, show_progress=False)

    def test_supervised_reaches_target_ap(self):
        result = train(self.train_seqs, self.config, self.val_seqs)
        self.assertGreaterEqual(result.best_val_ap, 0.85)

    def test_ablation_ordering(self):
        seeds = range(5)
        mean = {name: run_seeds(self.train_seqs, self.val_seqs,
                                self.config.model_copy(update={"modality": ABLATION_PRESETS[name]}), seeds)["mean_ap"]
                for name in ("full", "entity_long", "place_short", "mcd_only")}
        for single in ("entity_long", "place_short"):
            self.assertGreaterEqual(mean["full"] - mean[single], 0.02, single)
            self.assertGreaterEqual(mean[single] - mean["mcd_only"], 0.02, single)


if __name__ == '__main__':
    unittest.main()
