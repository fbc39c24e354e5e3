"""Optimizer and schedule oracles, training-loop wiring invariants
(augmentation assignment, gradient isolation, EMA-only target movement),
checkpoint resume, and the multi-view evaluation protocol."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from cmv import data as vd
from cmv import objectives, trainer
from cmv.autodiff import Tensor
from cmv.model import ModelConfig, VideoModel, random_tube_mask

TINY_MODEL = dict(
    d_model=48, depth=1, num_heads=4, mlp_ratio=2, proj_dim=24,
    decoder_width=24, decoder_depth=1, decoder_heads=2,
)
TINY_SHIFT = vd.ShiftConfig(frames=4, rate=2, max_disturbance=2)


@pytest.fixture(scope="module")
def dataset():
    return vd.synthesize_dataset(
        num_videos=16, num_classes=4, total_frames=24, height=16, width=16, seed=21
    )


def tiny_train_config(**overrides) -> trainer.TrainConfig:
    base = dict(batch_size=8, total_epochs=2, warmup_epochs=1, seed=3, shift=TINY_SHIFT)
    base.update(overrides)
    return trainer.TrainConfig(**base)


class TestLinearScaleLr:
    def test_large_batch_reference_value(self):
        assert trainer.linear_scale_lr(1.5e-4, 2048) == pytest.approx(1.2e-3, rel=1e-12)

    def test_reference_batch_is_fixed_point(self):
        assert trainer.linear_scale_lr(0.37, 256) == 0.37

    def test_small_batch_scales_down(self):
        assert trainer.linear_scale_lr(8e-3, 32) == pytest.approx(1e-3, rel=1e-12)


class TestLrSchedule:
    def cfg(self):
        return trainer.TrainConfig(
            total_epochs=20, warmup_epochs=4, base_lr=0.256, batch_size=32, shift=TINY_SHIFT
        )

    def test_starts_at_zero(self):
        assert trainer.lr_schedule(0, 10, self.cfg()) == 0.0

    def test_peak_at_end_of_warmup(self):
        cfg = self.cfg()
        assert trainer.lr_schedule(40, 10, cfg) == cfg.effective_lr

    def test_continuous_at_junction(self):
        cfg = self.cfg()
        eff = cfg.effective_lr
        gap = abs(trainer.lr_schedule(40, 10, cfg) - trainer.lr_schedule(39, 10, cfg))
        assert gap <= eff / 40 + 1e-15

    def test_cosine_midpoint_is_half(self):
        cfg = self.cfg()
        midpoint = 40 + (200 - 40) // 2
        assert trainer.lr_schedule(midpoint, 10, cfg) == pytest.approx(
            cfg.effective_lr / 2, rel=1e-12
        )

    def test_clamps_past_the_end(self):
        assert trainer.lr_schedule(200, 10, self.cfg()) == 0.0
        assert trainer.lr_schedule(5000, 10, self.cfg()) == 0.0

    def test_rejects_negative_step(self):
        with pytest.raises(ValueError):
            trainer.lr_schedule(-1, 10, self.cfg())


class TestAdamW:
    def test_hand_computed_first_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = trainer.AdamW([("p", p)], beta1=0.9, beta2=0.999, weight_decay=0.05)
        p.grad = np.array([1.0])
        opt.step(0.1)
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.05 * 1.0)
        assert p.data[0] == pytest.approx(expected, abs=1e-12)

    def test_zero_grad_zero_decay_is_identity(self):
        p = Tensor(np.array([0.7, -0.3]), requires_grad=True)
        opt = trainer.AdamW([("p", p)], weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step(0.5)
        np.testing.assert_array_equal(p.data, [0.7, -0.3])

    def test_zero_grad_with_decay_is_multiplicative(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = trainer.AdamW([("p", p)], weight_decay=0.1)
        p.grad = np.zeros(1)
        opt.step(0.5)
        assert p.data[0] == pytest.approx(2.0 * (1.0 - 0.5 * 0.1), rel=1e-12)

    def test_none_grad_skips_parameter(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = trainer.AdamW([("p", p)], weight_decay=0.1)
        p.grad = None
        opt.step(0.5)
        assert p.data[0] == 2.0

    def test_moments_match_parameter_shapes(self):
        p = Tensor(np.zeros((3, 4)), requires_grad=True)
        opt = trainer.AdamW([("p", p)])
        assert opt.moment1["p"].shape == (3, 4)
        assert opt.moment2["p"].shape == (3, 4)
        assert opt.step_count == 0


class TestTrainConfig:
    def test_effective_lr(self):
        cfg = tiny_train_config(base_lr=0.016, batch_size=32)
        assert cfg.effective_lr == pytest.approx(0.002, rel=1e-12)

    def test_rejects_warmup_beyond_total(self):
        with pytest.raises(ValueError, match="warmup"):
            tiny_train_config(warmup_epochs=5, total_epochs=2)

    def test_rejects_all_zero_weights(self):
        with pytest.raises(ValueError, match="at least one"):
            tiny_train_config(contrastive_weight=0.0, recon_weight=0.0)

    def test_rejects_bad_mode(self):
        with pytest.raises(ValueError, match="mode"):
            tiny_train_config(mode="predict")


class TestPretrainLoop:
    def test_metrics_stream_and_checkpoint(self, dataset, tmp_path):
        cfg = tiny_train_config()
        final = trainer.pretrain(dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "run")
        records = [json.loads(l) for l in open(tmp_path / "run/metrics.jsonl")]
        assert len(records) == 2 * (16 // 8)
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        assert all(np.isfinite(r["total_loss"]) for r in records)
        assert all(set(r) == {"step", "epoch", "lr", "recon_loss", "contrastive_loss",
                              "total_loss", "ema_momentum"} for r in records)
        assert final.exists()

    def test_identical_runs_byte_identical(self, dataset, tmp_path):
        cfg = tiny_train_config()
        model_cfg = ModelConfig(**TINY_MODEL)
        first = trainer.pretrain(dataset, model_cfg, cfg, tmp_path / "a")
        second = trainer.pretrain(dataset, model_cfg, cfg, tmp_path / "b")
        assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
        assert first.read_bytes() == second.read_bytes()

    def test_resume_is_bit_exact(self, dataset, tmp_path):
        model_cfg = ModelConfig(**TINY_MODEL)
        cfg = tiny_train_config(total_epochs=4, checkpoint_interval=2)
        full = trainer.pretrain(dataset, model_cfg, cfg, tmp_path / "full")
        resumed = trainer.pretrain(
            dataset, model_cfg, cfg, tmp_path / "resumed",
            resume_from=tmp_path / "full/checkpoints/epoch_0002.cmvc",
        )
        full_records = [json.loads(l) for l in open(tmp_path / "full/metrics.jsonl")]
        resumed_records = [json.loads(l) for l in open(tmp_path / "resumed/metrics.jsonl")]
        assert resumed_records == [r for r in full_records if r["epoch"] >= 2]
        assert full.read_bytes() == resumed.read_bytes()

    def test_resume_rejects_seed_mismatch(self, dataset, tmp_path):
        model_cfg = ModelConfig(**TINY_MODEL)
        cfg = tiny_train_config(total_epochs=2, checkpoint_interval=1)
        trainer.pretrain(dataset, model_cfg, cfg, tmp_path / "orig")
        with pytest.raises(ValueError, match="seed"):
            trainer.pretrain(
                dataset, model_cfg, replace(cfg, seed=99), tmp_path / "bad",
                resume_from=tmp_path / "orig/checkpoints/epoch_0001.cmvc",
            )

    def test_reconstruction_only_never_runs_target_encoder(self, dataset, tmp_path, monkeypatch):
        calls = []
        original = VideoModel.encode_target

        def spy(self, tokens):
            calls.append(tokens.shape)
            return original(self, tokens)

        monkeypatch.setattr(VideoModel, "encode_target", spy)
        trainer.pretrain(
            dataset, ModelConfig(**TINY_MODEL), tiny_train_config(contrastive_weight=0.0), tmp_path / "r"
        )
        assert calls == []
        trainer.pretrain(
            dataset, ModelConfig(**TINY_MODEL), tiny_train_config(total_epochs=1), tmp_path / "c"
        )
        assert len(calls) == 2

    def test_non_finite_loss_aborts_with_diagnostics(self, dataset, tmp_path, monkeypatch):
        def poisoned(pred, target):
            return Tensor(np.float32("nan"))

        monkeypatch.setattr(trainer.objectives, "recon_loss", poisoned)
        with pytest.raises(trainer.TrainingDiverged) as excinfo:
            trainer.pretrain(
                dataset, ModelConfig(**TINY_MODEL), tiny_train_config(), tmp_path / "x"
            )
        dump = json.loads((tmp_path / "x/abort.json").read_text())
        assert dump["reason"] == "non-finite loss"
        assert dump["run_seed"] == 3 and len(dump["sample_indices"]) == 8
        assert excinfo.value.diagnostics["epoch"] == 0

    def test_rejects_batch_larger_than_dataset(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="exceeds dataset"):
            trainer.pretrain(
                dataset, ModelConfig(**TINY_MODEL),
                tiny_train_config(batch_size=64), tmp_path / "big",
            )


class TestStepWiring:
    """One manually assembled step, checking the augmentation assignment
    and gradient-isolation contracts the loop relies on."""

    def build_step(self, dataset, perturb=None):
        cfg = tiny_train_config()
        model = trainer.build_model(dataset, ModelConfig(**TINY_MODEL), cfg)
        rng = np.random.default_rng(0)
        online_clips, target_clips, plans = [], [], []
        for video in range(8):
            frames = dataset.frames_float(video)
            online_clip, target_clip = vd.temporal_shift(frames, 1, cfg.shift, rng)
            target_clip = vd.color_augment(target_clip, cfg.color_strength, rng)
            online_clips.append(online_clip)
            target_clips.append(target_clip)
            plans.append(random_tube_mask(model.num_tokens, 0.5, rng))
        online_tokens = trainer._stack_tokens(dataset, online_clips, model)
        target_tokens = trainer._stack_tokens(dataset, target_clips, model)
        visible = np.stack([p.visible for p in plans])
        masked = np.stack([p.masked for p in plans])
        if perturb == "target_masked":
            rows = np.arange(8)[:, None]
            target_tokens[rows, masked] += 0.5
        if perturb == "online_masked":
            rows = np.arange(8)[:, None]
            online_tokens[rows, masked] += 0.5

        embeddings = model.encode_online(
            trainer._gather_rows(online_tokens, visible), visible
        )
        full = model.assemble_full_sequence(embeddings, visible, masked)
        predictions = model.pixel_decode(full, masked)
        recon = objectives.recon_loss(
            predictions, Tensor(trainer._gather_rows(online_tokens, masked))
        )
        pooled = model.contrastive_feature(embeddings, visible, masked)
        online_proj = model.project_predict(pooled, "online")
        target_proj = model.project_predict(model.encode_target(target_tokens), "target")
        contrastive = objectives.infonce(online_proj, target_proj, cfg.tau)
        return model, embeddings, recon, contrastive

    def test_perturbing_target_masked_pixels_moves_only_contrastive(self, dataset):
        _, _, recon_a, contr_a = self.build_step(dataset)
        _, _, recon_b, contr_b = self.build_step(dataset, perturb="target_masked")
        assert recon_a.item() == recon_b.item()
        assert contr_a.item() != contr_b.item()

    def test_perturbing_online_masked_pixels_moves_recon_targets_only(self, dataset):
        model_a, emb_a, recon_a, _ = self.build_step(dataset)
        model_b, emb_b, recon_b, _ = self.build_step(dataset, perturb="online_masked")
        np.testing.assert_array_equal(emb_a.data, emb_b.data)  # encoder never sees them
        assert recon_a.item() != recon_b.item()

    def test_target_branch_gets_zero_gradient_and_moves_only_by_ema(self, dataset):
        model, _, recon, contrastive = self.build_step(dataset)
        opt = trainer.AdamW(model.trainable_parameters())
        opt.zero_grad()
        (recon + contrastive).backward()
        target_params = list(model.target_encoder.named_parameters()) + list(
            model.target_projection.named_parameters()
        )
        for _, param in target_params:
            assert param.grad is None
        before = {name: p.data.copy() for name, p in target_params}
        online_before = {
            name: p.data.copy()
            for name, p in list(model.online_encoder.named_parameters())
            + list(model.online_projection.named_parameters())
        }
        opt.step(1e-3)
        for name, param in target_params:
            np.testing.assert_array_equal(param.data, before[name])
        model.ema_update(0.97)
        online_after = dict(
            model.online_encoder.named_parameters()
        ) | dict(model.online_projection.named_parameters())
        for name, param in target_params:
            expected = np.float32(0.97) * before[name] + np.float32(1.0 - 0.97) * online_after[name].data
            np.testing.assert_array_equal(param.data, expected)
        # And the online side did move under the optimizer.
        moved = any(
            not np.array_equal(online_after[name].data, online_before[name])
            for name in online_before
        )
        assert moved


class TestFinetune:
    def test_single_replica_sees_each_video_once(self, dataset, tmp_path):
        cfg = tiny_train_config(repeated_samples=1, mode="finetune", total_epochs=2)
        trainer.finetune(dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "ft")
        records = [json.loads(l) for l in open(tmp_path / "ft/metrics.jsonl")]
        assert len(records) == 2 * (16 // 8)
        assert all("accuracy" in r for r in records)

    def test_repeated_sampling_doubles_steps(self, dataset, tmp_path):
        cfg = tiny_train_config(repeated_samples=2, mode="finetune", total_epochs=1)
        trainer.finetune(dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "ft2")
        records = [json.loads(l) for l in open(tmp_path / "ft2/metrics.jsonl")]
        assert len(records) == (16 * 2) // 8

    def test_linear_probe_updates_only_classifier(self, dataset, tmp_path):
        from cmv.model import load_checkpoint

        cfg = tiny_train_config(mode="finetune", total_epochs=1)
        final = trainer.finetune(
            dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "probe", freeze_encoder=True
        )
        trained = load_checkpoint(final)
        reference = trainer.build_model(dataset, ModelConfig(**TINY_MODEL), cfg)
        for name, param in reference.named_parameters():
            if name.startswith("classifier."):
                continue
            np.testing.assert_array_equal(trained[f"param.{name}"], param.data)
        fresh = trainer.build_model(dataset, ModelConfig(**TINY_MODEL), cfg)
        fresh.add_classifier(dataset.num_classes, cfg.seed)
        assert not np.array_equal(
            trained["param.classifier.weight"], fresh.classifier.weight.data
        )

    def test_class_count_mismatch_rejected(self, dataset, tmp_path):
        cfg = tiny_train_config(mode="finetune", total_epochs=1)
        final = trainer.finetune(dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "ok")
        eight = vd.synthesize_dataset(
            num_videos=8, num_classes=8, total_frames=24, height=16, width=16, seed=5
        )
        with pytest.raises(ValueError, match="classes"):
            trainer.finetune(
                eight, ModelConfig(**TINY_MODEL), cfg, tmp_path / "bad", init_from=final
            )


class TestCrossEntropy:
    def test_matches_log_softmax_identity(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 2])
        value = trainer.cross_entropy(Tensor(logits), labels).item()
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -np.mean(log_probs[np.arange(4), labels])
        assert value == pytest.approx(expected, rel=1e-6)


def constant_video(value: float, total_frames: int = 8) -> np.ndarray:
    return np.full((total_frames, 1, 4, 4), round(value * 255), dtype=np.uint8)


def fixture_dataset(values, labels, total_frames=8) -> vd.VideoDataset:
    videos = np.stack([constant_video(v, total_frames) for v in values])
    return vd.VideoDataset(
        num_classes=2,
        total_frames=total_frames,
        channels=1,
        height=4,
        width=4,
        mean=np.array([0.0], dtype=np.float32),
        std=np.array([1.0], dtype=np.float32),
        seed=0,
        labels=np.array(labels, dtype=np.uint32),
        videos=videos,
    )


class TestEvaluateMultiview:
    def test_hand_computed_two_video_fixture(self):
        # Video 0 (label 0) gets view logits [2,0] and [0,1]; video 1
        # (label 1) gets [1,0] and [0,0.2]. Averaged softmax predicts
        # class 0 for both, so exactly one of two is correct.
        dataset = fixture_dataset([0.2, 0.8], [0, 1])
        logits_by_video = {
            51: [[2.0, 0.0], [0.0, 1.0]],
            204: [[1.0, 0.0], [0.0, 0.2]],
        }
        def predict(batch):
            key = int(round(batch[0, 0, 0, 0, 0] * 255))
            return np.array(logits_by_video[key])

        cfg = vd.ShiftConfig(frames=2, rate=1, max_disturbance=0)
        accuracy = trainer.evaluate_multiview(predict, dataset, 2, 1, cfg)
        softmax = lambda z: np.exp(z) / np.exp(z).sum()
        mean_v0 = (softmax(np.array([2.0, 0.0])) + softmax(np.array([0.0, 1.0]))) / 2
        mean_v1 = (softmax(np.array([1.0, 0.0])) + softmax(np.array([0.0, 0.2]))) / 2
        assert np.argmax(mean_v0) == 0 and np.argmax(mean_v1) == 0
        assert accuracy == 0.5

    def test_single_view_equals_single_clip_accuracy(self):
        dataset = fixture_dataset([0.2, 0.8], [0, 1])
        def predict(batch):
            key = batch[0, 0, 0, 0, 0]
            logit = np.array([[1.0, -1.0]]) if key < 0.5 else np.array([[-1.0, 1.0]])
            return np.repeat(logit, batch.shape[0], axis=0)

        cfg = vd.ShiftConfig(frames=2, rate=1, max_disturbance=0)
        assert trainer.evaluate_multiview(predict, dataset, 1, 1, cfg) == 1.0

    def test_duplicated_views_leave_predictions_unchanged(self):
        # Constant frames make every view identical, so averaging over any
        # number of duplicates must not change the prediction.
        dataset = fixture_dataset([0.2, 0.8], [0, 1])
        def predict(batch):
            keys = batch[:, 0, 0, 0, 0]
            return np.where(keys[:, None] < 0.5, [[3.0, 0.0]], [[0.0, 3.0]])

        cfg = vd.ShiftConfig(frames=2, rate=1, max_disturbance=0)
        single = trainer.evaluate_multiview(predict, dataset, 1, 1, cfg)
        many = trainer.evaluate_multiview(predict, dataset, 3, 2, cfg)
        assert single == many == 1.0

    def test_too_short_video_rejected(self):
        dataset = fixture_dataset([0.2, 0.8], [0, 1], total_frames=4)
        cfg = vd.ShiftConfig(frames=4, rate=1, max_disturbance=0)
        with pytest.raises(ValueError, match="too short"):
            trainer.evaluate_multiview(lambda b: np.zeros((len(b), 2)), dataset, 2, 1, cfg)

    def test_rejects_nonpositive_views(self):
        dataset = fixture_dataset([0.2], [0])
        cfg = vd.ShiftConfig(frames=2, rate=1, max_disturbance=0)
        with pytest.raises(ValueError, match="view counts"):
            trainer.evaluate_multiview(lambda b: np.zeros((len(b), 2)), dataset, 0, 1, cfg)


class TestParseViews:
    def test_table_protocols(self):
        assert trainer.parse_views("5x3") == (5, 3)
        assert trainer.parse_views("2x3") == (2, 3)
        assert trainer.parse_views("2×3") == (2, 3)

    def test_rejects_garbage(self):
        for bad in ("", "3", "2x", "x3", "ax b", "0x3"):
            with pytest.raises(ValueError):
                trainer.parse_views(bad)
