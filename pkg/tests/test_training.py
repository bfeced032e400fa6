"""Tests for stage-1 and stage-2 training."""

import csv
import math
import os

import numpy as np
import pytest

from exemplar_synth.adapter import MatchingAdapter
from exemplar_synth.config import ModelConfig, SampleConfig, SceneConfig, TrainConfig
from exemplar_synth.diffusion import DenoiserNet, ExemplarPipeline, NoiseSchedule, ddim_sample, decode
from exemplar_synth.errors import ConfigError
from exemplar_synth.evalviz import evaluate, summarize
from exemplar_synth.numeric import load_params
from exemplar_synth.scenes import augment_pair, full_view, generate_dataset
from exemplar_synth.training import LOG_FIELDS, denoising_loss, pair_loss, train_stage1, train_stage2
from tests.scene_fixtures import ModelBuilder, tiny_model_config, tiny_samples, tiny_scene_config

# Opt-in switch for the 1000-scene training run.
ACCEPTANCE_ENV = "EXEMPLAR_SYNTH_ACCEPTANCE"


def stage1_config(tmp_path, **overrides):
    values = dict(stage=1, steps=2, resolution=16, checkpoint_dir=str(tmp_path), eval_every=1, seed=1)
    values.update(overrides)
    return TrainConfig(**values)


def stage2_config(tmp_path, checkpoint, **overrides):
    values = dict(
        stage=2,
        steps=2,
        resolution=16,
        checkpoint_dir=str(tmp_path),
        stage1_checkpoint=str(checkpoint),
        lr=1e-3,
        seed=2,
    )
    values.update(overrides)
    return TrainConfig(**values)


class TestLosses:
    """Test the per-sample losses."""

    @pytest.mark.fast
    def test_untrained_denoiser_loss_is_noise_energy(self):
        """Test that a zero prediction scores the mean squared noise."""
        net = DenoiserNet.create(tiny_model_config(), seed=0)
        sample = tiny_samples(1)[0]
        image, seg = full_view(sample.image, sample.seg, 16)
        noise = np.random.default_rng(0).standard_normal((3, 16, 16))
        loss = denoising_loss(net, image, seg, 20, noise, NoiseSchedule.from_config(net.cfg))
        assert loss.item() == pytest.approx(float(np.mean(noise**2)))

    @pytest.mark.fast
    def test_pair_loss_equal_with_fresh_adapter(self, tmp_path):
        """Test that a zero-initialised adapter leaves the pair loss unchanged."""
        net = ModelBuilder(tmp_path).net()
        pipeline = ExemplarPipeline(net)
        adapter = MatchingAdapter.create(net.cfg.adapted_set, net.cfg.heads, net.cfg.attn_size)
        sample = tiny_samples(1)[0]
        pair = augment_pair(sample.image, sample.seg, 3, tiny_scene_config())
        rng = np.random.default_rng(1)
        noise, noise_x = rng.standard_normal((3, 16, 16)), rng.standard_normal((3, 16, 16))
        with_adapter = pair_loss(net, pipeline, pair.exemplar, pair.target, 25, noise, noise_x, adapter)
        without = pair_loss(net, pipeline, pair.exemplar, pair.target, 25, noise, noise_x, None)
        assert with_adapter.item() == without.item()


class TestStage1:
    """Test denoiser training."""

    @pytest.mark.fast
    def test_writes_checkpoint_and_log(self, tmp_path):
        """Test the checkpoint, its config and the per-step CSV log."""
        result = train_stage1(stage1_config(tmp_path), tiny_model_config(), tiny_scene_config(), tiny_samples(2))
        assert result.checkpoint == tmp_path / "stage1.amad"
        assert DenoiserNet.load(result.checkpoint).cfg == tiny_model_config()
        with result.log_path.open() as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == LOG_FIELDS
        assert [row[0] for row in rows[1:]] == ["1", "2"]
        assert len(result.losses) == 2

    @pytest.mark.fast
    def test_zero_learning_rate_leaves_weights(self, tmp_path):
        """Test that lr=0 saves the initial weights unchanged."""
        result = train_stage1(
            stage1_config(tmp_path, lr=0.0, weight_decay=0.5), tiny_model_config(), tiny_scene_config(), tiny_samples(2)
        )
        initial = DenoiserNet.create(tiny_model_config(), seed=1)
        assert load_params(result.checkpoint).digest("unet.") == initial.params.digest("unet.")

    @pytest.mark.fast
    def test_deterministic(self, tmp_path):
        """Test that the seed fixes the loss sequence."""
        samples = tiny_samples(2)
        first = train_stage1(stage1_config(tmp_path / "a"), tiny_model_config(), tiny_scene_config(), samples)
        second = train_stage1(stage1_config(tmp_path / "b"), tiny_model_config(), tiny_scene_config(), samples)
        assert first.losses == second.losses

    @pytest.mark.fast
    def test_resolution_must_match_model(self, tmp_path):
        """Test the resolution check."""
        with pytest.raises(ConfigError):
            train_stage1(stage1_config(tmp_path, resolution=32), tiny_model_config(), tiny_scene_config(), tiny_samples(1))

    @pytest.mark.fast
    def test_empty_dataset(self, tmp_path):
        """Test training on an empty dataset directory."""
        cfg = stage1_config(tmp_path, dataset_dir=str(tmp_path / "missing"))
        with pytest.raises(ConfigError):
            train_stage1(cfg, tiny_model_config(), tiny_scene_config())

    @pytest.mark.slow
    def test_loss_decreases(self, tmp_path):
        """Test that the denoiser learns on a single scene."""
        cfg = stage1_config(tmp_path, steps=80, lr=1e-2, eval_every=40)
        result = train_stage1(cfg, tiny_model_config(), tiny_scene_config(), tiny_samples(1))
        assert np.mean(result.losses[-20:]) < np.mean(result.losses[:5])


class TestStage2:
    """Test adapter training on a frozen denoiser."""

    @pytest.mark.fast
    def test_denoiser_stays_frozen(self, tmp_path):
        """Test that only adapter weights move."""
        stage1 = ModelBuilder(tmp_path).checkpoint()
        before = DenoiserNet.load(stage1).params.digest()
        result = train_stage2(stage2_config(tmp_path, stage1), samples=tiny_samples(2), scene_cfg=tiny_scene_config())
        assert result.frozen_digest_before == result.frozen_digest_after
        assert DenoiserNet.load(stage1).params.digest() == before
        saved = load_params(result.checkpoint)
        assert saved.paths("unet.") == []
        adapter = MatchingAdapter.from_params(saved, heads=2, size=4)
        assert adapter.layers == list(range(1, 10))
        assert not adapter.is_identity()

    @pytest.mark.fast
    def test_zero_steps_saves_identity_adapter(self, tmp_path):
        """Test that no training leaves the zero-initialised output stage."""
        stage1 = ModelBuilder(tmp_path).checkpoint()
        result = train_stage2(stage2_config(tmp_path, stage1, steps=0), samples=tiny_samples(1))
        adapter = MatchingAdapter.from_params(load_params(result.checkpoint), heads=2, size=4)
        assert adapter.is_identity()
        assert result.losses == []

    @pytest.mark.fast
    def test_finetune_attention_variant(self, tmp_path):
        """Test that the fine-tuning variant saves attention projections only."""
        stage1 = ModelBuilder(tmp_path).checkpoint()
        result = train_stage2(
            stage2_config(tmp_path, stage1, variant="finetune-attention"),
            samples=tiny_samples(2),
            scene_cfg=tiny_scene_config(),
        )
        saved = load_params(result.checkpoint)
        assert saved.paths() == saved.paths("unet.attn")
        assert len(saved) == 10 * 5
        pipeline = ExemplarPipeline.from_checkpoints(stage1, result.checkpoint)
        assert pipeline.adapter is None

    @pytest.mark.fast
    def test_requires_stage1_checkpoint(self):
        """Test the missing-checkpoint precondition."""
        with pytest.raises(ConfigError):
            TrainConfig(stage=2)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


@pytest.fixture(scope="class")
def trained(tmp_path_factory):
    """A tiny stage-1 denoiser and adapter trained on a handful of scenes."""
    root = tmp_path_factory.mktemp("trained")
    model_cfg = tiny_model_config(t_sample=40)
    scene_cfg = tiny_scene_config()
    samples = tiny_samples(8)
    stage1 = train_stage1(
        stage1_config(root, steps=60, lr=5e-3, eval_every=60), model_cfg, scene_cfg, samples
    ).checkpoint
    stage2 = train_stage2(
        stage2_config(root, stage1, steps=4, eval_every=4), scene_cfg=scene_cfg, samples=samples
    ).checkpoint
    return stage1, stage2


class TestTrainedModel:
    """Test sampling properties of a briefly trained model."""

    @pytest.mark.slow
    def test_inversion_reconstructs_held_out_images(self, trained):
        """Test that inverting and sampling back recovers unseen images above 25 dB."""
        stage1, _ = trained
        net = DenoiserNet.load(stage1)
        pipeline = ExemplarPipeline(net)
        for sample in tiny_samples(6, seed=21):
            image, seg = full_view(sample.image, sample.seg, 16)
            z_T = pipeline.invert(image, seg)[net.cfg.t_train]
            restored = decode(ddim_sample(z_T, seg, net.eps, pipeline.schedule))
            assert psnr(restored.rgb, image.rgb) > 25.0

    @pytest.mark.slow
    def test_modes_score_on_held_out_scenes(self, trained):
        """Test evaluating every exemplar mode on paired held-out scenes."""
        pipeline = ExemplarPipeline.from_checkpoints(*trained)
        held_out = tiny_samples(4, seed=21)
        runs = {
            "baseline": SampleConfig(mode="baseline"),
            "categorical": SampleConfig(mode="categorical"),
            "adapter": SampleConfig(mode="adapter", scale=0.0),
            "guided": SampleConfig(mode="adapter", scale=7.5),
        }
        reports = {
            name: summarize(evaluate(pipeline, held_out, cfg, tiny_scene_config())) for name, cfg in runs.items()
        }
        for report in reports.values():
            assert 0.0 <= report.structure_iou <= 1.0
            assert report.appearance_dist is not None
            assert 0.0 <= report.appearance_dist <= 2.0
        assert reports["adapter"].structure_iou >= reports["baseline"].structure_iou - 0.05

    @pytest.mark.slow
    @pytest.mark.skipif(
        not os.environ.get(ACCEPTANCE_ENV), reason=f"set {ACCEPTANCE_ENV}=1 for the full-size training run"
    )
    def test_mode_ordering_at_full_size(self, tmp_path):
        """Test the appearance ordering guided < adapter < categorical <= baseline after full training."""
        scene_cfg = SceneConfig(num_scenes=1000, seed=0)
        samples = generate_dataset(scene_cfg, progress=True)
        held_out = generate_dataset(SceneConfig(num_scenes=50, seed=1))
        stage1 = train_stage1(
            TrainConfig(stage=1, steps=4000, lr=1e-3, checkpoint_dir=str(tmp_path), eval_every=500),
            ModelConfig(),
            scene_cfg,
            samples,
            progress=True,
        ).checkpoint
        stage2 = train_stage2(
            TrainConfig(
                stage=2,
                steps=2000,
                lr=1e-4,
                checkpoint_dir=str(tmp_path),
                stage1_checkpoint=str(stage1),
                eval_every=500,
            ),
            scene_cfg=scene_cfg,
            samples=samples,
            progress=True,
        ).checkpoint
        pipeline = ExemplarPipeline.from_checkpoints(stage1, stage2)

        def run(mode: str, scale: float = 7.5):
            return summarize(evaluate(pipeline, held_out, SampleConfig(mode=mode, scale=scale), scene_cfg))

        baseline = run("baseline")
        categorical = run("categorical")
        adapter = run("adapter", 0.0)
        guided = run("adapter", 7.5)
        assert guided.appearance_dist < adapter.appearance_dist
        assert adapter.appearance_dist < categorical.appearance_dist
        assert categorical.appearance_dist <= baseline.appearance_dist
        assert adapter.structure_iou >= baseline.structure_iou - 0.02
