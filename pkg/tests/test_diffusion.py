"""Tests for the noise schedule, DDIM, the denoiser and the exemplar pipeline."""

import numpy as np
import pytest

from exemplar_synth.adapter import MatchingAdapter
from exemplar_synth.config import ModelConfig, as_manifest, write_manifest
from exemplar_synth.diffusion import (
    DenoiserNet,
    ExemplarPipeline,
    NoiseSchedule,
    config_path,
    ddim_invert,
    ddim_sample,
    ddim_step,
    decode,
    encode,
    forward_noise,
    guided_eps,
    one_hot,
    timestep_embedding,
)
from exemplar_synth.errors import ConfigError, IoError, ShapeError, StateError
from exemplar_synth.numeric import ParamSet, backward, save_params
from tests.scene_fixtures import ModelBuilder, TINY_CLASSES, tiny_model_config, two_box_scene


def randomize(adapter, seed=0):
    rng = np.random.default_rng(seed)
    for path in adapter.params.paths():
        if ".stage2." in path:
            adapter.params[path].data = rng.normal(0.0, 0.5, adapter.params[path].shape)
    return adapter


def fresh_adapter(cfg):
    return MatchingAdapter.create(cfg.adapted_set, cfg.heads, cfg.attn_size, seed=1)


class TestSchedule:
    """Test the linear schedule and DDIM arithmetic."""

    @pytest.mark.fast
    def test_sampling_timesteps(self):
        """Test the evenly spaced descending subsequence."""
        schedule = NoiseSchedule.linear(40, 4)
        assert schedule.timesteps() == [40, 30, 20, 10]
        assert schedule.pairs() == [(40, 30), (30, 20), (20, 10), (10, 0)]
        assert schedule.alphas_bar[0] == 1.0
        assert np.all(np.diff(schedule.alphas_bar) < 0)

    @pytest.mark.fast
    def test_sample_count_must_divide(self):
        """Test the divisibility check."""
        with pytest.raises(ConfigError):
            NoiseSchedule.linear(40, 3)

    @pytest.mark.fast
    def test_step_with_true_noise_recovers_clean(self):
        """Test that the exact noise maps a noised latent back to t=0."""
        schedule = NoiseSchedule.linear(40, 4)
        rng = np.random.default_rng(0)
        z0, noise = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
        z_t = forward_noise(z0, 30, noise, schedule)
        np.testing.assert_allclose(ddim_step(z_t, noise, 30, 0, schedule), z0, atol=1e-12)

    @pytest.mark.fast
    def test_timestep_range_checked(self):
        """Test out-of-range timesteps."""
        schedule = NoiseSchedule.linear(40, 4)
        with pytest.raises(ConfigError):
            forward_noise(np.zeros(2), 41, np.zeros(2), schedule)

    @pytest.mark.fast
    def test_inversion_then_sampling_reconstructs(self):
        """Test that inverting and resampling with the same predictor round-trips."""
        schedule = NoiseSchedule.linear(40, 4)
        rng = np.random.default_rng(1)
        weights = rng.normal(size=(3, 4, 4)) * 0.3

        def predictor(z, t, seg):
            return weights * (t / 40.0)

        z0 = rng.normal(size=(3, 4, 4))
        trajectory = ddim_invert(z0, None, predictor, schedule)
        assert sorted(trajectory) == [0, 10, 20, 30, 40]
        np.testing.assert_allclose(ddim_sample(trajectory[40], None, predictor, schedule), z0, atol=1e-9)

    @pytest.mark.fast
    def test_guidance_identities(self):
        """Test the guidance extrapolation at its special scales."""
        rng = np.random.default_rng(2)
        base, refined = rng.normal(size=5), rng.normal(size=5)
        assert guided_eps(base, refined, -1.0) is base
        assert guided_eps(base, refined, 0.0) is refined
        np.testing.assert_allclose(guided_eps(base, refined, 1.0), 2 * refined - base)


class TestEncoding:
    """Test latent codecs and conditioning inputs."""

    @pytest.mark.fast
    def test_encode_decode(self):
        """Test the image/latent mapping."""
        image, _ = two_box_scene(8)
        z = encode(image)
        assert z.shape == (3, 8, 8)
        assert z.min() >= -1.0 and z.max() <= 1.0
        np.testing.assert_allclose(decode(z).rgb, image.rgb, atol=1e-12)

    @pytest.mark.fast
    def test_embedding_shape(self):
        """Test even and odd embedding widths."""
        assert timestep_embedding(3, 8).shape == (1, 8)
        assert timestep_embedding(3, 7).shape == (1, 7)

    @pytest.mark.fast
    def test_one_hot(self):
        """Test label one-hot planes and the class check."""
        _, seg = two_box_scene(8)
        planes = one_hot(seg, 8, TINY_CLASSES)
        np.testing.assert_array_equal(planes.sum(axis=0), 1.0)
        np.testing.assert_array_equal(planes.argmax(axis=0), seg.labels)
        with pytest.raises(ConfigError):
            one_hot(seg, 8, TINY_CLASSES + 1)


class TestDenoiser:
    """Test the denoiser network."""

    @pytest.mark.fast
    def test_fresh_output_is_zero(self):
        """Test the zero-initialised output convolution."""
        net = DenoiserNet.create(tiny_model_config(), seed=0)
        _, seg = two_box_scene(16)
        eps = net.eps(np.random.default_rng(0).normal(size=(3, 16, 16)), 10, seg)
        np.testing.assert_array_equal(eps, 0.0)

    @pytest.mark.fast
    def test_latent_shape_checked(self, tmp_path):
        """Test a latent at the wrong size."""
        net = ModelBuilder(tmp_path).net()
        _, seg = two_box_scene(16)
        with pytest.raises(ShapeError):
            net(np.zeros((3, 8, 8)), 10, seg)

    @pytest.mark.fast
    def test_gradients_reach_attention(self, tmp_path):
        """Test that a loss on the prediction trains the attention projections."""
        net = ModelBuilder(tmp_path).net()
        _, seg = two_box_scene(16)
        out = net(np.random.default_rng(1).normal(size=(3, 16, 16)), 20, seg)
        backward((out * out).mean())
        for path in ("unet.attn4.q.weight", "unet.structure.conv1.weight", "unet.time.fc1.weight"):
            grad = net.params[path].grad
            assert grad is not None and np.any(grad != 0.0), path

    @pytest.mark.fast
    def test_save_and_load(self, tmp_path):
        """Test that a reloaded denoiser predicts identically."""
        builder = ModelBuilder(tmp_path)
        net = builder.net(seed=2)
        path = net.save(tmp_path / "stage1.amad")
        assert config_path(path).exists()
        loaded = DenoiserNet.load(path)
        assert loaded.cfg == net.cfg
        _, seg = two_box_scene(16)
        z = np.random.default_rng(3).normal(size=(3, 16, 16))
        np.testing.assert_array_equal(loaded.eps(z, 30, seg), net.eps(z, 30, seg))

    @pytest.mark.fast
    def test_load_rejects_mismatched_config(self, tmp_path):
        """Test a checkpoint whose config manifest describes another model."""
        path = ModelBuilder(tmp_path).checkpoint()
        write_manifest(config_path(path), as_manifest(tiny_model_config(channels=(8, 16))))
        with pytest.raises(IoError):
            DenoiserNet.load(path)

    @pytest.mark.fast
    def test_overlay_rejects_foreign_paths(self, tmp_path):
        """Test overlaying tensors the model does not have."""
        net = ModelBuilder(tmp_path).net()
        foreign = ParamSet()
        foreign.add("unet.extra.weight", np.zeros(2))
        with pytest.raises(StateError):
            net.overlay(foreign)


class TestPipeline:
    """Test exemplar-conditioned sampling."""

    @pytest.fixture
    def scene(self):
        image, seg = two_box_scene(16)
        return seg, (image, seg)

    @pytest.mark.fast
    def test_untrained_adapter_matches_baseline(self, tmp_path, scene):
        """Test that a zero-initialised adapter changes nothing, bit for bit."""
        seg_y, exemplar = scene
        builder = ModelBuilder(tmp_path)
        net = builder.net()
        adapted = ExemplarPipeline(net, fresh_adapter(net.cfg))
        baseline = ExemplarPipeline(net)
        z_adapter = adapted.sample(seg_y, exemplar, mode="adapter", scale=7.5, seed=4)
        z_baseline = baseline.sample(seg_y, exemplar, mode="baseline", seed=4)
        np.testing.assert_array_equal(z_adapter, z_baseline)

    @pytest.mark.fast
    def test_scale_minus_one_is_baseline(self, tmp_path, scene):
        """Test that s=-1 reproduces baseline sampling with a trained adapter."""
        seg_y, exemplar = scene
        net = ModelBuilder(tmp_path).net()
        pipeline = ExemplarPipeline(net, randomize(fresh_adapter(net.cfg)))
        guided = pipeline.sample(seg_y, exemplar, mode="adapter", scale=-1.0, seed=5)
        plain = pipeline.sample(seg_y, exemplar, mode="baseline", seed=5)
        np.testing.assert_array_equal(guided, plain)

    @pytest.mark.fast
    def test_trained_adapter_changes_output(self, tmp_path, scene):
        """Test that refined attention reaches the sample and scale matters."""
        seg_y, exemplar = scene
        net = ModelBuilder(tmp_path).net()
        pipeline = ExemplarPipeline(net, randomize(fresh_adapter(net.cfg)))
        plain = pipeline.sample(seg_y, exemplar, mode="baseline", seed=6)
        refined = pipeline.sample(seg_y, exemplar, mode="adapter", scale=0.0, seed=6)
        guided = pipeline.sample(seg_y, exemplar, mode="adapter", scale=2.0, seed=6)
        assert not np.array_equal(plain, refined)
        assert not np.array_equal(refined, guided)

    @pytest.mark.fast
    def test_sampling_is_deterministic(self, tmp_path, scene):
        """Test that a seed fixes the sample."""
        seg_y, exemplar = scene
        pipeline = ModelBuilder(tmp_path).pipeline()
        first = pipeline.generate(seg_y, exemplar, mode="categorical", seed=7)
        second = pipeline.generate(seg_y, exemplar, mode="categorical", seed=7)
        np.testing.assert_array_equal(first.rgb, second.rgb)
        assert first.shape == (16, 16)

    @pytest.mark.fast
    def test_exemplar_reaches_the_sample(self, tmp_path, scene):
        """Test that augmented attention differs from structure-only sampling."""
        seg_y, exemplar = scene
        pipeline = ModelBuilder(tmp_path).pipeline()
        alone = pipeline.sample(seg_y, None, mode="none", seed=8)
        augmented = pipeline.sample(seg_y, exemplar, mode="baseline", seed=8)
        replaced = pipeline.sample(seg_y, exemplar, mode="replace", seed=8)
        assert not np.array_equal(alone, augmented)
        assert not np.array_equal(augmented, replaced)

    @pytest.mark.fast
    def test_mode_preconditions(self, tmp_path, scene):
        """Test adapter mode without an adapter and exemplar modes without an exemplar."""
        seg_y, exemplar = scene
        pipeline = ModelBuilder(tmp_path).pipeline()
        with pytest.raises(StateError):
            pipeline.sample(seg_y, exemplar, mode="adapter")
        with pytest.raises(ConfigError):
            pipeline.sample(seg_y, None, mode="baseline")

    @pytest.mark.fast
    def test_recorder_sees_every_site(self, tmp_path, scene):
        """Test the per-step attention recorder."""
        seg_y, exemplar = scene
        pipeline = ModelBuilder(tmp_path).pipeline()
        seen = []
        pipeline.sample(
            seg_y, exemplar, mode="baseline", seed=0,
            recorder=lambda step, state, refined: seen.append((step, state.cfg.layer)),
        )
        assert len(seen) == 4 * 10
        assert {step for step, _ in seen} == {0, 1, 2, 3}

    @pytest.mark.fast
    def test_noised_exemplar_latents(self, tmp_path, scene):
        """Test forward-noised exemplar latents."""
        _, (image, seg) = scene
        pipeline = ModelBuilder(tmp_path).pipeline()
        latents = pipeline.exemplar_latents(image, seg, "noise", seed=1)
        assert sorted(latents) == [10, 20, 30, 40]
        with pytest.raises(ConfigError):
            pipeline.exemplar_latents(image, seg, "copy", seed=1)

    @pytest.mark.fast
    def test_costs_cached_across_steps(self, tmp_path, scene):
        """Test that one cost serves every step and adapted layer."""
        seg_y, exemplar = scene
        pipeline = ModelBuilder(tmp_path).pipeline()
        pipeline.sample(seg_y, exemplar, mode="categorical", seed=0)
        assert len(pipeline.costs) == 1
        costs = pipeline.layer_costs(seg_y, exemplar[1], None)
        assert sorted(costs) == list(range(1, 10))
        assert costs[1].shape == (16, 16)


class TestCheckpoints:
    """Test loading stage-1 and stage-2 checkpoints together."""

    @pytest.mark.fast
    def test_denoiser_only(self, tmp_path):
        """Test a stage-1 checkpoint on its own."""
        pipeline = ExemplarPipeline.from_checkpoints(ModelBuilder(tmp_path).checkpoint())
        assert pipeline.adapter is None

    @pytest.mark.fast
    def test_with_adapter(self, tmp_path):
        """Test attaching a saved adapter."""
        builder = ModelBuilder(tmp_path)
        stage1 = builder.checkpoint()
        adapter = randomize(fresh_adapter(builder.cfg))
        save_params(adapter.params, tmp_path / "stage2.amad")
        pipeline = ExemplarPipeline.from_checkpoints(stage1, tmp_path / "stage2.amad")
        assert pipeline.adapter is not None
        assert pipeline.adapter.layers == list(range(1, 10))

    @pytest.mark.fast
    def test_adapter_missing_layers(self, tmp_path):
        """Test an adapter that does not cover every adapted layer."""
        builder = ModelBuilder(tmp_path)
        stage1 = builder.checkpoint()
        adapter = MatchingAdapter.create((1, 2), builder.cfg.heads, builder.cfg.attn_size)
        save_params(adapter.params, tmp_path / "stage2.amad")
        with pytest.raises(IoError):
            ExemplarPipeline.from_checkpoints(stage1, tmp_path / "stage2.amad")

    @pytest.mark.fast
    def test_fine_tuned_attention_overlay(self, tmp_path):
        """Test that fine-tuned attention weights replace the stage-1 ones."""
        builder = ModelBuilder(tmp_path)
        stage1 = builder.checkpoint()
        tuned = builder.net()
        tuned.params["unet.attn3.q.weight"].data = tuned.params["unet.attn3.q.weight"].data + 1.0
        save_params(tuned.params.subset("unet.attn"), tmp_path / "stage2.amad")
        pipeline = ExemplarPipeline.from_checkpoints(stage1, tmp_path / "stage2.amad")
        np.testing.assert_array_equal(
            pipeline.net.params["unet.attn3.q.weight"].data,
            tuned.params["unet.attn3.q.weight"].data,
        )

    @pytest.mark.fast
    def test_empty_stage2(self, tmp_path):
        """Test a stage-2 checkpoint holding nothing usable."""
        stage1 = ModelBuilder(tmp_path).checkpoint()
        other = ParamSet()
        other.add("misc.value", np.zeros(1))
        save_params(other, tmp_path / "stage2.amad")
        with pytest.raises(IoError):
            ExemplarPipeline.from_checkpoints(stage1, tmp_path / "stage2.amad")

    @pytest.mark.fast
    def test_model_config_round_trip(self, tmp_path):
        """Test that the stored model config is the one the model was built with."""
        cfg = tiny_model_config(heads=4)
        path = ModelBuilder(tmp_path, cfg).checkpoint()
        assert DenoiserNet.load(path).cfg == cfg
        assert isinstance(DenoiserNet.load(path).cfg, ModelConfig)
