"""Toy pixel-space diffusion: schedule, denoiser, DDIM and the exemplar pipeline.

Images in [0, 1] become latents in [-1, 1]. ``alphas_bar`` is indexed by
timestep with ``alphas_bar[0] == 1``; sampling walks the evenly spaced
subsequence ``T, T - T/S, ..., T/S`` and ends at 0.

The same denoiser plays both branches. The appearance branch runs on the
exemplar latent and captures every attention site's keys and values; the
structure branch denoises the target and attends to the captured bank.
"""

import dataclasses
import logging
import math
from pathlib import Path
from typing import Any, Callable, Optional, Protocol, Union

import numpy as np

from .adapter import MatchingAdapter, categorical_refiner
from .attention import (
    AttnLayerCfg,
    AttnState,
    AugmentedProcessor,
    CaptureProcessor,
    Refiner,
    SelfAttentionProcessor,
)
from .config import ModelConfig, as_manifest, read_manifest, resolve, write_manifest
from .errors import ConfigError, IoError, ShapeError, StateError
from .numeric import (
    ParamSet,
    Tensor,
    as_tensor,
    conv2d,
    load_params,
    matmul,
    no_grad,
    reshape,
    save_params,
    silu,
    transpose,
    upsample_nearest,
)
from .scenes import SceneImage, SegMap
from .segcost import CostCache, GuidanceSpec

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[np.ndarray, Tensor]
StepRecorder = Callable[[int, AttnState, Optional[Tensor]], None]


class Processor(Protocol):
    def __call__(self, cfg: AttnLayerCfg, q: Tensor, k: Tensor, v: Tensor, t: int) -> Tensor: ...


class EpsModel(Protocol):
    def __call__(self, z: Any, t: int, seg: SegMap) -> Any: ...


def _array(value: ArrayOrTensor) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


@dataclasses.dataclass(frozen=True, eq=False)
class NoiseSchedule:
    t_train: int
    t_sample: int
    betas: np.ndarray
    alphas_bar: np.ndarray

    @classmethod
    def linear(
        cls,
        t_train: int = 1000,
        t_sample: int = 20,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
    ) -> "NoiseSchedule":
        if t_sample < 1 or t_train % t_sample:
            raise ConfigError(f"t_sample={t_sample} must divide t_train={t_train}")
        betas = np.linspace(beta_start, beta_end, t_train)
        alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(t_train, t_sample, betas, alphas_bar)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "NoiseSchedule":
        return cls.linear(cfg.t_train, cfg.t_sample, cfg.beta_start, cfg.beta_end)

    def timesteps(self) -> list[int]:
        """Sampling timesteps in descending order, excluding the final 0."""
        stride = self.t_train // self.t_sample
        return list(range(self.t_train, 0, -stride))

    def pairs(self) -> list[tuple[int, int]]:
        """``(t, t_prev)`` for every sampling step."""
        ts = self.timesteps()
        return list(zip(ts, ts[1:] + [0]))

    def check(self, t: int) -> None:
        if not 0 <= t <= self.t_train:
            raise ConfigError(f"timestep {t} outside [0, {self.t_train}]")


def forward_noise(z0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    schedule.check(t)
    a = schedule.alphas_bar[t]
    return math.sqrt(a) * np.asarray(z0) + math.sqrt(1.0 - a) * np.asarray(noise)


def ddim_step(
    z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Deterministic DDIM transfer from ``t`` to ``t_prev`` (either direction)."""
    schedule.check(t)
    schedule.check(t_prev)
    a_t = schedule.alphas_bar[t]
    a_prev = schedule.alphas_bar[t_prev]
    x0 = (z_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps_hat


def ddim_sample(
    z_T: np.ndarray, seg: SegMap, net: EpsModel, schedule: NoiseSchedule
) -> np.ndarray:
    z = np.asarray(z_T, dtype=np.float64)
    for t, t_prev in schedule.pairs():
        z = ddim_step(z, _array(net(z, t, seg)), t, t_prev, schedule)
    return z


def ddim_invert(
    z0: np.ndarray, seg: SegMap, net: EpsModel, schedule: NoiseSchedule
) -> dict[int, np.ndarray]:
    """Run the sampler backwards; returns the latent at every visited timestep.

    Moving from ``t`` to ``t_next`` uses the prediction at ``(z_t, t_next)``.
    ``trajectory[schedule.t_train]`` is the inverted noise latent.
    """
    z = np.asarray(z0, dtype=np.float64)
    trajectory = {0: z}
    for t_next, t in reversed(schedule.pairs()):
        z = ddim_step(z, _array(net(z, t_next, seg)), t, t_next, schedule)
        trajectory[t_next] = z
    return trajectory


def guided_eps(base: np.ndarray, refined: np.ndarray, scale: float) -> np.ndarray:
    """Matching-cost guidance ``base + (1 + s) * (refined - base)``.

    ``s = -1`` returns ``base`` and ``s = 0`` returns ``refined`` unchanged.
    """
    if scale == -1.0:
        return base
    if scale == 0.0:
        return refined
    return base + (1.0 + scale) * (refined - base)


def encode(image: SceneImage) -> np.ndarray:
    """``[H, W, 3]`` in [0, 1] -> ``[3, H, W]`` in [-1, 1]."""
    return np.transpose(image.rgb, (2, 0, 1)) * 2.0 - 1.0


def decode(z: np.ndarray) -> SceneImage:
    return SceneImage(np.clip((np.transpose(z, (1, 2, 0)) + 1.0) / 2.0, 0.0, 1.0))


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb[None, :]


def one_hot(seg: SegMap, size: int, num_classes: int) -> np.ndarray:
    if seg.num_classes != num_classes:
        raise ConfigError(f"label map has {seg.num_classes} classes, model expects {num_classes}")
    labels = seg.labels if seg.shape == (size, size) else seg.resized(size, size).labels
    return (labels[None] == np.arange(num_classes)[:, None, None]).astype(np.float64)


def config_path(checkpoint: Union[str, Path]) -> Path:
    """Model config manifest stored beside a denoiser checkpoint."""
    return Path(checkpoint).with_suffix(".cfg")


def _step_hook(recorder: Optional[StepRecorder], step: int) -> Optional[Callable[[AttnState, Optional[Tensor]], None]]:
    if recorder is None:
        return None

    def hook(state: AttnState, refined: Optional[Tensor]) -> None:
        recorder(step, state, refined)

    return hook


class DenoiserNet:
    """Small segmentation-conditioned UNet with ten attention sites.

    Layout (``S`` = image size, widths ``c1, c2``): ``conv_in`` and a residual
    block at ``S``; stride-2 ``down0`` to ``S/2`` where the structure branch
    adds label-map features; stride-2 ``down1`` to ``S/4``; sites L0..L4
    (residual block + attention) then L5..L9 with skip additions; two
    nearest-upsample stages with skips; zero-initialised ``conv_out``.
    """

    def __init__(self, params: ParamSet, cfg: ModelConfig) -> None:
        self.params = params
        self.cfg = cfg
        augmented = set(cfg.augmented_set)
        adapted = set(cfg.adapted_set)
        size = cfg.attn_size
        self.layer_cfgs = [
            AttnLayerCfg(
                layer=layer,
                d=cfg.channels[1],
                m=cfg.heads,
                h=size,
                w=size,
                augmented=layer in augmented,
                adapted=layer in adapted,
            )
            for layer in range(10)
        ]

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "DenoiserNet":
        rng = np.random.default_rng(seed)
        params = ParamSet()
        c1, c2 = cfg.channels
        e = cfg.time_dim

        def conv(name: str, c_in: int, c_out: int, zero: bool = False) -> None:
            std = 0.0 if zero else 1.0 / math.sqrt(9 * c_in)
            params.add(f"unet.{name}.weight", rng.normal(0.0, 1.0, (c_out, c_in, 3, 3)) * std)
            params.add(f"unet.{name}.bias", np.zeros(c_out))

        def linear(name: str, d_in: int, d_out: int) -> None:
            params.add(f"unet.{name}.weight", rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out)))
            params.add(f"unet.{name}.bias", np.zeros(d_out))

        def res(name: str, c: int) -> None:
            conv(f"{name}.conv1", c, c)
            conv(f"{name}.conv2", c, c)
            linear(f"{name}.time", e, c)

        linear("time.fc1", e, e)
        linear("time.fc2", e, e)
        conv("conv_in", 3, c1)
        res("res_in", c1)
        conv("down0", c1, c1)
        conv("structure.conv1", cfg.num_classes, c1)
        conv("structure.conv2", c1, c1)
        conv("down1", c1, c2)
        for layer in range(10):
            res(f"site{layer}.res", c2)
            for proj in ("q", "k", "v"):
                params.add(
                    f"unet.attn{layer}.{proj}.weight",
                    rng.normal(0.0, 1.0 / math.sqrt(c2), (c2, c2)),
                )
            linear(f"attn{layer}.o", c2, c2)
        conv("up1", c2, c1)
        conv("up0", c1, c1)
        conv("conv_out", c1, 3, zero=True)
        logger.debug("Initialised denoiser with %d tensors", len(params))
        return cls(params, cfg)

    def save(self, path: Union[str, Path]) -> Path:
        """Write the weights and, beside them, the model config manifest."""
        path = Path(path)
        save_params(self.params.subset("unet."), path)
        write_manifest(config_path(path), as_manifest(self.cfg))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DenoiserNet":
        path = Path(path)
        cfg = resolve(ModelConfig, read_manifest(config_path(path)))
        loaded = load_params(path)
        reference = cls.create(cfg).params
        expected = set(reference.paths())
        present = set(loaded.paths("unet."))
        if present != expected:
            missing = sorted(expected - present)[:3]
            raise IoError(path, f"checkpoint does not match its model config (missing {missing})")
        wrong = [p for p in sorted(expected) if loaded[p].shape != reference[p].shape]
        if wrong:
            raise IoError(path, f"checkpoint shapes do not match its model config ({wrong[0]})")
        loaded.unfreeze("unet.")
        return cls(loaded.subset("unet."), cfg)

    def overlay(self, params: ParamSet) -> int:
        """Copy any ``unet.*`` values from ``params`` over this model's; returns the count."""
        count = 0
        for path in params.paths("unet."):
            if path not in self.params or self.params[path].shape != params[path].shape:
                raise StateError(f"cannot overlay {path}: not part of this model")
            self.params[path].data = params[path].data.copy()
            count += 1
        return count

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        p = self.params
        return conv2d(x, p[f"unet.{name}.weight"], p[f"unet.{name}.bias"], stride=stride, padding=1)

    def _linear(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        return matmul(x, p[f"unet.{name}.weight"]) + p[f"unet.{name}.bias"]

    def _res(self, name: str, x: Tensor, emb: Tensor) -> Tensor:
        h = self._conv(f"{name}.conv1", silu(x))
        h = h + reshape(self._linear(f"{name}.time", emb), (-1, 1, 1))
        h = self._conv(f"{name}.conv2", silu(h))
        return x + h

    def _attention(self, layer: int, x: Tensor, t: int, processor: Processor) -> Tensor:
        c, hh, ww = x.shape
        tokens = transpose(reshape(x, (c, hh * ww)), (1, 0))
        p = self.params
        q = matmul(tokens, p[f"unet.attn{layer}.q.weight"])
        k = matmul(tokens, p[f"unet.attn{layer}.k.weight"])
        v = matmul(tokens, p[f"unet.attn{layer}.v.weight"])
        out = self._linear(f"attn{layer}.o", processor(self.layer_cfgs[layer], q, k, v, t))
        return x + reshape(transpose(out, (1, 0)), (c, hh, ww))

    def _site(self, layer: int, x: Tensor, emb: Tensor, t: int, processor: Processor) -> Tensor:
        return self._attention(layer, self._res(f"site{layer}.res", x, emb), t, processor)

    def __call__(
        self,
        z: ArrayOrTensor,
        t: int,
        seg: SegMap,
        processor: Optional[Processor] = None,
    ) -> Tensor:
        """Predict the noise in ``z[3, S, S]`` at timestep ``t``."""
        size = self.cfg.image_size
        x = as_tensor(z)
        if x.shape != (3, size, size):
            raise ShapeError(f"latent must be (3, {size}, {size}), got {x.shape}")
        processor = processor or SelfAttentionProcessor()
        emb = as_tensor(timestep_embedding(t, self.cfg.time_dim))
        emb = self._linear("time.fc2", silu(self._linear("time.fc1", emb)))
        h0 = self._res("res_in", self._conv("conv_in", x), emb)
        structure = as_tensor(one_hot(seg, size, self.cfg.num_classes))
        structure = self._conv("structure.conv2", silu(self._conv("structure.conv1", structure, stride=2)))
        h1 = self._conv("down0", h0, stride=2) + structure
        h = self._conv("down1", h1, stride=2)
        skips = [h]
        for layer in range(5):
            h = self._site(layer, h, emb, t, processor)
            skips.append(h)
        skips.pop()
        skip_gain = 1.0 / math.sqrt(2.0)
        for layer in range(5, 10):
            h = (h + skips.pop()) * skip_gain
            h = self._site(layer, h, emb, t, processor)
        h = (self._conv("up1", upsample_nearest(h)) + h1) * skip_gain
        h = (self._conv("up0", upsample_nearest(h)) + h0) * skip_gain
        return self._conv("conv_out", silu(h))

    def eps(self, z: np.ndarray, t: int, seg: SegMap, processor: Optional[Processor] = None) -> np.ndarray:
        with no_grad():
            return self(z, t, seg, processor).data


class ExemplarPipeline:
    """Dual-branch sampler with optional adapter refinement and guidance."""

    def __init__(
        self,
        net: DenoiserNet,
        adapter: Optional[MatchingAdapter] = None,
        schedule: Optional[NoiseSchedule] = None,
    ) -> None:
        self.net = net
        self.adapter = adapter
        self.schedule = schedule or NoiseSchedule.from_config(net.cfg)
        self.costs = CostCache()

    @classmethod
    def from_checkpoints(
        cls, stage1: Union[str, Path], stage2: Optional[Union[str, Path]] = None
    ) -> "ExemplarPipeline":
        """Load a denoiser and, optionally, a stage-2 checkpoint of either variant.

        Adapter checkpoints become the pipeline's adapter; fine-tuned attention
        weights are copied over the denoiser's.
        """
        net = DenoiserNet.load(stage1)
        if stage2 is None:
            return cls(net)
        params = load_params(stage2)
        if params.paths("adapter."):
            adapter = MatchingAdapter.from_params(params, net.cfg.heads, net.cfg.attn_size)
            missing = sorted(set(net.cfg.adapted_set) - set(adapter.layers))
            if missing:
                raise IoError(Path(stage2), f"no adapter weights for layers {missing}")
            return cls(net, adapter)
        if not params.paths("unet."):
            raise IoError(Path(stage2), "checkpoint holds neither adapter nor denoiser weights")
        count = net.overlay(params)
        logger.info("Overlaid %d fine-tuned tensors from %s", count, stage2)
        return cls(net)

    @property
    def attn_size(self) -> int:
        return self.net.cfg.attn_size

    def refiner(self, mode: str) -> Optional[Refiner]:
        if mode == "adapter":
            if self.adapter is None:
                raise StateError("adapter mode requested but no adapter is loaded")
            return self.adapter.refine_logits
        if mode == "categorical":
            return categorical_refiner(self.attn_size)
        return None

    def invert(self, image: SceneImage, seg: SegMap) -> dict[int, np.ndarray]:
        """DDIM-invert an exemplar; latents for every sampling timestep."""
        return ddim_invert(encode(image), seg, self.net.eps, self.schedule)

    def exemplar_latents(
        self, image: SceneImage, seg: SegMap, how: str, seed: int
    ) -> dict[int, np.ndarray]:
        if how == "invert":
            return self.invert(image, seg)
        if how == "noise":
            z0 = encode(image)
            noise = np.random.default_rng([seed, 1]).standard_normal(z0.shape)
            return {t: forward_noise(z0, t, noise, self.schedule) for t in self.schedule.timesteps()}
        raise ConfigError(f"unknown exemplar latent source {how!r}")

    def layer_costs(
        self, seg_y: SegMap, seg_x: SegMap, guidance: Optional[GuidanceSpec]
    ) -> dict[int, np.ndarray]:
        size = self.attn_size
        cost = self.costs.get(seg_y, seg_x, (size, size), guidance).flat()
        return {cfg.layer: cost for cfg in self.net.layer_cfgs if cfg.adapted}

    def sample(
        self,
        seg_y: SegMap,
        exemplar: Optional[tuple[SceneImage, SegMap]] = None,
        mode: str = "adapter",
        guidance: Optional[GuidanceSpec] = None,
        scale: float = 7.5,
        seed: int = 0,
        exemplar_latent: str = "invert",
        recorder: Optional[StepRecorder] = None,
    ) -> np.ndarray:
        """Run every sampling step and return the final latent."""
        size = self.net.cfg.image_size
        z = np.random.default_rng(seed).standard_normal((3, size, size))
        if mode == "none":
            return ddim_sample(z, seg_y, self.net.eps, self.schedule)
        if exemplar is None:
            raise ConfigError(f"mode {mode!r} needs an exemplar")

        refiner = self.refiner(mode)
        image_x, seg_x = exemplar
        latents_x = self.exemplar_latents(image_x, seg_x, exemplar_latent, seed)
        costs = self.layer_costs(seg_y, seg_x, guidance) if refiner is not None else {}
        use_refined = refiner is not None and scale != -1.0
        for step, (t, t_prev) in enumerate(self.schedule.pairs()):
            capture = CaptureProcessor()
            self.net.eps(latents_x[t], t, seg_x, capture)
            hook = _step_hook(recorder, step)
            if mode == "replace":
                primary = AugmentedProcessor(capture.bank, replace=True, recorder=hook)
                eps = self.net.eps(z, t, seg_y, primary)
            elif use_refined:
                base = self.net.eps(z, t, seg_y, AugmentedProcessor(capture.bank))
                primary = AugmentedProcessor(capture.bank, refiner, costs, recorder=hook)
                eps = guided_eps(base, self.net.eps(z, t, seg_y, primary), scale)
            else:
                primary = AugmentedProcessor(capture.bank, recorder=hook)
                eps = self.net.eps(z, t, seg_y, primary)
            z = ddim_step(z, eps, t, t_prev, self.schedule)
            logger.debug("step %d t=%d max|z|=%.3f", step, t, float(np.abs(z).max()))
        return z

    def generate(self, seg_y: SegMap, exemplar: Optional[tuple[SceneImage, SegMap]] = None, **kwargs: Any) -> SceneImage:
        return decode(self.sample(seg_y, exemplar, **kwargs))

    def query_image(self, seg_y: SegMap, seed: int = 0) -> SceneImage:
        """Structure-only sample used to query an exemplar pool."""
        return self.generate(seg_y, None, mode="none", seed=seed)
