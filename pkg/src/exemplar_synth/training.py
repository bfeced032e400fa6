"""Stage-wise training.

Stage 1 fits the segmentation-conditioned denoiser with the usual noise
prediction loss. Stage 2 freezes every ``unet.*`` weight and trains only the
matching adapter (or, in the ``finetune-attention`` variant, only the
attention projections) on exemplar/target pairs cut from the same anchor.
"""

import csv
import dataclasses
import logging
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from tqdm import tqdm

from .adapter import MatchingAdapter
from .attention import AugmentedProcessor, CaptureProcessor, SelfAttentionProcessor
from .config import AdapterConfig, ModelConfig, SceneConfig, TrainConfig
from .diffusion import DenoiserNet, ExemplarPipeline, NoiseSchedule, encode, forward_noise
from .errors import ConfigError, IoError, StateError
from .numeric import ParamSet, Tensor, backward, mse_loss, save_params, sgd_adamw_step
from .scenes import (
    SceneImage,
    SceneSample,
    SegMap,
    apply_augmentation,
    augment_pair,
    random_augmentation,
    read_dataset,
)

logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "loss", "lr", "wall_ms")

StepLoss = Callable[[np.random.Generator, int], Tensor]
SaveFn = Callable[[Path], object]
AfterStep = Callable[[int], None]


@dataclasses.dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    losses: list[float]
    frozen_digest_before: str = ""
    frozen_digest_after: str = ""


class CsvLog:
    """Per-step metrics written as ``step,loss,lr,wall_ms``."""

    def __init__(self, path: Path) -> None:
        self.path = path
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._file = path.open("w", newline="", encoding="utf-8")
        except OSError as e:
            raise IoError(path, f"cannot open log: {e.strerror or e}") from e
        self._writer = csv.writer(self._file)
        self._writer.writerow(LOG_FIELDS)

    def write(self, step: int, loss: float, lr: float, wall_ms: float) -> None:
        self._writer.writerow([step, f"{loss:.10g}", f"{lr:.6g}", f"{wall_ms:.3f}"])

    def close(self) -> None:
        self._file.close()


def _load_samples(cfg: TrainConfig, samples: Optional[list[SceneSample]]) -> list[SceneSample]:
    if samples is None:
        samples = read_dataset(cfg.dataset_dir)
    if not samples:
        raise ConfigError(f"dataset {cfg.dataset_dir} is empty")
    return samples


def _check_resolution(cfg: TrainConfig, model_cfg: ModelConfig) -> None:
    if cfg.resolution != model_cfg.image_size:
        raise ConfigError(
            f"training resolution {cfg.resolution} differs from model image size {model_cfg.image_size}"
        )


def denoising_loss(
    net: DenoiserNet,
    image: SceneImage,
    seg: SegMap,
    t: int,
    noise: np.ndarray,
    schedule: NoiseSchedule,
) -> Tensor:
    z_t = forward_noise(encode(image), t, noise, schedule)
    return mse_loss(net(z_t, t, seg, SelfAttentionProcessor()), noise)


def pair_loss(
    net: DenoiserNet,
    pipeline: ExemplarPipeline,
    exemplar: tuple[SceneImage, SegMap],
    target: tuple[SceneImage, SegMap],
    t: int,
    noise: np.ndarray,
    noise_x: np.ndarray,
    adapter: Optional[MatchingAdapter],
) -> Tensor:
    """Structure-branch loss with keys and values from the forward-noised exemplar.

    Without an adapter the structure branch uses baseline augmented attention.

    The exemplar pass runs through ``net.eps`` and is not differentiated: its
    captured keys and values enter the loss as constants. Gradients reach the
    adapter, and in the ``finetune-attention`` variant only the target-side
    use of the attention projections (the target's own queries, keys and
    values plus the queries that read the exemplar bank).
    """
    schedule = pipeline.schedule
    image_x, seg_x = exemplar
    image_y, seg_y = target
    capture = CaptureProcessor()
    net.eps(forward_noise(encode(image_x), t, noise_x, schedule), t, seg_x, capture)
    if adapter is not None:
        costs = pipeline.layer_costs(seg_y, seg_x, None)
        processor = AugmentedProcessor(capture.bank, adapter.refine_logits, costs)
    else:
        processor = AugmentedProcessor(capture.bank)
    z_t = forward_noise(encode(image_y), t, noise, schedule)
    return mse_loss(net(z_t, t, seg_y, processor), noise)


def _run_loop(
    cfg: TrainConfig,
    trainable: ParamSet,
    step_loss: StepLoss,
    checkpoint: Path,
    save: SaveFn,
    progress: bool,
    after_step: Optional[AfterStep] = None,
) -> tuple[list[float], Path]:
    log_path = Path(cfg.checkpoint_dir) / f"stage{cfg.stage}_log.csv"
    log = CsvLog(log_path)
    losses: list[float] = []
    rng = np.random.default_rng(cfg.seed)
    try:
        for step in tqdm(range(1, cfg.steps + 1), desc=f"stage {cfg.stage}", disable=not progress):
            started = time.perf_counter()
            loss = step_loss(rng, step)
            backward(loss)
            sgd_adamw_step(trainable, cfg.lr, weight_decay=cfg.weight_decay)
            trainable.zero_grad()
            if after_step is not None:
                after_step(step)
            value = loss.item()
            losses.append(value)
            log.write(step, value, cfg.lr, (time.perf_counter() - started) * 1000.0)
            logger.debug("stage %d step %d loss %.6f", cfg.stage, step, value)
            if step % cfg.eval_every == 0:
                recent = losses[-cfg.eval_every :]
                logger.info(
                    "stage %d step %d/%d mean loss %.6f", cfg.stage, step, cfg.steps, float(np.mean(recent))
                )
                save(checkpoint)
    finally:
        log.close()
    save(checkpoint)
    return losses, log_path


def train_stage1(
    cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    scene_cfg: Optional[SceneConfig] = None,
    samples: Optional[list[SceneSample]] = None,
    progress: bool = False,
) -> TrainResult:
    """Fit the denoiser and structure branch on single augmented views."""
    model_cfg = model_cfg or ModelConfig()
    scene_cfg = scene_cfg or SceneConfig()
    _check_resolution(cfg, model_cfg)
    samples = _load_samples(cfg, samples)
    net = DenoiserNet.create(model_cfg, seed=cfg.seed)
    schedule = NoiseSchedule.from_config(model_cfg)
    size = model_cfg.image_size
    batch = cfg.effective_batch_size

    def step_loss(rng: np.random.Generator, step: int) -> Tensor:
        total: Optional[Tensor] = None
        for _ in range(batch):
            sample = samples[int(rng.integers(len(samples)))]
            aug = random_augmentation(rng, sample.seg.height, sample.seg.width, scene_cfg)
            image, seg = apply_augmentation(sample.image, sample.seg, aug, size, size)
            t = int(rng.integers(1, schedule.t_train + 1))
            noise = rng.standard_normal((3, size, size))
            loss = denoising_loss(net, image, seg, t, noise, schedule) * (1.0 / batch)
            total = loss if total is None else total + loss
        assert total is not None
        return total

    checkpoint = Path(cfg.checkpoint_dir) / "stage1.amad"
    logger.info("Stage 1: %d samples, %d steps, batch %d", len(samples), cfg.steps, batch)
    losses, log_path = _run_loop(cfg, net.params, step_loss, checkpoint, net.save, progress)
    logger.info("Saved stage-1 checkpoint %s", checkpoint)
    return TrainResult(checkpoint, log_path, losses)


def train_stage2(
    cfg: TrainConfig,
    adapter_cfg: Optional[AdapterConfig] = None,
    scene_cfg: Optional[SceneConfig] = None,
    samples: Optional[list[SceneSample]] = None,
    progress: bool = False,
) -> TrainResult:
    """Train the adapter (or the attention projections) with the denoiser frozen."""
    if not cfg.stage1_checkpoint:
        raise ConfigError("stage 2 requires stage1_checkpoint")
    scene_cfg = scene_cfg or SceneConfig()
    net = DenoiserNet.load(cfg.stage1_checkpoint)
    _check_resolution(cfg, net.cfg)
    samples = _load_samples(cfg, samples)
    size = net.cfg.image_size
    scene_cfg = dataclasses.replace(scene_cfg, resolution=size)

    net.params.freeze("unet.")
    adapter: Optional[MatchingAdapter] = None
    if cfg.variant == "adapter":
        adapter = MatchingAdapter.create(
            net.cfg.adapted_set, net.cfg.heads, net.cfg.attn_size, adapter_cfg, seed=cfg.seed
        )
        trainable = adapter.params
    else:
        net.params.unfreeze("unet.attn")
        trainable = net.params.subset("unet.attn")
    pipeline = ExemplarPipeline(net, adapter)
    schedule = pipeline.schedule
    frozen_before = net.params.digest(frozen_only=True)

    def step_loss(rng: np.random.Generator, step: int) -> Tensor:
        total: Optional[Tensor] = None
        batch = cfg.effective_batch_size
        for _ in range(batch):
            sample = samples[int(rng.integers(len(samples)))]
            pair = augment_pair(
                sample.image, sample.seg, seed=int(rng.integers(2**31)), cfg=scene_cfg, anchor_id=sample.sample_id
            )
            t = int(rng.integers(1, schedule.t_train + 1))
            noise = rng.standard_normal((3, size, size))
            noise_x = rng.standard_normal((3, size, size))
            loss = pair_loss(net, pipeline, pair.exemplar, pair.target, t, noise, noise_x, adapter)
            loss = loss * (1.0 / batch)
            total = loss if total is None else total + loss
        assert total is not None
        return total

    def check_frozen(step: int) -> None:
        if net.params.digest(frozen_only=True) != frozen_before:
            raise StateError(f"frozen denoiser weights changed at step {step}")

    def save(path: Path) -> None:
        save_params(trainable, path)

    checkpoint = Path(cfg.checkpoint_dir) / "stage2.amad"
    logger.info(
        "Stage 2 (%s): %d samples, %d steps, %d trainable tensors",
        cfg.variant,
        len(samples),
        cfg.steps,
        len(trainable),
    )
    losses, log_path = _run_loop(cfg, trainable, step_loss, checkpoint, save, progress, check_frozen)
    frozen_after = net.params.digest(frozen_only=True)
    if frozen_after != frozen_before:
        raise StateError("frozen denoiser weights changed during stage 2")
    logger.info("Saved stage-2 checkpoint %s", checkpoint)
    return TrainResult(checkpoint, log_path, losses, frozen_before, frozen_after)
