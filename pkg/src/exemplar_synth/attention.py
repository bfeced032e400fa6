"""Multi-head self-attention and exemplar-augmented self-attention.

Token tensors are ``[n, d]`` with ``n = h*w`` in row-major pixel order. Heads
are split to ``[m, n, d/m]`` and logits are scaled by ``sqrt(d/m)``.

Augmented attention concatenates exemplar keys and values after the target's
own, always in (target, exemplar) order. The target-to-exemplar logit block
may be replaced by refined logits before the joint softmax.

The denoiser calls an attention *processor* at each of its attention sites;
the processors here decide what a site computes (plain self-attention,
key/value capture, or augmented attention with optional refinement).
"""

import dataclasses
import math
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .numeric import Tensor, concat, matmul, reshape, softmax_lastdim, transpose

# (layer, implicit logits [m, n, n], flat categorical cost [n, n]) -> refined logits
Refiner = Callable[[int, Tensor, np.ndarray], Tensor]
Recorder = Callable[["AttnState", Optional[Tensor]], None]


@dataclasses.dataclass(frozen=True)
class AttnLayerCfg:
    layer: int
    d: int
    m: int
    h: int
    w: int
    augmented: bool = True
    adapted: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.layer <= 9:
            raise ConfigError(f"attention layer must lie in [0, 9], got {self.layer}")
        if self.m < 1 or self.d % self.m:
            raise ConfigError(f"channel dim {self.d} not divisible by {self.m} heads")
        if self.adapted and not self.augmented:
            raise ConfigError(f"layer {self.layer}: adapted layers must be augmented")
        if self.adapted and self.layer == 0:
            raise ConfigError("layer 0 cannot carry an adapter")

    @property
    def head_dim(self) -> int:
        return self.d // self.m

    @property
    def tokens(self) -> int:
        return self.h * self.w

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


@dataclasses.dataclass(eq=False)
class AttnState:
    """Per-head projections and split logits of one augmented site."""

    cfg: AttnLayerCfg
    q_y: Tensor
    k_y: Tensor
    v_y: Tensor
    k_x: Tensor
    v_x: Tensor
    a_yy: Tensor
    a_yx: Tensor
    t: int = 0


def split_heads(x: Tensor, m: int) -> Tensor:
    """``[n, d] -> [m, n, d/m]``."""
    n, d = x.shape
    if d % m:
        raise ConfigError(f"channel dim {d} not divisible by {m} heads")
    return transpose(reshape(x, (n, m, d // m)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """``[m, n, d/m] -> [n, d]``."""
    m, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, m * dh))


def _check_tokens(cfg: AttnLayerCfg, **tensors: Tensor) -> None:
    for name, t in tensors.items():
        if t.shape != (cfg.tokens, cfg.d):
            raise ShapeError(
                f"{name} has shape {t.shape}, layer {cfg.layer} expects {(cfg.tokens, cfg.d)}"
            )


def logits(q: Tensor, k: Tensor, cfg: AttnLayerCfg) -> Tensor:
    """Scaled per-head logits ``Q K^T / sqrt(d/m)`` for split heads."""
    return matmul(q, transpose(k, (0, 2, 1))) * cfg.scale


def self_attention(q: Tensor, k: Tensor, v: Tensor, cfg: AttnLayerCfg) -> Tensor:
    _check_tokens(cfg, Q=q, K=k, V=v)
    qh, kh, vh = (split_heads(t, cfg.m) for t in (q, k, v))
    weights = softmax_lastdim(logits(qh, kh, cfg))
    return merge_heads(matmul(weights, vh))


def build_state(
    q_y: Tensor,
    k_y: Tensor,
    v_y: Tensor,
    k_x: Tensor,
    v_x: Tensor,
    cfg: AttnLayerCfg,
    t: int = 0,
) -> AttnState:
    _check_tokens(cfg, Q_Y=q_y, K_Y=k_y, V_Y=v_y, K_X=k_x, V_X=v_x)
    qh = split_heads(q_y, cfg.m)
    kyh, vyh = split_heads(k_y, cfg.m), split_heads(v_y, cfg.m)
    kxh, vxh = split_heads(k_x, cfg.m), split_heads(v_x, cfg.m)
    return AttnState(
        cfg=cfg,
        q_y=qh,
        k_y=kyh,
        v_y=vyh,
        k_x=kxh,
        v_x=vxh,
        a_yy=logits(qh, kyh, cfg),
        a_yx=logits(qh, kxh, cfg),
        t=t,
    )


def split_logits(state: AttnState) -> tuple[Tensor, Tensor]:
    return state.a_yy, state.a_yx


def attention_weights(state: AttnState, refined: Optional[Tensor] = None) -> Tensor:
    """Softmax over the joint ``2n`` key axis, ``[m, n, 2n]``."""
    a_yx = state.a_yx
    if refined is not None:
        if refined.shape != a_yx.shape:
            raise ShapeError(f"refined logits {refined.shape} do not match {a_yx.shape}")
        a_yx = refined
    return softmax_lastdim(concat([state.a_yy, a_yx], axis=-1))


def augmented_attention(state: AttnState, refined: Optional[Tensor] = None) -> Tensor:
    weights = attention_weights(state, refined)
    values = concat([state.v_y, state.v_x], axis=1)
    return merge_heads(matmul(weights, values))


def replaced_attention(state: AttnState) -> Tensor:
    """Target queries read exemplar keys and values only."""
    weights = softmax_lastdim(state.a_yx)
    return merge_heads(matmul(weights, state.v_x))


class SelfAttentionProcessor:
    """Plain self-attention at every site."""

    def __call__(self, cfg: AttnLayerCfg, q: Tensor, k: Tensor, v: Tensor, t: int) -> Tensor:
        return self_attention(q, k, v, cfg)


class CaptureProcessor(SelfAttentionProcessor):
    """Self-attention that also records each site's keys and values."""

    def __init__(self) -> None:
        self.bank: dict[int, tuple[Tensor, Tensor]] = {}

    def __call__(self, cfg: AttnLayerCfg, q: Tensor, k: Tensor, v: Tensor, t: int) -> Tensor:
        self.bank[cfg.layer] = (k, v)
        return super().__call__(cfg, q, k, v, t)


class AugmentedProcessor(SelfAttentionProcessor):
    """Augmented attention fed by a key/value bank from the exemplar branch.

    Sites that are not augmented, or have no captured keys, fall back to
    self-attention. On adapted sites a ``refiner`` (when given) rewrites the
    target-to-exemplar logits using the flat categorical cost for that site.
    """

    def __init__(
        self,
        bank: dict[int, tuple[Tensor, Tensor]],
        refiner: Optional[Refiner] = None,
        costs: Optional[dict[int, np.ndarray]] = None,
        replace: bool = False,
        recorder: Optional[Recorder] = None,
    ) -> None:
        self.bank = bank
        self.refiner = refiner
        self.costs = costs or {}
        self.replace = replace
        self.recorder = recorder

    def __call__(self, cfg: AttnLayerCfg, q: Tensor, k: Tensor, v: Tensor, t: int) -> Tensor:
        if not cfg.augmented or cfg.layer not in self.bank:
            return super().__call__(cfg, q, k, v, t)
        k_x, v_x = self.bank[cfg.layer]
        state = build_state(q, k, v, k_x, v_x, cfg, t)
        if self.replace:
            if self.recorder is not None:
                self.recorder(state, None)
            return replaced_attention(state)
        refined = None
        if self.refiner is not None and cfg.adapted:
            if cfg.layer not in self.costs:
                raise ShapeError(f"no categorical cost prepared for layer {cfg.layer}")
            refined = self.refiner(cfg.layer, state.a_yx, self.costs[cfg.layer])
        if self.recorder is not None:
            self.recorder(state, refined)
        return augmented_attention(state, refined)
