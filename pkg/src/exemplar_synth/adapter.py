"""Matching adapter: aggregates implicit and categorical costs with 4D convolutions.

The implicit logits ``A`` (one channel per head, ``[m, h, w, h, w]``) and the
categorical cost ``C`` are stacked into ``R`` with ``m + 1`` channels. The
aggregation network ``phi`` is two center-pivot 4D convolution stages with a
SiLU between them; its output is added back to ``A``. The second stage is
zero-initialised so an untrained adapter returns ``A`` unchanged.

A center-pivot 4D convolution is the sum of a 3x3 convolution over the
exemplar plane ``(k, l)`` at every target pixel and a 3x3 convolution over
the target plane ``(i, j)`` at every exemplar pixel, i.e. a dense 4D kernel
whose support is the cross through its center.
"""

import dataclasses
import logging
import re
from typing import Optional, Union

import numpy as np

from .attention import Refiner
from .config import AdapterConfig
from .errors import ConfigError, ShapeError, StateError
from .numeric import ParamSet, Tensor, as_tensor, concat, conv2d, reshape, silu, transpose
from .segcost import CatCost

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9
_PATH = re.compile(r"^adapter\.L(\d+)\.")

CostLike = Union[CatCost, np.ndarray, Tensor]


@dataclasses.dataclass(eq=False)
class CostBlock:
    a: Tensor
    c: Tensor
    r: Tensor
    o: Tensor


def _cost_values(c: CostLike) -> Tensor:
    if isinstance(c, CatCost):
        return as_tensor(c.values)
    return as_tensor(c)


def center_pivot_conv4d(
    x: Tensor, k_kl: Tensor, k_ij: Tensor, bias: Optional[Tensor] = None
) -> Tensor:
    """Separable 4D convolution of ``x[..., c, h, w, h', w']`` (same padding).

    ``k_kl`` and ``k_ij`` are ``[c_out, c, 3, 3]``.
    """
    if x.ndim < 5:
        raise ShapeError(f"4D convolution needs [..., c, h, w, h', w'], got {x.shape}")
    lead = tuple(range(x.ndim - 5))
    ch, ti, tj, xk, xl = (len(lead) + n for n in range(5))
    pad = k_kl.shape[-1] // 2
    # conv over the exemplar plane at every target pixel: [..., h, w, c, h', w']
    out_kl = conv2d(transpose(x, lead + (ti, tj, ch, xk, xl)), k_kl, padding=pad)
    out_kl = transpose(out_kl, lead + (tj, ch, ti, xk, xl))
    # conv over the target plane at every exemplar pixel: [..., h', w', c, h, w]
    out_ij = conv2d(transpose(x, lead + (xk, xl, ch, ti, tj)), k_ij, padding=pad)
    out_ij = transpose(out_ij, lead + (tj, xk, xl, ch, ti))
    out = out_kl + out_ij
    if bias is not None:
        out = out + reshape(bias, (bias.shape[0], 1, 1, 1, 1))
    return out


def build_R(a: Tensor, c: CostLike) -> Tensor:
    """Stack heads of ``a`` with the categorical channel: ``[m+1, h, w, h, w]``."""
    cv = _cost_values(c)
    if a.ndim != 5 or cv.shape != a.shape[1:]:
        raise ShapeError(f"cost {cv.shape} does not match implicit logits {a.shape}")
    return concat([a, reshape(cv, (1,) + cv.shape)], axis=0)


def layer_prefix(layer: int) -> str:
    return f"adapter.L{layer}."


def init_layer_params(
    params: ParamSet,
    layer: int,
    heads: int,
    cfg: AdapterConfig,
    rng: np.random.Generator,
) -> None:
    """Add one layer's weights; the output stage starts at zero."""
    c_in, c_out = (heads + 1, heads) if cfg.head_mixing else (2, 1)
    prefix = layer_prefix(layer)
    std = 1.0 / np.sqrt(2 * 9 * c_in)
    params.add(prefix + "stage1.kl.weight", rng.normal(0.0, std, (cfg.c_mid, c_in, 3, 3)))
    params.add(prefix + "stage1.ij.weight", rng.normal(0.0, std, (cfg.c_mid, c_in, 3, 3)))
    params.add(prefix + "stage1.bias", np.zeros(cfg.c_mid))
    params.add(prefix + "stage2.kl.weight", np.zeros((c_out, cfg.c_mid, 3, 3)))
    params.add(prefix + "stage2.ij.weight", np.zeros((c_out, cfg.c_mid, 3, 3)))
    params.add(prefix + "stage2.bias", np.zeros(c_out))


def phi_forward(r: Tensor, params: ParamSet, layer: int, head_mixing: bool = True) -> Tensor:
    """Aggregate ``R[m+1, h, w, h, w]`` into ``[m, h, w, h, w]``.

    Without head mixing every head is refined on its own from ``[A_head, C]``
    with weights shared across heads.
    """
    prefix = layer_prefix(layer)
    if prefix + "stage1.kl.weight" not in params:
        raise StateError(f"no adapter weights for layer {layer}")
    m = r.shape[0] - 1
    if head_mixing:
        x = r
    else:
        rest = r.shape[1:]
        heads = reshape(r[:m], (m, 1) + rest)
        cat = reshape(concat([r[m:]] * m, axis=0), (m, 1) + rest)
        x = concat([heads, cat], axis=1)
    expected = params[prefix + "stage1.kl.weight"].shape[1]
    if x.shape[-5] != expected:
        raise ShapeError(f"layer {layer} adapter expects {expected} input channels, got {x.shape[-5]}")
    hidden = center_pivot_conv4d(
        x,
        params[prefix + "stage1.kl.weight"],
        params[prefix + "stage1.ij.weight"],
        params[prefix + "stage1.bias"],
    )
    out = center_pivot_conv4d(
        silu(hidden),
        params[prefix + "stage2.kl.weight"],
        params[prefix + "stage2.ij.weight"],
        params[prefix + "stage2.bias"],
    )
    if not head_mixing:
        out = reshape(out, (m,) + out.shape[2:])
    return out


def refine_block(
    a: Tensor, c: CostLike, params: ParamSet, layer: int, head_mixing: bool = True
) -> CostBlock:
    r = build_R(a, c)
    o = phi_forward(r, params, layer, head_mixing) + a
    return CostBlock(a=a, c=_cost_values(c), r=r, o=o)


def refine(a: Tensor, c: CostLike, params: ParamSet, layer: int, head_mixing: bool = True) -> Tensor:
    """Residual refined cost ``O = phi(R) + A``."""
    return refine_block(a, c, params, layer, head_mixing).o


def refine_categorical_only(a: Tensor, c: CostLike) -> Tensor:
    """Hard-mask logits where the categories disagree.

    Rows with no matching exemplar pixel are left as they are.
    """
    cv = _cost_values(c).data
    if cv.shape != a.shape[-cv.ndim :]:
        raise ShapeError(f"cost {cv.shape} does not match logits {a.shape}")
    half = cv.ndim // 2
    row_axes = tuple(range(half, cv.ndim))
    has_match = cv.any(axis=row_axes, keepdims=True)
    keep = np.where(has_match, cv, 1.0)
    return a * keep + MASK_VALUE * (1.0 - keep)


def categorical_refiner(size: int) -> Refiner:
    """Refiner applying :func:`refine_categorical_only` to flat ``[m, n, n]`` logits."""

    def apply(layer: int, a: Tensor, c_flat: np.ndarray) -> Tensor:
        m, n, _ = a.shape
        blocked = reshape(a, (m, size, size, size, size))
        refined = refine_categorical_only(blocked, c_flat.reshape(size, size, size, size))
        return reshape(refined, (m, n, n))

    return apply


class MatchingAdapter:
    """Per-layer adapter weights plus the glue to flat attention logits."""

    def __init__(self, params: ParamSet, heads: int, size: int, cfg: Optional[AdapterConfig] = None) -> None:
        self.params = params
        self.heads = heads
        self.size = size
        self.cfg = cfg or AdapterConfig()
        self.layers = sorted(
            {int(match.group(1)) for path in params.paths("adapter.") if (match := _PATH.match(path))}
        )
        if 0 in self.layers:
            raise ConfigError("layer 0 cannot carry an adapter")

    @classmethod
    def create(
        cls,
        layers: tuple[int, ...],
        heads: int,
        size: int,
        cfg: Optional[AdapterConfig] = None,
        seed: int = 0,
    ) -> "MatchingAdapter":
        cfg = cfg or AdapterConfig()
        rng = np.random.default_rng(seed)
        params = ParamSet()
        for layer in layers:
            init_layer_params(params, layer, heads, cfg, rng)
        logger.debug("Initialised adapter on layers %s", list(layers))
        return cls(params, heads, size, cfg)

    @classmethod
    def from_params(cls, params: ParamSet, heads: int, size: int) -> "MatchingAdapter":
        """Wrap loaded weights; width and head mixing are read off the shapes."""
        adapter_params = params.subset("adapter.")
        kernels = [p for p in adapter_params.paths() if p.endswith(".stage1.kl.weight")]
        if not kernels:
            raise StateError("checkpoint holds no adapter weights")
        c_mid, c_in = adapter_params[kernels[0]].shape[:2]
        cfg = AdapterConfig(c_mid=c_mid, head_mixing=c_in == heads + 1)
        return cls(adapter_params, heads, size, cfg)

    def refine(self, layer: int, a: Tensor, c: CostLike) -> Tensor:
        return refine(a, c, self.params, layer, self.cfg.head_mixing)

    def refine_logits(self, layer: int, a: Tensor, c_flat: np.ndarray) -> Tensor:
        """Refine flat ``[m, n, n]`` logits against a flat ``[n, n]`` cost."""
        s = self.size
        m, n, _ = a.shape
        o = self.refine(layer, reshape(a, (m, s, s, s, s)), c_flat.reshape(s, s, s, s))
        return reshape(o, (m, n, n))

    def is_identity(self) -> bool:
        """True while every output-stage weight and bias is exactly zero."""
        return all(
            not np.any(self.params[p].data) for p in self.params.paths() if ".stage2." in p
        )
