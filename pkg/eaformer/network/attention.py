"""
Weighted cross-attention
softmax(W ⊙ QKᵀ/√d_k)·V：注意力 logits 与几何权重逐元素相乘，没有位置编码
"""
import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from eaformer.exceptions import ShapeError
from eaformer.models import AttentionConfig, VisibilityMode
from eaformer.network.layers import FeedForward, Layer, LayerNorm, Linear
from eaformer.utils import tensor as T
from eaformer.utils.tensor import Tensor

logger = logging.getLogger(__name__)

WeightLike = Union[np.ndarray, Tensor]
W_TOL = 1e-12


def _weight_data(w: WeightLike) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)


def check_weights(w: WeightLike, n_q: int, n_k: int) -> None:
    data = _weight_data(w)
    if data.shape != (n_q, n_k):
        raise ShapeError(f"weights {data.shape} do not match attention ({n_q}, {n_k})")
    if data.size and (data.min() < -W_TOL or data.max() > 1.0 + W_TOL):
        raise ValueError(f"weights must lie in [0, 1], got [{data.min():.3g}, {data.max():.3g}]")


def visibility_mask(fields: Sequence[WeightLike]) -> np.ndarray:
    """
    Key mask for masked mode: keys of view n are kept for query q iff the
    query's row in that view's field is not all zero.
    """
    blocks = []
    for w in fields:
        data = _weight_data(w)
        visible = np.any(data != 0.0, axis=1)
        blocks.append(np.repeat(visible[:, None], data.shape[1], axis=1))
    return np.concatenate(blocks, axis=1)


def weighted_attention(W: Optional[WeightLike], Q: Tensor, K: Tensor, V: Tensor, n_heads: int = 1,
                       mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Multi-head attention with Hadamard-weighted logits.

    Every head uses the same ``W``. ``W=None`` is plain scaled dot-product
    attention. ``mask`` excludes keys (False); a row with no kept key yields 0.
    """
    n_q, d = Q.shape
    n_k = K.shape[0]
    if K.shape != (n_k, d) or V.shape[0] != n_k or V.shape[1] != d:
        raise ShapeError(f"attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if d % n_heads:
        raise ShapeError(f"d={d} is not divisible by n_heads={n_heads}")
    if W is not None:
        check_weights(W, n_q, n_k)
        if not isinstance(W, Tensor):
            W = Tensor._wrap(np.asarray(W, dtype=np.float64), requires_grad=False)

    d_k = d // n_heads
    inv_sqrt = 1.0 / np.sqrt(d_k)
    heads: List[Tensor] = []
    for h in range(n_heads):
        cols = (slice(None), slice(h * d_k, (h + 1) * d_k))
        q, k, v = Q[cols], K[cols], V[cols]
        logits = T.scale(T.matmul(q, k.T), inv_sqrt)
        if W is not None:
            logits = T.mul(W, logits)
        heads.append(T.matmul(T.softmax_rows(logits, mask), v))
    return heads[0] if n_heads == 1 else T.concat(heads, axis=1)


class AttentionBlock(Layer):
    """Pre-norm encoder block: h = x + Attn(LN(x), LN(F)); out = h + FFN(LN(h))."""

    def __init__(self, cfg: AttentionConfig, ffn_width: int, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.norm_ffn = LayerNorm(d)
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng, bias=False)
        self.ffn = FeedForward(d, ffn_width, rng)

    def attend(self, queries: Tensor, features: Sequence[Tensor], fields: Sequence[Optional[WeightLike]]) -> Tensor:
        """Attention sublayer only (no residual)."""
        if len(features) != len(fields):
            raise ShapeError(f"{len(features)} feature maps but {len(fields)} fields")
        n_q = queries.shape[0]
        for n, (f, w) in enumerate(zip(features, fields)):
            if w is not None and _weight_data(w).shape != (n_q, f.shape[0]):
                raise ShapeError(f"view {n}: field {_weight_data(w).shape} vs ({n_q}, {f.shape[0]}) keys")

        kv = self.norm_kv(features[0] if len(features) == 1 else T.concat(list(features), axis=0))
        W = joint_weights(fields, [f.shape[0] for f in features], n_q)
        mask = None
        if self.cfg.visibility_mode == VisibilityMode.MASKED and W is not None:
            mask = visibility_mask([w for w in fields])
        x = self.norm_q(queries)
        out = weighted_attention(W, self.wq(x), self.wk(kv), self.wv(kv), self.cfg.n_heads, mask)
        return self.wo(out)

    def __call__(self, queries: Tensor, features: Sequence[Tensor], fields: Sequence[Optional[WeightLike]]) -> Tensor:
        h = T.add(queries, self.attend(queries, features, fields))
        return T.add(h, self.ffn(self.norm_ffn(h)))

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict()
        for name in ("norm_q", "norm_kv", "norm_ffn", "wq", "wk", "wv", "wo", "ffn"):
            params.update(getattr(self, name).named(name))
        return params


def joint_weights(fields: Sequence[Optional[WeightLike]], n_keys: Sequence[int], n_q: int) -> Optional[WeightLike]:
    """Place per-view fields side by side (one softmax over every camera's keys)."""
    if all(w is None for w in fields):
        return None
    blocks = [np.ones((n_q, k)) if w is None else w for w, k in zip(fields, n_keys)]
    if len(blocks) == 1:
        return blocks[0]
    if any(isinstance(b, Tensor) for b in blocks):
        return T.concat(blocks, axis=1)
    return np.concatenate(blocks, axis=1)


def cross_attention_block(queries: Tensor, features: Sequence[Tensor], fields: Sequence[Optional[WeightLike]],
                          block: AttentionBlock) -> Tensor:
    """BEV queries attend to every view's features of one scale, weighted by that scale's fields."""
    return block(queries, features, fields)
