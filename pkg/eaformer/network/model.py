"""
Desk-scale EAFormer
backbone stub → 多尺度 EAF 交叉注意力编码器 → 解码器 → 语义头
"""
import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from eaformer.exceptions import ShapeError
from eaformer.models import ModelConfig
from eaformer.network.attention import AttentionBlock
from eaformer.network.layers import Layer, Linear
from eaformer.services.field_service import FieldBank, epipolar_weights
from eaformer.utils import tensor as T
from eaformer.utils.tensor import Tensor

logger = logging.getLogger(__name__)

ImageLike = Union[np.ndarray, Tensor]
QUERY_INIT_STD = 0.5
POS_INIT_STD = 0.02


class Backbone(Layer):
    """Per-scale patch average pool followed by a linear channel map (shared by every view)."""

    def __init__(self, scales: Sequence[float], channels: int, d_model: int, rng: np.random.Generator):
        self.scales = tuple(scales)
        self.patches = [ModelConfig.patch_size(s) for s in self.scales]
        self.proj = [Linear(channels, d_model, rng) for _ in self.scales]

    def __call__(self, image: ImageLike) -> List[Tensor]:
        """(H, W, C) image -> one (h*w, d_model) key matrix per scale, rows in row-major pixel order."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        out = []
        for patch, proj in zip(self.patches, self.proj):
            pooled = T.avg_pool2d(image, patch)
            h, w, c = pooled.shape
            out.append(proj(T.reshape(pooled, (h * w, c))))
        return out

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict()
        for sid, proj in enumerate(self.proj):
            params.update(proj.named(f"s{sid}"))
        return params


class Decoder(Layer):
    """Two 3x3 neighbourhood mixing layers and a 1x1 class projection (zero-initialised)."""

    def __init__(self, d_model: int, width: int, n_classes: int, rng: np.random.Generator):
        self.mix1 = Linear(9 * d_model, width, rng)
        self.mix2 = Linear(9 * width, width, rng)
        self.head = Linear(width, n_classes, rng, zero=True)

    def __call__(self, bev: Tensor, cells_y: int, cells_x: int) -> Tensor:
        if bev.shape[0] != cells_x * cells_y:
            raise ShapeError(f"{bev.shape[0]} queries do not fill a {cells_x}x{cells_y} grid")
        x = T.reshape(bev, (cells_y, cells_x, bev.shape[1]))
        x = T.gelu(self.mix1(T.neighborhood3x3(x)))
        x = T.reshape(x, (cells_y, cells_x, x.shape[1]))
        x = T.gelu(self.mix2(T.neighborhood3x3(x)))
        logits = self.head(x)  # (n_q, classes)
        return T.reshape(T.transpose(logits), (logits.shape[1], cells_y, cells_x))

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict()
        for name in ("mix1", "mix2", "head"):
            params.update(getattr(self, name).named(name))
        return params


class EAFormer(Layer):
    """
    BEV segmentation model whose only source of spatial information is the
    Epipolar Attention Field (unless the positional-encoding ablation is on).

    ``n_views`` and ``image_size`` are only needed by the positional-encoding
    ablation, whose embeddings are tied to a rig layout.
    """

    def __init__(self, cfg: ModelConfig, channels: int = 3, n_views: int = 2,
                 image_size: Tuple[int, int] = (128, 64)):
        self.cfg = cfg
        self.channels = channels
        self.n_views = n_views
        self.image_size = (int(image_size[0]), int(image_size[1]))
        rng = np.random.default_rng(cfg.seed)
        grid = cfg.grid
        d = cfg.d_model

        self.queries = Tensor(rng.standard_normal((grid.n_cells, d)) * QUERY_INIT_STD, requires_grad=True)
        self.backbone = Backbone(cfg.scales, channels, d, rng)
        self.blocks: List[List[AttentionBlock]] = [
            [AttentionBlock(cfg.attention, cfg.ffn_width, rng) for _ in range(cfg.blocks_per_scale)]
            for _ in cfg.scales
        ]
        self.decoder = Decoder(d, cfg.decoder_width, len(cfg.classes), rng)

        self.log_lambda: Optional[Tensor] = None
        if cfg.field_config.lambda_learnable:
            self.log_lambda = Tensor(np.log(cfg.field_config.lam), requires_grad=True)

        self.pos: Dict[Tuple[int, int], Tensor] = {}
        if cfg.positional_encoding:
            w, h = self.image_size
            for v in range(n_views):
                for sid, s in enumerate(cfg.scales):
                    n_k = int(round(w * s)) * int(round(h * s))
                    self.pos[(v, sid)] = Tensor(rng.standard_normal((n_k, d)) * POS_INIT_STD, requires_grad=True)

    # --- parameters ---
    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict(queries=self.queries)
        params.update(self.backbone.named("backbone"))
        for sid, blocks in enumerate(self.blocks):
            for b, block in enumerate(blocks):
                params.update(block.named(f"encoder.s{sid}.b{b}"))
        params.update(self.decoder.named("decoder"))
        if self.log_lambda is not None:
            params["log_lambda"] = self.log_lambda
        for (v, sid), p in sorted(self.pos.items()):
            params[f"pos.v{v}.s{sid}"] = p
        return params

    @property
    def lam(self) -> float:
        """Current distance strength."""
        if self.log_lambda is not None:
            return float(np.exp(self.log_lambda.item()))
        return self.cfg.field_config.lam

    # --- forward pieces ---
    def backbone_stub(self, images: Sequence[ImageLike]) -> List[List[Tensor]]:
        """features[view][scale_id] = (n_k, d_model)."""
        feats = [self.backbone(img) for img in images]
        if self.pos:
            feats = [[T.add(f, self.pos[(v, sid)]) for sid, f in enumerate(per_view)]
                     for v, per_view in enumerate(feats)]
        return feats

    def scale_fields(self, bank: Optional[FieldBank], scale_id: int, n_views: int) -> List[Optional[object]]:
        """W per view for one scale: constant arrays, λ-differentiable tensors or None (W≡1)."""
        if self.cfg.uniform_weights:
            return [None] * n_views
        fields = bank.for_scale(scale_id)
        if self.log_lambda is not None:
            lam = T.exp(self.log_lambda)
            return [epipolar_weights(f, lam) for f in fields]
        if bank.fields[0].lam != self.cfg.field_config.lam:
            return [f.reweight(self.cfg.field_config.lam) for f in fields]
        return [f.weights for f in fields]

    def encoder_forward(self, feats: List[List[Tensor]], bank: Optional[FieldBank]) -> Tensor:
        """Queries attend to each scale in configured order."""
        self._check_bank(bank, len(feats))
        x = self.queries
        for s in self.cfg.ordered_scales():
            sid = self.cfg.scales.index(s)
            per_view = [f[sid] for f in feats]
            fields = self.scale_fields(bank, sid, len(feats))
            for block in self.blocks[sid]:
                x = block(x, per_view, fields)
        return x

    def decoder_head(self, bev: Tensor) -> Tensor:
        grid = self.cfg.grid
        return self.decoder(bev, grid.cells_y, grid.cells_x)

    def __call__(self, images: Sequence[ImageLike], bank: Optional[FieldBank]) -> Tensor:
        """Images in rig order -> logits (classes, cells_y, cells_x)."""
        return self.decoder_head(self.encoder_forward(self.backbone_stub(images), bank))

    def _check_bank(self, bank: Optional[FieldBank], n_views: int) -> None:
        if self.pos and n_views != self.n_views:
            raise ShapeError(f"positional encoding was built for {self.n_views} views, got {n_views}")
        if self.cfg.uniform_weights:
            return
        if bank is None:
            raise ShapeError("a field bank is required unless uniform_weights is set")
        if tuple(bank.scales) != tuple(self.cfg.scales):
            raise ShapeError(f"field bank scales {bank.scales} do not match model scales {self.cfg.scales}")
        if len(bank.view_ids) != n_views:
            raise ShapeError(f"field bank has {len(bank.view_ids)} views, got {n_views} images")
