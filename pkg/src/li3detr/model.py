"""End-to-end detector: backbone -> encoder -> decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, GridConfig, extract_bev, init_backbone, second_backbone_and_fpn
from .params import Params
from .transformer import (
    DecoderConfig,
    EncoderConfig,
    LayerPrediction,
    decode,
    encode,
    init_decoder,
    init_encoder,
    select_top_k,
)


@dataclass
class ModelConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        d = self.backbone.fpn_channels
        if self.encoder.d_model != d or self.decoder.d_model != d:
            raise ValueError(
                f"fpn_channels ({d}), encoder d_model ({self.encoder.d_model}) and decoder "
                f"d_model ({self.decoder.d_model}) must agree"
            )

    @property
    def pc_range(self):
        return self.grid.pc_range


class Li3DeTr:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = Params(np.random.default_rng(seed))
        init_backbone(self.params, cfg.backbone, cfg.grid)
        init_encoder(self.params, cfg.encoder)
        init_decoder(self.params, cfg.decoder)

    def pyramid(self, cloud) -> list:
        bev = extract_bev(cloud, self.params, self.cfg.backbone, self.cfg.grid)
        return second_backbone_and_fpn(bev, self.params, self.cfg.backbone)

    def forward(self, cloud) -> list[LayerPrediction]:
        feats = encode(self.pyramid(cloud), self.cfg.encoder, self.params)
        return decode(feats, self.cfg.decoder, self.params)

    __call__ = forward

    def detect(self, cloud, k: int = 300, layer: int = -1):
        return select_top_k(self.forward(cloud)[layer], k, self.cfg.pc_range)
