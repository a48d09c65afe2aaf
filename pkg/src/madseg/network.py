"""Segmentation network: encoder, fusion, attention-gated decoder, predictor.

The encoder is a small four-stage convolutional stack (stem + three stride-2
blocks).  The two earliest stages also feed the memory bank, so they are the
frozen "memory layers" during training.  Multi-scale features augmented with
memory differences are fused top-down, gated by difference-derived attention
maps, and decoded into a full-resolution anomaly probability map; a global
average pooled latent feeds a tiny MLP that scores the whole image.

All convolutions use replicate padding so constant inputs stay constant, and
every activation is LeakyReLU with slope 0.01.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ParameterError
from .memory import (
    AttentionMaps,
    DiffPyramid,
    FeaturePyramid,
    MemoryBank,
    attention_maps,
    batch_best_diff,
)

LEAKY_SLOPE = 0.01


@dataclass
class NetworkConfig:
    """Architecture hyperparameters and ablation switches."""

    image_size: int = 256
    base_width: int = 32
    use_msff: bool = True
    use_attention: bool = True
    use_ca: bool = False
    image_score: str = "max"  # "max" | "top1pct"

    def validate(self) -> None:
        if self.image_size < 16 or self.image_size % 16 != 0:
            raise ParameterError(
                f"image_size must be a positive multiple of 16, got {self.image_size}"
            )
        if self.base_width < 1:
            raise ParameterError(
                f"base_width must be >= 1, got {self.base_width}"
            )
        if self.image_score not in ("max", "top1pct"):
            raise ParameterError(
                f"image_score must be 'max' or 'top1pct', got {self.image_score!r}"
            )

    @property
    def latent_dim(self) -> int:
        return 8 * self.base_width


def _conv3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(
        cin, cout, kernel_size=3, stride=stride, padding=1,
        padding_mode="replicate",
    )


def _act() -> nn.LeakyReLU:
    return nn.LeakyReLU(LEAKY_SLOPE)


class Encoder(nn.Module):
    """Stem plus three stride-2 stages producing a four-level pyramid."""

    def __init__(self, width: int) -> None:
        super().__init__()
        w = width
        self.stem = nn.Sequential(_conv3(3, w, 2), _act(), _conv3(w, w), _act())
        self.block1 = nn.Sequential(_conv3(w, 2 * w, 2), _act(), _conv3(2 * w, 2 * w), _act())
        self.block2 = nn.Sequential(_conv3(2 * w, 4 * w, 2), _act(), _conv3(4 * w, 4 * w), _act())
        self.block3 = nn.Sequential(_conv3(4 * w, 8 * w, 2), _act(), _conv3(8 * w, 8 * w), _act())

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        f0 = self.stem(x)
        f1 = self.block1(f0)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        return FeaturePyramid(f0=f0, f1=f1, f2=f2, f3=f3)


class Predictor(nn.Module):
    """Two-layer MLP scoring the pooled latent; logistic output in (0, 1)."""

    def __init__(self, latent_dim: int) -> None:
        super().__init__()
        hidden = max(8, latent_dim // 2)
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden), _act(), nn.Linear(hidden, 1)
        )

    def logits(self, r: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid scores, the quantity the score loss is computed on."""
        return self.net(r).squeeze(-1)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(r))


class CoordinateAttention(nn.Module):
    """Optional channel/position gating from pooled row and column profiles."""

    def __init__(self, channels: int, reduction: int = 8) -> None:
        super().__init__()
        mid = max(4, channels // reduction)
        self.squeeze = nn.Conv2d(channels, mid, kernel_size=1)
        self.act = _act()
        self.excite_h = nn.Conv2d(mid, channels, kernel_size=1)
        self.excite_w = nn.Conv2d(mid, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pool_h = x.mean(dim=-1, keepdim=True)  # (B, C, H, 1)
        pool_w = x.mean(dim=-2, keepdim=True)  # (B, C, 1, W)
        joint = torch.cat([pool_h, pool_w.transpose(-1, -2)], dim=-2)
        joint = self.act(self.squeeze(joint))
        part_h, part_w = torch.split(joint, [x.shape[-2], x.shape[-1]], dim=-2)
        gate_h = torch.sigmoid(self.excite_h(part_h))
        gate_w = torch.sigmoid(self.excite_w(part_w.transpose(-1, -2)))
        return x * gate_h * gate_w


class FusionModule(nn.Module):
    """Reduce concatenated features per scale, then fuse top-down.

    Each scale's channel count is halved by a 3x3 conv; the coarser fused map
    is nearest-upsampled, aligned by a 1x1 conv, and added into the next
    finer scale.  ``bypass_convs`` replaces every conv by a channel slice and
    drops the activations (a test hook that makes fusion purely additive).
    With fusion disabled the reduced maps pass through unfused.
    """

    def __init__(self, width: int, use_msff: bool, use_ca: bool) -> None:
        super().__init__()
        w = width
        self.use_msff = use_msff
        self.use_ca = use_ca
        self.reduce1 = _conv3(4 * w, 2 * w)
        self.reduce2 = _conv3(8 * w, 4 * w)
        self.reduce3 = _conv3(16 * w, 8 * w)
        self.align2 = nn.Conv2d(8 * w, 4 * w, kernel_size=1)
        self.align1 = nn.Conv2d(4 * w, 2 * w, kernel_size=1)
        self.act = _act()
        if use_ca:
            self.ca1 = CoordinateAttention(2 * w)
            self.ca2 = CoordinateAttention(4 * w)
            self.ca3 = CoordinateAttention(8 * w)

    @staticmethod
    def _up2(x: torch.Tensor) -> torch.Tensor:
        return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)

    def forward(
        self,
        c1: torch.Tensor,
        c2: torch.Tensor,
        c3: torch.Tensor,
        bypass_convs: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if bypass_convs:
            r1 = c1[..., : c1.shape[-3] // 2, :, :]
            r2 = c2[..., : c2.shape[-3] // 2, :, :]
            r3 = c3[..., : c3.shape[-3] // 2, :, :]
        else:
            r1 = self.act(self.reduce1(c1))
            r2 = self.act(self.reduce2(c2))
            r3 = self.act(self.reduce3(c3))
            if self.use_ca:
                r1 = self.ca1(r1)
                r2 = self.ca2(r2)
                r3 = self.ca3(r3)
        if not self.use_msff:
            return r1, r2, r3
        up3 = self._up2(r3)
        if bypass_convs:
            fused2 = r2 + up3[..., : r2.shape[-3], :, :]
        else:
            fused2 = r2 + self.align2(up3)
        up2 = self._up2(fused2)
        if bypass_convs:
            fused1 = r1 + up2[..., : r1.shape[-3], :, :]
        else:
            fused1 = r1 + self.align1(up2)
        return fused1, fused2, r3


class Decoder(nn.Module):
    """Upsampling decoder over attention-weighted fused scales plus the stem skip.

    Emits raw per-pixel logits.  Probabilities are taken at the model level;
    the pixel losses consume the logits directly so their gradients stay
    finite even when the probabilities saturate in float32.
    """

    def __init__(self, width: int) -> None:
        super().__init__()
        w = width
        self.from3 = _conv3(8 * w, 4 * w)
        self.from2 = _conv3(8 * w, 2 * w)
        self.from1 = _conv3(4 * w, w)
        self.from0 = _conv3(2 * w, w)
        self.head = nn.Conv2d(w, 1, kernel_size=1)
        self.act = _act()

    @staticmethod
    def _up2(x: torch.Tensor) -> torch.Tensor:
        return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)

    def forward(
        self,
        f0: torch.Tensor,
        fused1: torch.Tensor,
        fused2: torch.Tensor,
        fused3: torch.Tensor,
        attn: AttentionMaps | None,
    ) -> torch.Tensor:
        if attn is not None:
            m1 = attn.m1.unsqueeze(-3)
            m2 = attn.m2.unsqueeze(-3)
            m3 = attn.m3.unsqueeze(-3)
            fused1 = fused1 * m1
            fused2 = fused2 * m2
            fused3 = fused3 * m3
        x = self._up2(self.act(self.from3(fused3)))
        x = self._up2(self.act(self.from2(torch.cat([x, fused2], dim=-3))))
        x = self._up2(self.act(self.from1(torch.cat([x, fused1], dim=-3))))
        x = self._up2(self.act(self.from0(torch.cat([x, f0], dim=-3))))
        return self.head(x)


@dataclass
class ForwardResult:
    """Everything one forward pass produces."""

    seg: torch.Tensor  # (B, 1, H, W) anomaly probabilities
    q: torch.Tensor  # (B,) image-level logistic scores
    r: torch.Tensor  # (B, latent_dim) pooled latents
    best_indices: list[int]  # chosen memory entry per item
    attn: AttentionMaps  # batched attention maps (pre-gating)
    seg_logits: torch.Tensor  # (B, 1, H, W) pre-sigmoid pixel scores
    q_logits: torch.Tensor  # (B,) pre-sigmoid image scores


def init_weights(model: nn.Module) -> None:
    """Kaiming initialization matched to the LeakyReLU slope, zero biases.

    The network has no normalization layers, so the default PyTorch init
    lets the input-driven signal decay several-fold per stage: after the
    four encoder stages the pooled latent varies by under 0.1% between
    images, which starves the memory differences, the attention maps, and
    the image head of any signal.  Variance-preserving init keeps features
    input-dependent at every depth.  The two output layers start at zero so
    both the pixel map and the image score begin exactly at probability 0.5.
    """
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(
                mod.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu"
            )
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
    for head in (model.decoder.head, model.predictor.net[-1]):
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)


class DefectModel(nn.Module):
    """Full pipeline: encode, compare to memory, fuse, gate, decode, score."""

    def __init__(self, cfg: NetworkConfig) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.base_width)
        self.fusion = FusionModule(cfg.base_width, cfg.use_msff, cfg.use_ca)
        self.decoder = Decoder(cfg.base_width)
        self.predictor = Predictor(cfg.latent_dim)
        init_weights(self)

    # ----- parameter partitioning -------------------------------------
    def frozen_modules(self) -> list[nn.Module]:
        """Stages whose encodings the memory bank stores; never optimized."""
        return [self.encoder.stem, self.encoder.block1]

    def frozen_parameters(self) -> list[nn.Parameter]:
        return [p for m in self.frozen_modules() for p in m.parameters()]

    def trainable_parameters(self) -> list[nn.Parameter]:
        frozen = {id(p) for p in self.frozen_parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def frozen_snapshot(self) -> list[torch.Tensor]:
        return [p.detach().clone() for p in self.frozen_parameters()]

    # ----- encoding ----------------------------------------------------
    def encode(self, x: torch.Tensor) -> tuple[FeaturePyramid, torch.Tensor]:
        """Feature pyramid and pooled latent for a (B, 3, H, W) batch."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ParameterError(
                f"expected a (B, 3, H, W) tensor, got shape {tuple(x.shape)}"
            )
        if x.shape[-1] % 16 != 0 or x.shape[-2] % 16 != 0:
            raise ParameterError(
                f"input sides must be multiples of 16, got {tuple(x.shape[-2:])}"
            )
        pyr = self.encoder(x)
        r = pyr.f3.mean(dim=(-2, -1))
        return pyr, r

    def encode_image(self, img: np.ndarray) -> FeaturePyramid:
        """Pyramid of one (H, W, 3) numpy image, without gradients."""
        x = image_to_tensor(img).unsqueeze(0)
        with torch.no_grad():
            pyr, _ = self.encode(x.to(next(self.parameters()).dtype))
        return FeaturePyramid(*(f.squeeze(0) for f in pyr))

    # ----- full pipeline ------------------------------------------------
    def forward_batch(
        self, x: torch.Tensor, bank: MemoryBank, bypass_fusion_convs: bool = False
    ) -> ForwardResult:
        pyr, r = self.encode(x)
        best, indices = batch_best_diff(pyr.f1, pyr.f2, pyr.f3, bank)
        c1 = torch.cat([pyr.f1, best.d1], dim=-3)
        c2 = torch.cat([pyr.f2, best.d2], dim=-3)
        c3 = torch.cat([pyr.f3, best.d3], dim=-3)
        fused1, fused2, fused3 = self.fusion(c1, c2, c3, bypass_convs=bypass_fusion_convs)
        attn = attention_maps(best)
        gate = attn if self.cfg.use_attention else None
        seg_logits = self.decoder(pyr.f0, fused1, fused2, fused3, gate)
        q_logits = self.predictor.logits(r)
        return ForwardResult(
            seg=torch.sigmoid(seg_logits),
            q=torch.sigmoid(q_logits),
            r=r,
            best_indices=indices,
            attn=attn,
            seg_logits=seg_logits,
            q_logits=q_logits,
        )

    def forward(
        self, img: np.ndarray | torch.Tensor, bank: MemoryBank
    ) -> tuple[np.ndarray, float, float]:
        """Score one image: (segmentation map, image score, latent score)."""
        if isinstance(img, np.ndarray):
            x = image_to_tensor(img)
        else:
            x = img
        if x.ndim == 3:
            x = x.unsqueeze(0)
        with torch.no_grad():
            result = self.forward_batch(x.to(next(self.parameters()).dtype), bank)
        seg = result.seg[0, 0].cpu().numpy()
        return seg, self.image_score(result.seg)[0].item(), float(result.q[0])

    def image_score(self, seg: torch.Tensor) -> torch.Tensor:
        """Collapse (B, 1, H, W) maps to per-image scores in [0, 1]."""
        flat = seg.flatten(start_dim=1)
        if self.cfg.image_score == "max":
            return flat.amax(dim=1)
        k = max(1, int(np.ceil(0.01 * flat.shape[1])))
        top = flat.topk(k, dim=1).values
        return top.mean(dim=1)


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float [0, 1] numpy image -> (3, H, W) float32 tensor."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def images_to_batch(images: list[np.ndarray]) -> torch.Tensor:
    """Stack images into a (B, 3, H, W) float32 tensor."""
    return torch.stack([image_to_tensor(im) for im in images])


def build_model(cfg: NetworkConfig, seed: int) -> DefectModel:
    """Construct a model with weights drawn deterministically from ``seed``."""
    torch.manual_seed(seed)
    return DefectModel(cfg)
