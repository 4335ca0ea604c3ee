"""Toy encoder-decoder segmentation network with optional morphological
attention or plain deep-supervision sub-outputs.

Architecture for depth d, base channels b:
  encoder: d blocks of [3x3 conv + relu, 2x2 max pool], channels b*2^i
  bottleneck: 3x3 conv + relu at b*2^d channels
  decoder level n (n = d-1 .. 0): 1x1 channel reduction, nearest 2x
  upsample, skip concatenation, 3x3 conv + relu to b*2^n channels
  levels n >= 1 in "ma"/"ds" mode attach a 1x1 sub-output head; in "ma"
  mode the sigmoid of the head multiplies the features (attention)
  final: 1x1 conv + sigmoid

Outputs: [x0] in plain mode; [x0, x1, .., x_{d-1}] otherwise, x_n at
1/2^n of the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfig

MODES = ("plain", "ds", "ma")
MA_LOSS_VARIANTS = ("pre-sigmoid", "post-sigmoid")


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    base_channels: int = 8
    mode: str = "plain"
    ma_loss_on: str = "post-sigmoid"
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 2:
            raise InvalidConfig(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise InvalidConfig(f"base_channels must be >= 1, got {self.base_channels}")
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ma_loss_on not in MA_LOSS_VARIANTS:
            raise InvalidConfig(
                f"ma_loss_on must be one of {MA_LOSS_VARIANTS}, got {self.ma_loss_on!r}"
            )

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "mode": self.mode,
            "ma_loss_on": self.ma_loss_on,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            depth=int(d.get("depth", 3)),
            base_channels=int(d.get("base_channels", 8)),
            mode=str(d.get("mode", "plain")),
            ma_loss_on=str(d.get("ma_loss_on", "post-sigmoid")),
            seed=int(d.get("seed", 0)),
        )


def ma_block(features: Tensor, weight: Tensor, bias: Tensor,
             loss_on: str = "post-sigmoid", attention_gain: float = 1.0):
    """Morphological attention: 1x1 reduction to a single-channel map,
    sigmoid attention, element-wise feature modulation.

    Returns (enhanced features, sub-output). The sub-output is the raw
    1x1 map ("pre-sigmoid") or the attention map ("post-sigmoid").
    ``attention_gain`` scales the attention map before the multiply
    (diagnostic hook; 2.0 makes zero-weight attention the identity).
    """
    z = ad.conv2d_1x1(features, weight, bias)
    a = ad.sigmoid(z)
    gained = a if attention_gain == 1.0 else a * attention_gain
    enhanced = ad.mul(features, gained)
    sub = z if loss_on == "pre-sigmoid" else a
    return enhanced, sub


class MASegNet:
    """Parameter container plus forward pass. Parameters are Kaiming-
    uniform initialized from the config seed, backbone first so that all
    modes share identical backbone draws for a given seed."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.attention_gain = 1.0  # test hook, not part of the config
        d, b = config.depth, config.base_channels
        self._enc_ch = [b * (1 << i) for i in range(d)]
        self._bottleneck_ch = b * (1 << d)
        spec: list[tuple[str, tuple, int]] = []  # (name, shape, fan_in)
        cin = 1
        for i, cout in enumerate(self._enc_ch):
            spec.append((f"enc{i}.weight", (cout, cin, 3, 3), cin * 9))
            spec.append((f"enc{i}.bias", (cout,), 0))
            cin = cout
        spec.append((
            "bottleneck.weight", (self._bottleneck_ch, cin, 3, 3), cin * 9
        ))
        spec.append(("bottleneck.bias", (self._bottleneck_ch,), 0))
        for n in range(d - 1, -1, -1):
            c_from = b * (1 << (n + 1))
            c_to = b * (1 << n)
            spec.append((f"dec{n}.reduce.weight", (c_to, c_from), c_from))
            spec.append((f"dec{n}.reduce.bias", (c_to,), 0))
            spec.append((f"dec{n}.conv.weight", (c_to, 2 * c_to, 3, 3), 2 * c_to * 9))
            spec.append((f"dec{n}.conv.bias", (c_to,), 0))
        spec.append(("final.weight", (1, b), b))
        spec.append(("final.bias", (1,), 0))
        if config.mode in ("ds", "ma"):
            for n in range(1, d):
                cn = b * (1 << n)
                spec.append((f"head{n}.weight", (1, cn), cn))
                spec.append((f"head{n}.bias", (1,), 0))

        rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
        self.params: dict[str, Tensor] = {}
        for name, shape, fan_in in spec:
            if fan_in == 0:
                data = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            self.params[name] = Tensor(data, requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise InvalidConfig(
                f"checkpoint mismatch; missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, arr in state.items():
            if arr.shape != self.params[name].data.shape:
                raise InvalidConfig(
                    f"shape mismatch for {name}: {arr.shape} vs "
                    f"{self.params[name].data.shape}"
                )
            self.params[name].data = np.array(arr, dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def forward(self, x) -> list[Tensor]:
        """Run the network on an (N, 1, H, W) batch; H and W must be
        divisible by 2^depth."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        cfg = self.config
        p = self.params
        skips = []
        h = x
        for i in range(cfg.depth):
            h = ad.relu(ad.conv2d(h, p[f"enc{i}.weight"], p[f"enc{i}.bias"], "same"))
            skips.append(h)
            h = ad.max_pool_2x2(h)
        h = ad.relu(ad.conv2d(h, p["bottleneck.weight"], p["bottleneck.bias"], "same"))

        subs: list[Tensor] = []
        for n in range(cfg.depth - 1, -1, -1):
            h = ad.conv2d_1x1(h, p[f"dec{n}.reduce.weight"], p[f"dec{n}.reduce.bias"])
            h = ad.upsample_nearest_2x(h)
            h = ad.concat_channels([h, skips[n]])
            h = ad.relu(
                ad.conv2d(h, p[f"dec{n}.conv.weight"], p[f"dec{n}.conv.bias"], "same")
            )
            if n >= 1 and cfg.mode in ("ds", "ma"):
                if cfg.mode == "ma":
                    h, sub = ma_block(
                        h,
                        p[f"head{n}.weight"],
                        p[f"head{n}.bias"],
                        cfg.ma_loss_on,
                        self.attention_gain,
                    )
                else:  # ds: head supervised, features untouched
                    z = ad.conv2d_1x1(h, p[f"head{n}.weight"], p[f"head{n}.bias"])
                    sub = ad.sigmoid(z)
                subs.append(sub)
        x0 = ad.sigmoid(ad.conv2d_1x1(h, p["final.weight"], p["final.bias"]))
        if cfg.mode == "plain":
            return [x0]
        return [x0] + subs[::-1]


def build_model(config: ModelConfig) -> MASegNet:
    return MASegNet(config)


def infer(model: MASegNet, image) -> np.ndarray:
    """Segment a single (H, W) image: threshold the final output at 0.5."""
    img = np.asarray(image, dtype=np.float64)
    x0 = model.forward(img[None, None])[0]
    return (x0.data[0, 0] >= 0.5).astype(np.uint8)
