"""Shared-encoder segmentation/depth network, pose network, and the
gradient-scaling junctions between encoder and decoders.

Images enter the network as raw gray values (0..255, NCHW); normalization is
part of the recorded graph so input gradients come out in gray-value units.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import POSE_OUTPUT_SCALE, Pose, disparity_to_depth
from .tensor import Tensor

NORM_MEAN = 0.45
NORM_STD = 0.225
NUM_SCALES = 4


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class ScaleJunction:
    """Identity in the forward pass. The backward pass scales gradients headed
    into the encoder by ``lam`` (segmentation) or ``1 - lam`` (depth)."""

    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"gradient scaling factor must lie in [0, 1], got {self.lam}")

    def factor(self, task: str) -> float:
        if task == "seg":
            return self.lam
        if task == "depth":
            return 1.0 - self.lam
        raise ConfigError(f"unknown task {task!r}")

    def apply(self, features, task: str):
        f = self.factor(task)
        return [T.scale_gradient(x, f) for x in features]


def apply_gradient_scaling(junction: ScaleJunction, task: str, features):
    return junction.apply(features, task)


# -- layers ---------------------------------------------------------------

class Conv2d:
    def __init__(self, cin, cout, k=3, stride=1, rng=None, dtype=np.float32, gain=1.0):
        std = gain * np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.padding)
        return y + self.bias.reshape(1, -1, 1, 1)

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float32, momentum=0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum)

    def named_parameters(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class Encoder:
    """Stride-2 conv + batch-norm + ReLU blocks; returns one map per block."""

    def __init__(self, widths, rng, dtype):
        self.convs = []
        self.norms = []
        cin = 3
        for w in widths:
            self.convs.append(Conv2d(cin, w, 3, 2, rng, dtype))
            self.norms.append(BatchNorm2d(w, dtype))
            cin = w
        self.widths = tuple(widths)

    def __call__(self, x: Tensor, training: bool) -> list[Tensor]:
        feats = []
        for conv, bn in zip(self.convs, self.norms):
            x = T.relu(bn(conv(x), training))
            feats.append(x)
        return feats

    def named_parameters(self, prefix):
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            yield from conv.named_parameters(f"{prefix}.block{i}.conv")
            yield from bn.named_parameters(f"{prefix}.block{i}.bn")

    def named_buffers(self, prefix):
        for i, bn in enumerate(self.norms):
            yield from bn.named_buffers(f"{prefix}.block{i}.bn")


class Decoder:
    """U-Net style decoder; only the output heads differ between tasks.

    Level ``s`` (3 down to 0) convolves, upsamples x2, concatenates the encoder
    skip at scale ``s`` when one exists, and convolves again, producing a map
    at ``1/2^s`` of the input resolution.
    """

    def __init__(self, enc_widths, dec_widths, out_channels, head_scales, rng, dtype):
        self.up0 = {}
        self.up1 = {}
        cin = enc_widths[-1]
        for s in range(NUM_SCALES - 1, -1, -1):
            self.up0[s] = Conv2d(cin, dec_widths[s], 3, 1, rng, dtype)
            skip = enc_widths[s - 1] if s > 0 else 0
            self.up1[s] = Conv2d(dec_widths[s] + skip, dec_widths[s], 3, 1, rng, dtype)
            cin = dec_widths[s]
        self.heads = {s: Conv2d(dec_widths[s], out_channels, 3, 1, rng, dtype) for s in head_scales}

    def __call__(self, feats: list[Tensor]) -> dict[int, Tensor]:
        x = feats[-1]
        out = {}
        for s in range(NUM_SCALES - 1, -1, -1):
            x = T.elu(self.up0[s](x))
            x = T.upsample2x(x)
            if s > 0:
                x = T.concat([x, feats[s - 1]], axis=1)
            x = T.elu(self.up1[s](x))
            if s in self.heads:
                out[s] = self.heads[s](x)
        return out

    def named_parameters(self, prefix):
        for s in range(NUM_SCALES - 1, -1, -1):
            yield from self.up0[s].named_parameters(f"{prefix}.level{s}.conv0")
            yield from self.up1[s].named_parameters(f"{prefix}.level{s}.conv1")
        for s in sorted(self.heads):
            yield from self.heads[s].named_parameters(f"{prefix}.head{s}")


class PoseNet:
    """Small conv stack on a concatenated frame pair -> 6 pose numbers."""

    def __init__(self, widths, rng, dtype):
        self.convs = []
        cin = 6
        for w in widths:
            self.convs.append(Conv2d(cin, w, 3, 2, rng, dtype))
            cin = w
        self.out = Conv2d(cin, 6, 1, 1, rng, dtype, gain=0.1)

    def __call__(self, pair: Tensor) -> Tensor:
        x = pair
        for conv in self.convs:
            x = T.relu(conv(x))
        return self.out(x).mean(axis=(2, 3)) * POSE_OUTPUT_SCALE

    def named_parameters(self, prefix):
        for i, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"{prefix}.conv{i}")
        yield from self.out.named_parameters(f"{prefix}.out")


@dataclass
class ModelConfig:
    num_classes: int = 4
    encoder_widths: tuple = (16, 32, 64, 128)
    decoder_widths: tuple = (8, 16, 24, 32)
    pose_widths: tuple = (16, 32, 64, 64)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.pose_widths = tuple(int(w) for w in self.pose_widths)
        if len(self.encoder_widths) != NUM_SCALES or len(self.decoder_widths) != NUM_SCALES:
            raise ConfigError(f"encoder and decoder need {NUM_SCALES} widths each")


@dataclass
class DepthOutput:
    sigmoids: list[Tensor] = field(default_factory=list)
    disparities: list[Tensor] = field(default_factory=list)
    depths: list[Tensor] = field(default_factory=list)


class Model:
    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg.encoder_widths, rng, dtype)
        self.seg_decoder = Decoder(cfg.encoder_widths, cfg.decoder_widths, cfg.num_classes, (0,), rng, dtype)
        self.depth_decoder = Decoder(cfg.encoder_widths, cfg.decoder_widths, 1, tuple(range(NUM_SCALES)), rng, dtype)
        self.pose_net = PoseNet(cfg.pose_widths, rng, dtype)
        self.dtype = dtype
        self.training = True
        self.class_weights = np.ones(cfg.num_classes)

    # -- modes and parameters ---------------------------------------------
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder")
        yield from self.seg_decoder.named_parameters("seg_decoder")
        yield from self.depth_decoder.named_parameters("depth_decoder")
        yield from self.pose_net.named_parameters("pose")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        yield from self.encoder.named_buffers("encoder")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward passes ---------------------------------------------------
    def normalize(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        return (x * (1.0 / 255.0) - NORM_MEAN) * (1.0 / NORM_STD)

    def encode(self, x) -> list[Tensor]:
        h, w = np.shape(x.data if isinstance(x, Tensor) else x)[-2:]
        step = 2 ** NUM_SCALES
        if h % step or w % step:
            raise T.DimensionError(f"image size {h}x{w} must be a multiple of {step} on both sides")
        return self.encoder(self.normalize(x), self.training)

    def seg_logits(self, x, junction: ScaleJunction | None = None) -> Tensor:
        feats = self.encode(x)
        if junction is not None:
            feats = junction.apply(feats, "seg")
        return self.seg_decoder(feats)[0]

    def forward_seg(self, x, junction: ScaleJunction | None = None) -> Tensor:
        """Class probabilities (N, S, H, W)."""
        return T.softmax(self.seg_logits(x, junction), axis=1)

    def forward_depth(self, x, junction: ScaleJunction | None = None) -> DepthOutput:
        """Per-scale sigmoid maps (scale ``s`` is ``H/2^s x W/2^s``) and depths."""
        feats = self.encode(x)
        if junction is not None:
            feats = junction.apply(feats, "depth")
        heads = self.depth_decoder(feats)
        out = DepthOutput()
        for s in range(NUM_SCALES):
            sig = T.sigmoid(heads[s])
            disp, depth = disparity_to_depth(sig)
            out.sigmoids.append(sig)
            out.disparities.append(disp)
            out.depths.append(depth)
        return out

    def forward_pose(self, x_t, x_other, grad_scale: float | None = None) -> Pose:
        """Relative pose mapping camera ``t`` points into the other camera."""
        pair = T.concat([self.normalize(x_t), self.normalize(x_other)], axis=1)
        out = self.pose_net(pair)
        if grad_scale is not None:
            out = T.scale_gradient(out, grad_scale)
        return Pose(out[:, :3], out[:, 3:])

    # -- checkpoints ------------------------------------------------------
    def state_arrays(self) -> list[tuple[str, str, np.ndarray]]:
        items = [(name, "param", p.data) for name, p in self.named_parameters()]
        items += [(name, "buffer", b) for name, b in self.named_buffers()]
        return items

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        items = self.state_arrays()
        T.save_tensors(directory / "model.tnsr", [a for _, _, a in items])
        manifest = {
            "format": "TNSR records in the order listed; see docs/formats.md",
            "config": asdict(self.config),
            "class_weights": [float(w) for w in self.class_weights],
            "tensors": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in items],
        }
        (directory / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "Model":
        directory = Path(directory)
        meta = directory / "model.json"
        try:
            manifest = json.loads(meta.read_text())
            model = cls(ModelConfig(**manifest["config"]))
            model.class_weights = np.asarray(manifest["class_weights"], dtype=np.float64)
            entries = [(e["name"], e["shape"], e["kind"]) for e in manifest["tensors"]]
        except json.JSONDecodeError as exc:
            raise T.TensorFormatError(f"{meta}: not JSON (offset {exc.pos})") from exc
        except (KeyError, TypeError) as exc:
            raise T.TensorFormatError(f"{meta}: missing or malformed field {exc}") from exc
        arrays = T.load_tensors(directory / "model.tnsr")
        params = dict(model.named_parameters())
        buffers = dict(model.named_buffers())
        if len(arrays) != len(entries):
            raise T.TensorFormatError(f"{directory}: manifest lists {len(entries)} tensors, "
                                      f"file holds {len(arrays)}")
        for (name, shape, kind), arr in zip(entries, arrays):
            if list(arr.shape) != shape or (name not in params and name not in buffers):
                raise T.TensorFormatError(f"{directory}: unknown tensor or shape mismatch for {name}")
            if kind == "param":
                params[name].data = arr.astype(model.dtype)
            else:
                buffers[name][...] = arr
        return model
