"""Encoder-decoder assembly, training loop, hidden representation, model files.

The reference configuration stacks seven same-padded conv layers, 3 -> 40 ->
48 -> 32 -> 48 -> 40 -> 56 -> 1 channels. The three encoder layers are
dual-branch with free-flow / congested cone masks; the decoder and the
sigmoid output layer are isotropic. Everything is fully convolutional, so a
model trained on small windows runs on fields of any size.
"""

from __future__ import annotations

import enum
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .anisotropy import MaskKind, build_mask
from .grid import FormatError, GridSpec, PartialField, SpeedField
from .nn import Activation, ConvLayer, DualBranchLayer, Layer, backward, forward, \
    init_layer, layer_params, sgd_step

N_ENCODER_LAYERS = 3
IN_CHANNELS = 3


class BranchMode(enum.Enum):
    ISOTROPIC = 0
    DUAL_ANISO = 1


class LayerSpec(NamedTuple):
    kh: int
    kw: int
    c_out: int
    branch: BranchMode
    activation: Activation


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple[LayerSpec, ...]
    dx: float = 10.0
    dt: float = 1.0
    v_max: float = 30.0
    v_cong: float = -5.0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("config needs at least one layer")
        last = self.layers[-1]
        if last.c_out != 1 or last.activation is not Activation.SIGMOID:
            raise ValueError("last layer must be c_out=1 with Sigmoid")
        for ls in self.layers:
            if ls.kh % 2 == 0 or ls.kw % 2 == 0:
                raise ValueError(f"kernel dims must be odd, got {ls.kh} x {ls.kw}")
            if ls.c_out < 1:
                raise ValueError("c_out must be >= 1")

    def channel_chain(self) -> list[int]:
        return [IN_CHANNELS] + [ls.c_out for ls in self.layers]

    def n_params(self) -> int:
        total = 0
        c_in = IN_CHANNELS
        for ls in self.layers:
            total += ls.kh * ls.kw * c_in * ls.c_out + ls.c_out
            c_in = ls.c_out
        return total


def default_config(dx: float = 10.0, dt: float = 1.0, v_max: float = 30.0,
                   v_cong: float = -5.0, channel_scale: float = 1.0) -> ModelConfig:
    """Reference 7-layer configuration; channel_scale shrinks widths (0.5 halves)."""
    base = [
        (5, 5, 40, BranchMode.DUAL_ANISO, Activation.RELU),
        (7, 7, 48, BranchMode.DUAL_ANISO, Activation.RELU),
        (7, 7, 32, BranchMode.DUAL_ANISO, Activation.RELU),
        (5, 5, 48, BranchMode.ISOTROPIC, Activation.RELU),
        (5, 5, 40, BranchMode.ISOTROPIC, Activation.RELU),
        (9, 9, 56, BranchMode.ISOTROPIC, Activation.RELU),
        (7, 7, 1, BranchMode.ISOTROPIC, Activation.SIGMOID),
    ]
    layers = []
    for i, (kh, kw, c, br, act) in enumerate(base):
        if i < len(base) - 1:
            c = max(1, int(round(c * channel_scale)))
        layers.append(LayerSpec(kh, kw, c, br, act))
    return ModelConfig(tuple(layers), dx=dx, dt=dt, v_max=v_max, v_cong=v_cong)


@dataclass
class EncoderDecoder:
    """The field reconstruction operator: sparse RGB input to dense speeds."""

    config: ModelConfig
    layers: list[Layer]

    @property
    def dtype(self):
        return self.layers[0].dtype

    @property
    def n_params(self) -> int:
        return sum(int(p.size) for layer in self.layers for p in layer_params(layer))

    def astype(self, dtype) -> "EncoderDecoder":
        return EncoderDecoder(self.config, [l.astype(dtype) for l in self.layers])

    def forward_raw(self, x: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) normalized RGB -> (B, H, W, 1) normalized speeds in (0, 1)."""
        a = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            a = forward(a, layer)
        return a

    def forward(self, partial: PartialField) -> SpeedField:
        """Reconstruct the speed field for one sparse input."""
        out = self.forward_raw(partial.rgb[None])
        speeds = out[0, :, :, 0].astype(np.float64) * self.config.v_max
        return SpeedField(partial.spec, speeds)

    @property
    def encoder_depth(self) -> int:
        # the output layer is never part of the encoder, even in tiny configs
        return min(N_ENCODER_LAYERS, len(self.layers) - 1)

    def encode_hidden(self, partial: PartialField) -> np.ndarray:
        """Encoder output pooled over space-time: one vector per input field."""
        a = partial.rgb[None].astype(self.dtype, copy=False)
        for layer in self.layers[:self.encoder_depth]:
            a = forward(a, layer)
        return a[0].mean(axis=(0, 1)).astype(np.float64)


def build_model(config: ModelConfig, seed: int = 0, *, dtype=np.float32,
                init_scale: float = 1.0) -> EncoderDecoder:
    """Instantiate layers with seeded init; dual layers get cone masks."""
    layers: list[Layer] = []
    c_in = IN_CHANNELS
    for idx, ls in enumerate(config.layers):
        if ls.branch is BranchMode.DUAL_ANISO:
            c_free = (ls.c_out + 1) // 2
            c_cong = ls.c_out - c_free
            if c_cong < 1:
                raise ValueError(f"layer {idx}: c_out={ls.c_out} too small to split")
            m_free = build_mask(MaskKind.FREE_FLOW, ls.kh, ls.kw, config.dx,
                                config.dt, config.v_max, config.v_cong)
            m_cong = build_mask(MaskKind.CONGESTED, ls.kh, ls.kw, config.dx,
                                config.dt, config.v_max, config.v_cong)
            free = init_layer(ls.kh, ls.kw, c_in, c_free, mask=m_free,
                              activation=ls.activation, seed=(seed, idx, 0),
                              init_scale=init_scale, dtype=dtype)
            cong = init_layer(ls.kh, ls.kw, c_in, c_cong, mask=m_cong,
                              activation=ls.activation, seed=(seed, idx, 1),
                              init_scale=init_scale, dtype=dtype)
            layers.append(DualBranchLayer(free, cong))
        else:
            layers.append(init_layer(ls.kh, ls.kw, c_in, ls.c_out, mask=None,
                                     activation=ls.activation, seed=(seed, idx, 0),
                                     init_scale=init_scale, dtype=dtype))
        c_in = ls.c_out
    return EncoderDecoder(config, layers)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_time: float = 0.0


def _stack_pairs(pairs, v_max: float, dtype):
    x = np.stack([p.input.rgb for p in pairs]).astype(dtype)
    y = (np.stack([p.target.values for p in pairs]) / v_max).astype(dtype)
    return x, y[..., None]


def _forward_cached(model: EncoderDecoder, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for layer in model.layers:
        acts.append(forward(acts[-1], layer))
    return acts


def _mean_loss(model: EncoderDecoder, x: np.ndarray, y: np.ndarray,
               batch_size: int) -> float:
    total = 0.0
    for lo in range(0, len(x), batch_size):
        pred = model.forward_raw(x[lo:lo + batch_size])
        diff = pred.astype(np.float64) - y[lo:lo + batch_size]
        total += float(np.sum(diff * diff))
    return total / y.size


def train(model: EncoderDecoder, train_pairs, val_pairs, cfg: SgdConfig) -> TrainReport:
    """Mini-batch SGD on mean squared error in normalized speed units.

    Shuffles per epoch with the config seed, updates the model in place, and
    reports per-epoch mean training loss and validation loss.
    """
    if not train_pairs:
        raise ValueError("training set is empty")
    dims = {(p.input.spec.nx, p.input.spec.nt) for p in list(train_pairs) + list(val_pairs)}
    if len(dims) != 1:
        raise ValueError(f"all sample pairs must share dims, got {sorted(dims)}")
    x_train, y_train = _stack_pairs(train_pairs, model.config.v_max, model.dtype)
    x_val, y_val = (None, None)
    if val_pairs:
        x_val, y_val = _stack_pairs(val_pairs, model.config.v_max, model.dtype)

    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    t0 = time.perf_counter()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x_train))
        epoch_sse = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            xb, yb = x_train[sel], y_train[sel]
            acts = _forward_cached(model, xb)
            diff = acts[-1] - yb
            epoch_sse += float(np.sum(diff.astype(np.float64) ** 2))
            g = (2.0 / diff.size) * diff
            for i in range(len(model.layers) - 1, -1, -1):
                layer = model.layers[i]
                g, grads = backward(g, acts[i], layer, output=acts[i + 1],
                                    need_input=i > 0)
                sgd_step(layer_params(layer), grads, cfg.learning_rate)
        report.train_loss.append(epoch_sse / y_train.size)
        if x_val is not None:
            report.val_loss.append(_mean_loss(model, x_val, y_val, cfg.batch_size))
    report.wall_time = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# model file (ATSE): header with grid constants, then per-layer descriptor and
# f32 weights/bias per branch. Masks are not stored -- masked weights are hard
# zeros in the file and the masks themselves rebuild from the grid constants.
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"ATSE"
_MODEL_HEADER = struct.Struct("<4sBHdddd")  # magic, version, n_layers, dx, dt, v_max, v_cong
_LAYER_DESC = struct.Struct("<BBHHHH")      # branch, activation, kh, kw, c_in, c_out


def save_model(model: EncoderDecoder, path):
    cfg = model.config
    blob = [_MODEL_HEADER.pack(_MODEL_MAGIC, 1, len(model.layers),
                               cfg.dx, cfg.dt, cfg.v_max, cfg.v_cong)]
    for ls, layer in zip(cfg.layers, model.layers):
        branches = [layer.free, layer.cong] if isinstance(layer, DualBranchLayer) \
            else [layer]
        c_in = branches[0].c_in
        blob.append(_LAYER_DESC.pack(
            BranchMode.DUAL_ANISO.value if isinstance(layer, DualBranchLayer)
            else BranchMode.ISOTROPIC.value,
            ls.activation.value, ls.kh, ls.kw, c_in, ls.c_out))
        for b in branches:
            blob.append(b.weights.astype("<f4").tobytes())
            blob.append(b.bias.astype("<f4").tobytes())
    payload = b"".join(blob)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> EncoderDecoder:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, n_layers, dx, dt, v_max, v_cong = _MODEL_HEADER.unpack_from(raw)
    if magic != _MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")

    offset = _MODEL_HEADER.size
    specs: list[LayerSpec] = []
    layers: list[Layer] = []
    expect_c_in = IN_CHANNELS
    for li in range(n_layers):
        if offset + _LAYER_DESC.size > len(raw):
            raise FormatError(f"{path}: truncated layer {li} descriptor at byte {offset}")
        br, act, kh, kw, c_in, c_out = _LAYER_DESC.unpack_from(raw, offset)
        offset += _LAYER_DESC.size
        try:
            branch = BranchMode(br)
            activation = Activation(act)
        except ValueError as exc:
            raise FormatError(f"{path}: layer {li}: {exc}") from exc
        if c_in != expect_c_in:
            raise FormatError(
                f"{path}: layer {li} expects c_in={expect_c_in}, file says {c_in}")

        def take(count):
            nonlocal offset
            nbytes = 4 * count
            if offset + nbytes > len(raw):
                raise FormatError(f"{path}: truncated weights at byte {offset}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).copy()
            offset += nbytes
            return arr

        if branch is BranchMode.DUAL_ANISO:
            c_free = (c_out + 1) // 2
            c_cong = c_out - c_free
            m_free = build_mask(MaskKind.FREE_FLOW, kh, kw, dx, dt, v_max, v_cong)
            m_cong = build_mask(MaskKind.CONGESTED, kh, kw, dx, dt, v_max, v_cong)
            try:
                free = ConvLayer(take(kh * kw * c_in * c_free).reshape(kh, kw, c_in, c_free),
                                 take(c_free), Activation(act), m_free)
                cong = ConvLayer(take(kh * kw * c_in * c_cong).reshape(kh, kw, c_in, c_cong),
                                 take(c_cong), Activation(act), m_cong)
            except ValueError as exc:
                raise FormatError(f"{path}: layer {li}: {exc}") from exc
            layers.append(DualBranchLayer(free, cong))
        else:
            layers.append(ConvLayer(take(kh * kw * c_in * c_out).reshape(kh, kw, c_in, c_out),
                                    take(c_out), Activation(act), None))
        specs.append(LayerSpec(kh, kw, c_out, branch, activation))
        expect_c_in = c_out
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at byte {offset}")
    config = ModelConfig(tuple(specs), dx=dx, dt=dt, v_max=v_max, v_cong=v_cong)
    return EncoderDecoder(config, layers)
