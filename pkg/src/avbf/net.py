"""Audiovisual network: convolutional video/audio encoders, concat fusion, affine heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .features import N_MELS, ContextMode
from .tensor import Tensor

FULL_VIDEO_CHANNELS = (64, 128, 128, 256, 256, 256)
FULL_VIDEO_STRIDES = (2, 2, 2, 2, 2, 1)
FULL_AUDIO_CHANNELS = (32, 64, 64, 64)
FULL_AUDIO_STRIDES = (2, 1, 1, 1)
KERNEL = 3


@dataclass
class NetConfig:
    video_channels: tuple[int, ...] = FULL_VIDEO_CHANNELS
    audio_channels: tuple[int, ...] = FULL_AUDIO_CHANNELS
    embedding_dim: int = 256
    causal: bool = False
    image_resolution: int = 128
    scale_factor: int = 1
    k_speech: int = 6
    k_nonspeech: int = 4
    landmark_count: int = 16
    dtype: str = "float32"

    def __post_init__(self):
        self.video_channels = tuple(self.video_channels)
        self.audio_channels = tuple(self.audio_channels)
        if self.scale_factor < 1:
            raise ValueError("scale_factor must be >= 1")
        if self.k_speech < 1 or self.k_nonspeech < 0:
            raise ValueError("bad output dimensions")
        if len(self.video_channels) != len(FULL_VIDEO_STRIDES) or len(self.audio_channels) != len(FULL_AUDIO_STRIDES):
            raise ValueError("layer counts must match the fixed stride tables")

    @classmethod
    def desk(cls, scale_factor: int = 4, **kw) -> NetConfig:
        return cls(scale_factor=scale_factor, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["video_channels"] = list(self.video_channels)
        d["audio_channels"] = list(self.audio_channels)
        return d

    @property
    def resolution(self) -> int:
        return self.image_resolution // self.scale_factor

    @property
    def embedding(self) -> int:
        return max(1, self.embedding_dim // self.scale_factor)

    @property
    def context_mode(self) -> ContextMode:
        return ContextMode.from_flag(self.causal)

    def video_layers(self) -> list[tuple[int, int]]:
        """(filters, stride) of the video stack actually used at this resolution.

        Below full resolution the leading stride-2 layers are dropped until the
        remaining stack reduces the image to exactly 1x1.
        """
        chans = [max(1, c // self.scale_factor) for c in self.video_channels]
        layers = list(zip(chans, FULL_VIDEO_STRIDES))
        for start in range(len(layers)):
            size = self.resolution
            ok = True
            for _, s in layers[start:]:
                if size < KERNEL:
                    ok = False
                    break
                size = T.conv_output_size(size, KERNEL, s)
            if ok and size == 1:
                return layers[start:]
        raise ValueError(f"no suffix of the video stack maps {self.resolution}px to 1x1")

    def audio_layers(self) -> list[tuple[int, int]]:
        chans = [max(1, c // self.scale_factor) for c in self.audio_channels]
        strides = list(FULL_AUDIO_STRIDES)
        if self.causal:
            strides[0] = 1
        return list(zip(chans, strides))

    def audio_conv_shapes(self) -> list[tuple[int, int, int]]:
        h, w = N_MELS, self.context_mode.width
        shapes = []
        for f, s in self.audio_layers():
            h, w = T.conv_output_size(h, KERNEL, s), T.conv_output_size(w, KERNEL, s)
            shapes.append((h, w, f))
        return shapes

    def video_conv_shapes(self) -> list[tuple[int, int, int]]:
        r = self.resolution
        shapes = []
        for f, s in self.video_layers():
            r = T.conv_output_size(r, KERNEL, s)
            shapes.append((r, r, f))
        return shapes


def init_params(cfg: NetConfig, seed: int = 0) -> dict[str, Tensor]:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    params: dict[str, np.ndarray] = {}

    def he(shape, fan_in):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    c_in = 1
    for i, (f, _) in enumerate(cfg.video_layers()):
        params[f"video.conv{i}.w"] = he((KERNEL, KERNEL, c_in, f), KERNEL * KERNEL * c_in)
        params[f"video.conv{i}.b"] = np.zeros(f)
        c_in = f
    if c_in != cfg.embedding:
        raise ValueError(f"video stack ends with {c_in} channels, embedding is {cfg.embedding}")
    c_in = 1
    for i, (f, _) in enumerate(cfg.audio_layers()):
        params[f"audio.conv{i}.w"] = he((KERNEL, KERNEL, c_in, f), KERNEL * KERNEL * c_in)
        params[f"audio.conv{i}.b"] = np.zeros(f)
        c_in = f
    h, w, f = cfg.audio_conv_shapes()[-1]
    flat = h * w * f
    E = cfg.embedding
    params["audio.dense.w"] = he((flat, E), flat)
    params["audio.dense.b"] = np.zeros(E)
    params["fusion.w"] = he((2 * E, cfg.k_speech), 2 * E)
    params["fusion.b"] = np.zeros(cfg.k_speech)
    params["nonspeech.w"] = he((E, cfg.k_nonspeech), E)
    params["nonspeech.b"] = np.zeros(cfg.k_nonspeech)
    params["pose.w"] = he((E, 6), E)
    params["pose.b"] = np.zeros(6)
    return {k: Tensor(v.astype(dt), requires_grad=True, name=k) for k, v in params.items()}


def video_encoder(images, params, cfg: NetConfig, trace: list | None = None) -> Tensor:
    """(N, R, R) images in [0, 1] -> (N, E) embeddings; ReLU after every conv."""
    x = T.as_tensor(np.asarray(images, dtype=cfg.dtype) if not isinstance(images, Tensor) else images)
    if x.data.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    R = cfg.resolution
    if x.shape[1:] != (R, R):
        raise ValueError(f"video input must be {R}x{R}, got {x.shape[1:]}")
    h = T.reshape(x, x.shape + (1,))
    for i, (_, s) in enumerate(cfg.video_layers()):
        h = T.relu(T.conv2d(h, params[f"video.conv{i}.w"], params[f"video.conv{i}.b"], (s, s)))
        if trace is not None:
            trace.append(h.shape[1:])
    return T.reshape(h, (h.shape[0], -1))


def audio_encoder(windows, params, cfg: NetConfig, trace: list | None = None) -> Tensor:
    """(N, 40, W) MFB windows -> (N, E); conv stack with ReLU, then a dense layer without activation."""
    x = T.as_tensor(np.asarray(windows, dtype=cfg.dtype) if not isinstance(windows, Tensor) else windows)
    if x.data.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    width = cfg.context_mode.width
    if x.shape[1:] != (N_MELS, width):
        raise ValueError(f"{cfg.context_mode.value} audio window must be {N_MELS}x{width}, got {x.shape[1:]}")
    h = T.reshape(x, x.shape + (1,))
    for i, (_, s) in enumerate(cfg.audio_layers()):
        h = T.relu(T.conv2d(h, params[f"audio.conv{i}.w"], params[f"audio.conv{i}.b"], (s, s)))
        if trace is not None:
            trace.append(h.shape[1:])
    h = T.reshape(h, (h.shape[0], -1))
    e = T.linear(h, params["audio.dense.w"], params["audio.dense.b"])
    if trace is not None:
        trace.append(e.shape[1:])
    return e


def fuse_and_regress(E_a: Tensor, E_v: Tensor, params) -> Tensor:
    return T.linear(T.concat([E_a, E_v], axis=-1), params["fusion.w"], params["fusion.b"])


def video_heads(E_v: Tensor, params) -> tuple[Tensor, Tensor]:
    x_v = T.linear(E_v, params["nonspeech.w"], params["nonspeech.b"])
    pose = T.linear(E_v, params["pose.w"], params["pose.b"])
    return x_v, pose


@dataclass
class NetOutput:
    x_av: Tensor
    x_v: Tensor
    pose: Tensor
    E_a: Tensor = field(repr=False, default=None)
    E_v: Tensor = field(repr=False, default=None)


def forward(images, windows, params, cfg: NetConfig) -> NetOutput:
    E_v = video_encoder(images, params, cfg)
    E_a = audio_encoder(windows, params, cfg)
    x_av = fuse_and_regress(E_a, E_v, params)
    x_v, pose = video_heads(E_v, params)
    return NetOutput(x_av, x_v, pose, E_a, E_v)


def predict(images, windows, params, cfg: NetConfig, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Forward pass in chunks without building a graph."""
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    outs = {"x_av": [], "x_v": [], "pose": []}
    for s in range(0, len(images), batch_size):
        o = forward(images[s:s + batch_size], windows[s:s + batch_size], frozen, cfg)
        outs["x_av"].append(o.x_av.data)
        outs["x_v"].append(o.x_v.data)
        outs["pose"].append(o.pose.data)
    return {k: np.concatenate(v) for k, v in outs.items()}


def trace_shapes(cfg: NetConfig, seed: int = 0) -> dict[str, list[tuple[int, ...]]]:
    """Intermediate extents of both encoders on one zero input."""
    params = init_params(cfg, seed)
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    vt, at = [], []
    R = cfg.resolution
    video_encoder(np.zeros((1, R, R), cfg.dtype), frozen, cfg, vt)
    audio_encoder(np.zeros((1, N_MELS, cfg.context_mode.width), cfg.dtype), frozen, cfg, at)
    return {"video": vt, "audio": at}


# ------------------------------------------------------------------ gradient check

def gradient_check(loss_fn, params: dict[str, Tensor], epsilon: float = 1e-5, per_tensor: int = 100,
                   seed: int = 0, floor: float = 1e-7, corrupt: float = 0.0, skip_kinks: bool = True,
                   stats: dict | None = None) -> dict[str, float]:
    """Max relative error between reverse-mode and central-difference gradients, per parameter tensor.

    ``loss_fn(params) -> Tensor`` must be a scalar. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. ``corrupt`` scales the analytic gradient by
    ``1 + corrupt`` as a fault-injection control. With ``skip_kinks`` a sample whose
    two probes leave any ReLU in a different on/off state straddles a kink, where the
    central difference is meaningless; it is replaced by another entry of the same
    tensor. ``stats`` (if given) receives per-tensor ``checked`` and ``kinks`` counts.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn(params).backward()
    analytic = {k: p.grad.copy() * (1.0 + corrupt) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    errors = {}

    def probe(flat, i, value):
        flat[i] = value
        with T.record_relu_masks() as masks:
            f = float(loss_fn(params).data)
        return f, masks

    for name, p in params.items():
        flat = p.data.reshape(-1)
        want = min(per_tensor, flat.size)
        worst, checked, kinks = 0.0, 0, 0
        for i in rng.permutation(flat.size):
            if checked == want:
                break
            orig = flat[i]
            fp, mp = probe(flat, i, orig + epsilon)
            fm, mm = probe(flat, i, orig - epsilon)
            flat[i] = orig
            if skip_kinks and any(not np.array_equal(a, b) for a, b in zip(mp, mm)):
                kinks += 1
                continue
            num = (fp - fm) / (2 * epsilon)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
            checked += 1
        errors[name] = worst
        if stats is not None:
            stats[name] = {"checked": checked, "kinks": kinks}
    return errors
