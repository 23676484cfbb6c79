"""Miniature video classifiers and their structural analysis.

Three architectures mirror the temporal structure of common action
recognizers at desk scale:

* ``mini_i3d``: a stride-2 temporal stem (kernel 5, padding 2) followed by
  temporal-kernel-1 stride-2 pooling, so 32 input frames contract to 8
  feature frames (effective temporal stride 4).
* ``mini_slowfast``: a wide slow pathway reading every fourth frame and a
  thin fast pathway reading all frames, fused by concatenating globally
  pooled features before the classification head.
* ``mini_csn``: channel-separated stages (depthwise 3x3x3 then pointwise
  1x1x1) with temporal stride 1 throughout, treating all frames evenly.

Frame indices are 1-based everywhere. Models classify raw [0, 255] pixels;
division by 255 happens inside ``forward`` and its chain rule inside
``input_gradient``.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .engine import (
    ConvGeometry,
    conv3d,
    conv3d_vjp,
    head,
    head_vjp,
    maxpool3d,
    maxpool3d_vjp,
    relu,
    relu_vjp,
    softmax_cross_entropy,
)
from .errors import FormatError, ModelConfigError, ShapeError
from .validation import check_clip_batch, check_labels

MINI_I3D = "mini_i3d"
MINI_SLOWFAST = "mini_slowfast"
MINI_CSN = "mini_csn"
ARCHITECTURES = (MINI_I3D, MINI_SLOWFAST, MINI_CSN)

STRIDE_AND_DOMINANT_TAP = "stride_and_dominant_tap"
PATHWAY_INTERSECTION = "pathway_intersection"
UNIFORM = "uniform"

_OFAM_MAGIC = b"OFAM"
_OFAM_VERSION = 1


@dataclass(frozen=True)
class LayerDef:
    kind: str  # "conv" | "pool" | "relu"
    geom: ConvGeometry = None
    out_channels: int = None


@dataclass(frozen=True)
class PathwaySpec:
    """A stack of layers applied to a (possibly temporally subsampled) clip."""

    name: str
    layers: tuple
    frame_step: int = 1
    frame_start: int = 1  # 1-based index of the first sampled frame


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    clip_length: int
    spatial_size: int
    in_channels: int
    num_classes: int
    pathways: tuple
    slow_sampling_period: int = 1

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelConfigError(f"unknown architecture {self.architecture!r}")
        if self.clip_length < 1 or self.spatial_size < 1 or self.num_classes < 2:
            raise ModelConfigError("clip_length/spatial_size/num_classes out of range")
        for pw in self.pathways:
            if self.clip_length % pw.frame_step:
                raise ModelConfigError(
                    f"pathway {pw.name!r} step {pw.frame_step} must divide clip length {self.clip_length}"
                )
        shapes = {pw.name: pathway_shapes(self, pw) for pw in self.pathways}
        if self.architecture == MINI_I3D:
            conv0, pool0 = _stem_geometries(self)
            if conv0.stride[0] * pool0.stride[0] != 4:
                raise ModelConfigError("mini_i3d stem must have effective temporal stride 4")
        if self.architecture == MINI_SLOWFAST:
            slow = self.pathway("slow")
            if slow.frame_step != self.slow_sampling_period:
                raise ModelConfigError("slow pathway step must equal the sampling period")
            n_slow = len(range(slow.frame_start - 1, self.clip_length, slow.frame_step))
            if n_slow != self.clip_length // self.slow_sampling_period:
                raise ModelConfigError("slow pathway must consume clip_length/period frames")
        if self.architecture == MINI_CSN:
            conv0, pool0 = _stem_geometries(self)
            if conv0.stride[0] != 1 or (pool0 is not None and pool0.stride[0] != 1):
                raise ModelConfigError("mini_csn front layers must keep temporal stride 1")
        del shapes  # computed for validation only

    def pathway(self, name: str) -> PathwaySpec:
        for pw in self.pathways:
            if pw.name == name:
                return pw
        raise ModelConfigError(f"no pathway named {name!r}")

    @property
    def head_channels(self) -> int:
        return sum(pathway_shapes(self, pw)[-1][0] for pw in self.pathways)


def _stem_geometries(spec):
    """First conv geometry and first pool geometry (if any) of the first pathway."""
    conv0 = pool0 = None
    for layer in spec.pathways[0].layers:
        if layer.kind == "conv" and conv0 is None:
            conv0 = layer.geom
        if layer.kind == "pool" and pool0 is None:
            pool0 = layer.geom
            break
    if conv0 is None:
        raise ModelConfigError("first pathway must start with a convolution")
    return conv0, pool0


def pathway_shapes(spec: ModelSpec, pw: PathwaySpec):
    """Per-layer output shapes (c, t, h, w); validates the geometry chain."""
    t = len(range(pw.frame_start - 1, spec.clip_length, pw.frame_step))
    shape = (spec.in_channels, t, spec.spatial_size, spec.spatial_size)
    out = []
    for layer in pw.layers:
        c, t, h, w = shape
        if layer.kind == "conv":
            if c % layer.geom.groups:
                raise ModelConfigError(f"groups {layer.geom.groups} must divide channels {c}")
            shape = (layer.out_channels,) + layer.geom.output_shape((t, h, w))
        elif layer.kind == "pool":
            shape = (c,) + layer.geom.output_shape((t, h, w))
        elif layer.kind != "relu":
            raise ModelConfigError(f"unknown layer kind {layer.kind!r}")
        out.append(shape)
    return out


def mini_i3d_spec(clip_length=32, spatial_size=32, in_channels=1, num_classes=4, base_channels=8):
    layers = (
        LayerDef("conv", ConvGeometry((5, 7, 7), (2, 2, 2), (2, 3, 3)), base_channels),
        LayerDef("relu"),
        LayerDef("pool", ConvGeometry((1, 3, 3), (2, 2, 2), (0, 1, 1))),
        LayerDef("conv", ConvGeometry((3, 3, 3), (1, 1, 1), (1, 1, 1)), 2 * base_channels),
        LayerDef("relu"),
        LayerDef("pool", ConvGeometry((1, 2, 2), (1, 2, 2), (0, 0, 0))),
        LayerDef("conv", ConvGeometry((3, 3, 3), (1, 1, 1), (1, 1, 1)), 2 * base_channels),
        LayerDef("relu"),
    )
    return ModelSpec(MINI_I3D, clip_length, spatial_size, in_channels, num_classes,
                     (PathwaySpec("main", layers),))


def mini_slowfast_spec(clip_length=32, spatial_size=32, in_channels=1, num_classes=4,
                       slow_channels=16, fast_channels=2, slow_sampling_period=4):
    slow = PathwaySpec(
        "slow",
        (
            LayerDef("conv", ConvGeometry((3, 7, 7), (1, 2, 2), (1, 3, 3)), slow_channels),
            LayerDef("relu"),
            LayerDef("pool", ConvGeometry((1, 3, 3), (1, 2, 2), (0, 1, 1))),
            LayerDef("conv", ConvGeometry((3, 3, 3), (1, 1, 1), (1, 1, 1)), slow_channels),
            LayerDef("relu"),
            LayerDef("pool", ConvGeometry((1, 2, 2), (1, 2, 2), (0, 0, 0))),
        ),
        frame_step=slow_sampling_period,
        frame_start=1,
    )
    fast = PathwaySpec(
        "fast",
        (
            LayerDef("conv", ConvGeometry((3, 7, 7), (1, 4, 4), (1, 3, 3)), fast_channels),
            LayerDef("relu"),
            LayerDef("pool", ConvGeometry((1, 3, 3), (1, 2, 2), (0, 1, 1))),
            LayerDef("conv", ConvGeometry((3, 3, 3), (1, 1, 1), (1, 1, 1)), 2 * fast_channels),
            LayerDef("relu"),
            LayerDef("pool", ConvGeometry((1, 2, 2), (1, 2, 2), (0, 0, 0))),
        ),
    )
    return ModelSpec(MINI_SLOWFAST, clip_length, spatial_size, in_channels, num_classes,
                     (slow, fast), slow_sampling_period=slow_sampling_period)


def mini_csn_spec(clip_length=32, spatial_size=32, in_channels=1, num_classes=4, base_channels=8):
    layers = (
        LayerDef("conv", ConvGeometry((3, 3, 3), (1, 1, 1), (1, 1, 1), groups=in_channels), in_channels),
        LayerDef("conv", ConvGeometry((1, 1, 1), (1, 1, 1), (0, 0, 0)), base_channels),
        LayerDef("relu"),
        LayerDef("pool", ConvGeometry((1, 3, 3), (1, 2, 2), (0, 1, 1))),
        LayerDef("conv", ConvGeometry((3, 3, 3), (1, 2, 2), (1, 1, 1), groups=base_channels), base_channels),
        LayerDef("conv", ConvGeometry((1, 1, 1), (1, 1, 1), (0, 0, 0)), 2 * base_channels),
        LayerDef("relu"),
        LayerDef("pool", ConvGeometry((1, 2, 2), (1, 2, 2), (0, 0, 0))),
    )
    return ModelSpec(MINI_CSN, clip_length, spatial_size, in_channels, num_classes,
                     (PathwaySpec("main", layers),))


def spec_for(architecture: str, **kwargs) -> ModelSpec:
    builder = {MINI_I3D: mini_i3d_spec, MINI_SLOWFAST: mini_slowfast_spec, MINI_CSN: mini_csn_spec}
    if architecture not in builder:
        raise ModelConfigError(f"unknown architecture {architecture!r}")
    return builder[architecture](**kwargs)


@dataclass
class Model:
    """A spec plus named parameters; treat as immutable after construction."""

    spec: ModelSpec
    params: dict
    history: dict = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        digest = hashlib.sha256()
        digest.update(_spec_json(self.spec).encode())
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return digest.hexdigest()[:12]

    # -- inference ---------------------------------------------------------
    def forward(self, clips) -> np.ndarray:
        logits, _ = self._forward(clips, cache=False)
        return logits

    def predict(self, clips) -> np.ndarray:
        return self.forward(clips).argmax(axis=1) + 1

    def predict_proba(self, clips) -> np.ndarray:
        logits = self.forward(clips)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)

    def input_gradient(self, clips, labels) -> np.ndarray:
        return self.forward_and_input_gradient(clips, labels)[1]

    def forward_and_input_gradient(self, clips, labels):
        """Logits plus the exact raw-pixel-domain gradient of the summed loss."""
        clips = check_clip_batch(clips, pixel_range=False)
        labels = check_labels(labels, clips.shape[0], self.spec.num_classes)
        logits, state = self._forward(clips, cache=True)
        _, grad_logits = softmax_cross_entropy(logits, labels)
        grad = self._backward(grad_logits, state, want_params=False)[0]
        return logits, grad

    # -- internals ---------------------------------------------------------
    def _check_clips(self, clips):
        clips = check_clip_batch(clips, pixel_range=False)
        expected = (self.spec.in_channels, self.spec.clip_length,
                    self.spec.spatial_size, self.spec.spatial_size)
        if clips.shape[1:] != expected:
            raise ShapeError(f"clip shape {clips.shape[1:]} does not match model {expected}")
        return clips

    def _forward(self, clips, cache):
        clips = self._check_clips(clips)
        x = clips * np.float32(1.0 / 255.0)
        pooled_feats, records, out_shapes = [], [], []
        for pw in self.spec.pathways:
            xp = x if pw.frame_step == 1 else x[:, :, pw.frame_start - 1::pw.frame_step]
            record = [] if cache else None
            out = self._run_pathway(pw, xp, record)
            pooled_feats.append(out.mean(axis=(2, 3, 4)))
            records.append(record)
            out_shapes.append(out.shape)
        feat = np.concatenate(pooled_feats, axis=1)
        feat5 = feat.reshape(feat.shape + (1, 1, 1))
        logits = head(feat5, self.params["head.weight"], self.params["head.bias"])
        state = {"records": records, "out_shapes": out_shapes, "feat5": feat5, "x_shape": x.shape}
        return logits, state

    def _run_pathway(self, pw, x, record):
        for idx, layer in enumerate(pw.layers):
            if layer.kind == "conv":
                w = self.params[f"{pw.name}.conv{idx}.weight"]
                b = self.params[f"{pw.name}.conv{idx}.bias"]
                if record is not None:
                    record.append(("conv", idx, x, None))
                x = conv3d(x, w, b, layer.geom)
            elif layer.kind == "pool":
                out, arg = maxpool3d(x, layer.geom)
                if record is not None:
                    record.append(("pool", idx, x.shape, arg))
                x = out
            else:
                if record is not None:
                    record.append(("relu", idx, x, None))
                x = relu(x)
        return x

    def _backward(self, grad_logits, state, want_params, need_input=True):
        """Reverse-order composition of the layer vjps."""
        param_grads = {}
        feat5 = state["feat5"]
        gfeat5, gw, gb = head_vjp(feat5, self.params["head.weight"], grad_logits)
        if want_params:
            param_grads["head.weight"] = gw
            param_grads["head.bias"] = gb
        gfeat = gfeat5.reshape(feat5.shape[:2])
        grad_x = np.zeros(state["x_shape"], dtype=np.float32) if need_input else None
        offset = 0
        for pw, record, out_shape in zip(self.spec.pathways, state["records"], state["out_shapes"]):
            c = out_shape[1]
            grad_pooled = gfeat[:, offset:offset + c]
            offset += c
            count = np.float32(np.prod(out_shape[2:]))
            g = np.empty(out_shape, dtype=np.float32)
            g[:] = (grad_pooled / count)[:, :, None, None, None]
            g, pgrads = self._backward_pathway(pw, record, g, want_params, need_input)
            if want_params:
                param_grads.update(pgrads)
            if need_input:
                if pw.frame_step == 1:
                    grad_x += g
                else:
                    grad_x[:, :, pw.frame_start - 1::pw.frame_step] += g
        if need_input:
            grad_x *= np.float32(1.0 / 255.0)
        return grad_x, param_grads

    def _backward_pathway(self, pw, record, g, want_params, need_input):
        param_grads = {}
        for pos in range(len(record) - 1, -1, -1):
            kind, idx, saved, aux = record[pos]
            layer = pw.layers[idx]
            if kind == "conv":
                last_needed = need_input or pos > 0
                gi, gk, gbias = conv3d_vjp(
                    saved, self.params[f"{pw.name}.conv{idx}.weight"], layer.geom, g,
                    need_input=last_needed, need_kernel=want_params, need_bias=want_params,
                )
                if want_params:
                    param_grads[f"{pw.name}.conv{idx}.weight"] = gk
                    param_grads[f"{pw.name}.conv{idx}.bias"] = gbias
                g = gi
            elif kind == "pool":
                g = maxpool3d_vjp(aux, g, saved)
            else:
                g = relu_vjp(saved, g)
        return g, param_grads


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Initialize parameters with fan-in-scaled uniform weights and zero biases."""
    gen = rngmod.stream(seed, rngmod.PARAMS)
    params = {}
    for pw in spec.pathways:
        cin = spec.in_channels
        for idx, layer in enumerate(pw.layers):
            if layer.kind != "conv":
                continue
            geom = layer.geom
            fan_in = (cin // geom.groups) * int(np.prod(geom.kernel))
            bound = 1.0 / np.sqrt(fan_in)
            shape = (layer.out_channels, cin // geom.groups) + tuple(geom.kernel)
            params[f"{pw.name}.conv{idx}.weight"] = gen.uniform(-bound, bound, shape).astype(np.float32)
            params[f"{pw.name}.conv{idx}.bias"] = np.zeros(layer.out_channels, dtype=np.float32)
            cin = layer.out_channels
    c_total = spec.head_channels
    bound = 1.0 / np.sqrt(c_total)
    params["head.weight"] = gen.uniform(-bound, bound, (spec.num_classes, c_total)).astype(np.float32)
    params["head.bias"] = np.zeros(spec.num_classes, dtype=np.float32)
    return Model(spec=spec, params=params)


def zero_pathway(model: Model, pathway_name: str) -> Model:
    """Copy of the model with one pathway's weights and biases set to zero."""
    model.spec.pathway(pathway_name)
    params = {k: (np.zeros_like(v) if k.startswith(pathway_name + ".") else v.copy())
              for k, v in model.params.items()}
    return Model(spec=model.spec, params=params, history=dict(model.history))


def _first_conv_name(model: Model) -> str:
    pw = model.spec.pathways[0]
    for idx, layer in enumerate(pw.layers):
        if layer.kind == "conv":
            return f"{pw.name}.conv{idx}"
    raise ModelConfigError("model has no convolution layer")


def temporal_weight_profile(model: Model) -> np.ndarray:
    """Mean |weight| of the first convolution per temporal tap."""
    w = model.params[f"{_first_conv_name(model)}.weight"]
    return np.abs(w).mean(axis=(0, 1, 3, 4)).astype(np.float64)


def inject_temporal_asymmetry(model: Model, dominant_tap: int, ratio: float) -> Model:
    """Rescale first-layer taps so ``dominant_tap`` dominates by >= ``ratio``.

    The dominant tap is scaled up until its mean |weight| reaches ``ratio``
    times the largest other tap (never scaled down), then all taps are
    rescaled together so the summed per-tap mean square — a proxy for the
    layer's output variance — is preserved.
    """
    if ratio <= 1:
        raise ValueError(f"ratio must exceed 1, got {ratio}")
    name = _first_conv_name(model)
    w = model.params[f"{name}.weight"].copy()
    kt = w.shape[2]
    if not 1 <= dominant_tap <= kt:
        raise ValueError(f"dominant_tap {dominant_tap} outside [1, {kt}]")
    profile = np.abs(w).mean(axis=(0, 1, 3, 4))
    tap = dominant_tap - 1
    others = np.delete(profile, tap)
    if profile[tap] <= 0 or others.max() <= 0:
        raise ValueError("first-layer taps must carry non-zero weight mass")
    boost = max(1.0, ratio * float(others.max()) / float(profile[tap]))
    power_before = float((w ** 2).mean(axis=(0, 1, 3, 4)).sum())
    w[:, :, tap] *= np.float32(boost)
    power_after = float((w ** 2).mean(axis=(0, 1, 3, 4)).sum())
    w *= np.float32(np.sqrt(power_before / power_after))
    params = {k: v.copy() for k, v in model.params.items()}
    params[f"{name}.weight"] = w
    return Model(spec=model.spec, params=params, history=dict(model.history))


@dataclass(frozen=True)
class VulnerablePrediction:
    """Sorted 1-based frame indices the architecture emphasizes, with period."""

    indices: tuple
    period: int
    mechanism: str


def predict_vulnerable_frames(spec: ModelSpec, dominant_tap: int = None) -> VulnerablePrediction:
    """Frame indices structurally emphasized by the given architecture.

    mini_i3d: the stem conv (stride st, padding pt) followed by stride-sp
    temporal subsampling keeps conv frames j = (m-1)*sp + 1; with the first
    layer dominated by tap d, feature frame m emphasizes input index
    (j-1)*st - pt + d. mini_slowfast: the frames both pathways consume, i.e.
    the slow samples. mini_csn: all frames, uniformly.
    """
    t = spec.clip_length
    if spec.architecture == MINI_I3D:
        conv0, pool0 = _stem_geometries(spec)
        if dominant_tap is None:
            raise ValueError("mini_i3d prediction requires the dominant temporal tap")
        if not 1 <= dominant_tap <= conv0.kernel[0]:
            raise ValueError(f"dominant_tap {dominant_tap} outside [1, {conv0.kernel[0]}]")
        st, pt = conv0.stride[0], conv0.padding[0]
        sp = pool0.stride[0] if pool0 is not None else 1
        t_conv = (t + 2 * pt - conv0.kernel[0]) // st + 1
        n_feature = (t_conv - pool0.kernel[0]) // sp + 1 if pool0 is not None else t_conv
        emphasized = []
        for m in range(1, n_feature + 1):
            j = (m - 1) * sp + 1
            i = (j - 1) * st - pt + dominant_tap
            if 1 <= i <= t:
                emphasized.append(i)
        return VulnerablePrediction(tuple(emphasized), period=st * sp,
                                    mechanism=STRIDE_AND_DOMINANT_TAP)
    if spec.architecture == MINI_SLOWFAST:
        slow = spec.pathway("slow")
        indices = tuple(range(slow.frame_start, t + 1, slow.frame_step))
        return VulnerablePrediction(indices, period=slow.frame_step,
                                    mechanism=PATHWAY_INTERSECTION)
    if spec.architecture == MINI_CSN:
        return VulnerablePrediction(tuple(range(1, t + 1)), period=1, mechanism=UNIFORM)
    raise ModelConfigError(f"unsupported architecture {spec.architecture!r}")


# -- serialization ----------------------------------------------------------

def _spec_json(spec: ModelSpec) -> str:
    return json.dumps(asdict(spec), sort_keys=True)


def _spec_from_dict(d: dict) -> ModelSpec:
    pathways = tuple(
        PathwaySpec(
            name=pw["name"],
            layers=tuple(
                LayerDef(
                    kind=layer["kind"],
                    geom=None if layer["geom"] is None else ConvGeometry(
                        kernel=tuple(layer["geom"]["kernel"]),
                        stride=tuple(layer["geom"]["stride"]),
                        padding=tuple(layer["geom"]["padding"]),
                        groups=layer["geom"]["groups"],
                    ),
                    out_channels=layer["out_channels"],
                )
                for layer in pw["layers"]
            ),
            frame_step=pw["frame_step"],
            frame_start=pw["frame_start"],
        )
        for pw in d["pathways"]
    )
    return ModelSpec(
        architecture=d["architecture"],
        clip_length=d["clip_length"],
        spatial_size=d["spatial_size"],
        in_channels=d["in_channels"],
        num_classes=d["num_classes"],
        pathways=pathways,
        slow_sampling_period=d["slow_sampling_period"],
    )


def save_model(path, model: Model) -> None:
    """Write the OFAM binary format; parameters round-trip bit-exactly."""
    spec_blob = _spec_json(model.spec).encode()
    with open(path, "wb") as fh:
        fh.write(_OFAM_MAGIC)
        fh.write(struct.pack("<H", _OFAM_VERSION))
        fh.write(struct.pack("<I", len(spec_blob)))
        fh.write(spec_blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _OFAM_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {_OFAM_MAGIC!r}", byte_offset=0)
    offset = 4

    def take(count, what):
        nonlocal offset
        if offset + count > len(data):
            raise FormatError(f"truncated while reading {what}", byte_offset=len(data))
        chunk = data[offset:offset + count]
        offset += count
        return chunk

    (version,) = struct.unpack("<H", take(2, "version"))
    if version != _OFAM_VERSION:
        raise FormatError(f"unsupported version {version}", byte_offset=4)
    (spec_len,) = struct.unpack("<I", take(4, "spec length"))
    spec = _spec_from_dict(json.loads(take(spec_len, "spec").decode()))
    (n_params,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        count = int(np.prod(dims)) if ndim else 1
        raw = take(4 * count, f"data for {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if offset != len(data):
        raise FormatError("trailing bytes after final parameter", byte_offset=offset)
    return Model(spec=spec, params=params)
