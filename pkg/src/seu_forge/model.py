"""Serializable encoder-decoder graph, p-indexed parameter sets, toy data.

Model container format (little-endian throughout):

    bytes 0-7    magic b"SEUFORGE"
    u32          format version (currently 1)
    u64          manifest length in bytes
    ...          JSON manifest (layers, p-index table with blob offsets,
                 encodings, quantization tables, bn epsilon, provenance)
    ...          raw parameter blobs, little-endian IEEE-754 / two's complement

Parameter sets are indexed p1..pN contiguously in graph topological order,
kernels before biases within a layer (gamma, beta, mu, sigma within a BN
layer). The index table is rebuilt by every graph transform.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import ENCODINGS, ShapeError, Tensor

MAGIC = b"SEUFORGE"
FORMAT_VERSION = 1

ROLES = ("conv_kernel", "conv_bias", "convtr_kernel", "convtr_bias",
         "bn_gamma", "bn_beta", "bn_mu", "bn_sigma")
# The six trainable roles campaigns target by default (mu/sigma are stored
# but not treated as fault targets unless asked for explicitly).
DEFAULT_TARGET_ROLES = ("conv_kernel", "conv_bias", "convtr_kernel",
                        "convtr_bias", "bn_gamma", "bn_beta")

_LAYER_ROLES = {
    "conv2d": ("conv_kernel", "conv_bias"),
    "output_conv": ("conv_kernel", "conv_bias"),
    "conv2d_transpose": ("convtr_kernel", "convtr_bias"),
    "batchnorm": ("bn_gamma", "bn_beta", "bn_mu", "bn_sigma"),
}

DEFAULT_BN_EPSILON = 1e-3


class FormatError(ValueError):
    """Corrupt, truncated, or incompatible model container."""


@dataclass
class LayerSpec:
    kind: str
    name: str
    hyperparams: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)


@dataclass
class ParamSet:
    index: int          # 1-based p-index
    layer: str          # owner layer name
    role: str
    tensor: Tensor

    @property
    def width(self) -> int:
        return {"f32": 32, "i8": 8, "i32": 32}[self.tensor.encoding]


class ModelGraph:
    """Ordered layer graph plus p-indexed parameter sets.

    Immutable by convention after construction: transforms return new graphs,
    and fault injection operates on a working copy (see ``copy``).
    """

    def __init__(self, layers, params, class_count, metadata=None):
        self.layers = list(layers)
        self.params = list(params)
        self.class_count = int(class_count)
        self.metadata = metadata if metadata is not None else {}
        self.metadata.setdefault("bn_epsilon", DEFAULT_BN_EPSILON)
        self.metadata.setdefault("flags", {"pruned": False, "folded": False, "quantized": False})
        self.metadata.setdefault("provenance", [])
        self._by_name = {l.name: l for l in self.layers}
        if len(self._by_name) != len(self.layers):
            raise ValueError("duplicate layer names")
        self._validate_dag()
        self._by_index = {p.index: p for p in self.params}
        if sorted(self._by_index) != list(range(1, len(self.params) + 1)):
            raise ValueError("p-indices must be contiguous 1..N")
        self._by_layer = {}
        for p in self.params:
            self._by_layer.setdefault(p.layer, {})[p.role] = p
        self._validate_param_complements()

    def _validate_param_complements(self):
        for layer in self.layers:
            want = _LAYER_ROLES.get(layer.kind, ())
            have = set(self._by_layer.get(layer.name, {}))
            missing = [r for r in want if r not in have]
            if missing:
                raise ValueError(f"layer {layer.name} ({layer.kind}) is missing "
                                 f"parameter sets {missing}")
        out = self.layers[-1] if self.layers else None
        if out is not None and out.kind == "output_conv":
            filters = self._by_layer[out.name]["conv_kernel"].tensor.shape[3]
            if filters != self.class_count:
                raise ValueError(f"output conv has {filters} filters but "
                                 f"class_count is {self.class_count}")

    def _validate_dag(self):
        seen = {"input"}
        for layer in self.layers:
            for ref in layer.inputs:
                if ref not in seen:
                    raise ValueError(f"layer {layer.name} references undefined input {ref!r}")
            seen.add(layer.name)

    # -- lookups ---------------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no layer named {name!r}") from None

    def param(self, index: int) -> ParamSet:
        try:
            return self._by_index[index]
        except KeyError:
            raise KeyError(f"no parameter set p{index} (model has p1..p{len(self.params)})") from None

    def layer_params(self, name: str) -> dict:
        return self._by_layer.get(name, {})

    def params_of(self, roles=None, layers=None):
        roles = set(roles) if roles is not None else None
        layers = set(layers) if layers is not None else None
        return [p for p in self.params
                if (roles is None or p.role in roles)
                and (layers is None or p.layer in layers)]

    @property
    def flags(self) -> dict:
        return self.metadata["flags"]

    @property
    def bn_epsilon(self) -> float:
        return float(self.metadata["bn_epsilon"])

    @property
    def output_layer(self) -> LayerSpec:
        return self.layers[-1]

    def consumers(self, name: str):
        return [l for l in self.layers if name in l.inputs]

    # -- copying ---------------------------------------------------------

    def copy(self) -> "ModelGraph":
        """Deep-copies parameter buffers; layer specs are rebuilt shallowly."""
        layers = [LayerSpec(l.kind, l.name, dict(l.hyperparams), list(l.inputs))
                  for l in self.layers]
        params = [ParamSet(p.index, p.layer, p.role, p.tensor.copy()) for p in self.params]
        return ModelGraph(layers, params, self.class_count, json.loads(json.dumps(self.metadata)))

    def with_provenance(self, entry: dict) -> "ModelGraph":
        self.metadata["provenance"].append(entry)
        return self


def assign_param_indices(params):
    """Renumber a parameter list (already in layer order) to p1..pN."""
    return [ParamSet(i + 1, p.layer, p.role, p.tensor) for i, p in enumerate(params)]


def model_hash(graph: ModelGraph) -> str:
    """sha256 over the p-index-ordered raw parameter buffers."""
    h = hashlib.sha256()
    for p in graph.params:
        h.update(f"{p.index}:{p.role}:{p.tensor.encoding}:{p.tensor.shape}".encode())
        h.update(np.ascontiguousarray(p.tensor.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# U-Net builder


def _zeros(shape, encoding="f32"):
    return Tensor.from_array(np.zeros(shape, dtype=ENCODINGS[encoding]), encoding)


class _Namer:
    def __init__(self):
        self.counts = {}

    def next(self, base: str) -> str:
        n = self.counts.get(base, 0)
        self.counts[base] = n + 1
        return base if n == 0 else f"{base}_{n}"


def build_unet(levels: int, base_filters: int, class_count: int,
               input_channels: int) -> ModelGraph:
    """Toy-scale U-Net: per level two 3x3 conv+BN+ReLU, 2x2 maxpool per
    encoder level, 2x2/2 transposed conv plus skip concat per decoder level,
    1x1 output conv. Filter counts double per level. Parameters are
    zero-initialized; see generate_toy_weights.
    """
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    if base_filters < 2:
        raise ValueError(f"base_filters must be >= 2, got {base_filters}")
    if class_count < 1 or input_channels < 1:
        raise ValueError("class_count and input_channels must be positive")

    names = _Namer()
    layers, params = [], []

    def add_param(layer_name, role, tensor):
        params.append(ParamSet(0, layer_name, role, tensor))

    def conv_block(prev, filters, cin):
        cname = names.next("conv2D")
        layers.append(LayerSpec("conv2d", cname,
                                {"kernel_size": 3, "stride": 1, "padding": "same",
                                 "filters": filters}, [prev]))
        add_param(cname, "conv_kernel", _zeros((3, 3, cin, filters)))
        add_param(cname, "conv_bias", _zeros((filters,)))
        bname = names.next("bn")
        layers.append(LayerSpec("batchnorm", bname, {}, [cname]))
        for role in ("bn_gamma", "bn_beta", "bn_mu", "bn_sigma"):
            add_param(bname, role, _zeros((filters,)))
        rname = names.next("relu")
        layers.append(LayerSpec("relu", rname, {}, [bname]))
        return rname

    prev, channels = "input", input_channels
    skips = []
    for level in range(levels):
        filters = base_filters * (1 << level)
        prev = conv_block(prev, filters, channels)
        prev = conv_block(prev, filters, filters)
        channels = filters
        skips.append(prev)
        pname = names.next("maxpool")
        layers.append(LayerSpec("maxpool", pname, {"window": 2, "stride": 2}, [prev]))
        prev = pname

    filters = base_filters * (1 << levels)
    prev = conv_block(prev, filters, channels)
    prev = conv_block(prev, filters, filters)
    channels = filters

    for level in reversed(range(levels)):
        filters = base_filters * (1 << level)
        tname = names.next("conv2Dtr")
        layers.append(LayerSpec("conv2d_transpose", tname,
                                {"kernel_size": 2, "stride": 2, "filters": filters}, [prev]))
        add_param(tname, "convtr_kernel", _zeros((2, 2, channels, filters)))
        add_param(tname, "convtr_bias", _zeros((filters,)))
        xname = names.next("concat")
        layers.append(LayerSpec("concat", xname, {}, [skips[level], tname]))
        channels = filters * 2
        prev = conv_block(xname, filters, channels)
        prev = conv_block(prev, filters, filters)
        channels = filters

    oname = names.next("conv2D")
    layers.append(LayerSpec("output_conv", oname,
                            {"kernel_size": 1, "stride": 1, "padding": "same",
                             "filters": class_count}, [prev]))
    add_param(oname, "conv_kernel", _zeros((1, 1, channels, class_count)))
    add_param(oname, "conv_bias", _zeros((class_count,)))

    metadata = {
        "bn_epsilon": DEFAULT_BN_EPSILON,
        "flags": {"pruned": False, "folded": False, "quantized": False},
        "provenance": [{"transform": "build_unet",
                        "levels": levels, "base_filters": base_filters,
                        "class_count": class_count, "input_channels": input_channels}],
        "input_channels": input_channels,
    }
    return ModelGraph(layers, assign_param_indices(params), class_count, metadata)


def unet_parameter_count(levels: int, base_filters: int, class_count: int,
                         input_channels: int) -> int:
    """Closed-form element count of build_unet output (all eight roles)."""
    total = 0
    cin = input_channels
    enc = []
    for level in range(levels + 1):
        f = base_filters * (1 << level)
        total += 9 * cin * f + f + 4 * f      # conv1 + bias + bn
        total += 9 * f * f + f + 4 * f        # conv2 + bias + bn
        enc.append(f)
        cin = f
    for level in reversed(range(levels)):
        f = base_filters * (1 << level)
        total += 4 * cin * f + f              # transposed conv
        total += 9 * (2 * f) * f + f + 4 * f  # conv after concat
        total += 9 * f * f + f + 4 * f
        cin = f
    total += cin * class_count + class_count  # 1x1 output conv
    return total


# ---------------------------------------------------------------------------
# shape inference


def infer_shapes(graph: ModelGraph, height: int, width: int, batch: int = 1) -> dict:
    """Forward shape propagation; raises ShapeError on any inconsistency."""
    shapes = {"input": (batch, height, width, graph.metadata.get("input_channels", 1))}
    for layer in graph.layers:
        ins = [shapes[r] for r in layer.inputs]
        if layer.kind in ("conv2d", "output_conv"):
            n, h, w, c = ins[0]
            k = graph.layer_params(layer.name)["conv_kernel"].tensor.shape
            if k[2] != c:
                raise ShapeError(f"{layer.name}: input channels {c} != kernel Cin {k[2]}")
            s = layer.hyperparams.get("stride", 1)
            if layer.hyperparams.get("padding", "same") == "same":
                oh, ow = -(-h // s), -(-w // s)
            else:
                oh, ow = (h - k[0]) // s + 1, (w - k[1]) // s + 1
            shapes[layer.name] = (n, oh, ow, k[3])
        elif layer.kind == "conv2d_transpose":
            n, h, w, c = ins[0]
            k = graph.layer_params(layer.name)["convtr_kernel"].tensor.shape
            if k[2] != c:
                raise ShapeError(f"{layer.name}: input channels {c} != kernel Cin {k[2]}")
            s = layer.hyperparams.get("stride", 2)
            shapes[layer.name] = (n, h * s, w * s, k[3])
        elif layer.kind == "batchnorm":
            n, h, w, c = ins[0]
            g = graph.layer_params(layer.name)["bn_gamma"].tensor.shape[0]
            if g != c:
                raise ShapeError(f"{layer.name}: input channels {c} != BN channels {g}")
            shapes[layer.name] = ins[0]
        elif layer.kind == "relu":
            shapes[layer.name] = ins[0]
        elif layer.kind == "maxpool":
            n, h, w, c = ins[0]
            if h % 2 or w % 2:
                raise ShapeError(f"{layer.name}: H,W must be even, got {(h, w)}")
            shapes[layer.name] = (n, h // 2, w // 2, c)
        elif layer.kind == "concat":
            (n, h, w, ca), (n2, h2, w2, cb) = ins
            if (n, h, w) != (n2, h2, w2):
                raise ShapeError(f"{layer.name}: N,H,W mismatch {ins[0]} vs {ins[1]}")
            shapes[layer.name] = (n, h, w, ca + cb)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return shapes


# ---------------------------------------------------------------------------
# toy weights and calibration data


def generate_toy_weights(graph: ModelGraph, seed: int, *,
                         kernel_scale: float = 1.0,
                         positive_bias_fraction=0.5,
                         gamma_range=(0.5, 1.5),
                         gamma_mode: str = "compensated",
                         sigma_range=(0.01, 1.0)) -> ModelGraph:
    """Deterministic desk-scale substitute for trained weights.

    Kernels are uniform with fan-in-scaled bounds (+-kernel_scale*sqrt(3/fan))
    so activation magnitudes stay tame at any depth. Bias-like parameters
    (conv/convtr biases and BN betas) get magnitudes in (0.02, 0.9) with the
    requested fraction of positive signs. BN sigma lives in sigma_range,
    reproducing the 1/sqrt(variance) amplification regime.

    gamma_mode "compensated" (default) draws gamma = u*sqrt(sigma+eps) with
    u ~ uniform(gamma_range), emulating a trained network where the BN
    multiplier u stays near one regardless of sigma; "raw" draws gamma from
    gamma_range directly (used to seed gammas into specific exponent ranges,
    e.g. (1, 2), at the price of unnormalized dynamics).

    positive_bias_fraction may be a float, a {layer_name: fraction} mapping,
    or "span" (deterministically shuffled linspace(0, 1) over the bias-bearing
    layers, giving per-layer ratios that span the full range).
    """
    if gamma_mode not in ("compensated", "raw"):
        raise ValueError(f"unknown gamma_mode {gamma_mode!r}")
    if graph.flags.get("quantized"):
        raise ValueError("cannot reseed weights of a quantized graph")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = graph.copy()
    eps = out.bn_epsilon

    bias_layers = sorted({p.layer for p in out.params
                          if p.role in ("conv_bias", "convtr_bias", "bn_beta")},
                         key=lambda n: [l.name for l in out.layers].index(n))
    if positive_bias_fraction == "span":
        fractions = np.linspace(0.0, 1.0, len(bias_layers))
        rng.shuffle(fractions)
        frac_by_layer = dict(zip(bias_layers, fractions))
    elif isinstance(positive_bias_fraction, dict):
        frac_by_layer = {n: float(positive_bias_fraction.get(n, 0.5)) for n in bias_layers}
    else:
        frac_by_layer = {n: float(positive_bias_fraction) for n in bias_layers}

    def signed_magnitudes(n, fraction):
        mags = rng.uniform(0.02, 0.9, size=n)
        signs = np.where(rng.uniform(size=n) < fraction, 1.0, -1.0)
        return (mags * signs).astype(np.float32)

    pending = {}  # (layer, role) -> values; gamma compensation needs sigma
    for p in out.params:
        shape = p.tensor.shape
        if p.role in ("conv_kernel", "convtr_kernel"):
            fan_in = int(np.prod(shape[:3]))
            bound = kernel_scale * np.sqrt(3.0 / fan_in)
            vals = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif p.role in ("conv_bias", "convtr_bias", "bn_beta"):
            vals = signed_magnitudes(p.tensor.size, frac_by_layer[p.layer]).reshape(shape)
        elif p.role == "bn_gamma":
            vals = rng.uniform(*gamma_range, size=shape).astype(np.float32)
            if gamma_mode == "compensated":
                pending[(p.layer, "bn_gamma")] = vals
        elif p.role == "bn_mu":
            vals = rng.uniform(-0.2, 0.2, size=shape).astype(np.float32)
        elif p.role == "bn_sigma":
            vals = rng.uniform(*sigma_range, size=shape).astype(np.float32)
            u = pending.pop((p.layer, "bn_gamma"), None)
            if u is not None:
                gamma = out.layer_params(p.layer)["bn_gamma"].tensor
                gamma.data[...] = (u * np.sqrt(vals + np.float32(eps))).astype(np.float32)
        else:
            raise ValueError(f"unhandled role {p.role}")
        p.tensor.data[...] = vals

    out.metadata.update({"prng": "numpy-pcg64", "seed": int(seed)})
    out.with_provenance({"transform": "generate_toy_weights", "seed": int(seed),
                         "kernel_scale": kernel_scale,
                         "positive_bias_fraction": (positive_bias_fraction
                                                    if not isinstance(positive_bias_fraction, dict)
                                                    else "per-layer"),
                         "gamma_range": list(gamma_range), "gamma_mode": gamma_mode,
                         "sigma_range": list(sigma_range)})
    return out


def _bilinear_upsample(coarse: np.ndarray, height: int, width: int) -> np.ndarray:
    n, h, w, c = coarse.shape
    ys = np.linspace(0.0, h - 1.0, height)
    xs = np.linspace(0.0, w - 1.0, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None, None]
    fx = (xs - x0)[None, None, :, None]
    g = coarse
    top = g[:, y0][:, :, x0] * (1 - fx) + g[:, y0][:, :, x1] * fx
    bot = g[:, y1][:, :, x0] * (1 - fx) + g[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def generate_calibration_set(shape, count: int = 10, seed: int = 0,
                             class_count: int = None):
    """Deterministic band-limited random inputs plus rule-derived label maps.

    shape is (H, W, C). Labels come from a fixed linear-projection argmax rule
    so IoU metrics are computable without real data; golden-model self-labels
    (the default campaign ground truth) are produced by the inference engine
    instead.
    """
    height, width, channels = shape
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    ch, cw = max(2, height // 8), max(2, width // 8)
    coarse = rng.uniform(0.0, 1.0, size=(count, ch, cw, channels))
    fields = _bilinear_upsample(coarse, height, width).astype(np.float32)
    inputs = [Tensor.from_array(fields[i:i + 1]) for i in range(count)]

    labels = None
    if class_count is not None:
        proj = rng.normal(size=(channels, class_count))
        scores = fields @ proj
        labels = [np.argmax(scores[i], axis=-1).astype(np.int32) for i in range(count)]
    return inputs, labels


def batch_inputs(inputs) -> Tensor:
    """Stack single-image tensors into one N,H,W,C batch."""
    return Tensor.from_array(np.concatenate([t.data for t in inputs], axis=0))


# ---------------------------------------------------------------------------
# container I/O


def save_model(graph: ModelGraph, path) -> None:
    blobs, table, offset = [], [], 0
    for p in graph.params:
        raw = np.ascontiguousarray(p.tensor.data).astype(
            {"f32": "<f4", "i8": "<i1", "i32": "<i4"}[p.tensor.encoding]).tobytes()
        table.append({"index": p.index, "layer": p.layer, "role": p.role,
                      "encoding": p.tensor.encoding, "shape": list(p.tensor.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    manifest = {
        "class_count": graph.class_count,
        "layers": [{"kind": l.kind, "name": l.name, "hyperparams": l.hyperparams,
                    "inputs": l.inputs} for l in graph.layers],
        "params": table,
        "metadata": graph.metadata,
        "blob_size": len(blob),
        "blob_crc32": zlib.crc32(blob),
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        f.write(blob)


def load_model(path) -> ModelGraph:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a model container (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    (mlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if pos + mlen > len(raw):
        raise FormatError(f"{path}: truncated manifest")
    manifest = json.loads(raw[pos:pos + mlen].decode())
    pos += mlen
    blob = raw[pos:]
    if len(blob) < manifest["blob_size"]:
        raise FormatError(f"{path}: truncated blob "
                          f"({len(blob)} of {manifest['blob_size']} bytes)")
    blob = blob[:manifest["blob_size"]]
    if zlib.crc32(blob) != manifest["blob_crc32"]:
        raise FormatError(f"{path}: blob checksum failure")

    layers = [LayerSpec(l["kind"], l["name"], l["hyperparams"], l["inputs"])
              for l in manifest["layers"]]
    params = []
    for e in manifest["params"]:
        dt = {"f32": "<f4", "i8": "<i1", "i32": "<i4"}[e["encoding"]]
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"])),
                            offset=e["offset"]).copy()
        arr = arr.astype(ENCODINGS[e["encoding"]]).reshape(e["shape"])
        params.append(ParamSet(e["index"], e["layer"], e["role"],
                               Tensor(tuple(e["shape"]), e["encoding"], arr)))
    params.sort(key=lambda p: p.index)
    return ModelGraph(layers, params, manifest["class_count"], manifest["metadata"])
