"""Layer-graph description, model assembly, loss and checkpoint files."""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataFault
from . import layers as L

INPUT_SHAPE = (240, 2)
FRAMES = 12          # ConvLSTM input: 12 frames of 20 x 2 x 1, time-major
PROB_CLAMP = 1e-7


@dataclass
class NetworkSpec:
    family: str
    layers: list                       # [{"type": ..., **hyperparameters}]
    input_shape: tuple = INPUT_SHAPE
    init: dict = field(default_factory=lambda: {"scheme": "truncated_normal", "std": L.INIT_STD, "seed": 0})

    def to_dict(self):
        return {"family": self.family, "layers": [dict(l) for l in self.layers],
                "input_shape": list(self.input_shape), "init": dict(self.init)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], [dict(l) for l in d["layers"]], tuple(d["input_shape"]), dict(d.get("init", {})))


def lstm_spec(units1=146, units2=180, units3=32, dropout=0.34, seed=0, input_shape=INPUT_SHAPE):
    """LSTM over the whole sequence, two time-distributed Leaky-ReLU dense blocks, sigmoid head."""
    return NetworkSpec("lstm", [
        {"type": "lstm", "units": units1, "return_sequences": True},
        {"type": "dense", "units": units2},
        {"type": "leaky_relu"},
        {"type": "batchnorm"},
        {"type": "dropout", "rate": dropout},
        {"type": "dense", "units": units3},
        {"type": "leaky_relu"},
        {"type": "batchnorm"},
        {"type": "dropout", "rate": dropout},
        {"type": "flatten"},
        {"type": "dense", "units": 1},
        {"type": "sigmoid"},
    ], tuple(input_shape), {"scheme": "truncated_normal", "std": L.INIT_STD, "seed": seed})


def convlstm_spec(filters1=4, kernel1=(6, 6), filters2=8, kernel2=(5, 5), units2=32, dropout=0.2, seed=0,
                  frames=FRAMES, input_shape=INPUT_SHAPE):
    """Two ConvLSTM blocks around a dense block, each followed by batch norm and dropout."""
    T, nf = input_shape
    if T % frames:
        raise ConfigError(f"{T} steps do not split into {frames} frames")
    frame = (frames, T // frames, nf, 1)
    return NetworkSpec("convlstm", [
        {"type": "reshape", "target": list(frame)},
        {"type": "convlstm2d", "filters": filters1, "kernel": list(kernel1), "return_sequences": True},
        {"type": "batchnorm"},
        {"type": "dropout", "rate": dropout},
        {"type": "dense", "units": units2},
        {"type": "leaky_relu"},
        {"type": "batchnorm"},
        {"type": "dropout", "rate": dropout},
        {"type": "convlstm2d", "filters": filters2, "kernel": list(kernel2), "return_sequences": False},
        {"type": "batchnorm"},
        {"type": "dropout", "rate": dropout},
        {"type": "flatten"},
        {"type": "dense", "units": 1},
        {"type": "sigmoid"},
    ], tuple(input_shape), {"scheme": "truncated_normal", "std": L.INIT_STD, "seed": seed})


def _make_layer(desc):
    desc = dict(desc)
    kind = desc.pop("type")
    if kind not in L.LAYER_TYPES:
        raise ConfigError(f"unknown layer type {kind!r}")
    return L.LAYER_TYPES[kind](**desc)


class Network:
    def __init__(self, spec, rng=None):
        self.spec = spec
        seed = spec.init.get("seed", 0)
        rng = np.random.default_rng(seed) if rng is None else rng
        std = spec.init.get("std", L.INIT_STD)
        self.layers = []
        shape = tuple(spec.input_shape)
        old = L.INIT_STD
        try:
            L.INIT_STD = std
            for desc in spec.layers:
                layer = _make_layer(desc)
                shape = tuple(layer.build(shape, rng))
                self.layers.append(layer)
        finally:
            L.INIT_STD = old
        if shape != (1,) or not isinstance(self.layers[-1], L.Sigmoid):
            raise ConfigError("network must end in a single sigmoid unit")
        self.output_shape = shape
        self._cache_id = None

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k in sorted(layer.params):
                yield f"{i}.{layer.kind}.{k}", layer, k

    def param_dict(self):
        return {name: layer.params[k] for name, layer, k in self.named_params()}

    def grad_dict(self):
        return {name: layer.grads[k] for name, layer, k in self.named_params()}

    def state_dict(self):
        return {f"{i}.{layer.kind}.{k}": v for i, layer in enumerate(self.layers) for k, v in sorted(layer.state.items())}

    def n_params(self):
        return sum(layer.params[k].size for _, layer, k in self.named_params())

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ConfigError(f"input shape {x.shape[1:]} does not match {tuple(self.spec.input_shape)}")
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        self._cache_id = id(x) if train else None
        return x[:, 0]

    def backward(self, p, y):
        """Gradients of mean BCE for the batch of the last training forward pass.

        Starts at the sigmoid's input with (p - y) / N.
        """
        if self._cache_id is None:
            raise ConfigError("backward needs a preceding training-mode forward pass")
        p = np.asarray(p, dtype=float)
        y = np.asarray(y, dtype=float)
        if p.shape != y.shape:
            raise ConfigError("probability / label length mismatch")
        d = ((p - y) / len(p))[:, None]
        for layer in reversed(self.layers[:-1]):
            d = layer.backward(d)
        return self.grad_dict()

    def predict_proba(self, x, batch=512):
        x = np.asarray(x, dtype=np.float64)
        out = [self.forward(x[i:i + batch]) for i in range(0, len(x), batch)]
        return np.concatenate(out) if out else np.empty(0)


def forward(model, batch, mode="infer", rng=None):
    if mode not in ("train", "infer"):
        raise ConfigError("mode must be 'train' or 'infer'")
    return model.forward(batch, mode == "train", rng)


def backward(model, probs, labels):
    return model.backward(probs, labels)


def build(spec, rng=None):
    return Network(spec, rng)


def bce_loss(p, y):
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ConfigError("probability / label length mismatch")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


# ---- checkpoints ------------------------------------------------------------

CK_MAGIC = b"OGCK1"
CK_VERSION = 1


@dataclass
class ModelCheckpoint:
    spec: NetworkSpec
    params: dict
    state: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net, meta=None):
        return cls(net.spec, {k: v.copy() for k, v in net.param_dict().items()},
                   {k: v.copy() for k, v in net.state_dict().items()}, dict(meta or {}))

    def network(self):
        net = Network(self.spec)
        for name, layer, k in net.named_params():
            if name not in self.params:
                raise DataFault(f"checkpoint lacks tensor {name}")
            if self.params[name].shape != layer.params[k].shape:
                raise DataFault(f"tensor {name} has shape {self.params[name].shape}, "
                                f"spec needs {layer.params[k].shape}")
            layer.params[k] = self.params[name].copy()
        for i, layer in enumerate(net.layers):
            for k in layer.state:
                layer.state[k] = self.state[f"{i}.{layer.kind}.{k}"].copy()
        return net

    def to_bytes(self):
        tensors = [("param", k, v) for k, v in sorted(self.params.items())]
        tensors += [("state", k, v) for k, v in sorted(self.state.items())]
        header = json.dumps({"spec": self.spec.to_dict(), "meta": self.meta, "n_tensors": len(tensors)},
                            sort_keys=True).encode()
        parts = [CK_MAGIC, struct.pack("<HI", CK_VERSION, len(header)), header]
        for group, name, arr in tensors:
            key = f"{group}:{name}".encode()
            arr = np.ascontiguousarray(arr, dtype="<f8")
            parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob, name="<bytes>"):
        if blob[:5] != CK_MAGIC:
            raise DataFault(f"bad magic in {name}: expected {CK_MAGIC!r}")
        try:
            version, hlen = struct.unpack_from("<HI", blob, 5)
            if version != CK_VERSION:
                raise DataFault(f"unsupported checkpoint version {version} in {name}")
            header = json.loads(blob[11:11 + hlen])
            pos = 11 + hlen
            params, state = {}, {}
            for _ in range(header["n_tensors"]):
                (klen,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                key = blob[pos:pos + klen].decode()
                pos += klen
                (ndim,) = struct.unpack_from("<B", blob, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
                pos += 8 * ndim
                n = int(np.prod(shape)) if ndim else 1
                if pos + 8 * n > len(blob):
                    raise DataFault(f"truncated tensor {key} in {name}")
                arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
                pos += 8 * n
                group, tname = key.split(":", 1)
                (params if group == "param" else state)[tname] = arr
        except (struct.error, ValueError, KeyError) as exc:
            raise DataFault(f"corrupt checkpoint {name}: {exc}") from None
        if pos != len(blob):
            raise DataFault(f"trailing bytes in checkpoint {name}")
        ck = cls(NetworkSpec.from_dict(header["spec"]), params, state, header.get("meta", {}))
        ck.network()    # shape validation against the spec
        return ck

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), str(path))
