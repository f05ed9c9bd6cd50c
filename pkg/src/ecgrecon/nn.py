"""Layers, model assemblies, and the versioned checkpoint format.

All weights are Xavier-uniform from a caller-supplied seeded generator;
biases start at zero. Checkpoints are a JSON architecture descriptor plus
an f32 parameter blob in descriptor order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Tensor

CHECKPOINT_FORMAT = "ecgrecon-ckpt-v1"


class Parameter:
    """A named trainable tensor."""

    def __init__(self, name, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def shape(self):
        return self.tensor.shape


def xavier_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Module:
    """Minimal container; subclasses define forward() and describe()."""

    def parameters(self):
        raise NotImplementedError

    def describe(self):
        raise NotImplementedError

    def __call__(self, *args):
        return self.forward(*args)

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.zero_grad()

    def parameter_count(self):
        return int(sum(p.tensor.size for p in self.parameters()))


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, name="conv"):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in, fan_out = in_ch * kernel, out_ch * kernel
        w = xavier_uniform((out_ch, in_ch, kernel), fan_in, fan_out, rng)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype=np.float32))

    def forward(self, x):
        return T.conv1d(x, self.weight.tensor, self.bias.tensor,
                        stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.weight, self.bias]

    def describe(self):
        return {"type": "conv1d", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}


class Dense(Module):
    def __init__(self, in_dim, out_dim, rng=None, name="dense"):
        self.in_dim, self.out_dim = in_dim, out_dim
        w = xavier_uniform((in_dim, out_dim), in_dim, out_dim, rng)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim, dtype=np.float32))

    def forward(self, x):
        return T.add(T.matmul(x, self.weight.tensor), self.bias.tensor)

    def parameters(self):
        return [self.weight, self.bias]

    def describe(self):
        return {"type": "dense", "in_dim": self.in_dim, "out_dim": self.out_dim}


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)

    def parameters(self):
        return []

    def describe(self):
        return {"type": "relu"}


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def describe(self):
        return {"type": "sequential", "layers": [l.describe() for l in self.layers]}


class Encoder(Module):
    """1-D conv trunk mapping a [B, 3, 256] window to a 128-dim embedding."""

    EMBED_DIM = 128

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.trunk = Sequential([
            Conv1d(3, 32, 7, stride=2, padding=3, rng=rng, name="trunk.0"),
            ReLU(),
            Conv1d(32, 64, 5, stride=2, padding=2, rng=rng, name="trunk.2"),
            ReLU(),
            Conv1d(64, 128, 3, stride=2, padding=1, rng=rng, name="trunk.4"),
            ReLU(),
            Conv1d(128, 128, 3, stride=1, padding=1, rng=rng, name="trunk.6"),
            ReLU(),
        ])

    def forward(self, x):
        return T.global_avg_pool(self.trunk(x))

    def parameters(self):
        return self.trunk.parameters()

    def describe(self):
        return {"type": "encoder", "embed_dim": self.EMBED_DIM,
                "trunk": self.trunk.describe()}

    @classmethod
    def from_config(cls, config, seed=0):
        return cls(seed=seed)


class ProjectionHead(Module):
    """Dense head producing a unit-norm 64-dim projection."""

    PROJ_DIM = 64

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.fc1 = Dense(128, 128, rng=rng, name="proj.fc1")
        self.fc2 = Dense(128, 64, rng=rng, name="proj.fc2")

    def forward(self, h):
        z = self.fc2(T.relu(self.fc1(h)))
        return T.l2_normalize(z)

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()

    def describe(self):
        return {"type": "projection_head", "proj_dim": self.PROJ_DIM}

    @classmethod
    def from_config(cls, config, seed=0):
        return cls(seed=seed)


class LeadDecoder(Module):
    """Per-lead decoder over the stacked 256-channel latent tensor.

    The normalized window and the time-broadcast embedding are each
    projected to 128 channels, concatenated to [B, 256, 256], fused by a
    pointwise conv, and decoded to one 256-sample lead.
    """

    def __init__(self, lead="V1", seed=0, fusion_ch=32, temporal_ch=16):
        rng = np.random.default_rng(seed)
        self.lead = lead
        self.fusion_ch, self.temporal_ch = fusion_ch, temporal_ch
        self.x_proj = Conv1d(3, 128, 1, rng=rng, name="x_proj")
        self.h_proj = Dense(128, 128, rng=rng, name="h_proj")
        self.fusion = Conv1d(256, fusion_ch, 1, rng=rng, name="fusion")
        self.temp1 = Conv1d(fusion_ch, temporal_ch, 5, padding=2, rng=rng, name="temp1")
        self.temp2 = Conv1d(temporal_ch, 1, 5, padding=2, rng=rng, name="temp2")

    def forward(self, x_hat, h_hat):
        t_len = x_hat.shape[2]
        xp = self.x_proj(x_hat)
        hp = T.broadcast_over_time(self.h_proj(h_hat), t_len)
        stacked = T.concat([xp, hp], axis=1)
        fused = T.relu(self.fusion(stacked))
        out = self.temp2(T.relu(self.temp1(fused)))
        return T.reshape(out, (out.shape[0], t_len))

    def parameters(self):
        return (self.x_proj.parameters() + self.h_proj.parameters()
                + self.fusion.parameters() + self.temp1.parameters()
                + self.temp2.parameters())

    def describe(self):
        return {"type": "lead_decoder", "lead": self.lead,
                "fusion_ch": self.fusion_ch, "temporal_ch": self.temporal_ch}

    @classmethod
    def from_config(cls, config, seed=0):
        return cls(lead=config.get("lead", "V1"), seed=seed,
                   fusion_ch=config.get("fusion_ch", 32),
                   temporal_ch=config.get("temporal_ch", 16))


_MODEL_REGISTRY = {
    "encoder": Encoder,
    "projection_head": ProjectionHead,
    "lead_decoder": LeadDecoder,
}


def get_parameter_vector(model):
    return np.concatenate([p.tensor.data.ravel() for p in model.parameters()])


def set_parameter_vector(model, vec):
    off = 0
    for p in model.parameters():
        n = p.tensor.size
        p.tensor.data = vec[off:off + n].reshape(p.tensor.shape).astype(np.float32).copy()
        off += n
    if off != vec.size:
        raise DataError(f"parameter blob size {vec.size} != model size {off}")


def save_checkpoint(path, model, extra=None):
    """Write <path>.json (descriptor) and <path>.f32 (parameter blob)."""
    path = Path(path)
    desc = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.describe(),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in model.parameters()],
    }
    if extra:
        desc["extra"] = extra
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(desc, indent=1))
    blob = get_parameter_vector(model).astype("<f4")
    path.with_suffix(path.suffix + ".f32").write_bytes(blob.tobytes())


def load_checkpoint(path):
    """Rebuild a model from its descriptor and blob; returns (model, extra)."""
    path = Path(path)
    desc_path = path.with_suffix(path.suffix + ".json")
    blob_path = path.with_suffix(path.suffix + ".f32")
    if not desc_path.exists() or not blob_path.exists():
        raise DataError(f"checkpoint not found: {path}")
    desc = json.loads(desc_path.read_text())
    if desc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unknown checkpoint format: {desc.get('format')}")
    arch = desc["architecture"]
    cls = _MODEL_REGISTRY.get(arch["type"])
    if cls is None:
        raise DataError(f"unknown model type: {arch['type']}")
    model = cls.from_config(arch)
    vec = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    set_parameter_vector(model, np.array(vec))
    return model, desc.get("extra")
