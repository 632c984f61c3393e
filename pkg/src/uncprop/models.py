"""Small fully connected networks with hand-derived reverse-mode gradients.

Three head types share one trunk implementation:

* ``image``   -- ``2 * out_dim`` raw outputs split into a mean image and a
  log-variance image (optionally residual: the first ``out_dim`` inputs are
  added to the mean),
* ``scalar``  -- a mean and a log-variance (``y_hat``, ``delta``), with an
  affine target normalization baked in,
* ``softmax`` -- ``out_dim`` class logits.

Parameters live in one flat float64 vector so optimizers and gradient checks
can treat the model as a plain function of a vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from uncprop import rng
from uncprop.distributions import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    CategoricalDist,
    DiagGaussianImage,
    ScalarGaussian,
)

HEADS = ("image", "scalar", "softmax")
ACTIVATIONS = ("relu", "tanh")
CKPT_MAGIC = b"UNCPROP-CKPT 1\n"


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: tuple[int, ...]
    head: str
    out_dim: int
    activation: str = "relu"
    residual: bool = False
    target_shift: float = 0.0
    target_scale: float = 1.0
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not self.hidden or any(h < 1 for h in self.hidden) or self.in_dim < 1:
            raise ValueError("need at least one hidden layer and positive widths")
        if self.head == "scalar" and self.out_dim != 1:
            raise ValueError("scalar head has out_dim 1")
        if self.head == "softmax" and self.out_dim < 2:
            raise ValueError("softmax head needs at least 2 classes")
        if self.residual and (self.head != "image" or self.in_dim < self.out_dim):
            raise ValueError("residual connection needs an image head with in_dim >= out_dim")
        if not self.target_scale > 0:
            raise ValueError("target_scale must be positive")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != self.out_dim:
            raise ValueError("image_shape does not match out_dim")

    @property
    def raw_dim(self) -> int:
        if self.head == "image":
            return 2 * self.out_dim
        if self.head == "scalar":
            return 2
        return self.out_dim

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.raw_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["image_shape"] = list(self.image_shape) if self.image_shape else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**d)


@dataclass
class ParamStore:
    """Flat parameter vector plus the slices each layer owns."""

    values: np.ndarray
    layout: list[tuple[slice, tuple[int, int], slice]] = field(default_factory=list)
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ValueError("gradient and parameter vectors differ in length")

    def layer(self, i: int, vec: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        vec = self.values if vec is None else vec
        w_sl, shape, b_sl = self.layout[i]
        return vec[w_sl].reshape(shape), vec[b_sl]


def _layout(widths) -> tuple[list, int]:
    layout, pos = [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = slice(pos, pos + fan_in * fan_out)
        pos += fan_in * fan_out
        b = slice(pos, pos + fan_out)
        pos += fan_out
        layout.append((w, (fan_in, fan_out), b))
    return layout, pos


@dataclass
class Cache:
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    raw: np.ndarray


class Mlp:
    def __init__(self, spec: MlpSpec, params: np.ndarray | None = None, seed: int = 0):
        self.spec = spec
        layout, n = _layout(spec.widths)
        if params is None:
            params = self._init_params(layout, n, seed)
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.store = ParamStore(params, layout)

    @property
    def params(self) -> np.ndarray:
        return self.store.values

    @params.setter
    def params(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.store.values.shape:
            raise ValueError("parameter vector length changed")
        self.store.values = value

    @property
    def num_params(self) -> int:
        return self.store.values.size

    def _init_params(self, layout, n, seed) -> np.ndarray:
        spec = self.spec
        p = np.zeros(n)
        last = len(layout) - 1
        for i, (w_sl, (fan_in, fan_out), _) in enumerate(layout):
            z = rng.standard_normal(seed, [i], fan_in * fan_out)[0].reshape(fan_in, fan_out)
            if i < last:
                if spec.activation == "relu":
                    std = np.sqrt(2.0 / fan_in)
                else:
                    std = np.sqrt(2.0 / (fan_in + fan_out))
                p[w_sl] = (std * z).ravel()
                continue
            w = z / np.sqrt(fan_in)
            if spec.head == "image":
                # residual mean starts at the identity map; log-variance starts at 0
                w[:, spec.out_dim:] = 0.0
                if spec.residual:
                    w[:, :spec.out_dim] = 0.0
            elif spec.head == "scalar":
                w[:, 1] = 0.0
            p[w_sl] = w.ravel()
        return p

    # -- trunk ---------------------------------------------------------------------------------

    def _act(self, z):
        return np.maximum(z, 0.0) if self.spec.activation == "relu" else np.tanh(z)

    def _act_grad(self, z, a):
        return (z > 0).astype(np.float64) if self.spec.activation == "relu" else 1.0 - a * a

    def forward_raw(self, x, params: np.ndarray | None = None) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected inputs of size {self.spec.in_dim}, got {x.shape[1]}")
        pre, post = [], [x]
        h = x
        n_layers = len(self.store.layout)
        for i in range(n_layers):
            w, b = self.store.layer(i, params)
            z = h @ w + b
            pre.append(z)
            if i < n_layers - 1:
                h = self._act(z)
                post.append(h)
            else:
                h = z
        return h, Cache(x, pre, post, h)

    def backward_raw(self, cache: Cache | None, d_raw: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """Gradient of the loss w.r.t. the flat parameters given dL/d(raw outputs)."""
        if cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        d = np.asarray(d_raw, dtype=np.float64).reshape(cache.raw.shape)
        grad = np.zeros(self.num_params)
        for i in reversed(range(len(self.store.layout))):
            w_sl, shape, b_sl = self.store.layout[i]
            w, _ = self.store.layer(i, params)
            grad[w_sl] = (cache.post[i].T @ d).ravel()
            grad[b_sl] = d.sum(axis=0)
            if i > 0:
                d = (d @ w.T) * self._act_grad(cache.pre[i - 1], cache.post[i])
        self.store.grad = grad
        return grad

    # -- heads ---------------------------------------------------------------------------------

    def head_outputs(self, raw: np.ndarray, inputs: np.ndarray):
        """Map raw outputs to (mean, log_var) or (probs,) arrays."""
        spec = self.spec
        if spec.head == "image":
            mean = raw[:, :spec.out_dim]
            if spec.residual:
                mean = mean + inputs[:, :spec.out_dim]
            return mean, np.clip(raw[:, spec.out_dim:], LOGVAR_MIN, LOGVAR_MAX)
        if spec.head == "scalar":
            mean = spec.target_shift + spec.target_scale * raw[:, 0]
            log_var = raw[:, 1] + 2.0 * np.log(spec.target_scale)
            return mean, np.clip(log_var, LOGVAR_MIN, LOGVAR_MAX)
        return (softmax(raw),)

    def head_backward(self, raw: np.ndarray, d_mean=None, d_log_var=None, d_logits=None) -> np.ndarray:
        """Chain head-level gradients back to dL/d(raw outputs)."""
        spec = self.spec
        if spec.head == "softmax":
            return np.asarray(d_logits, dtype=np.float64)
        d_raw = np.zeros_like(raw)
        if spec.head == "image":
            s = raw[:, spec.out_dim:]
            d_raw[:, :spec.out_dim] = d_mean
            d_raw[:, spec.out_dim:] = d_log_var * ((s >= LOGVAR_MIN) & (s <= LOGVAR_MAX))
        else:
            s = raw[:, 1] + 2.0 * np.log(spec.target_scale)
            d_raw[:, 0] = d_mean * spec.target_scale
            d_raw[:, 1] = d_log_var * ((s >= LOGVAR_MIN) & (s <= LOGVAR_MAX))
        return d_raw

    def forward(self, x, params: np.ndarray | None = None):
        """Head outputs plus the cache needed by :meth:`backward_raw`."""
        raw, cache = self.forward_raw(x, params)
        return self.head_outputs(raw, cache.inputs), cache

    def predict_batch(self, xs):
        outs, _ = self.forward(np.asarray(xs).reshape(len(xs), -1))
        return outs[0] if self.spec.head == "softmax" else outs

    def __call__(self, x):
        """Single-input forward pass returning a distribution object."""
        outs, _ = self.forward(np.asarray(x).reshape(1, -1))
        if self.spec.head == "softmax":
            return CategoricalDist(outs[0][0])
        if self.spec.head == "scalar":
            return ScalarGaussian(float(outs[0][0]), float(outs[1][0]))
        shape = self.spec.image_shape or (self.spec.out_dim,)
        return DiagGaussianImage(outs[0][0].reshape(shape), outs[1][0].reshape(shape))

    # -- persistence ---------------------------------------------------------------------------

    def to_bytes(self, metadata: dict | None = None) -> bytes:
        payload = self.params.astype("<f8").tobytes()
        header = {
            "spec": self.spec.to_dict(),
            "num_params": self.num_params,
            "sha256": hashlib.sha256(payload).hexdigest(),
            "metadata": metadata or {},
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return CKPT_MAGIC + head + b"\n" + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["Mlp", dict]:
        if not blob.startswith(CKPT_MAGIC):
            raise ValueError("not an uncprop checkpoint (bad magic)")
        rest = blob[len(CKPT_MAGIC):]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        payload = rest[nl + 1:]
        if hashlib.sha256(payload).hexdigest() != header["sha256"]:
            raise ValueError("checkpoint checksum mismatch")
        params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        if params.size != header["num_params"]:
            raise ValueError("checkpoint parameter count mismatch")
        return cls(MlpSpec.from_dict(header["spec"]), params), header["metadata"]

    def save(self, path, metadata: dict | None = None) -> str:
        blob = self.to_bytes(metadata)
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path) -> tuple["Mlp", dict]:
        return cls.from_bytes(Path(path).read_bytes())


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
