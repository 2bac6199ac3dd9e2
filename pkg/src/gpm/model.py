"""Two-branch network: MLP encoder for main embeddings plus a linear proxy head.

Both branches end in row-wise L2 normalization.  The encoder stands in for a
backbone + pooling stack; the proxy head projects its output to a compact
space used only for building mini-batches.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from gpm.numerics import (
    DimensionError,
    ParamTensor,
    as_matrix,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    input_dim: int = 32
    hidden_dim: int = 64
    embed_dim: int = 32
    proxy_dim: int = 8
    seed: int = 0
    detach_input: bool = False

    def validate(self) -> None:
        for name in ("input_dim", "hidden_dim", "embed_dim", "proxy_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.proxy_dim > self.embed_dim:
            raise ValueError("proxy_dim must not exceed embed_dim")


def _uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> ParamTensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ParamTensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=name)


class Encoder:
    """``x = normalize(tanh(F W1 + b1) W2 + b2)``."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.W1 = _uniform_init(rng, cfg.input_dim, cfg.hidden_dim, "encoder.W1")
        self.b1 = ParamTensor(np.zeros((1, cfg.hidden_dim)), name="encoder.b1")
        self.W2 = _uniform_init(rng, cfg.hidden_dim, cfg.embed_dim, "encoder.W2")
        self.b2 = ParamTensor(np.zeros((1, cfg.embed_dim)), name="encoder.b2")

    def params(self) -> list[ParamTensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def forward(self, features: np.ndarray) -> tuple[np.ndarray, dict]:
        features = as_matrix(features)
        if features.shape[1] != self.W1.shape[0]:
            raise DimensionError(f"feature dim {features.shape[1]} != encoder input dim {self.W1.shape[0]}")
        h = np.tanh(features @ self.W1.value + self.b1.value)
        u = h @ self.W2.value + self.b2.value
        x, norms = l2_normalize_rows(u)
        return x, {"features": features, "h": h, "x": x, "norms": norms}

    def backward(self, cache: dict, grad_x: np.ndarray) -> None:
        du = l2_normalize_rows_backward(cache["x"], cache["norms"], grad_x)
        self.W2.accumulate(cache["h"].T @ du)
        self.b2.accumulate(du.sum(axis=0, keepdims=True))
        dpre = (du @ self.W2.value.T) * (1.0 - cache["h"] ** 2)
        self.W1.accumulate(cache["features"].T @ dpre)
        self.b1.accumulate(dpre.sum(axis=0, keepdims=True))


class ProxyHead:
    """Fully connected projection to ``proxy_dim`` followed by L2 normalization."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.W = _uniform_init(rng, cfg.embed_dim, cfg.proxy_dim, "proxy.W")
        self.b = ParamTensor(np.zeros((1, cfg.proxy_dim)), name="proxy.b")
        self.detach_input = cfg.detach_input

    def params(self) -> list[ParamTensor]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        x = as_matrix(x)
        if x.shape[1] != self.W.shape[0]:
            raise DimensionError(f"input dim {x.shape[1]} != proxy head input dim {self.W.shape[0]}")
        v = x @ self.W.value + self.b.value
        z, norms = l2_normalize_rows(v)
        return z, {"x": x, "z": z, "norms": norms}

    def backward(self, cache: dict, grad_z: np.ndarray) -> np.ndarray | None:
        """Accumulate head grads; return the gradient w.r.t. the head input, or None when detached."""
        dv = l2_normalize_rows_backward(cache["z"], cache["norms"], grad_z)
        self.W.accumulate(cache["x"].T @ dv)
        self.b.accumulate(dv.sum(axis=0, keepdims=True))
        if self.detach_input:
            return None
        return dv @ self.W.value.T


@dataclass
class EmbeddingBatch:
    x: np.ndarray
    z: np.ndarray
    labels: np.ndarray
    images_per_place: int
    cache: dict | None = None


class Model:
    def __init__(self, cfg: EncoderConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        self.head = ProxyHead(cfg, rng)

    def params(self) -> list[ParamTensor]:
        return self.encoder.params() + self.head.params()

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def embed(self, features: np.ndarray) -> np.ndarray:
        """Main-branch embeddings only (what retrieval uses)."""
        return self.encoder.forward(features)[0]

    def forward(self, features: np.ndarray, labels=None, images_per_place: int = 1) -> EmbeddingBatch:
        x, enc_cache = self.encoder.forward(features)
        z, head_cache = self.head.forward(x)
        if labels is None:
            labels = np.arange(x.shape[0])
        return EmbeddingBatch(x, z, np.asarray(labels), images_per_place,
                              cache={"encoder": enc_cache, "head": head_cache})

    def backward(self, batch: EmbeddingBatch, grad_x: np.ndarray, grad_z: np.ndarray) -> None:
        if grad_x.shape != batch.x.shape or grad_z.shape != batch.z.shape:
            raise DimensionError("gradient shapes must match x and z")
        gx = grad_x
        g_from_head = self.head.backward(batch.cache["head"], grad_z)
        if g_from_head is not None:
            gx = gx + g_from_head
        self.encoder.backward(batch.cache["encoder"], gx)

    def save(self, path) -> None:
        arrays = {p.name: p.value for p in self.params()}
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.cfg)}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "Model":
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            model = cls(EncoderConfig(**meta["config"]))
            for p in model.params():
                stored = data[p.name]
                if stored.shape != p.value.shape:
                    raise DimensionError(f"{p.name}: checkpoint shape {stored.shape} != {p.value.shape}")
                p.value[...] = stored
        return model
