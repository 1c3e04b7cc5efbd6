"""Function-approximator toolkit: named parameter stores, dense stacks, a
gated recurrent sequence encoder, Adam, and the pgm-ckpt/1 checkpoint
container.  Everything is float64 and deterministically seeded.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CKPT_FORMAT_VERSION = "pgm-ckpt/1"

_ADAM_PREFIX = "__adam__"


class GradientError(RuntimeError):
    """Non-finite gradient encountered during an optimizer step."""


class CheckpointError(ValueError):
    """Malformed checkpoint file or parameter mismatch."""


class ParamStore:
    """Ordered mapping of parameter names to trainable Tensors, plus Adam
    moment state.  Insertion order defines checkpoint layout.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients accumulated by the last backward(); missing entries are
        zero (parameter did not participate in the loss graph).
        """
        out = {}
        for name, t in self.params.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def total_bytes(self) -> bytes:
        """Concatenated parameter payload (for freeze checks)."""
        return b"".join(t.data.tobytes() for t in self.params.values())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    """uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


# ---------------------------------------------------------------------------
# Dense stacks
# ---------------------------------------------------------------------------

@dataclass
class MLPSpec:
    """sizes[0] inputs -> hidden tanh layers -> sizes[-1] linear outputs."""
    sizes: tuple[int, ...]
    prefix: str = "mlp"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ValueError("mlp spec: need at least input and output sizes")

    def layer_names(self) -> list[tuple[str, str]]:
        return [(f"{self.prefix}.W{i}", f"{self.prefix}.b{i}")
                for i in range(len(self.sizes) - 1)]


def init_mlp(store: ParamStore, spec: MLPSpec, rng: np.random.Generator) -> None:
    for i, (wn, bn) in enumerate(spec.layer_names()):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        store.add(wn, glorot_uniform(rng, fan_in, fan_out))
        store.add(bn, np.zeros(fan_out))


def mlp_forward(store: ParamStore, spec: MLPSpec, x: Tensor) -> Tensor:
    """x (..., sizes[0]) -> (..., sizes[-1]); tanh between layers, linear out."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[-1] != spec.sizes[0]:
        raise ValueError(
            f"mlp {spec.prefix}: input dim {h.shape[-1]} != spec {spec.sizes[0]}")
    layers = spec.layer_names()
    for i, (wn, bn) in enumerate(layers):
        h = ad.matmul(h, store[wn]) + store[bn]
        if i < len(layers) - 1:
            h = ad.tanh(h)
    return h


# ---------------------------------------------------------------------------
# Gated recurrent sequence encoder
# ---------------------------------------------------------------------------

@dataclass
class GRUSpec:
    input_dim: int
    hidden_dim: int
    prefix: str = "gru"
    bidirectional: bool = False

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)

    def directions(self) -> list[str]:
        return ["fw", "bw"] if self.bidirectional else ["fw"]


_GATES = ("r", "z", "n")           # reset, update, candidate


def init_gru(store: ParamStore, spec: GRUSpec, rng: np.random.Generator) -> None:
    for d in spec.directions():
        for g in _GATES:
            store.add(f"{spec.prefix}.{d}.W{g}",
                      glorot_uniform(rng, spec.input_dim, spec.hidden_dim))
            store.add(f"{spec.prefix}.{d}.U{g}",
                      glorot_uniform(rng, spec.hidden_dim, spec.hidden_dim))
            store.add(f"{spec.prefix}.{d}.b{g}", np.zeros(spec.hidden_dim))


def gru_cell(store: ParamStore, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """One recurrence step: x (B, Din), h (B, Dh) -> new hidden (B, Dh).

    r = sig(x Wr + h Ur + br); z = sig(x Wz + h Uz + bz)
    n = tanh(x Wn + r * (h Un) + bn); h' = (1 - z) * n + z * h
    """
    r = ad.sigmoid(ad.matmul(x, store[f"{prefix}.Wr"])
                   + ad.matmul(h, store[f"{prefix}.Ur"]) + store[f"{prefix}.br"])
    z = ad.sigmoid(ad.matmul(x, store[f"{prefix}.Wz"])
                   + ad.matmul(h, store[f"{prefix}.Uz"]) + store[f"{prefix}.bz"])
    n = ad.tanh(ad.matmul(x, store[f"{prefix}.Wn"])
                + ad.mul(r, ad.matmul(h, store[f"{prefix}.Un"]))
                + store[f"{prefix}.bn"])
    return ad.add(ad.mul(ad.add(ad.mul(z, -1.0), 1.0), n), ad.mul(z, h))


def seq_encode(store: ParamStore, spec: GRUSpec, xs: Tensor) -> Tensor:
    """Encode xs (B, H, Din) -> per-frame hiddens (B, H, output_dim).
    The bidirectional variant concatenates a reversed pass.
    """
    if xs.shape[-1] != spec.input_dim:
        raise ValueError(
            f"gru {spec.prefix}: input dim {xs.shape[-1]} != spec {spec.input_dim}")
    B, H = xs.shape[0], xs.shape[1]
    outs = []
    for d in spec.directions():
        seq = ad.flip(xs, axis=1) if d == "bw" else xs
        h = Tensor(np.zeros((B, spec.hidden_dim)))
        frames = []
        for i in range(H):
            h = gru_cell(store, f"{spec.prefix}.{d}", seq[:, i], h)
            frames.append(h)
        hs = ad.stack(frames, axis=1)
        if d == "bw":
            hs = ad.flip(hs, axis=1)
        outs.append(hs)
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    store.step_count += 1
    t = store.step_count
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(
                f"adam: gradient shape {g.shape} != parameter {name!r} "
                f"shape {p.data.shape}")
        m = _moment(store.adam_m, name, p)
        v = _moment(store.adam_v, name, p)
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def _moment(table: dict, name: str, p: Tensor) -> np.ndarray:
    if name not in table:
        table[name] = np.zeros_like(p.data)
    return table[name]


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line + raw little-endian float64 payload
# ---------------------------------------------------------------------------

def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    path = Path(path)
    entries = []
    buffers = []
    for name, t in store.params.items():
        entries.append({"name": name, "shape": list(t.data.shape)})
        buffers.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    for table, tag in ((store.adam_m, "m"), (store.adam_v, "v")):
        for name, arr in table.items():
            entries.append({"name": f"{_ADAM_PREFIX}{tag}:{name}",
                            "shape": list(arr.shape)})
            buffers.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {"version": CKPT_FORMAT_VERSION,
              "tensors": entries,
              "step_count": store.step_count,
              "meta": meta or {}}
    with path.open("wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for buf in buffers:
            f.write(buf)


def load_checkpoint(path, expect_shapes: dict[str, tuple] | None = None
                    ) -> tuple[ParamStore, dict]:
    """Returns (store, meta).  expect_shapes, when given, must match the
    stored parameter shapes exactly (checked name by name).
    """
    path = Path(path)
    with path.open("rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: bad checkpoint header ({e})") from e
        version = header.get("version")
        if version != CKPT_FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format {version!r} "
                f"(expected {CKPT_FORMAT_VERSION!r})")
        payload = f.read()
    store = ParamStore()
    store.step_count = int(header.get("step_count", 0))
    offset = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=offset).reshape(shape).copy()
        offset += nbytes
        if name.startswith(_ADAM_PREFIX):
            tag, pname = name[len(_ADAM_PREFIX):].split(":", 1)
            (store.adam_m if tag == "m" else store.adam_v)[pname] = arr
        else:
            store.add(name, arr)
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    if expect_shapes is not None:
        missing = set(expect_shapes) - set(store.params)
        extra = set(store.params) - set(expect_shapes)
        if missing or extra:
            raise CheckpointError(
                f"{path}: parameter names mismatch "
                f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
        for name, shape in expect_shapes.items():
            got = store.params[name].data.shape
            if tuple(shape) != got:
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {got}, expected {tuple(shape)}")
    return store, header.get("meta", {})


def finite_difference_gradient(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar fn at x; the independent
    reference every analytic gradient is checked against.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g
