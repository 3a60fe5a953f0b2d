"""Dense feed-forward networks with explicit backpropagation and Adam.

Everything runs in float64 on plain numpy arrays. Models are immutable
values: :func:`adam_step` returns a new model instead of mutating the old
one, which keeps frozen-parameter contracts trivial to check.

Randomness always comes from an explicit :class:`numpy.random.Generator`
backed by PCG64, which produces the same stream on every platform for a
given seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CheckpointError, ContractError, NumericError, ShapeError, ValidationError

Rng = np.random.Generator

CHECKPOINT_MAGIC = b"GEOFAIR-MLP"
CHECKPOINT_VERSION = 1


def make_rng(seed: int) -> Rng:
    """Return a PCG64 generator for ``seed`` (a 64-bit unsigned integer)."""
    if not 0 <= int(seed) < 2**64:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of a fully connected network.

    ``use_relu`` holds one flag per hidden layer; a hidden layer without ReLU
    is purely affine. The output layer never has an activation.
    """

    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)
    dropout_prob: float = 0.3
    use_relu: tuple[bool, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.use_relu is None:
            object.__setattr__(self, "use_relu", (True,) * len(self.hidden_dims))
        else:
            object.__setattr__(self, "use_relu", tuple(bool(r) for r in self.use_relu))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) != d or d < 1 for d in dims):
            raise ValidationError(f"layer widths must be positive integers, got {dims}")
        if len(self.use_relu) != len(self.hidden_dims):
            raise ValidationError("use_relu needs exactly one flag per hidden layer")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValidationError(f"dropout_prob must lie in [0, 1), got {self.dropout_prob}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "dropout_prob": self.dropout_prob,
            "use_relu": list(self.use_relu),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            hidden_dims=tuple(d.get("hidden_dims", (256, 256))),
            dropout_prob=float(d.get("dropout_prob", 0.3)),
            use_relu=tuple(d["use_relu"]) if d.get("use_relu") is not None else None,
        )


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Parameters of an :class:`MlpConfig` network.

    ``weights[i]`` has shape ``(fan_in, fan_out)`` so a layer computes
    ``x @ W + b``.
    """

    config: MlpConfig
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        weights = tuple(_frozen(w) for w in self.weights)
        biases = tuple(_frozen(b) for b in self.biases)
        dims = self.config.layer_dims
        if len(weights) != self.config.num_layers or len(biases) != self.config.num_layers:
            raise ShapeError(
                f"expected {self.config.num_layers} layers, got "
                f"{len(weights)} weight and {len(biases)} bias arrays"
            )
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i], dims[i + 1]):
                raise ShapeError(f"layer {i}: weight shape {w.shape} != {(dims[i], dims[i + 1])}")
            if b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} != {(dims[i + 1],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {i}: non-finite parameter")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    def parameters(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def with_parameters(self, params: Sequence[np.ndarray]) -> "MlpModel":
        return MlpModel(self.config, tuple(params[0::2]), tuple(params[1::2]))

    def identical_to(self, other: "MlpModel") -> bool:
        """Bitwise equality of configuration and every parameter."""
        return self.config == other.config and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.parameters(), other.parameters())
        )


def init_mlp(config: MlpConfig, rng: Rng) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(config, tuple(weights), tuple(biases))


def zeros_like_model(config: MlpConfig) -> MlpModel:
    dims = config.layer_dims
    return MlpModel(
        config,
        tuple(np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])),
        tuple(np.zeros(b) for b in dims[1:]),
    )


@dataclass
class ForwardCache:
    """Activations recorded by :func:`forward` for use by :func:`backward`.

    ``inputs[i]`` is the input fed to layer ``i`` (after activation and
    dropout of the previous layer); ``pre[i]`` is the hidden pre-activation
    and ``masks[i]`` the scaled dropout mask, or ``None`` when dropout was off.
    """

    model: MlpModel
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    masks: list[np.ndarray | None]
    consumed: bool = False


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray = field(repr=False)

    def as_list(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def forward(
    model: MlpModel,
    batch: np.ndarray,
    training: bool = False,
    rng: Rng | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Compute raw logits for ``batch`` (shape ``(n, input_dim)``).

    In training mode with a positive dropout probability, each hidden unit is
    zeroed with that probability and survivors are scaled by ``1/(1-p)``, so
    evaluation mode needs no rescaling.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ShapeError(
            f"layer 0: expected input of shape (n, {model.config.input_dim}), got {x.shape}"
        )
    cfg = model.config
    p = cfg.dropout_prob
    use_dropout = training and p > 0.0
    if use_dropout and rng is None:
        raise ContractError("training-mode forward with dropout needs an rng")

    inputs, pre, masks = [], [], []
    h = x
    last = cfg.num_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ w + b
        if i == last:
            h = z
            break
        pre.append(z)
        a = np.maximum(z, 0.0) if cfg.use_relu[i] else z
        if use_dropout:
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            a = a * mask
            masks.append(mask)
        else:
            masks.append(None)
        h = a
    return h, ForwardCache(model=model, inputs=inputs, pre=pre, masks=masks)


def backward(model: MlpModel, cache: ForwardCache, d_logits: np.ndarray) -> Gradients:
    """Exact gradients of a loss with respect to every parameter and the input."""
    if cache.model is not model:
        raise ContractError("backward called with a cache from a different model")
    if cache.consumed:
        raise ContractError("forward cache already consumed by a previous backward call")
    delta = np.asarray(d_logits, dtype=np.float64)
    n = cache.inputs[0].shape[0]
    if delta.shape != (n, model.config.output_dim):
        raise ShapeError(
            f"layer {model.config.num_layers - 1}: upstream gradient shape {delta.shape} "
            f"!= {(n, model.config.output_dim)}"
        )
    cache.consumed = True

    num = model.config.num_layers
    gw: list[np.ndarray] = [None] * num  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * num  # type: ignore[list-item]
    for i in range(num - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
        if i > 0:
            j = i - 1
            if cache.masks[j] is not None:
                delta = delta * cache.masks[j]
            if model.config.use_relu[j]:
                delta = delta * (cache.pre[j] > 0.0)
    return Gradients(weights=gw, biases=gb, inputs=delta)


@dataclass(frozen=True, eq=False)
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: tuple[np.ndarray, ...] = ()
    second_moment: tuple[np.ndarray, ...] = ()

    @classmethod
    def fresh(cls, model: MlpModel, learning_rate: float = 1e-3, **kw) -> "AdamState":
        if learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {learning_rate}")
        zeros = tuple(np.zeros_like(p) for p in model.parameters())
        return cls(
            learning_rate=learning_rate,
            first_moment=zeros,
            second_moment=tuple(np.zeros_like(p) for p in model.parameters()),
            **kw,
        )


def adam_step(
    model: MlpModel, grads: Gradients, state: AdamState
) -> tuple[MlpModel, AdamState]:
    """One bias-corrected Adam update; returns the new model and state."""
    params = model.parameters()
    glist = grads.as_list()
    if len(glist) != len(params) or len(state.first_moment) != len(params):
        raise ShapeError("gradient/optimizer state does not match the model's parameter list")
    for k, (p, g) in enumerate(zip(params, glist)):
        if g.shape != p.shape:
            raise ShapeError(f"layer {k // 2}: gradient shape {g.shape} != parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            kind = "weights" if k % 2 == 0 else "biases"
            raise NumericError(f"layer {k // 2}: non-finite gradient in {kind}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, glist, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_params.append(p - step)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        step_count=t,
        first_moment=tuple(new_m),
        second_moment=tuple(new_v),
    )
    return model.with_parameters(new_params), new_state


# -- gradient checking -------------------------------------------------------

@dataclass(frozen=True)
class LayerCheck:
    layer: int
    weight_error: float
    bias_error: float
    passed: bool

    @property
    def max_error(self) -> float:
        return max(self.weight_error, self.bias_error)


@dataclass(frozen=True)
class GradientCheckReport:
    layers: tuple[LayerCheck, ...]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(lc.passed for lc in self.layers)

    @property
    def max_error(self) -> float:
        return max(lc.max_error for lc in self.layers)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, defined as 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradients(
    model: MlpModel,
    batch: np.ndarray,
    loss_fn: Callable,
    h: float = 1e-5,
    dropout_seed: int | None = None,
) -> list[np.ndarray]:
    """Central finite differences of ``loss_fn(forward(model, batch))``."""
    training = dropout_seed is not None

    def value(m: MlpModel) -> float:
        rng = make_rng(dropout_seed) if training else None
        logits, _ = forward(m, batch, training=training, rng=rng)
        return float(loss_fn(logits).value)

    params = [p.copy() for p in model.parameters()]
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = value(model.with_parameters(params))
            flat[idx] = orig - h
            down = value(model.with_parameters(params))
            flat[idx] = orig
            g.reshape(-1)[idx] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def gradient_check(
    model: MlpModel,
    batch: np.ndarray,
    loss_fn: Callable,
    tolerance: float = 1e-5,
    h: float = 1e-5,
    dropout_seed: int | None = None,
) -> GradientCheckReport:
    """Compare backprop against central differences, layer by layer.

    ``loss_fn`` maps logits to an object exposing ``value`` and ``grad``
    (see :mod:`geofair.losses`). Pass ``dropout_seed`` to check a
    training-mode pass; the same dropout mask is replayed for every
    perturbation. A layer passes when its relative error is strictly below
    ``tolerance``.
    """
    training = dropout_seed is not None
    rng = make_rng(dropout_seed) if training else None
    logits, cache = forward(model, batch, training=training, rng=rng)
    analytic = backward(model, cache, loss_fn(logits).grad).as_list()
    numeric = numerical_gradients(model, batch, loss_fn, h=h, dropout_seed=dropout_seed)
    layers = []
    for i in range(model.config.num_layers):
        we = relative_error(analytic[2 * i], numeric[2 * i])
        be = relative_error(analytic[2 * i + 1], numeric[2 * i + 1])
        layers.append(LayerCheck(i, we, be, passed=max(we, be) < tolerance))
    return GradientCheckReport(tuple(layers), tolerance)


# -- checkpoints ---------------------------------------------------------------

def model_to_bytes(model: MlpModel) -> bytes:
    """Serialize to the versioned little-endian checkpoint layout.

    Layout: magic ``GEOFAIR-MLP``, uint16 version, uint32 input_dim,
    uint32 output_dim, uint32 hidden count, uint32 per hidden width,
    float64 dropout_prob, uint8 per hidden ReLU flag, then every parameter
    as float64 in W0, b0, W1, b1, ... order (weights row-major).
    """
    cfg = model.config
    nh = len(cfg.hidden_dims)
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<HIII{nh}Id{nh}B",
        CHECKPOINT_VERSION,
        cfg.input_dim,
        cfg.output_dim,
        nh,
        *cfg.hidden_dims,
        cfg.dropout_prob,
        *(1 if r else 0 for r in cfg.use_relu),
    )
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.parameters())
    return header + body


def model_from_bytes(data: bytes) -> MlpModel:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a geofair checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    try:
        version, input_dim, output_dim, nh = struct.unpack_from("<HIII", data, off)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off += struct.calcsize("<HIII")
        hidden = struct.unpack_from(f"<{nh}I", data, off)
        off += 4 * nh
        (dropout,) = struct.unpack_from("<d", data, off)
        off += 8
        relu = struct.unpack_from(f"<{nh}B", data, off)
        off += nh
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header: {exc}") from None
    cfg = MlpConfig(
        input_dim=input_dim,
        output_dim=output_dim,
        hidden_dims=hidden,
        dropout_prob=dropout,
        use_relu=tuple(bool(r) for r in relu),
    )
    dims = cfg.layer_dims
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    flat = np.frombuffer(data, dtype="<f8", offset=off)
    if (len(data) - off) != 8 * expected:
        raise CheckpointError(
            f"checkpoint holds {(len(data) - off) / 8:g} parameters, architecture needs {expected}"
        )
    params, pos = [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        params.append(flat[pos : pos + a * b].reshape(a, b))
        pos += a * b
        params.append(flat[pos : pos + b])
        pos += b
    return MlpModel(cfg, tuple(params[0::2]), tuple(params[1::2]))


def save_model(model: MlpModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path, expected: MlpConfig | None = None) -> MlpModel:
    """Read a checkpoint; if ``expected`` is given the architectures must match."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    model = model_from_bytes(p.read_bytes())
    if expected is not None and model.config != expected:
        raise CheckpointError(
            f"{p}: checkpoint architecture {model.config.to_dict()} "
            f"does not match configured {expected.to_dict()}"
        )
    return model


# -- stacked models --------------------------------------------------------------

def as_chain(models: MlpModel | Sequence[MlpModel]) -> tuple[MlpModel, ...]:
    return (models,) if isinstance(models, MlpModel) else tuple(models)


def chain_forward(models: Sequence[MlpModel], batch: np.ndarray, training: bool = False, rng: Rng | None = None):
    """Run ``batch`` through ``models`` in order; returns logits and caches."""
    caches = []
    h = batch
    for m in models:
        h, cache = forward(m, h, training=training, rng=rng)
        caches.append(cache)
    return h, caches


def chain_backward(models: Sequence[MlpModel], caches: Sequence[ForwardCache], d_logits: np.ndarray) -> list[Gradients]:
    grads: list[Gradients] = [None] * len(models)  # type: ignore[list-item]
    delta = d_logits
    for i in range(len(models) - 1, -1, -1):
        grads[i] = backward(models[i], caches[i], delta)
        delta = grads[i].inputs
    return grads


EVAL_SHARD_ROWS = 4096


def predict_logits(models: MlpModel | Sequence[MlpModel], features: np.ndarray, workers: int = 1) -> np.ndarray:
    """Evaluation-mode logits, computed over fixed-size row shards.

    Shard boundaries do not depend on ``workers``, so results are identical
    for any thread count.
    """
    chain = as_chain(models)
    x = np.asarray(features, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, chain[-1].config.output_dim))
    shards = [x[i : i + EVAL_SHARD_ROWS] for i in range(0, len(x), EVAL_SHARD_ROWS)]

    def run(shard):
        return chain_forward(chain, shard)[0]

    if workers > 1 and len(shards) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, shards))
    else:
        parts = [run(s) for s in shards]
    return np.concatenate(parts, axis=0)
