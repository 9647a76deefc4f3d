"""Fully connected ReLU network with Adam, masked L2 loss and a portable checkpoint format."""

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ContractViolation, TrainingDivergence

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qstepper-mlp"
CHECKPOINT_VERSION = 1
_DTYPE = "<f8"


@dataclass(frozen=True)
class MlpSpec:
    """Topology: input, ``hidden_layers`` ReLU layers of ``hidden_width`` units, linear output."""

    input_dim: int
    output_dim: int
    hidden_layers: int = 4
    hidden_width: Optional[int] = None

    def __post_init__(self):
        if self.hidden_width is None:
            object.__setattr__(self, "hidden_width", 5 * self.input_dim)
        if self.input_dim <= 0 or self.output_dim <= 0 or self.hidden_width <= 0:
            raise ContractViolation(f"network dimensions must be positive: {self}")
        if self.hidden_layers < 0:
            raise ContractViolation(f"hidden_layers must be non-negative, got {self.hidden_layers}")

    @property
    def layer_sizes(self) -> List[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
        }


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    """First and second moments, one array per parameter block, and the step counter."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, blocks: List[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(b) for b in blocks], v=[np.zeros_like(b) for b in blocks])


@dataclass
class MlpParams:
    """Weights are stored (fan_in, fan_out); ``adam`` is None for inference-only parameters."""

    spec: MlpSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    adam: Optional[AdamState] = None
    metadata: dict = field(default_factory=dict)

    def blocks(self) -> List[np.ndarray]:
        """Parameter arrays in the order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        adam = None
        if self.adam is not None:
            adam = AdamState(m=[a.copy() for a in self.adam.m], v=[a.copy() for a in self.adam.v], step=self.adam.step)
        return MlpParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            adam=adam,
            metadata=json.loads(json.dumps(self.metadata)),
        )

    def frozen(self) -> "MlpParams":
        """Copy without optimizer state."""
        out = self.copy()
        out.adam = None
        return out


@dataclass
class TrainBatch:
    """Inputs with the action taken in each and its scalar regression target."""

    inputs: np.ndarray
    actions: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.actions = np.asarray(self.actions, dtype=int).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        n = self.inputs.shape[0]
        if n == 0:
            raise ContractViolation("empty training batch")
        if self.actions.shape[0] != n or self.targets.shape[0] != n:
            raise ContractViolation(
                f"batch lengths differ: {n} inputs, {self.actions.shape[0]} actions, {self.targets.shape[0]} targets"
            )

    def __len__(self):
        return self.inputs.shape[0]


def init(spec: MlpSpec, rng: np.random.Generator, optimizer: bool = True) -> MlpParams:
    """Uniform fan-average initialization, zero biases, zeroed Adam moments."""
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    params = MlpParams(spec=spec, weights=weights, biases=biases)
    if optimizer:
        params.adam = AdamState.zeros_like(params.blocks())
    return params


def _check_input(params: MlpParams, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.spec.input_dim:
        raise ContractViolation(f"network expects inputs of length {params.spec.input_dim}, got shape {x.shape}")
    return x2, single


def _forward_all(params: MlpParams, x: np.ndarray) -> List[np.ndarray]:
    """Activations of every layer, input first, output last."""
    acts = [x]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w + b
        acts.append(z if i == last else np.maximum(z, 0.0))
    return acts


def forward(params: MlpParams, x) -> np.ndarray:
    """Q-values for one input vector or a batch of row vectors."""
    x2, single = _check_input(params, x)
    out = _forward_all(params, x2)[-1]
    return out[0] if single else out


def loss_and_gradients(params: MlpParams, batch: TrainBatch) -> Tuple[float, List[np.ndarray]]:
    """Mean squared error on the taken actions only, and its gradient per parameter block."""
    x, _ = _check_input(params, batch.inputs)
    if np.any(batch.actions < 0) or np.any(batch.actions >= params.spec.output_dim):
        raise ContractViolation(f"action index outside [0, {params.spec.output_dim})")
    acts = _forward_all(params, x)
    n = x.shape[0]
    rows = np.arange(n)
    residual = acts[-1][rows, batch.actions] - batch.targets
    loss = float(np.mean(residual ** 2))

    delta = np.zeros_like(acts[-1])
    delta[rows, batch.actions] = 2.0 * residual / n
    grads: List[np.ndarray] = []
    for i in range(len(params.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(acts[i].T @ delta)
        if i:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0.0)
    grads.reverse()
    return loss, grads


def train_step(
    params: MlpParams,
    batch: TrainBatch,
    lr: Optional[float] = None,
    config: Optional[AdamConfig] = None,
) -> Tuple[MlpParams, float]:
    """One Adam update in place; returns the parameters and the batch loss before the update."""
    if params.adam is None:
        raise ContractViolation("parameters were loaded for inference only (no optimizer state)")
    config = config or AdamConfig()
    lr = config.lr if lr is None else lr
    loss, grads = loss_and_gradients(params, batch)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDivergence(f"non-finite loss {loss} at Adam step {params.adam.step + 1}")
    adam = params.adam
    adam.step += 1
    c1 = 1.0 - config.beta1 ** adam.step
    c2 = 1.0 - config.beta2 ** adam.step
    for k, (p, g) in enumerate(zip(params.blocks(), grads)):
        adam.m[k] = config.beta1 * adam.m[k] + (1.0 - config.beta1) * g
        adam.v[k] = config.beta2 * adam.v[k] + (1.0 - config.beta2) * g * g
        p -= lr * (adam.m[k] / c1) / (np.sqrt(adam.v[k] / c2) + config.eps)
        if config.weight_decay and k % 2 == 0:
            p -= lr * config.weight_decay * p
    return params, loss


# Checkpoints


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=_DTYPE)
    return {"shape": list(a.shape), "dtype": _DTYPE, "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(block: dict, expected_shape) -> np.ndarray:
    if block.get("dtype") != _DTYPE:
        raise CheckpointError(f"unsupported dtype {block.get('dtype')!r}")
    shape = tuple(block["shape"])
    if shape != tuple(expected_shape):
        raise CheckpointError(f"block shape {shape} does not match the network ({tuple(expected_shape)})")
    raw = base64.b64decode(block["data"], validate=True)
    data = np.frombuffer(raw, dtype=_DTYPE)
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"block of shape {shape} holds {data.size} values")
    return data.reshape(shape).astype(float)


def save(params: MlpParams, path, metadata: Optional[dict] = None, include_optimizer: bool = True) -> Path:
    """Write a self-describing JSON checkpoint; arrays are little-endian float64 in base64."""
    path = Path(path)
    meta = dict(params.metadata)
    if metadata:
        meta.update(metadata)
    adam = None
    if include_optimizer and params.adam is not None:
        adam = {
            "step": params.adam.step,
            "m": [_encode(a) for a in params.adam.m],
            "v": [_encode(a) for a in params.adam.v],
        }
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": params.spec.to_dict(),
        "layers": [{"weights": _encode(w), "biases": _encode(b)} for w, b in zip(params.weights, params.biases)],
        "adam": adam,
        "metadata": meta,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=1)
    logger.info("saved checkpoint %s", path)
    return path


def load(path) -> MlpParams:
    """Read a checkpoint written by save(); parameters without optimizer state are inference-only."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            record = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path} is not a readable checkpoint: {e}") from e
    try:
        if record.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unknown format {record.get('format')!r}")
        if record.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {record.get('version')!r}")
        spec = MlpSpec(**record["spec"])
        sizes = spec.layer_sizes
        shapes = list(zip(sizes[:-1], sizes[1:]))
        if len(record["layers"]) != len(shapes):
            raise CheckpointError(f"{path}: {len(record['layers'])} layers, topology needs {len(shapes)}")
        weights = [_decode(layer["weights"], s) for layer, s in zip(record["layers"], shapes)]
        biases = [_decode(layer["biases"], (s[1],)) for layer, s in zip(record["layers"], shapes)]
        params = MlpParams(spec=spec, weights=weights, biases=biases, metadata=record.get("metadata") or {})
        adam = record.get("adam")
        if adam is not None:
            block_shapes = [b.shape for b in params.blocks()]
            params.adam = AdamState(
                m=[_decode(a, s) for a, s in zip(adam["m"], block_shapes)],
                v=[_decode(a, s) for a, s in zip(adam["v"], block_shapes)],
                step=int(adam["step"]),
            )
            if len(params.adam.m) != len(block_shapes) or len(params.adam.v) != len(block_shapes):
                raise CheckpointError(f"{path}: optimizer state does not cover every parameter block")
        return params
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e


class QNetwork:
    """A Q-value approximator: one output per discrete action."""

    def __init__(self, params: MlpParams, config: Optional[AdamConfig] = None):
        self.params = params
        self.config = config or AdamConfig()

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, config: Optional[AdamConfig] = None) -> "QNetwork":
        return cls(init(spec, rng), config)

    @property
    def spec(self) -> MlpSpec:
        return self.params.spec

    def __call__(self, x) -> np.ndarray:
        return forward(self.params, x)

    def fit(self, batch: TrainBatch) -> float:
        _, loss = train_step(self.params, batch, config=self.config)
        return loss

    def save(self, path, metadata: Optional[dict] = None) -> Path:
        return save(self.params, path, metadata)

    @classmethod
    def load(cls, path, config: Optional[AdamConfig] = None) -> "QNetwork":
        return cls(load(path), config)
