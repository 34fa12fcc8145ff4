"""Per-hand neural retargeting network: dataset labeling, a numpy MLP, Adam training."""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xdex import kernels
from xdex.eigengrasp import synthesize
from xdex.formats import FormatError
from xdex.pose_model import POSE_DIM, HandSkeleton, default_skeleton, hand_keypoints_batch, validate_pose
from xdex.retarget import RetargetConfig, map_targets, resolve_scale, solve
from xdex.robot_hand import RobotHandModel, fk_batch

HIDDEN = 512
MLP_MAGIC = b"XDEXMLP1"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True, eq=False)
class RetargetDataset:
    inputs: np.ndarray  # (N, 45)
    labels: np.ndarray  # (N, m)
    hand_tag: str = "hand"
    lower: np.ndarray | None = None  # joint limits of the labeled hand
    upper: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    validation_fraction: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(eq=False)
class MlpParams:
    """MLP parameters stored in one flat buffer.

    ``weights[i]`` has shape (fan_in, fan_out) and ``biases[i]`` (fan_out,);
    both are views into ``flat`` so an optimizer can update everything at once.
    Hidden layers use ReLU; the output is clamped to ``[lower, upper]``.
    """

    layer_dims: tuple[int, ...]
    flat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    hand_tag: str = "hand"
    weights: list = field(init=False, repr=False)
    biases: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        if self.flat.size != n_parameters(self.layer_dims):
            raise ValueError("flat buffer size does not match layer_dims")
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != (self.layer_dims[-1],) or self.upper.shape != self.lower.shape:
            raise ValueError("joint limits must match the output dimension")
        self.weights, self.biases = [], []
        pos = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            self.weights.append(self.flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            self.biases.append(self.flat[pos:pos + fan_out])
            pos += fan_out

    @property
    def dtype(self):
        return self.flat.dtype

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_dims, self.flat.copy(), self.lower, self.upper, self.hand_tag)


def n_parameters(layer_dims) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def default_layer_dims(m: int) -> tuple[int, ...]:
    return (POSE_DIM, HIDDEN, HIDDEN, HIDDEN, m)


def init_params(layer_dims, lower, upper, seed: int = 0, dtype="float32",
                hand_tag: str = "hand") -> MlpParams:
    """He-normal hidden weights, zero hidden biases, output bias at mid-range."""
    rng = np.random.default_rng(seed)
    params = MlpParams(tuple(layer_dims), np.zeros(n_parameters(layer_dims), dtype=dtype),
                       lower, upper, hand_tag)
    last = len(params.weights) - 1
    for i, W in enumerate(params.weights):
        fan_in = W.shape[0]
        std = np.sqrt((1.0 if i == last else 2.0) / fan_in)
        W[...] = rng.normal(0.0, std, size=W.shape)
    params.biases[last][...] = 0.5 * (params.lower + params.upper)
    return params


def _check_batch(params: MlpParams, X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != params.layer_dims[0]:
        raise ValueError(f"expected (B, {params.layer_dims[0]}) input, got {X.shape}")
    return X.astype(params.dtype, copy=False)


def _forward_cache(params: MlpParams, X):
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W
        h += b
        if i != last:
            np.maximum(h, 0, out=h)
        acts.append(h)
    return acts


def mlp_forward(params: MlpParams, batch, clamp_output: bool = True) -> np.ndarray:
    acts = _forward_cache(params, _check_batch(params, batch))
    out = acts[-1]
    if clamp_output:
        out = np.clip(out, params.lower.astype(out.dtype), params.upper.astype(out.dtype))
    return out


def mlp_backward(params: MlpParams, batch, labels, clamp_output: bool = True,
                 out: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean squared error over all B*m outputs and its gradient as a flat vector.

    With ``clamp_output`` the clamp passes gradient only where the raw
    output lies strictly inside the joint limits.
    """
    X = _check_batch(params, batch)
    Y = np.asarray(labels, dtype=params.dtype)
    acts = _forward_cache(params, X)
    raw = acts[-1]
    if Y.shape != raw.shape:
        raise ValueError(f"labels must be {raw.shape}, got {Y.shape}")
    if clamp_output:
        lo = params.lower.astype(raw.dtype)
        hi = params.upper.astype(raw.dtype)
        pred = np.clip(raw, lo, hi)
        active = (raw > lo) & (raw < hi)
    else:
        pred = raw
    err = pred - Y
    loss = float(np.mean(err.astype(np.float64) ** 2))
    delta = (2.0 / err.size) * err
    if clamp_output:
        delta = delta * active
    grad = np.empty_like(params.flat) if out is None else out
    view = MlpParams(params.layer_dims, grad, params.lower, params.upper)
    for i in range(len(params.weights) - 1, -1, -1):
        np.matmul(acts[i].T, delta, out=view.weights[i])
        np.sum(delta, axis=0, out=view.biases[i])
        if i > 0:
            delta = delta @ params.weights[i].T
            np.multiply(delta, acts[i] > 0, out=delta)
    return loss, grad


def predict(params: MlpParams, theta_batch) -> np.ndarray:
    """Feasible joint configurations (float64) for a batch of 45-D poses."""
    # clamp after widening: float32 copies of the limits can fall outside them
    raw = mlp_forward(params, theta_batch, clamp_output=False).astype(np.float64)
    return np.clip(raw, params.lower, params.upper)


@dataclass
class TrainResult:
    params: MlpParams
    train_loss: list[float]
    val_loss: list[float]
    train_index: np.ndarray
    val_index: np.ndarray


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(fraction * n))), n - 1) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(dataset: RetargetDataset, recipe: TrainRecipe = TrainRecipe(), seed: int = 0,
          lower=None, upper=None, layer_dims=None, log=None) -> TrainResult:
    """Adam on shuffled minibatches; deterministic for a fixed seed.

    The optimized loss is the MSE of the raw (pre-clamp) output: labels lie
    inside the limits, so it bounds the clamped MSE from above and never
    loses gradient on outputs stuck outside the box. ``val_loss`` is the
    clamped-prediction MSE on the held-out split.
    """
    X = np.asarray(dataset.inputs)
    Y = np.asarray(dataset.labels)
    m = Y.shape[1]
    if lower is None:
        lower = dataset.lower if dataset.lower is not None else Y.min(axis=0)
    if upper is None:
        upper = dataset.upper if dataset.upper is not None else Y.max(axis=0)
    dims = tuple(layer_dims) if layer_dims is not None else default_layer_dims(m)
    params = init_params(dims, lower, upper, seed=seed, dtype=recipe.dtype, hand_tag=dataset.hand_tag)
    dt = params.dtype
    X = X.astype(dt)
    Y = Y.astype(dt)
    tr, va = split_indices(len(X), recipe.validation_fraction, seed)
    if len(tr) == 0:
        tr = va
    rng = np.random.default_rng([seed, 2])
    m1 = np.zeros_like(params.flat)
    m2 = np.zeros_like(params.flat)
    grad = np.empty_like(params.flat)
    train_hist, val_hist = [], []
    step = 0
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked per epoch
        for epoch in range(1, recipe.epochs + 1):
            t0 = time.perf_counter()
            order = tr[rng.permutation(len(tr))]
            total = 0.0
            for start in range(0, len(order), recipe.batch_size):
                idx = order[start:start + recipe.batch_size]
                loss, _ = mlp_backward(params, X[idx], Y[idx], clamp_output=False, out=grad)
                step += 1
                kernels.adam_update(params.flat, grad, m1, m2, recipe.learning_rate,
                                    recipe.beta1, recipe.beta2, recipe.eps, step)
                total += loss * len(idx)
            train_loss = total / len(order)
            val_loss = float(np.mean((mlp_forward(params, X[va]) - Y[va]).astype(np.float64) ** 2)) \
                if len(va) else train_loss
            if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
                raise TrainingDivergedError(epoch)
            train_hist.append(train_loss)
            val_hist.append(val_loss)
            if log is not None:
                log(epoch, train_loss, val_loss, time.perf_counter() - t0)
    return TrainResult(params, train_hist, val_hist, tr, va)


# --------------------------------------------------------------------------
# labeling


def _label_chunk(model, skeleton, poses, config, scale):
    kp = hand_keypoints_batch(skeleton, poses)
    q0 = model.mid_range()
    out = np.empty((len(poses), model.m))
    for i in range(len(poses)):
        targets = map_targets(kp[i], model, scale)
        out[i] = solve(model, targets, q0, config).q
    return out


def generate_training_set(model: RobotHandModel, poses, config: RetargetConfig = RetargetConfig(),
                          skeleton: HandSkeleton | None = None, jobs: int = 1) -> RetargetDataset:
    """Label every pose with the solver, started independently at mid-range with no smoothing."""
    skeleton = skeleton or default_skeleton()
    P = validate_pose(np.atleast_2d(np.asarray(poses, dtype=np.float64)))
    if len(P) == 0:
        raise ValueError("pose dataset is empty")
    config = dataclasses.replace(config, smoothness_weight=0.0)
    scale = resolve_scale(model, config, skeleton)
    if jobs <= 1 or len(P) < 2 * jobs:
        labels = _label_chunk(model, skeleton, P, config, scale)
    else:
        chunks = np.array_split(P, jobs)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_label_chunk, [model] * jobs, [skeleton] * jobs, chunks,
                                  [config] * jobs, [scale] * jobs))
        labels = np.vstack(parts)
    return RetargetDataset(P, labels, model.name, model.lower.copy(), model.upper.copy())


def fingertip_error(model: RobotHandModel, q_pred, q_ref) -> float:
    """Mean Euclidean fingertip distance between two configuration batches."""
    a = fk_batch(model, q_pred)[:, 1:]
    b = fk_batch(model, q_ref)[:, 1:]
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def predict_weights(params: MlpParams, basis, w_batch) -> np.ndarray:
    """Joint targets for eigengrasp weights: the network applied to the synthesized poses."""
    return predict(params, synthesize(basis, w_batch))


# --------------------------------------------------------------------------
# weights files


def params_to_json(params: MlpParams) -> dict:
    return {
        "layer_dims": list(params.layer_dims),
        "dtype": str(params.dtype),
        "hand_tag": params.hand_tag,
        "joint_limits": {"lower": params.lower.tolist(), "upper": params.upper.tolist()},
        "layers": [
            {"weight": W.astype(np.float64).tolist(), "bias": b.astype(np.float64).tolist()}
            for W, b in zip(params.weights, params.biases)
        ],
    }


def params_from_json(doc: dict) -> MlpParams:
    dims = tuple(doc["layer_dims"])
    params = MlpParams(dims, np.zeros(n_parameters(dims), dtype=doc.get("dtype", "float64")),
                       doc["joint_limits"]["lower"], doc["joint_limits"]["upper"],
                       doc.get("hand_tag", "hand"))
    if len(doc["layers"]) != len(dims) - 1:
        raise FormatError("layer count does not match layer_dims")
    for layer, W, b in zip(doc["layers"], params.weights, params.biases):
        W[...] = np.asarray(layer["weight"], dtype=np.float64).reshape(W.shape)
        b[...] = np.asarray(layer["bias"], dtype=np.float64).reshape(b.shape)
    return params


def save_params(path: str | Path, params: MlpParams) -> None:
    path = Path(path)
    if path.suffix == ".bin":
        path.write_bytes(params_to_bytes(params))
    else:
        path.write_text(json.dumps(params_to_json(params), sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> MlpParams:
    raw = Path(path).read_bytes()
    if raw[:8] == MLP_MAGIC:
        return params_from_bytes(raw)
    try:
        return params_from_json(json.loads(raw.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: neither JSON weights nor magic {MLP_MAGIC!r}") from exc


def params_to_bytes(params: MlpParams) -> bytes:
    """b"XDEXMLP1", u32 L+1, u32 dims, u32 tag length, utf-8 tag, f64 lower/upper,
    then every layer's weight (fan_in x fan_out) and bias as little-endian float32."""
    tag = params.hand_tag.encode("utf-8")
    dims = params.layer_dims
    head = MLP_MAGIC + struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    head += struct.pack("<I", len(tag)) + tag
    head += params.lower.astype("<f8").tobytes() + params.upper.astype("<f8").tobytes()
    return head + params.flat.astype("<f4").tobytes()


def params_from_bytes(raw: bytes) -> MlpParams:
    if raw[:8] != MLP_MAGIC:
        raise FormatError(f"bad magic bytes {raw[:8]!r}, expected {MLP_MAGIC!r}")
    pos = 8
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    dims = struct.unpack_from(f"<{count}I", raw, pos)
    pos += 4 * count
    (tag_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tag = raw[pos:pos + tag_len].decode("utf-8")
    pos += tag_len
    m = dims[-1]
    lower = np.frombuffer(raw, "<f8", m, pos)
    upper = np.frombuffer(raw, "<f8", m, pos + 8 * m)
    pos += 16 * m
    n = n_parameters(dims)
    if len(raw) - pos != 4 * n:
        raise FormatError(f"weight payload at offset {pos} has {len(raw) - pos} bytes, expected {4 * n}")
    flat = np.frombuffer(raw, "<f4", n, pos).astype(np.float32)
    return MlpParams(dims, flat, lower.copy(), upper.copy(), tag)
