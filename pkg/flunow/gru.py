"""
Single hidden layer gated recurrent unit in numpy.

    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    c_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t
    out = W_o (m * h_N) + b_o

h_0 = 0. m is an inverted-dropout mask (entries 0 or 1 / (1 - p)) during training and
all ones at inference. Loss is the mean squared error over batch and output channels.
"""
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ModelError
from .models import AttributionMap, GruForward, GruGradients, GruParameters, GruTrainResult, TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "flunow-gru/1"


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def init_gru(input_dim: int, hidden_dim: int, output_dim: int, seed: int) -> GruParameters:
    """Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)] per matrix, biases zero."""
    if min(input_dim, hidden_dim, output_dim) < 1:
        raise ValueError(f"dims must be positive, got ({input_dim}, {hidden_dim}, {output_dim})")
    rng = np.random.Generator(np.random.PCG64(seed))

    def uniform(rows, cols):
        s = 1.0 / np.sqrt(cols)
        return rng.uniform(-s, s, size=(rows, cols))

    return GruParameters(
        w_z=uniform(hidden_dim, input_dim),
        w_r=uniform(hidden_dim, input_dim),
        w_h=uniform(hidden_dim, input_dim),
        u_z=uniform(hidden_dim, hidden_dim),
        u_r=uniform(hidden_dim, hidden_dim),
        u_h=uniform(hidden_dim, hidden_dim),
        b_z=np.zeros(hidden_dim),
        b_r=np.zeros(hidden_dim),
        b_h=np.zeros(hidden_dim),
        w_o=uniform(output_dim, hidden_dim),
        b_o=np.zeros(output_dim),
    )


def _check_inputs(params: GruParameters, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 3 or inputs.shape[2] != params.input_dim:
        raise ValueError(f"expected batch x steps x {params.input_dim} inputs, got {inputs.shape}")
    if inputs.shape[1] == 0:
        raise ValueError("sequences need at least one step")
    if not np.isfinite(inputs).all():
        raise ValueError("non-finite input")
    return inputs


def _forward(params: GruParameters, inputs: np.ndarray, masks: Optional[np.ndarray]):
    B, N, _ = inputs.shape
    h = np.zeros((B, params.hidden_dim))
    cache = []
    for t in range(N):
        x = inputs[:, t, :]
        z = _sigmoid(x @ params.w_z.T + h @ params.u_z.T + params.b_z)
        r = _sigmoid(x @ params.w_r.T + h @ params.u_r.T + params.b_r)
        c = np.tanh(x @ params.w_h.T + (r * h) @ params.u_h.T + params.b_h)
        cache.append((x, h, z, r, c))
        h = (1.0 - z) * h + z * c
    dropped = h if masks is None else h * masks
    out = dropped @ params.w_o.T + params.b_o
    return out, h, cache


def _backward(params: GruParameters, inputs, masks, h_last, cache, dout) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Gradients of sum(dout * out) with respect to every parameter and every input."""
    grads = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    dropped = h_last if masks is None else h_last * masks
    grads["w_o"] = dout.T @ dropped
    grads["b_o"] = dout.sum(axis=0)
    dh = dout @ params.w_o
    if masks is not None:
        dh = dh * masks

    d_inputs = np.zeros_like(inputs)
    for t in reversed(range(len(cache))):
        x, h_prev, z, r, c = cache[t]
        dz = dh * (c - h_prev)
        dc = dh * z
        dh_prev = dh * (1.0 - z)

        da_h = dc * (1.0 - c * c)
        grads["w_h"] += da_h.T @ x
        grads["u_h"] += da_h.T @ (r * h_prev)
        grads["b_h"] += da_h.sum(axis=0)
        d_rh = da_h @ params.u_h
        dr = d_rh * h_prev
        dh_prev += d_rh * r

        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        grads["w_r"] += da_r.T @ x
        grads["u_r"] += da_r.T @ h_prev
        grads["b_r"] += da_r.sum(axis=0)
        grads["w_z"] += da_z.T @ x
        grads["u_z"] += da_z.T @ h_prev
        grads["b_z"] += da_z.sum(axis=0)

        dh_prev += da_z @ params.u_z + da_r @ params.u_r
        d_inputs[:, t, :] = da_z @ params.w_z + da_r @ params.w_r + da_h @ params.w_h
        dh = dh_prev
    return grads, d_inputs


def gru_forward(params: GruParameters, sequence, dropout_mask: Optional[np.ndarray] = None) -> GruForward:
    """Hidden states h_1..h_N and the output for one N x input_dim sequence."""
    sequence = np.asarray(sequence, dtype=float)
    if sequence.ndim != 2:
        raise ValueError(f"expected steps x {params.input_dim} sequence, got {sequence.shape}")
    inputs = _check_inputs(params, sequence[None, :, :])
    masks = None if dropout_mask is None else np.asarray(dropout_mask, dtype=float).reshape(1, -1)
    if masks is not None and masks.shape[1] != params.hidden_dim:
        raise ValueError(f"dropout mask needs {params.hidden_dim} entries")
    out, h_last, cache = _forward(params, inputs, masks)
    hidden = np.stack([step[1][0] for step in cache[1:]] + [h_last[0]])
    return GruForward(hidden=hidden, output=out[0])


def predict_gru(params: GruParameters, inputs) -> np.ndarray:
    """Inference outputs (no dropout) for a batch x steps x input_dim array."""
    out, _, _ = _forward(params, _check_inputs(params, inputs), None)
    return out


def gru_backward(params: GruParameters, inputs, targets, masks: Optional[np.ndarray] = None) -> GruGradients:
    """Exact BPTT gradients of the batch MSE loss."""
    inputs = _check_inputs(params, inputs)
    targets = np.asarray(targets, dtype=float)
    B = inputs.shape[0]
    if targets.shape != (B, params.output_dim):
        raise ValueError(f"expected targets of shape {(B, params.output_dim)}, got {targets.shape}")
    if masks is not None:
        masks = np.asarray(masks, dtype=float)
        if masks.shape != (B, params.hidden_dim):
            raise ValueError(f"expected masks of shape {(B, params.hidden_dim)}, got {masks.shape}")
    out, h_last, cache = _forward(params, inputs, masks)
    err = out - targets
    loss = float(np.mean(err ** 2))
    dout = 2.0 * err / err.size
    grads, d_inputs = _backward(params, inputs, masks, h_last, cache, dout)
    return GruGradients(params=grads, inputs=d_inputs, loss=loss)


def train_gru(
    params: GruParameters,
    inputs,
    targets,
    config: TrainConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> GruTrainResult:
    """
    Plain minibatch SGD. Each epoch shuffles the examples with the config seed's generator
    and draws fresh dropout masks per minibatch. The epoch loss is the example-weighted mean
    of the minibatch losses.
    """
    inputs = _check_inputs(params, inputs)
    targets = np.asarray(targets, dtype=float)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty set")
    if targets.shape != (n, params.output_dim):
        raise ValueError(f"expected targets of shape {(n, params.output_dim)}, got {targets.shape}")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    trained = params.copy()
    keep = 1.0 - config.dropout_rate
    trace: List[float] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            masks = None
            if config.dropout_rate > 0:
                masks = (rng.random((idx.size, trained.hidden_dim)) < keep) / keep
            grads = gru_backward(trained, inputs[idx], targets[idx], masks)
            if not np.isfinite(grads.loss):
                raise ModelError(f"non-finite training loss at epoch {epoch}")
            total += grads.loss * idx.size
            if config.learning_rate > 0:
                for name, g in grads.params.items():
                    getattr(trained, name)[...] -= config.learning_rate * g
        epoch_loss = total / n
        trace.append(epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
    logger.debug(f"trained GRU for {config.epochs} epochs, loss {trace[0]:.6g} -> {trace[-1]:.6g}")
    return GruTrainResult(params=trained, loss_trace=trace)


def saliency_maps(params: GruParameters, sequence) -> np.ndarray:
    """|d out_k / d x[t, c]| for every output k at once: output_dim x N x input_dim."""
    sequence = np.asarray(sequence, dtype=float)
    if sequence.ndim != 2:
        raise ValueError(f"expected steps x {params.input_dim} sequence, got {sequence.shape}")
    O = params.output_dim
    inputs = _check_inputs(params, np.repeat(sequence[None, :, :], O, axis=0))
    _, h_last, cache = _forward(params, inputs, None)
    _, d_inputs = _backward(params, inputs, None, h_last, cache, np.eye(O))
    return np.abs(d_inputs)


def saliency(
    params: GruParameters,
    sequence,
    target_index: int,
    location: str = "",
    horizon: int = 0,
    use_queries: bool = False,
    channel_names: Sequence[str] = (),
    maps: Optional[np.ndarray] = None,
) -> AttributionMap:
    """
    Saliency of one output location: N steps x input channels, step N being the latest.
    `maps` is a saliency_maps result for the same params and sequence, reused when several
    outputs of one sequence are needed.
    """
    if not 0 <= target_index < params.output_dim:
        raise IndexError(f"target index {target_index} out of range for {params.output_dim} outputs")
    if maps is None:
        maps = saliency_maps(params, sequence)
    values = np.asarray(maps)[target_index]
    steps = values.shape[0]
    return AttributionMap(
        kind="saliency",
        model="GRU",
        use_queries=use_queries,
        location=location,
        horizon=horizon,
        values=values,
        row_labels=tuple(f"step{s + 1}" for s in range(steps)),
        col_labels=tuple(channel_names) or tuple(f"c{j}" for j in range(params.input_dim)),
    )


def checkpoint_to_dict(params: GruParameters, seed: int, **meta) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "dims": {"input": params.input_dim, "hidden": params.hidden_dim, "output": params.output_dim},
        "seed": int(seed),
        "meta": meta,
        "weights": {name: arr.tolist() for name, arr in params.arrays().items()},
    }


def checkpoint_from_dict(data: dict) -> Tuple[GruParameters, int]:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {data.get('format')!r}")
    weights = data["weights"]
    missing = [name for name in GruParameters.NAMES if name not in weights]
    if missing:
        raise ValueError(f"checkpoint lacks weights {missing}")
    params = GruParameters(**{name: np.asarray(weights[name], dtype=float) for name in GruParameters.NAMES})
    dims = data["dims"]
    if (params.input_dim, params.hidden_dim, params.output_dim) != (dims["input"], dims["hidden"], dims["output"]):
        raise ValueError("checkpoint weights disagree with its declared dims")
    return params, int(data["seed"])


def save_checkpoint(params: GruParameters, path, seed: int, **meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_to_dict(params, seed, **meta), indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> Tuple[GruParameters, int]:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))
