"""Dense rectifier networks with analytic gradients and the Adam optimizer.

All arithmetic is float64. A network maps a batch of feature rows to one output per action; the
training loss everywhere in the package is the per-output weighted squared error

.. code-block:: text

    L = 1/2 * mean_n sum_j w[n, j] * (f(x_n)[j] - y[n, j]) ** 2

Weighting lets Q-learning targets touch only the taken action without any gather/scatter in the
interface: the weight row is the one-hot of the logged action.

Models serialize to a versioned flat binary: ``b'ORLM'``, format version, layer count and layer
sizes as little-endian uint32, then each layer's weight matrix (row-major, shape out x in)
followed by its bias vector, all as little-endian float64.
"""
from dataclasses import dataclass, field
import logging
import struct
from typing import List, Optional, Sequence, Tuple

import numpy as np


MODEL_MAGIC = b'ORLM'
MODEL_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when array shapes or layer definitions do not line up."""


@dataclass
class MlpModel:
    """A fully connected network with rectifier hidden layers and an identity output layer.

    Parameters:
        layer_sizes:
            Sizes from input to output, e.g. ``(8, 256, 256, 4)``.
        weights:
            One matrix per layer, shape ``(layer_sizes[i + 1], layer_sizes[i])``.
        biases:
            One vector per layer, shape ``(layer_sizes[i + 1],)``.
        init_seed:
            Seed the parameters were drawn with, or None when unknown (e.g. loaded from bytes).
    """
    layer_sizes: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    init_seed: Optional[int] = None

    @property
    def input_dim(self) -> int:
        """Width of the input layer."""
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        """Width of the output layer."""
        return self.layer_sizes[-1]

    def copy(self) -> 'MlpModel':
        """Returns a deep copy with independent parameter arrays."""
        return MlpModel(self.layer_sizes,
                        [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases],
                        self.init_seed)


@dataclass
class Gradients:
    """Parameter gradients, shaped like the weights and biases of an MlpModel."""
    weights: List[np.ndarray]
    biases: List[np.ndarray]


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters of the Adam optimizer.

    Parameters:
        m_weights, m_biases:
            First-moment accumulators per parameter array.
        v_weights, v_biases:
            Second-moment accumulators per parameter array.
        step:
            Number of updates applied so far.
        step_size:
            Learning rate. Defaults to 5e-5.
        beta1, beta2, epsilon:
            Standard Adam constants.
    """
    m_weights: List[np.ndarray]
    m_biases: List[np.ndarray]
    v_weights: List[np.ndarray]
    v_biases: List[np.ndarray]
    step: int = 0
    step_size: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class _ForwardCache:
    """Layer inputs and pre-activations kept for backpropagation."""
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def mlp_init(layer_sizes: Sequence[int], seed: int) -> MlpModel:
    """Creates a network with Gaussian weights and zero biases.

    Weights of layer i are drawn from N(0, 1 / fan_in).

    Args:
        layer_sizes: Layer widths from input to output; at least two entries.
        seed: Seed for the weight draw.

    Returns:
        A new MlpModel. The same (layer_sizes, seed) always gives the same parameters.

    Raises:
        ShapeError: if fewer than two layer sizes are given or any size is not positive.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ShapeError(f'mlp_init: need at least an input and an output layer, got {sizes}')
    if any(s <= 0 for s in sizes):
        raise ShapeError(f'mlp_init: layer sizes must be positive, got {sizes}')
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    logging.debug('mlp_init: layer_sizes=%s seed=%s', sizes, seed)
    return MlpModel(sizes, weights, biases, seed)


def _as_batch(model: MlpModel, inputs: np.ndarray, fn_name: str) -> np.ndarray:
    """Checks the input width and promotes a single vector to a batch of one."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[np.newaxis, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f'{fn_name}: input shape {np.shape(inputs)} does not match input width '
                         f'{model.input_dim}')
    return x


def _forward_layers(model: MlpModel, x: np.ndarray) -> Tuple[np.ndarray, _ForwardCache]:
    """Runs the batch through all layers, recording what backpropagation needs."""
    cache = _ForwardCache()
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(a)
        z = a @ w.T + b
        cache.pre_activations.append(z)
        a = z if i == last else np.maximum(z, 0.0)
    return a, cache


def forward(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    """Evaluates the network.

    Args:
        model: The network.
        inputs: A feature vector of shape (in,) or a batch of shape (n, in).

    Returns:
        Output of shape (out,) for a vector input, (n, out) for a batch.

    Raises:
        ShapeError: if the input width does not match the first layer.
    """
    x = _as_batch(model, inputs, 'forward')
    out, _ = _forward_layers(model, x)
    if np.ndim(inputs) == 1:
        return out[0]
    return out


def forward_with_cache(model: MlpModel, inputs: np.ndarray) -> Tuple[np.ndarray, _ForwardCache]:
    """Evaluates a batch and keeps the intermediate values for backward().

    Used by losses that are not a weighted squared error and need their own output gradient.
    """
    return _forward_layers(model, _as_batch(model, inputs, 'forward_with_cache'))


def backward(model: MlpModel, cache: _ForwardCache, d_output: np.ndarray) -> Gradients:
    """Backpropagates an output gradient through a cached forward pass.

    Args:
        model: The network the cache was produced with.
        cache: Result of the forward pass over the same batch.
        d_output: Gradient of the scalar loss with respect to the batch output, shape (n, out).

    Returns:
        Gradients of the scalar loss with respect to every parameter.
    """
    n_layers = len(model.weights)
    d_weights: List[Optional[np.ndarray]] = [None] * n_layers
    d_biases: List[Optional[np.ndarray]] = [None] * n_layers
    delta = d_output
    for i in reversed(range(n_layers)):
        d_weights[i] = delta.T @ cache.inputs[i]
        d_biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (cache.pre_activations[i - 1] > 0.0)
    return Gradients(d_weights, d_biases)


def loss_and_grad(model: MlpModel,
                  inputs: np.ndarray,
                  targets: np.ndarray,
                  output_weights: np.ndarray) -> Tuple[float, Gradients]:
    """Computes the weighted squared-error loss and its exact parameter gradients.

    Args:
        model: The network.
        inputs: Batch of shape (n, in).
        targets: Regression targets of shape (n, out).
        output_weights: Per-output weights of shape (n, out); zero masks an output out.

    Returns:
        Tuple of (loss, gradients).

    Raises:
        ShapeError: if the batch shapes disagree with each other or with the model.
    """
    x = _as_batch(model, inputs, 'grad')
    t = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], -1)
    w = np.asarray(output_weights, dtype=np.float64).reshape(x.shape[0], -1)
    if t.shape != (x.shape[0], model.output_dim) or w.shape != t.shape:
        raise ShapeError(f'grad: targets {np.shape(targets)} / weights {np.shape(output_weights)} '
                         f'do not match batch of {x.shape[0]} x {model.output_dim}')
    out, cache = _forward_layers(model, x)
    err = out - t
    n = x.shape[0]
    loss = 0.5 * float(np.sum(w * err * err)) / n
    return loss, backward(model, cache, w * err / n)


def grad(model: MlpModel,
         inputs: np.ndarray,
         targets: np.ndarray,
         output_weights: np.ndarray) -> Gradients:
    """Parameter gradients of the weighted squared error; see loss_and_grad()."""
    return loss_and_grad(model, inputs, targets, output_weights)[1]


def adam_init(model: MlpModel,
              step_size: float = 5e-5,
              beta1: float = 0.9,
              beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    """Creates zeroed Adam accumulators matching the model's parameters."""
    return AdamState([np.zeros_like(w) for w in model.weights],
                     [np.zeros_like(b) for b in model.biases],
                     [np.zeros_like(w) for w in model.weights],
                     [np.zeros_like(b) for b in model.biases],
                     0, step_size, beta1, beta2, epsilon)


def adam_step(model: MlpModel,
              grads: Gradients,
              state: AdamState) -> Tuple[MlpModel, AdamState]:
    """Applies one bias-corrected Adam update.

    The inputs are not modified; new parameter and accumulator arrays are returned.

    Args:
        model: Current parameters.
        grads: Gradients of the loss at the current parameters.
        state: Optimizer state for this model.

    Returns:
        Tuple of (updated model, updated state). The step counter increases by exactly one.
    """
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    lr_t = state.step_size * np.sqrt(1.0 - b2 ** step) / (1.0 - b1 ** step)

    def update(params, gs, ms, vs):
        new_p, new_m, new_v = [], [], []
        for p, g, m, v in zip(params, gs, ms, vs):
            if p.shape != g.shape:
                raise ShapeError(f'adam_step: gradient shape {g.shape} != parameter shape '
                                 f'{p.shape}')
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            # eps is scaled to match the textbook form eps_hat = eps * sqrt(1 - b2^t)
            new_p.append(p - lr_t * m / (np.sqrt(v) + state.epsilon * np.sqrt(1.0 - b2 ** step)))
            new_m.append(m)
            new_v.append(v)
        return new_p, new_m, new_v

    w, mw, vw = update(model.weights, grads.weights, state.m_weights, state.v_weights)
    b, mb, vb = update(model.biases, grads.biases, state.m_biases, state.v_biases)
    new_model = MlpModel(model.layer_sizes, w, b, model.init_seed)
    new_state = AdamState(mw, mb, vw, vb, step, state.step_size, b1, b2, state.epsilon)
    return new_model, new_state


def model_to_bytes(model: MlpModel) -> bytes:
    """Serializes a model into the versioned flat binary format."""
    sizes = model.layer_sizes
    header = MODEL_MAGIC + struct.pack(f'<II{len(sizes)}I', MODEL_FORMAT_VERSION, len(sizes),
                                       *sizes)
    body = b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes()
                    for w, b in zip(model.weights, model.biases) for a in (w, b))
    return header + body


def model_from_bytes(blob: bytes) -> MlpModel:
    """Parses the versioned flat binary format.

    Raises:
        ShapeError: on a bad magic number, unsupported version or truncated body.
    """
    if blob[:4] != MODEL_MAGIC:
        raise ShapeError('model_from_bytes: not a model blob (bad magic)')
    if len(blob) < 12:
        raise ShapeError(f'model_from_bytes: truncated header, {len(blob)} of 12 bytes')
    version, count = struct.unpack_from('<II', blob, 4)
    if version != MODEL_FORMAT_VERSION:
        raise ShapeError(f'model_from_bytes: unsupported format version {version}')
    offset = 12 + 4 * count
    if len(blob) < offset:
        raise ShapeError(f'model_from_bytes: truncated layer sizes, expected {offset} bytes, '
                         f'got {len(blob)}')
    sizes = struct.unpack_from(f'<{count}I', blob, 12)
    expected = offset + 8 * sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
    if len(blob) != expected:
        raise ShapeError(f'model_from_bytes: expected {expected} bytes, got {len(blob)}')
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(blob, dtype='<f8', count=fan_out * fan_in, offset=offset)
        offset += 8 * fan_out * fan_in
        b = np.frombuffer(blob, dtype='<f8', count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpModel(tuple(sizes), weights, biases, None)


def save_model(model: MlpModel, path: str) -> None:
    """Writes a model to ``path`` in the flat binary format."""
    with open(path, 'wb') as fh:
        fh.write(model_to_bytes(model))


def load_model(path: str) -> MlpModel:
    """Reads a model written by save_model()."""
    with open(path, 'rb') as fh:
        return model_from_bytes(fh.read())
