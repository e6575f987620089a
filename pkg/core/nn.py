"""
Dense neural-network engine for graph models.

Node tensors are shaped (S, N, d): S samples (time windows, or 1 for static
graphs), N nodes, d features. Every layer implements an explicit backward
pass; ``grad_check`` compares those against central finite differences.

Graph propagation and per-node transforms run one node at a time over the
non-zero entries of each row, in index order. A node's output therefore only
depends on its own neighborhood, bit for bit, whatever else is in the graph.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError, TrainingDivergedError

GCN = 'gcn'
SAGE_MEAN = 'sage_mean'
TEMPORAL_CONV = 'temporal_conv'
LINEAR = 'linear'
RELU = 'relu'
LAYER_KINDS = (GCN, SAGE_MEAN, TEMPORAL_CONV, LINEAR, RELU)

NODE_SCALAR = 'node_scalar'
CLASS_LOGITS = 'class_logits'
EDGE_SCALAR = 'edge_scalar'
DECODER_KINDS = (NODE_SCALAR, CLASS_LOGITS, EDGE_SCALAR)

CUSTOMIZED_TEMPORAL = 'customized_temporal'
EMBEDDING_MODELS = (GCN, SAGE_MEAN, CUSTOMIZED_TEMPORAL)

DEFAULT_SCALES = ((3, 1), (3, 2), (5, 1))
DEFAULT_CHANNELS = 8
MAX_GRAD_CHECK_PARAMS = 10_000


class ParamTensor:
    """Trainable matrix with its gradient buffer"""

    def __init__(self, name, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f'ParamTensor({self.name!r}, shape={self.value.shape})'


def glorot(name, fan_in, fan_out, rng, shape=None):
    """Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))"""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ParamTensor(name, rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))


def zeros(name, shape):
    return ParamTensor(name, np.zeros(shape))


def as_node_tensor(x):
    """Promote (N, d) to (1, N, d)"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, :, :]
    if x.ndim != 3:
        raise ShapeError(f'expected an (N, d) or (S, N, d) tensor, got shape {x.shape}')
    return x


def normalize_adjacency(g, self_loop_weight=1.0):
    """D~^{-1/2} (A + I) D~^{-1/2}, exactly symmetric"""
    adjacency = g.adjacency() + self_loop_weight * np.eye(g.node_count)
    inv_sqrt = 1.0 / np.sqrt(adjacency.sum(axis=1))
    scale = inv_sqrt[:, None] * inv_sqrt[None, :]
    return adjacency * scale


def neighbor_mean_matrix(g):
    """Row-normalized weighted adjacency without self-loops; isolated rows are zero"""
    adjacency = g.adjacency()
    totals = adjacency.sum(axis=1, keepdims=True)
    return np.divide(adjacency, totals, out=np.zeros_like(adjacency), where=totals > 0)


class Propagator:
    """Applies a dense propagation matrix row by row over its non-zero entries"""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.rows = []
        for row in self.matrix:
            idx = np.flatnonzero(row)
            self.rows.append((idx, row[idx]))

    @property
    def size(self):
        return len(self.rows)

    def apply(self, h):
        h = as_node_tensor(h)
        if h.shape[1] != self.size:
            raise ShapeError(f'propagator over {self.size} nodes got {h.shape[1]} rows')
        out = np.zeros(h.shape)
        for i, (idx, weights) in enumerate(self.rows):
            if len(idx):
                out[:, i, :] = np.tensordot(h[:, idx, :], weights, axes=([1], [0]))
        return out

    def apply_transpose(self, grad):
        return np.einsum('nm,snd->smd', self.matrix, grad)


def node_matmul(h, w):
    """(S, N, i) @ (i, o), one node at a time"""
    if h.shape[-1] != w.shape[0]:
        raise ShapeError(f'cannot multiply width {h.shape[-1]} by a {w.shape} matrix')
    out = np.empty(h.shape[:2] + (w.shape[1],))
    for i in range(h.shape[1]):
        out[:, i, :] = h[:, i, :] @ w
    return out


@dataclass
class GraphContext:
    """Everything a forward pass needs to know about the graph"""

    gcn: Propagator
    mean: Propagator
    edge_pairs: np.ndarray = None

    @classmethod
    def from_graph(cls, g, edge_pairs=None):
        pairs = None if edge_pairs is None else np.asarray(edge_pairs, dtype=np.int64).reshape(-1, 2)
        return cls(Propagator(normalize_adjacency(g)), Propagator(neighbor_mean_matrix(g)), pairs)

    def with_edges(self, edge_pairs):
        return GraphContext(self.gcn, self.mean, np.asarray(edge_pairs, dtype=np.int64).reshape(-1, 2))


def _activate(pre, activation):
    if activation == RELU:
        return np.maximum(pre, 0.0)
    return pre


def _activation_grad(grad, pre, activation):
    if activation == RELU:
        return grad * (pre > 0)
    return grad


def gcn_forward(a_hat, h, w, activation=RELU, bias=None):
    """sigma(A_hat . H . W [+ b])"""
    propagator = a_hat if isinstance(a_hat, Propagator) else Propagator(a_hat)
    squeeze = np.ndim(h) == 2
    pre = node_matmul(propagator.apply(h), w.value)
    if bias is not None:
        pre = pre + bias.value
    out = _activate(pre, activation)
    return out[0] if squeeze else out


def sage_mean_forward(g, h, w_self, w_neigh, bias=None, activation=RELU):
    """ReLU(H . W_self + mean_neighbors(H) . W_neigh [+ b]), full neighborhoods"""
    squeeze = np.ndim(h) == 2
    x = as_node_tensor(h)
    mean = Propagator(neighbor_mean_matrix(g)).apply(x)
    pre = node_matmul(x, w_self.value) + node_matmul(mean, w_neigh.value)
    if bias is not None:
        pre = pre + bias.value
    out = _activate(pre, activation)
    return out[0] if squeeze else out


def _dilated_index(length, size, dilation):
    span = (size - 1) * dilation
    if length < span + 1:
        raise ShapeError(f'window of length {length} is shorter than receptive field {span + 1}')
    return np.arange(span, length)[:, None] - np.arange(size)[None, :] * dilation


def _conv_scale(x, weight, bias, dilation):
    """Causal dilated convolution, ReLU and max-pool over time for one scale"""
    idx = _dilated_index(x.shape[-1], weight.shape[1], dilation)
    unfolded = x[..., idx]
    pre = unfolded @ weight.T + bias
    act = np.maximum(pre, 0.0)
    arg = act.argmax(axis=-2)
    pooled = np.take_along_axis(act, arg[..., None, :], axis=-2)[..., 0, :]
    return pooled, (idx, unfolded, pre, arg)


def temporal_conv_forward(window, filters, dilations, biases=None):
    """Feature vector of one node's window: pooled causal convolutions per (filter, dilation)"""
    x = np.asarray(window, dtype=np.float64).reshape(-1)
    features = []
    for i, (filt, dilation) in enumerate(zip(filters, dilations)):
        weight = filt.value if isinstance(filt, ParamTensor) else np.asarray(filt, dtype=np.float64)
        weight = weight.reshape(-1, weight.shape[-1])
        bias = np.zeros(weight.shape[0]) if biases is None else np.asarray(biases[i].value)
        pooled, _ = _conv_scale(x, weight, bias, dilation)
        features.append(pooled)
    return np.concatenate(features)


def mean_pool(h, rows):
    """Mean of the selected rows, summed in sorted index order"""
    rows = sorted(int(r) for r in rows)
    if not rows:
        raise ShapeError('mean_pool needs at least one row')
    return np.asarray(h, dtype=np.float64)[rows].mean(axis=0)


class Layer:
    kind = ''

    def parameters(self):
        return []

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class GCNLayer(Layer):
    kind = GCN

    def __init__(self, in_width, out_width, rng, activation=RELU, name='gcn'):
        self.activation = activation
        self.weight = glorot(f'{name}.weight', in_width, out_width, rng)
        self.bias = zeros(f'{name}.bias', (out_width,))

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, ctx):
        self._ctx = ctx
        self._aggregated = ctx.gcn.apply(x)
        self._pre = node_matmul(self._aggregated, self.weight.value) + self.bias.value
        return _activate(self._pre, self.activation)

    def backward(self, grad):
        grad = _activation_grad(grad, self._pre, self.activation)
        self.weight.grad += np.einsum('sni,sno->io', self._aggregated, grad)
        self.bias.grad += grad.sum(axis=(0, 1))
        return self._ctx.gcn.apply_transpose(grad @ self.weight.value.T)


class SageMeanLayer(Layer):
    kind = SAGE_MEAN

    def __init__(self, in_width, out_width, rng, activation=RELU, name='sage'):
        self.activation = activation
        self.weight_self = glorot(f'{name}.weight_self', in_width, out_width, rng)
        self.weight_neigh = glorot(f'{name}.weight_neigh', in_width, out_width, rng)
        self.bias = zeros(f'{name}.bias', (out_width,))

    def parameters(self):
        return [self.weight_self, self.weight_neigh, self.bias]

    def forward(self, x, ctx):
        self._ctx = ctx
        self._x = x
        self._mean = ctx.mean.apply(x)
        self._pre = (node_matmul(x, self.weight_self.value) + node_matmul(self._mean, self.weight_neigh.value)
                     + self.bias.value)
        return _activate(self._pre, self.activation)

    def backward(self, grad):
        grad = _activation_grad(grad, self._pre, self.activation)
        self.weight_self.grad += np.einsum('sni,sno->io', self._x, grad)
        self.weight_neigh.grad += np.einsum('sni,sno->io', self._mean, grad)
        self.bias.grad += grad.sum(axis=(0, 1))
        return grad @ self.weight_self.value.T + self._ctx.mean.apply_transpose(grad @ self.weight_neigh.value.T)


class LinearLayer(Layer):
    kind = LINEAR

    def __init__(self, in_width, out_width, rng, activation=None, name='linear'):
        self.activation = activation
        self.weight = glorot(f'{name}.weight', in_width, out_width, rng)
        self.bias = zeros(f'{name}.bias', (out_width,))

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, ctx=None):
        self._x = x
        self._pre = node_matmul(x, self.weight.value) + self.bias.value
        return _activate(self._pre, self.activation)

    def backward(self, grad):
        grad = _activation_grad(grad, self._pre, self.activation)
        self.weight.grad += np.einsum('sni,sno->io', self._x, grad)
        self.bias.grad += grad.sum(axis=(0, 1))
        return grad @ self.weight.value.T


class ReluLayer(Layer):
    kind = RELU

    def forward(self, x, ctx=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class TemporalConvLayer(Layer):
    """Multi-scale causal dilated convolutions over each node's window, max-pooled over time"""

    kind = TEMPORAL_CONV

    def __init__(self, rng, scales=DEFAULT_SCALES, channels=DEFAULT_CHANNELS, name='temporal'):
        self.scales = tuple(tuple(scale) for scale in scales)
        self.channels = channels
        self.filters = []
        self.biases = []
        for i, (size, _) in enumerate(self.scales):
            self.filters.append(glorot(f'{name}.filter{i}', size, channels, rng, shape=(channels, size)))
            self.biases.append(zeros(f'{name}.bias{i}', (channels,)))

    @property
    def out_width(self):
        return self.channels * len(self.scales)

    def parameters(self):
        return [p for pair in zip(self.filters, self.biases) for p in pair]

    def forward(self, x, ctx=None):
        self._x_shape = x.shape
        self._caches = []
        pooled = []
        for (_, dilation), weight, bias in zip(self.scales, self.filters, self.biases):
            out, cache = _conv_scale(x, weight.value, bias.value, dilation)
            pooled.append(out)
            self._caches.append(cache)
        return np.concatenate(pooled, axis=-1)

    def backward(self, grad):
        dx = np.zeros(self._x_shape)
        for i, (weight, bias, cache) in enumerate(zip(self.filters, self.biases, self._caches)):
            idx, unfolded, pre, arg = cache
            g = grad[..., i * self.channels:(i + 1) * self.channels]
            dpre = np.zeros(pre.shape)
            np.put_along_axis(dpre, arg[..., None, :], g[..., None, :], axis=-2)
            dpre *= pre > 0
            weight.grad += np.einsum('sntc,snta->ca', dpre, unfolded)
            bias.grad += dpre.sum(axis=(0, 1, 2))
            np.add.at(dx, (slice(None), slice(None), idx), dpre @ weight.value)
        return dx


class EdgeScalarDecoder(Layer):
    """Concatenates the two endpoint embeddings and applies a linear map"""

    kind = EDGE_SCALAR

    def __init__(self, dim, rng, name='edge_decoder'):
        self.dim = dim
        self.linear = LinearLayer(2 * dim, 1, rng, name=name)

    def parameters(self):
        return self.linear.parameters()

    def forward(self, x, ctx):
        if ctx.edge_pairs is None:
            raise ShapeError('edge decoder needs edge_pairs in the graph context')
        self._pairs = ctx.edge_pairs
        self._x_shape = x.shape
        joined = np.concatenate([x[:, self._pairs[:, 0], :], x[:, self._pairs[:, 1], :]], axis=-1)
        return self.linear.forward(joined)

    def backward(self, grad):
        djoined = self.linear.backward(grad)
        dx = np.zeros(self._x_shape)
        np.add.at(dx, (slice(None), self._pairs[:, 0]), djoined[..., :self.dim])
        np.add.at(dx, (slice(None), self._pairs[:, 1]), djoined[..., self.dim:])
        return dx


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int = 0
    activation: str = RELU


@dataclass(frozen=True)
class ModelSpec:
    """Encoder layer sequence ending at the embedding width, plus a decoder"""

    layers: tuple
    dim: int
    decoder: str = NODE_SCALAR
    out_width: int = 1
    temporal_scales: tuple = DEFAULT_SCALES
    temporal_channels: int = DEFAULT_CHANNELS

    def __post_init__(self):
        if self.dim <= 0:
            raise ShapeError('embedding dimension must be positive')
        if self.decoder not in DECODER_KINDS:
            raise ShapeError(f'unknown decoder {self.decoder!r}')
        widths = []
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ShapeError(f'unknown layer kind {layer.kind!r}')
            if layer.kind in (GCN, SAGE_MEAN, LINEAR):
                if layer.width <= 0:
                    raise ShapeError(f'{layer.kind} layer needs a positive width')
                widths.append(layer.width)
        if not widths or widths[-1] != self.dim:
            raise ShapeError(f'last encoder width must equal dim={self.dim}')

    @classmethod
    def for_model(cls, model, dim=16, hidden=32, decoder=NODE_SCALAR, out_width=1, **kwargs):
        """Two graph layers of the chosen kind; the temporal variant puts convolutions first"""
        if model not in EMBEDDING_MODELS:
            raise ShapeError(f'unknown embedding model {model!r}')
        graph_kind = SAGE_MEAN if model == SAGE_MEAN else GCN
        layers = (LayerSpec(graph_kind, hidden), LayerSpec(graph_kind, dim))
        if model == CUSTOMIZED_TEMPORAL:
            layers = (LayerSpec(TEMPORAL_CONV),) + layers
        return cls(layers=layers, dim=dim, decoder=decoder, out_width=out_width, **kwargs)


class Network:
    """Encoder + decoder built from a ModelSpec; the encoder output is the node embedding"""

    def __init__(self, spec, in_width, seed=0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.encoder = []
        width = in_width
        for i, layer in enumerate(spec.layers):
            name = f'encoder{i}'
            if layer.kind == GCN:
                built = GCNLayer(width, layer.width, rng, layer.activation, name)
            elif layer.kind == SAGE_MEAN:
                built = SageMeanLayer(width, layer.width, rng, layer.activation, name)
            elif layer.kind == LINEAR:
                built = LinearLayer(width, layer.width, rng, layer.activation, name)
            elif layer.kind == TEMPORAL_CONV:
                built = TemporalConvLayer(rng, spec.temporal_scales, spec.temporal_channels, name)
            else:
                built = ReluLayer()
            self.encoder.append(built)
            if layer.kind == TEMPORAL_CONV:
                width = built.out_width
            elif layer.kind != RELU:
                width = layer.width
        if spec.decoder == EDGE_SCALAR:
            self.decoder = EdgeScalarDecoder(spec.dim, rng)
        else:
            self.decoder = LinearLayer(spec.dim, spec.out_width, rng, name='decoder')
        self.embedding = None

    def parameters(self):
        return [p for layer in self.encoder + [self.decoder] for p in layer.parameters()]

    def parameter_count(self):
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def encode(self, x, ctx):
        h = as_node_tensor(x)
        for layer in self.encoder:
            h = layer.forward(h, ctx)
        self.embedding = h
        return h

    def forward(self, x, ctx):
        return self.decoder.forward(self.encode(x, ctx), ctx)

    def backward(self, grad):
        grad = self.decoder.backward(grad)
        for layer in reversed(self.encoder):
            grad = layer.backward(grad)
        return grad

    def state(self):
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state):
        for p in self.parameters():
            p.value = state[p.name].copy()


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def compute_loss(kind, pred, target, mask=None):
    """
    Returns (loss, d loss / d pred).

    ``mse`` averages squared differences over unmasked entries; a trailing
    width-1 axis on pred is matched to target. ``ce`` takes logits (..., C) and
    integer class ids (...), applying softmax internally.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if kind == 'mse':
        target = np.asarray(target, dtype=np.float64)
        squeeze = pred.shape == target.shape + (1,)
        p = pred[..., 0] if squeeze else pred
        if p.shape != target.shape:
            raise ShapeError(f'mse prediction {pred.shape} does not match target {target.shape}')
        weights = np.ones(p.shape) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), p.shape)
        count = weights.sum()
        if count == 0:
            raise ShapeError('loss mask selects no entries')
        diff = (p - target) * weights
        loss = float((diff * diff).sum() / count)
        grad = 2.0 * diff / count
        return loss, grad[..., None] if squeeze else grad
    if kind == 'ce':
        target = np.asarray(target, dtype=np.int64)
        if pred.shape[:-1] != target.shape:
            raise ShapeError(f'ce logits {pred.shape} do not match targets {target.shape}')
        classes = pred.shape[-1]
        if np.any(target < 0) or np.any(target >= classes):
            raise ShapeError(f'class ids must lie in [0, {classes})')
        weights = np.ones(target.shape) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), target.shape)
        count = weights.sum()
        if count == 0:
            raise ShapeError('loss mask selects no entries')
        probs = softmax(pred)
        picked = np.take_along_axis(probs, target[..., None], axis=-1)[..., 0]
        loss = float(-(np.log(np.clip(picked, 1e-300, None)) * weights).sum() / count)
        grad = probs.copy()
        np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
        return loss, grad * (weights / count)[..., None]
    raise ShapeError(f'unknown loss {kind!r}')


def grad_check(model, inputs, loss_fn, step=1e-5):
    """Max relative error between analytic and central-difference gradients"""
    params = model.parameters()
    if sum(p.value.size for p in params) > MAX_GRAD_CHECK_PARAMS:
        raise ShapeError(f'grad_check is limited to {MAX_GRAD_CHECK_PARAMS} parameters')
    for p in params:
        p.zero_grad()
    _, grad = loss_fn(model.forward(*inputs))
    model.backward(grad)

    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise TrainingDivergedError(f'non-finite analytic gradient for {p.name}')
        for idx in np.ndindex(p.value.shape):
            original = p.value[idx]
            p.value[idx] = original + step
            plus = loss_fn(model.forward(*inputs))[0]
            p.value[idx] = original - step
            minus = loss_fn(model.forward(*inputs))[0]
            p.value[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst


class SGD:
    def __init__(self, params, lr=0.01, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self):
        for p in self.params:
            update = self.lr * (p.grad + self.weight_decay * p.value)
            if not np.all(np.isfinite(update)):
                raise TrainingDivergedError(f'non-finite SGD update for {p.name}')
            p.value -= update


class Adam:
    """Adam with decoupled weight decay"""

    def __init__(self, params, lr=1e-3, weight_decay=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * p.grad * p.grad
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps) + self.lr * self.weight_decay * p.value
            if not np.all(np.isfinite(update)):
                raise TrainingDivergedError(f'non-finite Adam update for {p.name}')
            p.value -= update


def make_optimizer(kind, params, lr, weight_decay=0.0):
    if kind == 'adam':
        return Adam(params, lr=lr, weight_decay=weight_decay)
    if kind == 'sgd':
        return SGD(params, lr=lr, weight_decay=weight_decay)
    raise ShapeError(f'unknown optimizer {kind!r}')


def make_windows(values, lookback, horizon):
    """All (x[t-T+1..t] -> x[t+h]) samples of a (L, N) block: windows (S, N, T), targets (S, N)"""
    values = np.asarray(values, dtype=np.float64)
    length = values.shape[0]
    if length < lookback + horizon:
        raise ShapeError(f'block of {length} steps is shorter than lookback {lookback} + horizon {horizon}')
    ends = range(lookback - 1, length - horizon)
    windows = np.stack([values[t - lookback + 1:t + 1].T for t in ends])
    targets = np.stack([values[t + horizon] for t in ends])
    return windows, targets
