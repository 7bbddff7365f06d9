"""
Desk-scale toy models: forward/backward passes, exact per-layer Fisher and
KL to a reference model.

Weights follow the y = x W^T convention (W is m x n, x a length-n row), so the
per-token weight gradient is dy^T x and its row-major vec is dy (x) x.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from kronround.errors import EmptyData, ShapeMismatch, TooLarge
from kronround.linalg import SymMatrix, vec

logger = logging.getLogger(__name__)

MAX_DIM = 64
# Dense mn x mn Fisher matrices are only built up to this size
MAX_FISHER_DIM = 4096

EXACT = "exact"
MONTE_CARLO = "monte-carlo"


@dataclass(frozen=True)
class ToyModel:
    """Linear layers with tanh between them and a softmax head.

    Sequences (T tokens) optionally pass through a fixed causal token mixing
    after every hidden activation; single tokens are unaffected by it.
    """
    weights: Tuple[np.ndarray, ...]
    mix: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        weights = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        if not weights:
            raise ShapeMismatch("a toy model needs at least one layer")
        for i, w in enumerate(weights):
            if w.ndim != 2:
                raise ShapeMismatch(f"layer {i} weight must be 2-D, got shape {w.shape}")
            if max(w.shape) > MAX_DIM:
                raise ShapeMismatch(f"layer {i} shape {w.shape} exceeds the toy limit {MAX_DIM}")
            if i and w.shape[1] != weights[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} produces {weights[i - 1].shape[0]}")
            w.setflags(write=False)
        if weights[-1].shape[0] < 2:
            raise ShapeMismatch("softmax head needs at least 2 classes")
        if not 0.0 <= self.mix < 1.0:
            raise ValueError(f"mix must lie in [0, 1), got {self.mix}")
        object.__setattr__(self, 'weights', weights)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def dims(self) -> List[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def layer_shape(self, layer: int) -> Tuple[int, int]:
        self._check_layer(layer)
        return self.weights[layer].shape

    def _check_layer(self, layer: int):
        if not 0 <= layer < self.num_layers:
            raise ShapeMismatch(f"layer {layer} out of range for a {self.num_layers}-layer model")


@dataclass(frozen=True)
class Dataset:
    """Inputs of shape (count, seq_len, dim); seq_len 1 means independent examples"""
    inputs: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim != 3:
            raise ShapeMismatch(f"dataset inputs must be (count, seq_len, dim), got shape {x.shape}")
        if x.shape[0] == 0 or x.shape[1] == 0:
            raise EmptyData("dataset has no examples")
        if not np.all(np.isfinite(x)):
            raise ValueError("dataset contains non-finite entries")
        x.setflags(write=False)
        object.__setattr__(self, 'inputs', x)

    @property
    def count(self) -> int:
        return self.inputs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    @property
    def dim(self) -> int:
        return self.inputs.shape[2]

    @property
    def token_count(self) -> int:
        return self.count * self.seq_len


@dataclass
class ForwardCache:
    """Logits plus the per-layer inputs x_l and pre-activations y_l"""
    logits: np.ndarray
    inputs: List[np.ndarray] = field(default_factory=list)
    preacts: List[np.ndarray] = field(default_factory=list)


@dataclass
class GradientSamples:
    """Weighted backward passes for one layer.

    Sample s contributes weight[s] * vec(G_s) vec(G_s)^T to the Fisher, with
    G_s = dy[s]^T inputs[s] summed over the tokens of its sequence.
    """
    weights: np.ndarray
    inputs: np.ndarray
    dy: np.ndarray
    provenance: str

    def gradients(self) -> np.ndarray:
        return np.einsum('stm,stn->smn', self.dy, self.inputs)

    def token_terms(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-token (weight, x, dy) triples used by the token-independent sketch"""
        S, T, n = self.inputs.shape
        w = np.repeat(self.weights, T)
        return w, self.inputs.reshape(S * T, n), self.dy.reshape(S * T, -1)


@dataclass
class FisherEstimate:
    """Dense mn x mn real Fisher of one layer"""
    H: SymMatrix
    m: int
    n: int
    provenance: str = EXACT
    samples: int = 0


def make_toy_model(dims: Sequence[int], seed: int = 0, weight_scale: float = 1.0, mix: float = 0.0) -> ToyModel:
    """Random model with layer l mapping dims[l] -> dims[l+1]"""
    rng = np.random.default_rng(seed)
    weights = [
        rng.standard_normal((dims[i + 1], dims[i])) * weight_scale / np.sqrt(dims[i])
        for i in range(len(dims) - 1)
    ]
    return ToyModel(tuple(weights), mix=mix, seed=seed)


def make_dataset(dim: int, count: int, seq_len: int = 1, correlation: float = 0.0, seed: int = 0,
                 mixing_seed: Optional[int] = None) -> Dataset:
    """Gaussian latents through a fixed mixing matrix; tokens of a sequence share a latent.

    The mixing matrix comes from `mixing_seed` (default: `seed`), so held-out
    data from the same distribution uses a new seed and the old mixing seed.
    """
    if count < 1 or seq_len < 1:
        raise EmptyData(f"dataset needs count >= 1 and seq_len >= 1, got {count}, {seq_len}")
    if not 0.0 <= correlation < 1.0:
        raise ValueError(f"correlation must lie in [0, 1), got {correlation}")
    mix_rng = np.random.default_rng(seed if mixing_seed is None else mixing_seed)
    mixing = np.eye(dim) + 0.5 * mix_rng.standard_normal((dim, dim)) / np.sqrt(dim)
    rng = np.random.default_rng([seed, 1])
    shared = rng.standard_normal((count, 1, dim))
    own = rng.standard_normal((count, seq_len, dim))
    latent = correlation * shared + np.sqrt(1.0 - correlation ** 2) * own
    return Dataset(latent @ mixing.T, seed=seed)


def with_layer(model: ToyModel, layer: int, W: np.ndarray) -> ToyModel:
    """Copy of the model with one weight matrix replaced"""
    model._check_layer(layer)
    W = np.asarray(W, dtype=np.float64)
    if W.shape != model.weights[layer].shape:
        raise ShapeMismatch(f"layer {layer} has shape {model.weights[layer].shape}, got {W.shape}")
    weights = list(model.weights)
    weights[layer] = W
    return ToyModel(tuple(weights), mix=model.mix, seed=model.seed)


def mixing_matrix(seq_len: int, mix: float) -> np.ndarray:
    """(1 - mix) I + mix P with P the causal prefix-mean operator"""
    prefix = np.tril(np.ones((seq_len, seq_len))) / np.arange(1, seq_len + 1)[:, None]
    return (1.0 - mix) * np.eye(seq_len) + mix * prefix


def _as_tokens(model: ToyModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != model.input_dim:
        raise ShapeMismatch(f"model expects inputs of size {model.input_dim}, got {x.shape[-1]}")
    return x


def forward(model: ToyModel, x: np.ndarray) -> ForwardCache:
    """Forward pass over inputs of shape (..., T, d); a 1-D x is one token"""
    h = _as_tokens(model, x)
    M = mixing_matrix(h.shape[-2], model.mix)
    cache = ForwardCache(logits=None)
    for i, W in enumerate(model.weights):
        cache.inputs.append(h)
        y = h @ W.T
        cache.preacts.append(y)
        if i < model.num_layers - 1:
            h = np.einsum('ts,...sd->...td', M, np.tanh(y))
        else:
            h = y
    cache.logits = h[0] if np.ndim(x) == 1 else h
    return cache


def backprop_to_layer(model: ToyModel, cache: ForwardCache, layer: int, dlogits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activations y_layer, for dlogits of shape (..., T, k)"""
    model._check_layer(layer)
    g = np.asarray(dlogits, dtype=np.float64)
    T = cache.inputs[0].shape[-2]
    M = mixing_matrix(T, model.mix)
    for j in range(model.num_layers - 1, layer, -1):
        g = g @ model.weights[j]
        g = np.einsum('ts,...td->...sd', M, g)
        g = g * (1.0 - np.tanh(cache.preacts[j - 1]) ** 2)
    return g


def layer_grad(model: ToyModel, layer: int, x: np.ndarray, label: Union[int, Sequence[int]]) -> np.ndarray:
    """Gradient of the (summed over tokens) cross entropy w.r.t. W_layer"""
    tokens = _as_tokens(model, x)
    if tokens.ndim != 2:
        raise ShapeMismatch("layer_grad takes a single token or a single sequence")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = model.num_classes
    if labels.shape[0] != tokens.shape[0] or np.any(labels < 0) or np.any(labels >= k):
        raise ShapeMismatch(f"need one label in [0, {k}) per token")
    cache = forward(model, tokens)
    dlogits = softmax(cache.logits, axis=-1)
    dlogits[np.arange(labels.shape[0]), labels] -= 1.0
    dy = backprop_to_layer(model, cache, layer, dlogits)
    return dy.T @ cache.inputs[layer]


def cross_entropy(model: ToyModel, x: np.ndarray, label: Union[int, Sequence[int]]) -> float:
    tokens = _as_tokens(model, x)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    logp = log_softmax(forward(model, tokens).logits, axis=-1)
    return float(-np.sum(logp[np.arange(labels.shape[0]), labels]))


def gradient_samples(model: ToyModel, layer: int, data: Dataset, label_mode: str = EXACT,
                     samples: int = 1, seed: int = 0) -> GradientSamples:
    """Backward passes behind the real Fisher of one layer.

    exact: for every sequence, position t and class c, the loss -log p_t(c)
    weighted by p_t(c). monte-carlo: `samples` label draws per sequence from
    the model's own output distribution, loss summed over positions.
    Weights are normalized so the Fisher is a mean over tokens.
    """
    model._check_layer(layer)
    if data.dim != model.input_dim:
        raise ShapeMismatch(f"dataset dim {data.dim} does not match model input {model.input_dim}")
    cache = forward(model, data.inputs)
    probs = softmax(cache.logits, axis=-1)
    X = cache.inputs[layer]
    N, T, k = probs.shape
    eye = np.eye(k)

    if label_mode == EXACT:
        # dlogits[s, t*k + c] is zero except at position t where it is p_t - e_c
        dlogits = np.zeros((N, T * k, T, k))
        for t in range(T):
            dlogits[:, t * k:(t + 1) * k, t, :] = probs[:, t, None, :] - eye[None, :, :]
        weights = (probs.reshape(N, T * k) / (N * T)).reshape(-1)
        per_seq = T * k
    elif label_mode == MONTE_CARLO:
        if samples < 1:
            raise ValueError(f"monte-carlo mode needs samples >= 1, got {samples}")
        rng = np.random.default_rng(seed)
        u = rng.random((N, samples, T, 1))
        labels = np.minimum((np.cumsum(probs, axis=-1)[:, None] < u).sum(axis=-1), k - 1)
        dlogits = probs[:, None] - eye[labels]
        weights = np.full(N * samples, 1.0 / (N * T * samples))
        per_seq = samples
    else:
        raise ValueError(f"unknown label mode {label_mode!r}")

    dy = np.stack([
        backprop_to_layer(model, _sequence_cache(cache, s), layer, dlogits[s]) for s in range(N)
    ])
    m = model.weights[layer].shape[0]
    inputs = np.repeat(X, per_seq, axis=0)
    provenance = label_mode if label_mode == EXACT else f"{MONTE_CARLO}({samples})"
    logger.debug(f"gradient_samples: layer={layer}, sequences={N}, samples={inputs.shape[0]}, mode={provenance}")
    return GradientSamples(weights=weights, inputs=inputs, dy=dy.reshape(-1, T, m), provenance=provenance)


def _sequence_cache(cache: ForwardCache, s: int) -> ForwardCache:
    return ForwardCache(
        logits=cache.logits[s],
        inputs=[x[s] for x in cache.inputs],
        preacts=[y[s] for y in cache.preacts],
    )


def fisher_from_samples(grads: GradientSamples) -> np.ndarray:
    """sum_s w_s vec(G_s) vec(G_s)^T"""
    G = grads.gradients()
    vecs = G.reshape(G.shape[0], -1)
    return (vecs * grads.weights[:, None]).T @ vecs


def true_layer_hessian(model_ref: ToyModel, layer: int, data: Dataset, label_mode: str = EXACT,
                       samples: int = 1, seed: int = 0) -> FisherEstimate:
    """Real Fisher of one layer at the reference weights (Gauss-Newton Hessian of the KL)"""
    m, n = model_ref.layer_shape(layer)
    if m * n > MAX_FISHER_DIM:
        raise TooLarge(f"dense Fisher of size {m * n} exceeds {MAX_FISHER_DIM}")
    grads = gradient_samples(model_ref, layer, data, label_mode, samples, seed)
    H = SymMatrix(fisher_from_samples(grads))
    return FisherEstimate(H=H, m=m, n=n, provenance=grads.provenance, samples=len(grads.weights))


def layer_input_hessian(model: ToyModel, layer: int, data: Dataset) -> np.ndarray:
    """H_1 = E[x x^T] over the tokens entering the layer"""
    X = forward(model, data.inputs).inputs[layer]
    X = X.reshape(-1, X.shape[-1])
    return X.T @ X / X.shape[0]


def kl_to_reference(model_ref: ToyModel, model_q: ToyModel, data: Dataset) -> float:
    """Mean over tokens of KL(p_ref || p_q)"""
    if model_ref.dims != model_q.dims:
        raise ShapeMismatch(f"architectures differ: {model_ref.dims} vs {model_q.dims}")
    logp_ref = log_softmax(forward(model_ref, data.inputs).logits, axis=-1)
    logp_q = log_softmax(forward(model_q, data.inputs).logits, axis=-1)
    kl = np.sum(np.exp(logp_ref) * (logp_ref - logp_q), axis=-1)
    return float(max(np.mean(kl), 0.0))


def second_order_error(model_ref: ToyModel, layer: int, W_hat: np.ndarray, H: FisherEstimate) -> float:
    """vec(Delta) H vec(Delta)^T; KL is approximated by half of it"""
    W_star = model_ref.weights[layer]
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W_hat.shape != W_star.shape or (H.m, H.n) != W_star.shape:
        raise ShapeMismatch(f"shapes {W_hat.shape}, {(H.m, H.n)} do not match layer {W_star.shape}")
    d = vec(W_star - W_hat)
    return float(d @ H.H.data @ d)
