import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import ModelError, TrainingDiverged

logger = logging.getLogger(__name__)

GATES = ('f', 'i', 'o', 'c')
LSTM_NAMES = tuple(f'W_x{g}' for g in GATES) + tuple(f'W_h{g}' for g in GATES) + tuple(f'b_{g}' for g in GATES)
PARAM_NAMES = ('conv_W', 'conv_b') + LSTM_NAMES + ('dense_W', 'dense_b')


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LstmParams:
    """Gate weights: W_x* is (H, D), W_h* is (H, H), biases (H,)"""

    W_xf: np.ndarray
    W_hf: np.ndarray
    W_xi: np.ndarray
    W_hi: np.ndarray
    W_xo: np.ndarray
    W_ho: np.ndarray
    W_xc: np.ndarray
    W_hc: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        H, D = self.W_xf.shape
        for g in GATES:
            if getattr(self, f'W_x{g}').shape != (H, D):
                raise ValueError(f'W_x{g} must be {(H, D)}, got {getattr(self, f"W_x{g}").shape}')
            if getattr(self, f'W_h{g}').shape != (H, H):
                raise ValueError(f'W_h{g} must be {(H, H)}, got {getattr(self, f"W_h{g}").shape}')
            if getattr(self, f'b_{g}').shape != (H,):
                raise ValueError(f'b_{g} must be ({H},), got {getattr(self, f"b_{g}").shape}')

    @property
    def hidden_size(self) -> int:
        return self.W_xf.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_xf.shape[1]

    @classmethod
    def from_params(cls, params: Dict[str, np.ndarray]) -> 'LstmParams':
        return cls(**{name: params[name] for name in LSTM_NAMES})


def _cell_forward(p: LstmParams, x, h_prev, c_prev):
    f = sigmoid(x @ p.W_xf.T + h_prev @ p.W_hf.T + p.b_f)
    i = sigmoid(x @ p.W_xi.T + h_prev @ p.W_hi.T + p.b_i)
    o = sigmoid(x @ p.W_xo.T + h_prev @ p.W_ho.T + p.b_o)
    g = np.tanh(x @ p.W_xc.T + h_prev @ p.W_hc.T + p.b_c)
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, (x, h_prev, c_prev, f, i, o, g, tanh_c)


def lstm_cell_forward(params: LstmParams, x_t, h_prev, c_prev) -> Tuple[np.ndarray, np.ndarray]:
    """
    One LSTM step

    Args:
        x_t: (D,) or (B, D) input
        h_prev, c_prev: (H,) or (B, H) states

    Returns:
        (h_t, c_t)
    """
    x_t, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x_t, h_prev, c_prev))
    if x_t.shape[-1] != params.input_size:
        raise ValueError(f'x_t has {x_t.shape[-1]} features, cell expects {params.input_size}')
    if h_prev.shape[-1] != params.hidden_size or c_prev.shape != h_prev.shape:
        raise ValueError(f'state shapes {h_prev.shape}/{c_prev.shape} do not match hidden size {params.hidden_size}')
    h, c, _ = _cell_forward(params, x_t, h_prev, c_prev)
    return h, c


@dataclass
class NetworkConfig:
    input_size: int = 16
    seq_len: Optional[int] = 50
    conv_filters: int = 32
    kernel_size: int = 3
    stride: int = 1
    pool_size: int = 2
    dropout: float = 0.1
    hidden_size: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if not 0 <= self.dropout < 1:
            raise ValueError(f'dropout must be in [0, 1), got {self.dropout}')
        for name in ('input_size', 'conv_filters', 'kernel_size', 'stride', 'pool_size', 'hidden_size',
                     'batch_size', 'epochs', 'patience'):
            if getattr(self, name) < 1:
                raise ValueError(f'{name} must be >= 1, got {getattr(self, name)}')
        if self.learning_rate < 0:
            raise ValueError(f'learning_rate must be >= 0, got {self.learning_rate}')
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(f'validation_fraction must be in [0, 1), got {self.validation_fraction}')
        return True

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NetworkConfig':
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"Unknown network options: {', '.join(unknown)}")
        return cls(**data)


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'epoch': np.arange(1, self.epochs_run + 1),
            'train_loss': self.train_loss,
            'train_accuracy': self.train_accuracy,
            'val_accuracy': self.val_accuracy,
        })


class SequenceNetwork:
    """Conv1D + ReLU -> max-pool -> dropout -> LSTM (final h) -> dense -> sigmoid"""

    def __init__(self, config: NetworkConfig, params: Optional[Dict[str, np.ndarray]] = None):
        config.validate()
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.params = params if params is not None else self.initial_params(config)
        self._check_params()

    @staticmethod
    def initial_params(config: NetworkConfig) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng([config.seed, 0])
        F, K, D, H = config.conv_filters, config.kernel_size, config.input_size, config.hidden_size

        def glorot(shape, fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape)

        params = {'conv_W': glorot((F, K, D), K * D, F), 'conv_b': np.full(F, 0.01)}
        for g in GATES:
            params[f'W_x{g}'] = glorot((H, F), F, H)
        for g in GATES:
            params[f'W_h{g}'] = glorot((H, H), H, H)
        for g in GATES:
            params[f'b_{g}'] = np.full(H, 1.0) if g == 'f' else np.zeros(H)
        # small output layer so the initial prediction sits near 0.5
        params['dense_W'] = rng.uniform(-0.01, 0.01, size=H)
        params['dense_b'] = np.zeros(1)
        return params

    @classmethod
    def zeros(cls, config: NetworkConfig) -> 'SequenceNetwork':
        net = cls(config)
        net.params = {name: np.zeros_like(value) for name, value in net.params.items()}
        return net

    def _check_params(self):
        missing = [n for n in PARAM_NAMES if n not in self.params]
        if missing:
            raise ModelError(f"Network parameters missing: {', '.join(missing)}")
        c = self.config
        expected = {'conv_W': (c.conv_filters, c.kernel_size, c.input_size), 'conv_b': (c.conv_filters,),
                    'dense_W': (c.hidden_size,), 'dense_b': (1,)}
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ModelError(f'{name} must be {shape}, got {self.params[name].shape}')
        LstmParams.from_params(self.params)

    def copy(self) -> 'SequenceNetwork':
        return SequenceNetwork(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()})

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.config.input_size:
            raise ValueError(f'expected (batch, T, {self.config.input_size}) input, got {X.shape}')
        if self.config.seq_len is not None and X.shape[1] != self.config.seq_len:
            raise ValueError(f'expected sequences of length {self.config.seq_len}, got {X.shape[1]}')
        conv_len = -(-X.shape[1] // self.config.stride)
        if conv_len // self.config.pool_size < 1:
            raise ValueError(f'sequence of length {X.shape[1]} is too short to pool')
        return X

    def forward(self, X, training: bool = False, rng: Optional[np.random.Generator] = None):
        """
        Logits and caches for a batch

        Returns:
            (logits (B,), cache for backward)
        """
        c = self.config
        p = self.params
        B, T, _ = X.shape
        K = c.kernel_size
        pad_left = (K - 1) // 2
        Xp = np.pad(X, ((0, 0), (pad_left, K - 1 - pad_left), (0, 0)))
        cols = np.stack([Xp[:, k:k + T, :] for k in range(K)], axis=2)[:, ::c.stride]
        Z = np.einsum('btkd,fkd->btf', cols, p['conv_W']) + p['conv_b']
        A = np.maximum(Z, 0.0)

        P = c.pool_size
        T2 = A.shape[1] // P
        windows = A[:, :T2 * P].reshape(B, T2, P, -1)
        arg = windows.argmax(axis=2)
        pooled = np.take_along_axis(windows, arg[:, :, None, :], axis=2)[:, :, 0, :]

        if training and c.dropout > 0:
            if rng is None:
                raise ValueError('training mode needs a random generator for dropout')
            mask = (rng.random(pooled.shape) >= c.dropout) / (1.0 - c.dropout)
        else:
            mask = None
        seq = pooled * mask if mask is not None else pooled

        lstm = LstmParams.from_params(p)
        h = np.zeros((B, c.hidden_size))
        cell = np.zeros((B, c.hidden_size))
        steps = []
        for t in range(T2):
            h, cell, step = _cell_forward(lstm, seq[:, t, :], h, cell)
            steps.append(step)

        logits = h @ p['dense_W'] + p['dense_b'][0]
        cache = {'cols': cols, 'Z': Z, 'arg': arg, 'T1': A.shape[1], 'mask': mask, 'steps': steps, 'h': h}
        return logits, cache

    def backward(self, dlogits: np.ndarray, cache: Dict[str, Any]) -> Dict[str, np.ndarray]:
        """Gradients of sum(dlogits * logits) with respect to every parameter"""
        c = self.config
        p = self.params
        grads = {name: np.zeros_like(value) for name, value in p.items()}
        grads['dense_W'] = cache['h'].T @ dlogits
        grads['dense_b'] = np.array([dlogits.sum()])

        dh = dlogits[:, None] * p['dense_W'][None, :]
        dc_next = np.zeros_like(dh)
        steps = cache['steps']
        dseq = np.zeros((dh.shape[0], len(steps), c.conv_filters))
        for t in range(len(steps) - 1, -1, -1):
            x, h_prev, c_prev, f, i, o, g, tanh_c = steps[t]
            do = dh * tanh_c
            dc = dc_next + dh * o * (1.0 - tanh_c ** 2)
            pre = {
                'f': dc * c_prev * f * (1.0 - f),
                'i': dc * g * i * (1.0 - i),
                'o': do * o * (1.0 - o),
                'c': dc * i * (1.0 - g ** 2),
            }
            dx = np.zeros_like(x)
            dh = np.zeros_like(h_prev)
            for gate, da in pre.items():
                grads[f'W_x{gate}'] += da.T @ x
                grads[f'W_h{gate}'] += da.T @ h_prev
                grads[f'b_{gate}'] += da.sum(axis=0)
                dx += da @ p[f'W_x{gate}']
                dh += da @ p[f'W_h{gate}']
            dseq[:, t, :] = dx
            dc_next = dc * f

        dpooled = dseq * cache['mask'] if cache['mask'] is not None else dseq
        B, T2, F = dpooled.shape
        P = c.pool_size
        dwindows = np.zeros((B, T2, P, F))
        np.put_along_axis(dwindows, cache['arg'][:, :, None, :], dpooled[:, :, None, :], axis=2)
        dA = np.zeros((B, cache['T1'], F))
        dA[:, :T2 * P] = dwindows.reshape(B, T2 * P, F)
        dZ = dA * (cache['Z'] > 0)
        grads['conv_W'] = np.einsum('btkd,btf->fkd', cache['cols'], dZ)
        grads['conv_b'] = dZ.sum(axis=(0, 1))
        return grads

    def predict_proba(self, X) -> np.ndarray:
        """Inference-mode probabilities, deterministic"""
        X = self._check_input(X)
        out = []
        for start in range(0, len(X), 256):
            logits, _ = self.forward(X[start:start + 256], training=False)
            out.append(sigmoid(logits))
        return np.concatenate(out) if out else np.empty(0)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def loss_and_grads(self, X, y, training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean binary cross-entropy of a batch and its gradients"""
        X = self._check_input(X)
        y = np.asarray(y, dtype=np.float64)
        logits, cache = self.forward(X, training=training, rng=rng)
        loss = bce_from_logits(logits, y)
        dlogits = (sigmoid(logits) - y) / len(y)
        return loss, self.backward(dlogits, cache)

    def loss(self, X, y) -> float:
        X = self._check_input(X)
        logits, _ = self.forward(X, training=False)
        return bce_from_logits(logits, np.asarray(y, dtype=np.float64))

    def to_tensors(self) -> Dict[str, np.ndarray]:
        return {name: self.params[name] for name in PARAM_NAMES}

    @classmethod
    def from_tensors(cls, config: NetworkConfig, tensors: Dict[str, np.ndarray]) -> 'SequenceNetwork':
        params = {name: np.asarray(tensors[name], dtype=np.float64).copy() for name in PARAM_NAMES if name in tensors}
        return cls(config, params)

    def config_dict(self) -> Dict[str, Any]:
        return asdict(self.config)


def bce_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean of softplus(z) - y*z, the cross-entropy of sigmoid(z)"""
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def network_forward(net: SequenceNetwork, sample, training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Probability for one (T, D) sample"""
    X = net._check_input(sample)
    logits, _ = net.forward(X, training=training, rng=rng)
    return float(sigmoid(logits[0]))


class AdamOptimizer:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name in PARAM_NAMES:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            params[name] = params[name] - update


def _accuracy(net: SequenceNetwork, X, y) -> float:
    if not len(y):
        return float('nan')
    return float((net.predict(X) == np.asarray(y)).mean())


def train_network(net: SequenceNetwork, X_train, y_train, X_val=None, y_val=None,
                  config: Optional[NetworkConfig] = None) -> Tuple[SequenceNetwork, TrainHistory]:
    """
    Mini-batch Adam on binary cross-entropy with early stopping

    Stops after `patience` epochs without a better validation accuracy (training
    accuracy when no validation data is given) and returns the best parameters.

    Raises:
        TrainingDiverged when the loss becomes non-finite; its state holds the
        network with the last good parameters and the history so far
    """
    config = config or net.config
    X_train = net._check_input(X_train)
    y_train = np.asarray(y_train, dtype=np.int64)
    has_val = X_val is not None and len(X_val) > 0
    if has_val:
        X_val = net._check_input(X_val)
        y_val = np.asarray(y_val, dtype=np.int64)

    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    optimizer = AdamOptimizer(net.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    history = TrainHistory()
    best_score, best_params, waited = -1.0, {k: v.copy() for k, v in net.params.items()}, 0
    n = len(X_train)

    for epoch in range(1, config.epochs + 1):
        good = {k: v.copy() for k, v in net.params.items()}
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = net.loss_and_grads(X_train[batch], y_train[batch], training=True, rng=dropout_rng)
            finite = math.isfinite(loss) and all(np.isfinite(g).all() for g in grads.values())
            if not finite:
                net.params = good
                net.logger.error(f"Training diverged in epoch {epoch}; keeping the parameters of epoch {epoch - 1}")
                raise TrainingDiverged(f'non-finite loss in epoch {epoch}', state=(net, history))
            optimizer.step(net.params, grads)
            total += loss * len(batch)

        history.train_loss.append(total / n)
        history.train_accuracy.append(_accuracy(net, X_train, y_train))
        history.val_accuracy.append(_accuracy(net, X_val, y_val) if has_val else float('nan'))
        score = history.val_accuracy[-1] if has_val else history.train_accuracy[-1]
        net.logger.debug(f"epoch {epoch}: loss={history.train_loss[-1]:.5f} "
                         f"train_acc={history.train_accuracy[-1]:.4f} val_acc={history.val_accuracy[-1]:.4f}")
        if score > best_score:
            best_score, best_params, waited = score, {k: v.copy() for k, v in net.params.items()}, 0
            history.best_epoch = epoch
        else:
            waited += 1
            if waited >= config.patience:
                history.stopped_early = True
                break

    net.params = best_params
    net.logger.info(f"Trained network for {history.epochs_run} epochs, best epoch {history.best_epoch} "
                    f"(score {best_score:.4f})")
    return net, history


def gradient_errors(net: SequenceNetwork, sample, label, eps: float = 1e-5, max_coords: int = 200,
                    seed: int = 0) -> Dict[str, float]:
    """
    Max relative error per parameter tensor between backprop and central differences

    Relative error is |a - n| / max(|a| + |n|, 1e-6); tensors larger than
    max_coords are checked on a random subsample of that many coordinates.
    """
    X = net._check_input(sample)
    y = np.atleast_1d(np.asarray(label, dtype=np.float64))
    _, analytic = net.loss_and_grads(X, y, training=False)
    rng = np.random.default_rng(seed)
    errors = {}
    for name in PARAM_NAMES:
        tensor = net.params[name]
        flat = tensor.reshape(-1)
        coords = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        worst = 0.0
        for j in coords:
            original = flat[j]
            flat[j] = original + eps
            plus = net.loss(X, y)
            flat[j] = original - eps
            minus = net.loss(X, y)
            flat[j] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6))
        errors[name] = worst
    return errors


def gradient_check(net: SequenceNetwork, sample, label=1, eps: float = 1e-5, max_coords: int = 200,
                   seed: int = 0) -> float:
    errors = gradient_errors(net, sample, label, eps, max_coords, seed)
    worst = max(errors, key=errors.get)
    logger.debug(f"gradient check: worst tensor {worst} with relative error {errors[worst]:.3e}")
    return errors[worst]
