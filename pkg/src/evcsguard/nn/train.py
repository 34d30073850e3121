"""Adam, mini-batch training, inference and finite-difference gradient checks."""

import time
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, TrainingFault
from .network import ModelCheckpoint, Network, bce_loss

THRESHOLD = 0.5


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    dropout_rate: float = 0.2
    batch_size: int = 32
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1")
        if int(self.epochs) < 1:
            raise ConfigError("epochs must be >= 1")
        self.batch_size = int(self.batch_size)
        self.epochs = int(self.epochs)


class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, grads, state, config):
    """In-place Adam update of every array in ``params`` (dict name -> array)."""
    if state.t < 0:
        raise ConfigError("optimizer step counter must be >= 0")
    state.t += 1
    b1, b2, eps, lr = config.beta1, config.beta2, config.epsilon, config.learning_rate
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def _xy(data):
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return data.features(), data.labels.astype(float)


def _apply_dropout(spec, rate):
    for desc in spec.layers:
        if desc["type"] == "dropout":
            desc["rate"] = float(rate)


def train(spec, train_set, config, log=None):
    """Shuffled mini-batch Adam on mean BCE.

    ``train_set`` is a Dataset or an (x, y) pair.  Returns (checkpoint, history)
    with one mean training loss per epoch.
    """
    x, y = _xy(train_set)
    if len(x) == 0:
        raise ConfigError("empty training set")
    spec = type(spec).from_dict(spec.to_dict())
    _apply_dropout(spec, config.dropout_rate)
    spec.init["seed"] = int(config.seed)
    net = Network(spec)
    rng = np.random.default_rng([int(config.seed), 1])
    state = AdamState()
    params = net.param_dict()
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), config.batch_size):
            idx = order[s:s + config.batch_size]
            p = net.forward(x[idx], True, rng)
            loss = bce_loss(p, y[idx])
            if not np.isfinite(loss):
                raise TrainingFault(f"loss became {loss} in epoch {epoch}", epoch=epoch)
            grads = net.backward(p, y[idx])
            adam_step(params, grads, state, config)
            total += loss * len(idx)
        mean = total / len(x)
        if not np.isfinite(mean) or not all(np.isfinite(v).all() for v in params.values()):
            raise TrainingFault(f"non-finite parameters after epoch {epoch}", epoch=epoch)
        history.append(mean)
        if log:
            log(f"epoch {epoch}/{config.epochs} loss {mean:.5f}")
    recalibrate_batchnorm(net, x)
    meta = {"epochs": config.epochs, "seed": int(config.seed), "final_loss": history[-1],
            "train_config": asdict(config), "n_train": int(len(x)),
            "training_time_s": time.perf_counter() - t0}
    if getattr(train_set, "bounds", None) is not None:
        meta["bounds"] = [float(b) for b in train_set.bounds]
    return ModelCheckpoint.from_network(net, meta), history


def recalibrate_batchnorm(net, x, batch=256):
    """Replace batch-norm running statistics by population statistics of ``x``.

    Layers are visited in order with dropout off, so each one sees the
    activations it will meet at inference.  The moving averages collected
    during training carry the dropout variance and drift with the last
    few batches; both hurt inference on unseen windows.
    """
    x = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        if layer.kind != "batchnorm":
            continue
        s = ss = 0.0
        n = 0
        for b in range(0, len(x), batch):
            h = x[b:b + batch]
            for prev in net.layers[:i]:
                h = prev.forward(h, False)
            f = h.reshape(-1, h.shape[-1])
            s = s + f.sum(axis=0)
            ss = ss + (f * f).sum(axis=0)
            n += len(f)
        mu = s / n
        layer.state["running_mean"] = mu
        layer.state["running_var"] = np.maximum(ss / n - mu * mu, 0.0)
    return net


def predict(checkpoint, window, net=None):
    """Probability of attack for one window (240, 2) and the latency in ms."""
    net = checkpoint.network() if net is None else net
    w = np.asarray(window.matrix() if hasattr(window, "matrix") else window, dtype=float)
    if w.shape != tuple(net.spec.input_shape):
        raise ConfigError(f"window shape {w.shape} does not match {tuple(net.spec.input_shape)}")
    t0 = time.perf_counter()
    p = float(net.forward(w[None])[0])
    ms = (time.perf_counter() - t0) * 1000.0
    return p, max(ms, 1e-6)


def classify(p, threshold=THRESHOLD):
    return (np.asarray(p) >= threshold).astype(int)


def _loss_at(net, x, y, seed):
    return bce_loss(net.forward(x, True, np.random.default_rng(seed)), y)


def _kink_pattern(net):
    return [layer._cache for layer in net.layers if layer.kind == "leaky_relu"]


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(net, x, y, epsilon=1e-5, n_per_layer=200, seed=0):
    """Central differences on up to n_per_layer entries of every parametrised layer type.

    Runs in training mode with a fixed dropout stream so the loss is a
    deterministic function of the parameters.  Probes whose +/- epsilon
    evaluations land on different sides of a Leaky-ReLU kink are replaced by
    fresh draws, since the finite difference is meaningless there.
    Returns (max relative error, per-layer-type maxima, entries checked per type).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = net.forward(x, True, np.random.default_rng(seed))
    net.backward(p, y)
    base = [m.copy() for m in _kink_pattern(net)]
    analytic = {name: layer.grads[k].copy() for name, layer, k in net.named_params()}
    # batch-norm running stats move on every training pass; keep them fixed
    saved_state = [{k: v.copy() for k, v in layer.state.items()} for layer in net.layers]
    by_type = {}
    for name, layer, k in net.named_params():
        by_type.setdefault(layer.kind, []).append((name, layer, k))
    rng = np.random.default_rng(seed + 1)
    worst, counts = {}, {}
    for kind, entries in by_type.items():
        sizes = np.array([layer.params[k].size for _, layer, k in entries])
        total = int(sizes.sum())
        picks = rng.permutation(total)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        err = 0.0
        done = 0
        for flat in picks:
            if done >= n_per_layer:
                break
            j = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, layer, k = entries[j]
            arr = layer.params[k].reshape(-1)
            pos = int(flat - offsets[j])
            old = arr[pos]
            arr[pos] = old + epsilon
            lp = _loss_at(net, x, y, seed)
            smooth = _same_pattern(base, _kink_pattern(net))
            arr[pos] = old - epsilon
            lm = _loss_at(net, x, y, seed)
            smooth = smooth and _same_pattern(base, _kink_pattern(net))
            arr[pos] = old
            if not smooth:
                continue
            done += 1
            num = (lp - lm) / (2 * epsilon)
            ana = analytic[name].reshape(-1)[pos]
            rel = abs(num - ana) / max(abs(num) + abs(ana), 1e-8)
            err = max(err, rel)
        worst[kind] = err
        counts[kind] = done
    for layer, st in zip(net.layers, saved_state):
        layer.state.update(st)
    return max(worst.values()) if worst else 0.0, worst, counts
