"""Small feedforward networks with hand-written backpropagation.

Layers are affine -> (batch norm) -> activation for every hidden layer and
affine -> output activation for the last one. Batches are rows.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NumericError, ParameterError, StateError

CHECKPOINT_FORMAT = "bngp-mlp/1"
HIDDEN = ("relu", "leaky_relu")
OUTPUTS = ("sigmoid", "scaled_sigmoid", "identity")


@dataclass
class MlpConfig:
    layer_widths: tuple
    hidden_activation: object = "relu"  # one name or one per hidden layer
    output_activation: str = "sigmoid"
    batch_norm: object = False  # one flag or one per hidden layer
    seed: int = 0
    leak: float = 0.01
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    init: str = "uniform_fan_in"

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        if len(self.layer_widths) < 3:
            raise ParameterError("need input, at least one hidden and an output width")
        if min(self.layer_widths) < 1:
            raise ParameterError("layer widths must be >= 1")
        n_hidden = len(self.layer_widths) - 2
        if isinstance(self.hidden_activation, str):
            self.hidden_activation = (self.hidden_activation,) * n_hidden
        self.hidden_activation = tuple(self.hidden_activation)
        if isinstance(self.batch_norm, bool):
            self.batch_norm = (self.batch_norm,) * n_hidden
        self.batch_norm = tuple(bool(f) for f in self.batch_norm)
        if len(self.hidden_activation) != n_hidden or len(self.batch_norm) != n_hidden:
            raise ParameterError("per-layer settings must match the number of hidden layers")
        if any(a not in HIDDEN for a in self.hidden_activation):
            raise ParameterError(f"hidden activations must be in {HIDDEN}")
        if self.output_activation not in OUTPUTS:
            raise ParameterError(f"output activation must be in {OUTPUTS}")
        if self.init != "uniform_fan_in":
            raise ParameterError(f"unknown init scheme {self.init!r}")

    def to_dict(self):
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        d["hidden_activation"] = list(self.hidden_activation)
        d["batch_norm"] = list(self.batch_norm)
        return d


class Mlp:
    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = config.layer_widths
        self.params = {}
        self.buffers = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"b{i}"] = rng.uniform(-bound, bound, size=fan_out)
            if i < self.n_hidden and config.batch_norm[i]:
                self.params[f"gamma{i}"] = np.ones(fan_out)
                self.params[f"beta{i}"] = np.zeros(fan_out)
                self.buffers[f"mean{i}"] = np.zeros(fan_out)
                self.buffers[f"var{i}"] = np.ones(fan_out)
        self._cache = None

    @property
    def n_hidden(self):
        return len(self.config.layer_widths) - 2

    @property
    def input_width(self):
        return self.config.layer_widths[0]

    @property
    def output_width(self):
        return self.config.layer_widths[-1]

    def zero_(self):
        for p in self.params.values():
            p[...] = 0.0
        return self

    def clone(self):
        other = Mlp.__new__(Mlp)
        other.config = self.config
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._cache = None
        return other

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    # -- forward / backward ---------------------------------------------------

    def forward(self, X, mode="train", update_stats=True):
        if mode not in ("train", "eval"):
            raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.input_width:
            raise ParameterError(f"expected a batch with {self.input_width} columns, got shape {X.shape}")
        if not np.isfinite(X).all():
            raise NumericError("non-finite network input")
        cfg = self.config
        cache = {"mode": mode, "X": X, "layers": []}
        a = X
        for i in range(self.n_hidden):
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            layer = {"in": a}
            if cfg.batch_norm[i]:
                if mode == "train":
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_stats:
                        n = z.shape[0]
                        unbiased = var * n / (n - 1) if n > 1 else var
                        mom = cfg.bn_momentum
                        self.buffers[f"mean{i}"] = mom * self.buffers[f"mean{i}"] + (1 - mom) * mu
                        self.buffers[f"var{i}"] = mom * self.buffers[f"var{i}"] + (1 - mom) * unbiased
                else:
                    mu, var = self.buffers[f"mean{i}"], self.buffers[f"var{i}"]
                inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
                zhat = (z - mu) * inv_std
                layer["zhat"], layer["inv_std"] = zhat, inv_std
                z = self.params[f"gamma{i}"] * zhat + self.params[f"beta{i}"]
            layer["pre"] = z
            if cfg.hidden_activation[i] == "relu":
                a = np.maximum(z, 0.0)
            else:
                a = np.where(z > 0, z, cfg.leak * z)
            cache["layers"].append(layer)
        last = self.n_hidden
        z = a @ self.params[f"W{last}"] + self.params[f"b{last}"]
        cache["last_in"] = a
        if cfg.output_activation == "sigmoid":
            out = expit(z)
        elif cfg.output_activation == "scaled_sigmoid":
            out = expit(z) - 0.5
        else:
            out = z
        cache["out"] = out
        self._cache = cache
        return out

    def backward(self, dout, wrt_logits=False):
        """Gradients of sum(dout * output) w.r.t. every parameter and the input.

        With ``wrt_logits`` the incoming gradient is taken w.r.t. the
        pre-activation of the output layer, which keeps cross-entropy
        gradients finite when a sigmoid saturates. Returns ``(grads, dX)``;
        must follow a forward pass on the same batch.
        """
        cache = self._cache
        if cache is None:
            raise StateError("backward called without a forward pass")
        dout = np.asarray(dout, dtype=float)
        if dout.shape != cache["out"].shape:
            raise StateError(f"gradient shape {dout.shape} does not match the cached output {cache['out'].shape}")
        cfg = self.config
        out = cache["out"]
        if wrt_logits or cfg.output_activation == "identity":
            dz = dout
        elif cfg.output_activation == "sigmoid":
            dz = dout * out * (1 - out)
        elif cfg.output_activation == "scaled_sigmoid":
            s = out + 0.5
            dz = dout * s * (1 - s)
        grads = {}
        last = self.n_hidden
        grads[f"W{last}"] = cache["last_in"].T @ dz
        grads[f"b{last}"] = dz.sum(axis=0)
        da = dz @ self.params[f"W{last}"].T
        for i in reversed(range(self.n_hidden)):
            layer = cache["layers"][i]
            pre = layer["pre"]
            if cfg.hidden_activation[i] == "relu":
                dz = da * (pre > 0)
            else:
                dz = da * np.where(pre > 0, 1.0, cfg.leak)
            if cfg.batch_norm[i]:
                zhat, inv_std = layer["zhat"], layer["inv_std"]
                grads[f"gamma{i}"] = (dz * zhat).sum(axis=0)
                grads[f"beta{i}"] = dz.sum(axis=0)
                dzhat = dz * self.params[f"gamma{i}"]
                if cache["mode"] == "train":
                    n = dzhat.shape[0]
                    dz = inv_std / n * (n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0))
                else:
                    dz = dzhat * inv_std
            grads[f"W{i}"] = layer["in"].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            da = dz @ self.params[f"W{i}"].T
        return grads, da

    def predict(self, X):
        return self.forward(np.atleast_2d(X), mode="eval")


def mlp_forward(net, batch, mode="train"):
    return net.forward(batch, mode)


def mlp_backward(net, batch, loss_grad):
    """Backward pass; ``batch`` must be the batch of the preceding forward."""
    cache = net._cache
    if cache is None or cache["X"].shape != np.shape(batch) or not np.array_equal(cache["X"], batch):
        raise StateError("no matching forward pass for this batch")
    return net.backward(loss_grad)


# -- optimisation -------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    decay_rate: float = 0.988
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be > 0")
        if not 0 < self.decay_rate <= 1:
            raise ParameterError("decay rate must lie in (0, 1]")

    @classmethod
    def for_net(cls, net, **kwargs):
        state = cls(**kwargs)
        state.first = {k: np.zeros_like(v) for k, v in net.params.items()}
        state.second = {k: np.zeros_like(v) for k, v in net.params.items()}
        return state


def adam_step(net, grads, state):
    """One bias-corrected Adam update with decoupled weight decay (in place)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    lr = state.learning_rate
    for name, g in grads.items():
        p = net.params[name]
        m = state.first.setdefault(name, np.zeros_like(p))
        v = state.second.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


def decay_learning_rate(state):
    state.learning_rate *= state.decay_rate
    return state


# -- verification -------------------------------------------------------------

def finite_difference_check(net, batch, loss, epsilon_fd=1e-5, mode="train", include_input=True):
    """Max relative error between backprop and central differences.

    ``loss(output)`` returns ``(value, d value / d output)``. Entries whose
    analytic gradient is below 1e-8 in magnitude are skipped, and the error
    denominator is floored at 1e-4 so rounding in tiny gradients is not
    reported as a mismatch.
    """
    if epsilon_fd <= 0:
        raise ParameterError("epsilon_fd must be > 0")
    batch = np.array(batch, dtype=float)
    probe = net.clone()

    def value(X):
        return loss(probe.forward(X, mode, update_stats=False))[0]

    out = probe.forward(batch, mode, update_stats=False)
    _, dout = loss(out)
    grads, dX = probe.backward(dout)
    targets = [(probe.params[k], grads[k]) for k in probe.params]
    if include_input:
        targets.append((batch, dX))
    worst = 0.0
    for arr, analytic in targets:
        flat, gflat = arr.reshape(-1), analytic.reshape(-1)
        for i in range(flat.size):
            if abs(gflat[i]) <= 1e-8:
                continue
            orig = flat[i]
            flat[i] = orig + epsilon_fd
            up = value(batch)
            flat[i] = orig - epsilon_fd
            down = value(batch)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon_fd)
            rel = abs(numeric - gflat[i]) / max(abs(numeric), abs(gflat[i]), 1e-4)
            worst = max(worst, rel)
    return worst


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(net, path):
    """Write parameters, batch-norm moments and the config to an ``.npz`` file."""
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in net.buffers.items()})
    arrays["__format__"] = np.array(CHECKPOINT_FORMAT)
    arrays["__config__"] = np.array(json.dumps(net.config.to_dict()))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        fmt = str(data["__format__"])
        if fmt != CHECKPOINT_FORMAT:
            raise ParameterError(f"unsupported checkpoint format {fmt!r}")
        net = Mlp(MlpConfig(**json.loads(str(data["__config__"]))))
        for key in data.files:
            kind, _, name = key.partition("/")
            if kind == "param":
                net.params[name] = data[key].copy()
            elif kind == "buffer":
                net.buffers[name] = data[key].copy()
    return net
