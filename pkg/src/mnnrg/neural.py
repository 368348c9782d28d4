"""Single-hidden-layer regression network trained on governor data.

The network maps ``[x(t), v(t-1), r(t)]`` to a raw command.  Features and
target are min-max scaled into ``[-1, 1]`` using training-split ranges;
the scaling travels with the weights so a loaded network is
self-contained.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, CorruptFileError, SchemaError, TrainingDivergedError

WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class MinMaxScaler:
    """Affine map of each column from ``[lo, hi]`` onto ``[-1, 1]``."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, data):
        data = np.atleast_2d(np.asarray(data, dtype=float))
        return cls(lo=data.min(axis=0), hi=data.max(axis=0))

    @classmethod
    def identity(cls, width):
        return cls(lo=-np.ones(width), hi=np.ones(width))

    @property
    def half_range(self):
        half = 0.5 * (self.hi - self.lo)
        return np.where(half > 0.0, half, 1.0)

    @property
    def center(self):
        return 0.5 * (self.hi + self.lo)

    def normalize(self, data):
        return (np.asarray(data, dtype=float) - self.center) / self.half_range

    def denormalize(self, data):
        return np.asarray(data, dtype=float) * self.half_range + self.center

    def to_dict(self):
        return {"lo": [float(a) for a in self.lo], "hi": [float(a) for a in self.hi]}

    @classmethod
    def from_dict(cls, data):
        return cls(lo=np.array(data["lo"], dtype=float), hi=np.array(data["hi"], dtype=float))


@dataclass
class Dataset:
    """Rows of features with a scalar target, plus column names for CSV."""

    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple = ()
    target_name: str = "v"

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if len(self.features) != len(self.targets):
            raise ContractViolation("features and targets differ in row count")
        if not self.feature_names:
            self.feature_names = tuple(f"f{i + 1}" for i in range(self.features.shape[1]))
        if len(self.feature_names) != self.features.shape[1]:
            raise ContractViolation("feature_names do not match the feature width")

    def __len__(self):
        return len(self.targets)

    @property
    def width(self):
        return self.features.shape[1]

    def split(self, seed, fractions=(0.70, 0.15, 0.15)):
        """Seeded shuffle into train/validation/test index arrays."""
        n = len(self)
        perm = np.random.default_rng(seed).permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.feature_names) + [self.target_name])
            for row, target in zip(self.features, self.targets):
                w.writerow([f"{val:.17g}" for val in row] + [f"{target:.17g}"])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ContractViolation(f"{path} holds no data rows")
        header = rows[0]
        body = np.array(rows[1:], dtype=float)
        return cls(
            features=body[:, :-1],
            targets=body[:, -1],
            feature_names=tuple(header[:-1]),
            target_name=header[-1],
        )


@dataclass
class MlpNetwork:
    """``y = W2 tanh(W1 u + b1) + b2`` on normalized features ``u``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    feature_norm: MinMaxScaler = None
    target_norm: MinMaxScaler = None

    def __post_init__(self):
        self.W1 = np.atleast_2d(np.asarray(self.W1, dtype=float))
        self.b1 = np.asarray(self.b1, dtype=float).reshape(-1)
        self.W2 = np.atleast_2d(np.asarray(self.W2, dtype=float))
        self.b2 = np.asarray(self.b2, dtype=float).reshape(-1)
        hidden, n_in = self.W1.shape
        if self.b1.size != hidden or self.W2.shape != (1, hidden) or self.b2.size != 1:
            raise ContractViolation("inconsistent weight shapes")
        if self.feature_norm is None:
            self.feature_norm = MinMaxScaler.identity(n_in)
        if self.target_norm is None:
            self.target_norm = MinMaxScaler.identity(1)

    @property
    def widths(self):
        return (self.W1.shape[1], self.W1.shape[0], 1)

    @classmethod
    def initialize(cls, n_in, hidden, rng, feature_norm=None, target_norm=None):
        lim1 = np.sqrt(6.0 / (n_in + hidden))
        lim2 = np.sqrt(6.0 / (hidden + 1))
        return cls(
            W1=rng.uniform(-lim1, lim1, (hidden, n_in)),
            b1=np.zeros(hidden),
            W2=rng.uniform(-lim2, lim2, (1, hidden)),
            b2=np.zeros(1),
            feature_norm=feature_norm,
            target_norm=target_norm,
        )

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self):
        return MlpNetwork(
            *(p.copy() for p in self.params()),
            feature_norm=self.feature_norm,
            target_norm=self.target_norm,
        )

    def forward_normalized(self, u):
        hidden = np.tanh(u @ self.W1.T + self.b1)
        return (hidden @ self.W2.T + self.b2)[:, 0]

    def predict(self, features):
        """Denormalized predictions for a batch of raw feature rows."""
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[1] != self.W1.shape[1]:
            raise ContractViolation(
                f"expected {self.W1.shape[1]} features, got {features.shape[1]}"
            )
        u = self.feature_norm.normalize(features)
        return self.target_norm.denormalize(self.forward_normalized(u))

    def __call__(self, features):
        return float(self.predict(features)[0])


def forward(net, features):
    """Raw command for one feature vector."""
    return net(features)


def loss_and_grad(net, u, t):
    """Mean squared error on normalized data and its gradient per parameter."""
    n = len(t)
    z = u @ net.W1.T + net.b1
    h = np.tanh(z)
    pred = (h @ net.W2.T + net.b2)[:, 0]
    err = pred - t
    loss = float(np.mean(err * err))
    g_out = (2.0 / n) * err[:, None]
    gW2 = g_out.T @ h
    gb2 = g_out.sum(axis=0)
    g_h = (g_out @ net.W2) * (1.0 - h * h)
    gW1 = g_h.T @ u
    gb1 = g_h.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2]


@dataclass
class TrainConfig:
    lr: float = 1e-2
    max_epochs: int = 5000
    patience: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainResult:
    net: MlpNetwork
    metrics: dict
    split: tuple
    history: list = field(default_factory=list)
    best_epoch: int = 0


def _rmse(net, ds, idx):
    if len(idx) == 0:
        return float("nan")
    pred = net.predict(ds.features[idx])
    return float(np.sqrt(np.mean((pred - ds.targets[idx]) ** 2)))


def train(data, hidden, seed, config=None):
    """Fit a network with full-batch Adam and validation early stopping.

    Returns the best-validation weights together with train, validation,
    test and pooled RMSE in target units.
    """
    config = config or TrainConfig()
    if len(data) < 10:
        raise ContractViolation("training needs at least 10 rows")
    i_tr, i_va, i_te = data.split(seed)
    fnorm = MinMaxScaler.fit(data.features[i_tr])
    tnorm = MinMaxScaler.fit(data.targets[i_tr][:, None])
    rng = np.random.default_rng(seed)
    net = MlpNetwork.initialize(data.width, hidden, rng, fnorm, tnorm)

    u_tr = fnorm.normalize(data.features[i_tr])
    t_tr = tnorm.normalize(data.targets[i_tr][:, None])[:, 0]
    val_idx = i_va if len(i_va) else i_tr

    m = [np.zeros_like(p) for p in net.params()]
    s = [np.zeros_like(p) for p in net.params()]
    best = net.copy()
    best_val = _rmse(net, data, val_idx)
    best_epoch, stale = 0, 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        loss, grads = loss_and_grad(net, u_tr, t_tr)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch)
        for k, (p, g) in enumerate(zip(net.params(), grads)):
            m[k] = config.beta1 * m[k] + (1 - config.beta1) * g
            s[k] = config.beta2 * s[k] + (1 - config.beta2) * g * g
            m_hat = m[k] / (1 - config.beta1**epoch)
            s_hat = s[k] / (1 - config.beta2**epoch)
            p -= config.lr * m_hat / (np.sqrt(s_hat) + config.eps)
        val = _rmse(net, data, val_idx)
        history.append((epoch, loss, val))
        if val < best_val:
            best, best_val, best_epoch, stale = net.copy(), val, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    everything = np.arange(len(data))
    metrics = {
        "train_rmse": _rmse(best, data, i_tr),
        "val_rmse": _rmse(best, data, i_va),
        "test_rmse": _rmse(best, data, i_te),
        "pooled_rmse": _rmse(best, data, everything),
    }
    return TrainResult(best, metrics, (i_tr, i_va, i_te), history, best_epoch)


def net_to_dict(net):
    return {
        "version": WEIGHTS_VERSION,
        "widths": list(net.widths),
        "activation": ["tanh", "identity"],
        "weights": [net.W1.tolist(), net.W2.tolist()],
        "biases": [net.b1.tolist(), net.b2.tolist()],
        "feature_norm": net.feature_norm.to_dict(),
        "target_norm": net.target_norm.to_dict(),
    }


def net_from_dict(data):
    if not isinstance(data, dict):
        raise SchemaError("weight file must hold a JSON object")
    if data.get("version") != WEIGHTS_VERSION:
        raise SchemaError(f"unsupported weight file version {data.get('version')!r}")
    required = ("widths", "activation", "weights", "biases", "feature_norm", "target_norm")
    missing = [k for k in required if k not in data]
    if missing:
        raise SchemaError(f"weight file lacks {missing}")
    if list(data["activation"]) != ["tanh", "identity"]:
        raise SchemaError(f"unsupported activations {data['activation']!r}")
    try:
        net = MlpNetwork(
            W1=data["weights"][0],
            b1=data["biases"][0],
            W2=data["weights"][1],
            b2=data["biases"][1],
            feature_norm=MinMaxScaler.from_dict(data["feature_norm"]),
            target_norm=MinMaxScaler.from_dict(data["target_norm"]),
        )
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed weight arrays: {exc}") from exc
    if list(net.widths) != list(data["widths"]):
        raise SchemaError("declared widths do not match the weight shapes")
    return net


def save(net, path):
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(net_to_dict(net)) + "\n")


def load(path):
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path} is not valid JSON: {exc}") from exc
    return net_from_dict(data)


class NetworkSource:
    """Adapter turning a network into a governor nominal-command source."""

    def __init__(self, net):
        self.net = net

    def __call__(self, x, v_prev, r):
        feats = np.concatenate([np.asarray(x, dtype=float).ravel(), [v_prev, r]])
        return self.net(feats)
