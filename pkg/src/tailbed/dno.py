"""Ensembles of branch/trunk neural operators. The branch is a fully connected
ReLU network over sensor values of the physical input function; the trunk is a
learned constant latent vector (every trunk input is held constant in these
experiments), so a prediction is dot(branch(u), trunk) + bias. Ensemble spread
across random initializations supplies the predictive variance."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict

import numpy as np

from .errors import TrainingFailure
from .stats import RandomFieldBasis, synthesize_fields

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DnoConfig:
    hidden_layers: int = 5
    width: int = 200
    latent: int = 200
    epochs: int = 1000
    learning_rate: float = 1e-3
    ensemble: int = 2
    sensor_stride: int = 1
    warm_start: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.ensemble < 2:
            raise ValueError("ensemble size must be >= 2 for a variance estimate")
        if min(self.hidden_layers, self.width, self.latent, self.epochs) < 1:
            raise ValueError("architecture and epoch counts must be positive")


@dataclass
class AffineScaler:
    """Per-feature affine map between data range and [-1, 1]."""

    center: np.ndarray
    half_width: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "AffineScaler":
        values = np.atleast_2d(np.asarray(values, dtype=float))
        lo, hi = values.min(axis=0), values.max(axis=0)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        half[half <= 0] = 1.0
        return cls(center, half)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.center) / self.half_width

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * self.half_width + self.center

    @property
    def low(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def high(self) -> np.ndarray:
        return self.center + self.half_width


class OperatorNet:
    """One ensemble member: ReLU branch MLP to a latent vector, dotted with a
    learned constant trunk vector plus a scalar bias.

    All parameters live in one flat float64 vector (views per layer) so the
    optimizer runs fused updates.
    """

    def __init__(self, n_inputs: int, cfg: DnoConfig, rng: np.random.Generator):
        sizes = [n_inputs] + [cfg.width] * cfg.hidden_layers + [cfg.latent]
        self.layer_sizes = sizes
        n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])) + cfg.latent + 1
        self.params = np.empty(n_params)
        self.weights, self.biases = [], []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = self.params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.params[offset:offset + fan_out]
            offset += fan_out
            limit = np.sqrt(6.0 / fan_in)
            w[:] = rng.uniform(-limit, limit, size=w.shape)
            b[:] = 0.0
            self.weights.append(w)
            self.biases.append(b)
        self.trunk = self.params[offset:offset + cfg.latent]
        offset += cfg.latent
        limit = np.sqrt(6.0 / cfg.latent)
        self.trunk[:] = rng.uniform(-limit, limit, size=cfg.latent)
        self.bias = self.params[offset:offset + 1]
        self.bias[:] = 0.0

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        latent = h @ self.weights[-1] + self.biases[-1]
        return latent @ self.trunk + self.bias[0]

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean squared error and its gradient in the flat parameter vector."""
        n = x.shape[0]
        pre, act = [], [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0)
            act.append(h)
        latent = h @ self.weights[-1] + self.biases[-1]
        out = latent @ self.trunk + self.bias[0]
        resid = out - y
        loss = float(resid @ resid) / n

        grad = np.zeros_like(self.params)
        g_w, g_b = [], []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            g_w.append(grad[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out))
            offset += fan_in * fan_out
            g_b.append(grad[offset:offset + fan_out])
            offset += fan_out
        g_trunk = grad[offset:offset + self.trunk.size]
        g_bias = grad[offset + self.trunk.size:]

        d_out = 2.0 * resid / n
        g_bias[0] = d_out.sum()
        g_trunk[:] = latent.T @ d_out
        d_latent = np.outer(d_out, self.trunk)
        g_w[-1][:] = act[-1].T @ d_latent
        g_b[-1][:] = d_latent.sum(axis=0)
        d_h = d_latent @ self.weights[-1].T
        for layer in range(len(self.weights) - 2, -1, -1):
            d_z = d_h * (pre[layer] > 0.0)
            g_w[layer][:] = act[layer].T @ d_z
            g_b[layer][:] = d_z.sum(axis=0)
            if layer:
                d_h = d_z @ self.weights[layer].T
        return loss, grad


def _adam_train(net: OperatorNet, x: np.ndarray, y: np.ndarray, cfg: DnoConfig):
    """Full-batch Adam for a fixed number of epochs. Returns (epoch0, final) MSE."""
    m = np.zeros_like(net.params)
    v = np.zeros_like(net.params)
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    loss0 = None
    loss = np.inf
    for t in range(1, cfg.epochs + 1):
        loss, grad = net.loss_and_grad(x, y)
        if loss0 is None:
            loss0 = loss
        if not np.isfinite(loss):
            return loss0, loss
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad**2
        step = lr / (1.0 - b1**t)
        denom = np.sqrt(v / (1.0 - b2**t)) + eps
        net.params -= step * m / denom
    return loss0, loss


def _interleave_complex(fields: np.ndarray) -> np.ndarray:
    out = np.empty((fields.shape[0], 2 * fields.shape[1]))
    out[:, 0::2] = fields.real
    out[:, 1::2] = fields.imag
    return out


def _design_matrix(xs: np.ndarray, basis: RandomFieldBasis | None, stride: int) -> np.ndarray:
    """Branch inputs: sensor-sampled physical fields (identity map when no basis)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if basis is None:
        return xs
    fields = synthesize_fields(xs, basis)[:, ::stride]
    if basis.is_complex:
        return _interleave_complex(fields)
    return fields


@dataclass(eq=False)
class DnoEnsemble:
    """Trained ensemble: shared scalers and architecture, members differing only
    in their initialization seed."""

    members: list
    input_scaler: AffineScaler
    output_scaler: AffineScaler
    basis: RandomFieldBasis | None
    config: DnoConfig
    train_losses: list          # (epoch0, final) per surviving member

    @property
    def n_members(self) -> int:
        return len(self.members)

    def _scaled_design(self, xs: np.ndarray) -> np.ndarray:
        return self.input_scaler.transform(
            _design_matrix(xs, self.basis, self.config.sensor_stride))

    def predict_members(self, xs: np.ndarray, chunk: int = 32768) -> np.ndarray:
        """(n_members, n_points) predictions in original output units."""
        f = self._scaled_design(xs)
        out = np.empty((len(self.members), f.shape[0]))
        for start in range(0, f.shape[0], chunk):
            block = slice(start, min(start + chunk, f.shape[0]))
            for i, net in enumerate(self.members):
                out[i, block] = net.forward(f[block])
        return self.output_scaler.inverse(out)

    def predict(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        preds = self.predict_members(xs)
        return preds.mean(axis=0), preds.var(axis=0, ddof=1)

    def member_predict(self, index: int, xs: np.ndarray) -> np.ndarray:
        if not 0 <= index < len(self.members):
            raise ValueError(f"member index {index} out of range")
        f = self._scaled_design(xs)
        return np.asarray(self.output_scaler.inverse(self.members[index].forward(f)))

    def density_mean(self, xs: np.ndarray) -> np.ndarray:
        """Cheap mean used for output-density construction: the first member only."""
        return self.member_predict(0, xs)


def dno_train(data, basis: RandomFieldBasis | None, cfg: DnoConfig, seed=0,
              warm_from: DnoEnsemble | None = None) -> DnoEnsemble:
    """Train an ensemble from scratch (fresh random initializations) on the
    current dataset; input/output scalers are refit to the data each call."""
    if len(data) < 2:
        raise ValueError("need at least two observations")
    design = _design_matrix(data.inputs, basis, cfg.sensor_stride)
    input_scaler = AffineScaler.fit(design)
    output_scaler = AffineScaler.fit(data.outputs[:, None])
    xs = input_scaler.transform(design)
    ys = output_scaler.transform(data.outputs[:, None]).ravel()

    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(cfg.ensemble)
    members, losses = [], []
    for i, child in enumerate(children):
        if cfg.warm_start and warm_from is not None and i < warm_from.n_members \
                and warm_from.members[i].layer_sizes[0] == xs.shape[1]:
            net = warm_from.members[i]
        else:
            net = OperatorNet(xs.shape[1], cfg, np.random.default_rng(child))
        loss0, loss = _adam_train(net, xs, ys, cfg)
        if not np.isfinite(loss):
            logger.warning("member %d diverged (epoch-0 mse %.3e, final %s); dropped",
                           i, loss0, loss)
            continue
        members.append(net)
        losses.append((loss0, loss))
    if len(members) < 2:
        raise TrainingFailure(f"only {len(members)} of {cfg.ensemble} members trained")
    return DnoEnsemble(members, input_scaler, output_scaler, basis, cfg, losses)


def dno_predict(ens: DnoEnsemble, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean and unbiased cross-member variance in original units."""
    return ens.predict(xs)


def dno_member_predict(ens: DnoEnsemble, member_index: int, xs: np.ndarray) -> np.ndarray:
    return ens.member_predict(member_index, xs)


# --- Checkpointing ---------------------------------------------------------------


def save_ensemble(ens: DnoEnsemble, path) -> None:
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "config": np.frombuffer(json.dumps(asdict(ens.config)).encode(), dtype=np.uint8),
        "in_center": ens.input_scaler.center,
        "in_half": ens.input_scaler.half_width,
        "out_center": ens.output_scaler.center,
        "out_half": ens.output_scaler.half_width,
        "layer_sizes": np.array(ens.members[0].layer_sizes),
        "n_members": np.array(len(ens.members)),
        "train_losses": np.array(ens.train_losses),
    }
    for i, net in enumerate(ens.members):
        arrays[f"member_{i}"] = net.params
    if ens.basis is not None:
        arrays["basis_eigenvalues"] = ens.basis.eigenvalues
        arrays["basis_modes"] = ens.basis.modes
        arrays["basis_grid"] = ens.basis.sensor_grid
    np.savez_compressed(path, **arrays)


def load_ensemble(path) -> DnoEnsemble:
    with np.load(path) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
        cfg = DnoConfig(**json.loads(bytes(data["config"]).decode()))
        basis = None
        if "basis_modes" in data:
            basis = RandomFieldBasis(data["basis_eigenvalues"], data["basis_modes"],
                                     data["basis_grid"])
        members = []
        n_inputs = int(data["layer_sizes"][0])
        for i in range(int(data["n_members"])):
            net = OperatorNet(n_inputs, cfg, np.random.default_rng(0))
            net.params[:] = data[f"member_{i}"]
            members.append(net)
        return DnoEnsemble(
            members,
            AffineScaler(data["in_center"], data["in_half"]),
            AffineScaler(data["out_center"], data["out_half"]),
            basis, cfg, [tuple(row) for row in data["train_losses"]])
