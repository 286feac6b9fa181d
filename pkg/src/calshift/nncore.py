"""Minimal feed-forward engine: dense, dropout, and Bayesian-dense layers.

Hand-rolled forward/backward over numpy so every gradient is verifiable
against central differences. Hidden layers use ReLU; the single output
unit is a logit passed through a sigmoid. Bayesian layers hold a
factorized Gaussian posterior over weights and biases with the spread
parameterized as sigma = softplus(rho), sampled by reparameterization in
train mode and collapsed to the posterior mean in eval mode. Dropout is
inverted (mask scaled by 1/(1-rate)) and drawn only in train mode.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    ConfigurationError,
    DivergenceError,
    InputShapeError,
    NumericOverflowError,
)
from .metrics import clamp_probs
from .seeding import make_rng

PLACEMENTS = ("before-every-layer", "before-output-only")


# ---------------------------------------------------------------------------
# layer and model types

@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError("dense layer shapes inconsistent")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ConfigurationError("dense layer has non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def param_arrays(self):
        return [("weights", self.weights), ("bias", self.bias)]


@dataclass
class BayesianDenseLayer:
    """Dense layer with Gaussian posteriors over weights and biases."""

    weight_mu: np.ndarray   # (out, in)
    weight_rho: np.ndarray  # (out, in), sigma = softplus(rho)
    bias_mu: np.ndarray     # (out,)
    bias_rho: np.ndarray    # (out,)
    prior_std: float = 1.0
    activation: str = "relu"

    def __post_init__(self):
        for name in ("weight_mu", "weight_rho", "bias_mu", "bias_rho"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.weight_mu.shape != self.weight_rho.shape:
            raise ConfigurationError("weight mu/rho shapes differ")
        if self.bias_mu.shape != self.bias_rho.shape or self.bias_mu.ndim != 1:
            raise ConfigurationError("bias mu/rho shapes differ")
        if self.weight_mu.shape[0] != self.bias_mu.shape[0]:
            raise ConfigurationError("bayesian layer shapes inconsistent")
        if not self.prior_std > 0:
            raise ConfigurationError("prior_std must be positive")

    @property
    def in_dim(self) -> int:
        return self.weight_mu.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight_mu.shape[0]

    def weight_sigma(self) -> np.ndarray:
        return _softplus(self.weight_rho)

    def bias_sigma(self) -> np.ndarray:
        return _softplus(self.bias_rho)

    def param_arrays(self):
        return [
            ("weight_mu", self.weight_mu),
            ("weight_rho", self.weight_rho),
            ("bias_mu", self.bias_mu),
            ("bias_rho", self.bias_rho),
        ]


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    placement: str = "before-output-only"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError("dropout rate must be in [0, 1)")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"unknown dropout placement {self.placement!r}")


@dataclass
class Model:
    """An ordered layer stack plus its dropout recipe and training seed."""

    layers: list
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    seed: int | None = None

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError("adjacent layer sizes do not chain")
        if self.layers[-1].out_dim != 1:
            raise ConfigurationError("output layer must have a single unit")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def param_arrays(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.param_arrays():
                yield f"layer{i}.{name}", arr

    def flat_params(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.param_arrays()])


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


def build_mlp(
    input_dim: int,
    hidden: tuple[int, ...] = (32, 32),
    dropout: DropoutSpec | None = None,
    bayesian: bool = False,
    prior_std: float = 1.0,
    init_sigma: float = 0.05,
    seed: int = 0,
) -> Model:
    """Randomly initialized MLP; symmetric uniform fan-in init."""
    rng = make_rng(seed, "init")
    sizes = [input_dim, *hidden, 1]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = "relu" if i < len(sizes) - 2 else "identity"
        if bayesian:
            rho = np.full_like(w, _softplus_inv(init_sigma))
            layers.append(
                BayesianDenseLayer(
                    weight_mu=w,
                    weight_rho=rho,
                    bias_mu=b,
                    bias_rho=np.full_like(b, _softplus_inv(init_sigma)),
                    prior_std=prior_std,
                    activation=act,
                )
            )
        else:
            layers.append(DenseLayer(weights=w, bias=b, activation=act))
    return Model(layers=layers, dropout=dropout or DropoutSpec(), seed=seed)


# ---------------------------------------------------------------------------
# forward / backward

def _dropout_applies(model: Model, layer_index: int) -> bool:
    if model.dropout.rate == 0.0:
        return False
    if model.dropout.placement == "before-every-layer":
        return True
    return layer_index == len(model.layers) - 1


def _forward_logit(model: Model, x: np.ndarray, mode: str, rng, cache=None):
    """Batched logit computation; fills ``cache`` for backprop if given."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = x
    for i, layer in enumerate(model.layers):
        if mode == "train" and _dropout_applies(model, i):
            if rng is None:
                raise ConfigurationError("train-mode forward needs an rng")
            keep = rng.random(h.shape) >= model.dropout.rate
            mask = keep / (1.0 - model.dropout.rate)
            h = h * mask
        else:
            mask = None
        if isinstance(layer, BayesianDenseLayer):
            if mode == "train":
                if rng is None:
                    raise ConfigurationError("train-mode forward needs an rng")
                eps_w = rng.standard_normal(layer.weight_mu.shape)
                eps_b = rng.standard_normal(layer.bias_mu.shape)
                w = layer.weight_mu + layer.weight_sigma() * eps_w
                b = layer.bias_mu + layer.bias_sigma() * eps_b
            else:
                eps_w = eps_b = None
                w = layer.weight_mu
                b = layer.bias_mu
        else:
            eps_w = eps_b = None
            w = layer.weights
            b = layer.bias
        z = h @ w.T + b
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        if cache is not None:
            cache.append({"input": h, "mask": mask, "z": z, "w": w,
                          "eps_w": eps_w, "eps_b": eps_b})
        h = a
    logit = h[:, 0]
    if not np.isfinite(logit).all():
        raise NumericOverflowError("non-finite activation in forward pass")
    return logit


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InputShapeError(
            f"input has dimension {x.shape[-1] if x.ndim else 0}, "
            f"model expects {model.input_dim}"
        )
    return x, single


def forward(model: Model, x, mode: str = "eval", rng=None):
    """Probability p(y=1|x). Accepts one vector or a batch matrix.

    In eval mode dropout is off and Bayesian layers use their posterior
    mean, so the result is a pure function of (model, x). In train mode
    masks and parameter samples are drawn from ``rng``.
    """
    xb, single = _as_batch(model, x)
    logit = _forward_logit(model, xb, mode, rng)
    p = expit(logit)
    return float(p[0]) if single else p


def forward_logit(model: Model, x, mode: str = "eval", rng=None):
    """Pre-sigmoid output; same contract as ``forward``."""
    xb, single = _as_batch(model, x)
    logit = _forward_logit(model, xb, mode, rng)
    return float(logit[0]) if single else logit


def _backward(model: Model, cache, dlogit: np.ndarray):
    """Gradients of a scalar loss wrt all parameters, given dloss/dlogit.

    Returns a list (one entry per layer) of dicts keyed like the layer's
    param_arrays. Dropout masks and reparameterization noise are treated
    as constants.
    """
    grads = [None] * len(model.layers)
    delta = dlogit[:, None]  # dL/da for the output layer
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        c = cache[i]
        if layer.activation == "relu":
            delta = delta * (c["z"] > 0.0)
        dw = delta.T @ c["input"]
        db = delta.sum(axis=0)
        if isinstance(layer, BayesianDenseLayer):
            if c["eps_w"] is None:
                # eval mode: W = mu, sigma has no effect on the output
                d_rho_w = np.zeros_like(layer.weight_rho)
                d_rho_b = np.zeros_like(layer.bias_rho)
            else:
                d_rho_w = dw * c["eps_w"] * expit(layer.weight_rho)
                d_rho_b = db * c["eps_b"] * expit(layer.bias_rho)
            grads[i] = {
                "weight_mu": dw,
                "weight_rho": d_rho_w,
                "bias_mu": db,
                "bias_rho": d_rho_b,
            }
        else:
            grads[i] = {"weights": dw, "bias": db}
        delta = delta @ c["w"]
        if c["mask"] is not None:
            delta = delta * c["mask"]
    return grads


# ---------------------------------------------------------------------------
# losses

def bce_loss(p: float, y: int) -> float:
    """Binary cross-entropy -(y log p + (1-y) log(1-p)), p clamped."""
    pc = float(clamp_probs(p))
    return float(-(y * math.log(pc) + (1 - y) * math.log1p(-pc)))


def kl_gaussian(layer: BayesianDenseLayer) -> float:
    """KL(posterior || zero-mean isotropic prior), summed over entries."""
    total = 0.0
    for mu, sigma in (
        (layer.weight_mu, layer.weight_sigma()),
        (layer.bias_mu, layer.bias_sigma()),
    ):
        s2 = layer.prior_std**2
        kl = np.log(layer.prior_std / sigma) + (sigma**2 + mu**2) / (2.0 * s2) - 0.5
        total += float(kl.sum())
    return total


def _kl_grads(layer: BayesianDenseLayer, scale: float):
    """Gradients of scale * kl_gaussian(layer) wrt the layer's params."""
    s2 = layer.prior_std**2
    out = {}
    for prefix, mu, rho in (
        ("weight", layer.weight_mu, layer.weight_rho),
        ("bias", layer.bias_mu, layer.bias_rho),
    ):
        sigma = _softplus(rho)
        out[f"{prefix}_mu"] = scale * mu / s2
        dkl_dsigma = sigma / s2 - 1.0 / sigma
        out[f"{prefix}_rho"] = scale * dkl_dsigma * expit(rho)
    return out


def _total_kl(model: Model) -> float:
    return sum(
        kl_gaussian(l) for l in model.layers if isinstance(l, BayesianDenseLayer)
    )


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    kl_weight: float = 1.0
    gradient_clip: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.kl_weight < 0:
            raise ConfigurationError("kl_weight must be non-negative")
        if self.gradient_clip is not None and self.gradient_clip <= 0:
            raise ConfigurationError("gradient_clip must be positive")


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def eval_accuracy(model: Model, features: np.ndarray, labels: np.ndarray) -> float:
    p = forward(model, features, mode="eval")
    return float(np.mean((p >= 0.5).astype(np.int64) == labels))


def train(model_init: Model, data, cfg: TrainConfig, grad_callback=None) -> Model:
    """Adam training on BCE (+ scaled KL for Bayesian layers).

    Returns the epoch-end checkpoint with the best validation accuracy
    (ties broken by the earliest epoch); ``epochs=0`` returns an
    untouched copy of ``model_init``. ``grad_callback``, if given, is
    invoked each step with the post-clip flattened gradient (testing
    hook).
    """
    if len(data.train) == 0 or len(data.val) == 0:
        raise ConfigurationError("train and validation splits must be non-empty")
    if not (data.train.has_labels and data.val.has_labels):
        raise ConfigurationError("training requires labeled train/val splits")

    model = model_init.copy()
    model.seed = cfg.seed
    if cfg.epochs == 0:
        return model

    x_train = data.train.features
    y_train = data.train.labels.astype(np.float64)
    n = len(x_train)
    kl_scale = cfg.kl_weight / n

    rng = make_rng(cfg.seed, "train")
    opt = _Adam(cfg.learning_rate)
    params = {name: arr for name, arr in model.param_arrays()}

    best_acc = -1.0
    best_model = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            cache = []
            try:
                logit = _forward_logit(model, xb, "train", rng, cache)
            except NumericOverflowError as exc:
                raise DivergenceError(f"non-finite loss at epoch {epoch}") from exc
            p = expit(logit)
            pc = clamp_probs(p)
            loss = float(np.mean(-(yb * np.log(pc) + (1 - yb) * np.log1p(-pc))))
            loss += kl_scale * _total_kl(model)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            dlogit = (p - yb) / len(yb)
            layer_grads = _backward(model, cache, dlogit)
            grads = {}
            for i, layer in enumerate(model.layers):
                extra = (
                    _kl_grads(layer, kl_scale)
                    if isinstance(layer, BayesianDenseLayer)
                    else {}
                )
                for name, g in layer_grads[i].items():
                    if name in extra:
                        g = g + extra[name]
                    if cfg.gradient_clip is not None:
                        g = np.clip(g, -cfg.gradient_clip, cfg.gradient_clip)
                    grads[f"layer{i}.{name}"] = g
            if grad_callback is not None:
                grad_callback(np.concatenate([g.ravel() for g in grads.values()]))
            opt.step(params, grads)
        acc = eval_accuracy(model, data.val.features, data.val.labels)
        if acc > best_acc:
            best_acc = acc
            best_model = model.copy()
    best_model.seed = cfg.seed
    return best_model


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(
    model: Model,
    x,
    y: int,
    eps: float = 1e-5,
    mode: str = "eval",
    kl_weight: float = 0.0,
    noise_seed: int = 0,
) -> float:
    """Max relative error of analytic vs central-difference gradients.

    The loss is bce(forward(x), y) + kl_weight * total KL. Dropout masks
    and reparameterization noise are frozen by reseeding an identical
    generator for every evaluation, so stochastic layers are checked
    through fixed noise.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must be in (0, 1e-2]")
    xb, _ = _as_batch(model, x)

    def loss_value() -> float:
        rng = make_rng(noise_seed, "gradcheck")
        logit = _forward_logit(model, xb, mode, rng)
        p = float(expit(logit)[0])
        return bce_loss(p, y) + kl_weight * _total_kl(model)

    # analytic pass with the same frozen noise
    rng = make_rng(noise_seed, "gradcheck")
    cache = []
    logit = _forward_logit(model, xb, mode, rng, cache)
    p = expit(logit)
    dlogit = p - float(y)
    layer_grads = _backward(model, cache, dlogit)
    analytic = {}
    for i, layer in enumerate(model.layers):
        extra = (
            _kl_grads(layer, kl_weight)
            if isinstance(layer, BayesianDenseLayer) and kl_weight
            else {}
        )
        for name, g in layer_grads[i].items():
            analytic[f"layer{i}.{name}"] = g + extra.get(name, 0.0)

    worst = 0.0
    for pname, arr in model.param_arrays():
        ga = analytic[pname]
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + eps
            up = loss_value()
            arr[ix] = orig - eps
            down = loss_value()
            arr[ix] = orig
            fd = (up - down) / (2.0 * eps)
            a = float(ga[ix])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            worst = max(worst, err)
            it.iternext()
    return worst


# ---------------------------------------------------------------------------
# checkpoint file format

CHECKPOINT_FORMAT = "calshift-checkpoint-v1"


def model_to_dict(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        if isinstance(layer, BayesianDenseLayer):
            layers.append(
                {
                    "kind": "bayesian-dense",
                    "activation": layer.activation,
                    "in": layer.in_dim,
                    "out": layer.out_dim,
                    "prior_std": layer.prior_std,
                    "weight_mu": layer.weight_mu.ravel().tolist(),
                    "weight_rho": layer.weight_rho.ravel().tolist(),
                    "bias_mu": layer.bias_mu.tolist(),
                    "bias_rho": layer.bias_rho.tolist(),
                }
            )
        else:
            layers.append(
                {
                    "kind": "dense",
                    "activation": layer.activation,
                    "in": layer.in_dim,
                    "out": layer.out_dim,
                    "weights": layer.weights.ravel().tolist(),
                    "bias": layer.bias.tolist(),
                }
            )
    return {
        "format": CHECKPOINT_FORMAT,
        "dropout": {"rate": model.dropout.rate, "placement": model.dropout.placement},
        "seed": model.seed,
        "layers": layers,
    }


def model_from_dict(doc: dict) -> Model:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError("not a recognized checkpoint file")
    layers = []
    for rec in doc["layers"]:
        shape = (rec["out"], rec["in"])
        if rec["kind"] == "dense":
            layers.append(
                DenseLayer(
                    weights=np.array(rec["weights"], dtype=np.float64).reshape(shape),
                    bias=np.array(rec["bias"], dtype=np.float64),
                    activation=rec["activation"],
                )
            )
        elif rec["kind"] == "bayesian-dense":
            layers.append(
                BayesianDenseLayer(
                    weight_mu=np.array(rec["weight_mu"], dtype=np.float64).reshape(shape),
                    weight_rho=np.array(rec["weight_rho"], dtype=np.float64).reshape(shape),
                    bias_mu=np.array(rec["bias_mu"], dtype=np.float64),
                    bias_rho=np.array(rec["bias_rho"], dtype=np.float64),
                    prior_std=rec["prior_std"],
                    activation=rec["activation"],
                )
            )
        else:
            raise ConfigurationError(f"unknown layer kind {rec['kind']!r}")
    dropout = DropoutSpec(rate=doc["dropout"]["rate"], placement=doc["dropout"]["placement"])
    return Model(layers=layers, dropout=dropout, seed=doc.get("seed"))


def save_checkpoint(model: Model, path: str) -> None:
    from .dataio import atomic_write_text

    atomic_write_text(path, json.dumps(model_to_dict(model), sort_keys=True))


def load_checkpoint(path: str) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
