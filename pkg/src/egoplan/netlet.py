"""A small dense-network kit with hand-written backprop.

Every trainable component exposes the same three methods:

``params()``
    live parameter arrays (mutated in place by training and grad checks)
``forward(x)``
    output for input ``x``
``backward(x, dout)``
    parameter gradients, aligned with ``params()``, for upstream ``dout``

The response regressor built from these pieces learns the BEV response map
from the ego intent and cell positions.
"""
from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .bevgrid import BevGrid, GridSpec, TAU_REF, response_target
from .errors import EmptyInputError, ShapeError
from .rng import substream
from .scene import EgoIntent

ACTIVATIONS = ("relu", "sigmoid", "identity")
# input scaling for the four intent channels
INTENT_SCALE = {"velocity": 10.0, "acceleration": 3.0, "yaw_rate": 0.5}


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError("bias length must equal weight rows")

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def _run(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None] if single else x
        if h.shape[-1] != self.in_dim:
            raise ShapeError(f"input width {h.shape[-1]} != net in-dim {self.in_dim}")
        cache = []
        for layer in self.layers:
            z = h @ layer.weight.T + layer.bias
            a = _act(z, layer.activation)
            cache.append((h, z, a))
            h = a
        return (h[0] if single else h), cache, single

    def forward(self, x):
        return self._run(x)[0]

    def backward(self, x, dout, return_input_grad=False):
        _, cache, single = self._run(x)
        g = np.asarray(dout, dtype=np.float64)
        g = g[None] if single else g
        grads = []
        for layer, (h, z, a) in zip(reversed(self.layers), reversed(cache)):
            dz = g * _act_grad(z, a, layer.activation)
            grads.append(dz.sum(axis=0))
            grads.append(dz.T @ h)
            g = dz @ layer.weight
        grads.reverse()
        if return_input_grad:
            return grads, (g[0] if single else g)
        return grads

    def nudge_kinks(self, x, margin=1e-3):
        """Shift biases so no relu pre-activation at ``x`` sits within ``margin`` of zero."""
        for _ in range(10):
            _, cache, _ = self._run(x)
            moved = False
            for layer, (_, z, _) in zip(self.layers, cache):
                if layer.activation != "relu":
                    continue
                near = np.any(np.abs(z) < margin, axis=0)
                if near.any():
                    layer.bias[near] += 3 * margin
                    moved = True
                    break
            if not moved:
                return self
        return self

    def to_dict(self):
        return {"layers": [{"in": l.in_dim, "out": l.out_dim, "activation": l.activation,
                            "weight": l.weight.ravel().tolist(), "bias": l.bias.tolist()}
                           for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        layers = []
        for l in d["layers"]:
            w = np.asarray(l["weight"], dtype=np.float64).reshape(l["out"], l["in"])
            layers.append(Layer(w, np.asarray(l["bias"], dtype=np.float64), l["activation"]))
        return cls(layers)


def init_dense(dims, activations, rng, scale=None):
    """He-style initialization for a chain ``dims[0] -> ... -> dims[-1]``."""
    if len(activations) != len(dims) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for n_in, n_out, act in zip(dims, dims[1:], activations):
        std = scale if scale is not None else math.sqrt(2.0 / n_in)
        layers.append(Layer(rng.normal(0.0, std, (n_out, n_in)), np.zeros(n_out), act))
    return DenseNet(layers)


def mlp_forward(net: DenseNet, x):
    return net.forward(x)


# ---------------------------------------------------------------- embeddings

def position_embedding(xy, width, min_wavelength=2.0, max_wavelength=120.0):
    """Deterministic 2-D sinusoidal embedding: half the channels for x, half for y."""
    if width % 4:
        raise ShapeError("embedding width must be a multiple of 4")
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    n = width // 4
    if n == 1:
        wavelengths = np.array([max_wavelength])
    else:
        wavelengths = max_wavelength * (min_wavelength / max_wavelength) ** (np.arange(n) / (n - 1))
    freq = 2.0 * math.pi / wavelengths
    parts = []
    for k in range(2):
        ang = xy[:, k:k + 1] * freq[None]
        parts.extend([np.sin(ang), np.cos(ang)])
    return np.concatenate(parts, axis=1)


def intent_inputs(intent: EgoIntent):
    return [
        np.array([intent.velocity / INTENT_SCALE["velocity"]]),
        np.array([intent.acceleration / INTENT_SCALE["acceleration"]]),
        np.array([intent.yaw_rate / INTENT_SCALE["yaw_rate"]]),
        intent.command.one_hot(),
    ]


def init_intent_nets(C, rng):
    if C % 4:
        raise ShapeError("C must be divisible by 4")
    q = C // 4
    return [init_dense([d, q, q], ["relu", "identity"], rng) for d in (1, 1, 1, 3)]


def encode_intent(nets, intent: EgoIntent):
    """Concatenate the four channel embeddings (velocity, accel, yaw rate, command)."""
    if len(nets) != 4:
        raise ShapeError("intent encoding uses exactly four nets")
    widths = {n.out_dim for n in nets}
    if len(widths) != 1:
        raise ShapeError("all intent sub-nets must share their output width")
    return np.concatenate([n.forward(u) for n, u in zip(nets, intent_inputs(intent))])


class IntentEncoder:
    """The four intent MLPs viewed as one trainable component.

    ``x`` is a list of four (B, d_j) input arrays; the output is (B, C).
    """

    def __init__(self, nets):
        self.nets = nets

    def params(self):
        return [p for n in self.nets for p in n.params()]

    def forward(self, x):
        return np.concatenate([n.forward(u) for n, u in zip(self.nets, x)], axis=-1)

    def backward(self, x, dout):
        q = self.nets[0].out_dim
        grads = []
        for j, (n, u) in enumerate(zip(self.nets, x)):
            grads.extend(n.backward(u, dout[..., j * q:(j + 1) * q]))
        return grads

    def nudge_kinks(self, x, margin=1e-3):
        for n, u in zip(self.nets, x):
            n.nudge_kinks(u, margin)
        return self


# ---------------------------------------------------------------- SE block

@dataclass
class SEBlock:
    """Squeeze-excitation gate followed by a 1-channel sigmoid head."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def init(cls, C, ratio, rng):
        hidden = max(1, C // ratio)
        return cls(rng.normal(0, math.sqrt(2.0 / C), (hidden, C)), np.zeros(hidden),
                   rng.normal(0, math.sqrt(1.0 / hidden), (C, hidden)), np.zeros(C),
                   rng.normal(0, math.sqrt(1.0 / C), C), np.zeros(1))

    @property
    def channels(self):
        return self.w2.shape[0]

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.head_w, self.head_b]

    def _run(self, x):
        # x: (B, N, C)
        s = x.mean(axis=1)
        z1 = s @ self.w1.T + self.b1
        a1 = np.maximum(z1, 0.0)
        g = sigmoid(a1 @ self.w2.T + self.b2)
        logit = np.matmul(x, (g * self.head_w)[:, :, None])[..., 0] + self.head_b[0]
        return logit, (s, z1, a1, g)

    def _param_grads(self, cache, dlx, dlogit_sum):
        """Parameter grads and d(loss)/d(squeeze) given sum_n dlogit * x per sample."""
        s, z1, a1, g = cache
        d_head_w = (g * dlx).sum(axis=0)
        d_head_b = np.array([dlogit_sum])
        dz2 = dlx * self.head_w * g * (1.0 - g)
        d_w2 = dz2.T @ a1
        d_b2 = dz2.sum(axis=0)
        dz1 = (dz2 @ self.w2) * (z1 > 0)
        d_w1 = dz1.T @ s
        d_b1 = dz1.sum(axis=0)
        return [d_w1, d_b1, d_w2, d_b2, d_head_w, d_head_b], dz1 @ self.w1

    def _backward(self, x, cache, dlogit):
        g = cache[3]
        dlx = np.matmul(dlogit[:, None, :], x)[:, 0, :]
        grads, ds = self._param_grads(cache, dlx, dlogit.sum())
        dx = dlogit[:, :, None] * (g * self.head_w)[:, None, :] + ds[:, None, :] / x.shape[1]
        return grads, dx

    def logits(self, x):
        return self._run(x)[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.channels:
            raise ShapeError(f"feature width {x.shape[-1]} != block channels {self.channels}")
        shape = x.shape[:-1]
        flat = x.reshape(1, -1, self.channels) if x.ndim <= 3 else x.reshape(x.shape[0], -1, self.channels)
        return sigmoid(self._run(flat)[0]).reshape(shape)

    def backward_logits(self, x, dlogit):
        """Gradients w.r.t. parameters and input from upstream d(loss)/d(logit)."""
        return self._backward(x, self._run(x)[1], dlogit)

    def backward(self, x, dout):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(1, -1, self.channels) if x.ndim <= 3 else x.reshape(x.shape[0], -1, self.channels)
        p = sigmoid(self._run(flat)[0])
        dlogit = np.asarray(dout, dtype=np.float64).reshape(p.shape) * p * (1.0 - p)
        return self.backward_logits(flat, dlogit)[0]

    def nudge_kinks(self, x, margin=1e-3):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(1, -1, self.channels) if x.ndim <= 3 else x.reshape(x.shape[0], -1, self.channels)
        z1 = self._run(flat)[1][1]
        near = np.any(np.abs(z1) < margin, axis=0)
        self.b1[near] += 3 * margin
        return self

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).ravel().tolist()
                for k in ("w1", "b1", "w2", "b2", "head_w", "head_b")} | {
            "hidden": int(self.w1.shape[0]), "channels": int(self.channels)}

    @classmethod
    def from_dict(cls, d):
        h, c = d["hidden"], d["channels"]
        return cls(np.reshape(d["w1"], (h, c)), np.asarray(d["b1"], float),
                   np.reshape(d["w2"], (c, h)), np.asarray(d["b2"], float),
                   np.asarray(d["head_w"], float), np.asarray(d["head_b"], float))


def se_forward(block: SEBlock, feature_map):
    """Per-cell response in (0, 1) for an (H, W, C) feature map."""
    return block.forward(feature_map)


# ---------------------------------------------------------------- loss

@dataclass(frozen=True)
class InteractLoss:
    bce: float
    l2: float
    total: float
    positives: int


def interact_loss(pred: BevGrid, target: BevGrid, w_bce=1.0, w_l2=1.0, tau=TAU_REF):
    """BCE against cells labeled positive when ``target >= tau`` plus an all-cell MSE."""
    if pred.spec != target.spec:
        raise ShapeError("prediction and target grids use different specs")
    return _interact_loss_arrays(pred.values, target.values, w_bce, w_l2, tau)


def _interact_loss_arrays(p, t, w_bce, w_l2, tau=TAU_REF):
    labels = t >= tau
    with np.errstate(divide="ignore"):
        lp = np.where(labels, np.log(np.where(labels, p, 1.0)), np.log(np.where(labels, 1.0, 1.0 - p)))
    lp = np.maximum(lp, math.log(1e-12))
    bce = float(-lp.mean())
    l2 = float(np.mean((p - t) ** 2))
    return InteractLoss(bce, l2, w_bce * bce + w_l2 * l2, int(labels.sum()))


# ---------------------------------------------------------------- regressor

@dataclass
class TrainConfig:
    lr: float = 2.0
    steps: int = 2000
    batch_size: int = 0  # 0 = full batch
    seed: int = 0
    w_bce: float = 0.05
    w_l2: float = 1.0
    C: int = 16
    se_ratio: int = 4

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 1:
            raise ValueError("step count must be >= 1")


class ResponseRegressor:
    """Intent MLPs + position embedding -> projection -> SE block -> response map."""

    def __init__(self, intent_nets, proj: DenseNet, se: SEBlock):
        self.intent = IntentEncoder(intent_nets)
        self.proj = proj
        self.se = se

    @classmethod
    def init(cls, C, se_ratio, rng):
        nets = init_intent_nets(C, rng)
        proj = init_dense([2 * C, C], ["relu"], rng)
        return cls(nets, proj, SEBlock.init(C, se_ratio, rng))

    @property
    def C(self):
        return self.proj.out_dim

    def params(self):
        return self.intent.params() + self.proj.params() + self.se.params()

    # x = (intent input list of (B, d) arrays, position embedding (N, C))
    def _run(self, x):
        u, pe = x
        C = self.C
        ie = self.intent.forward(u)
        layer = self.proj.layers[0]
        wi, wp = layer.weight[:, :C], layer.weight[:, C:]
        z = (ie @ wi.T)[:, None, :] + (pe @ wp.T)[None] + layer.bias
        f = np.maximum(z, 0.0)
        logit, se_cache = self.se._run(f)
        return logit, (ie, z, f, se_cache)

    def forward(self, x):
        return sigmoid(self._run(x)[0])

    def backward_logits(self, x, dlogit, cache=None):
        u, pe = x
        C = self.C
        if cache is None:
            cache = self._run(x)[1]
        ie, z, f, se_cache = cache
        g_se, df = self.se._backward(f, se_cache, dlogit)
        dz = df * (z > 0)
        layer = self.proj.layers[0]
        dz_b = dz.sum(axis=1)
        d_wi = dz_b.T @ ie
        d_wp = dz.sum(axis=0).T @ pe
        d_w = np.concatenate([d_wi, d_wp], axis=1)
        d_b = dz_b.sum(axis=0)
        d_ie = dz_b @ layer.weight[:, :C]
        g_int = self.intent.backward(u, d_ie)
        return g_int + [d_w, d_b] + g_se

    def backward(self, x, dout):
        p = self.forward(x)
        return self.backward_logits(x, np.asarray(dout) * p * (1.0 - p))

    def nudge_kinks(self, x, margin=1e-3):
        u, pe = x
        self.intent.nudge_kinks(u, margin)
        for _ in range(10):
            z = self._run(x)[1][1]
            near = np.any(np.abs(z) < margin, axis=(0, 1))
            if not near.any():
                break
            self.proj.layers[0].bias[near] += 3 * margin
        self.se.nudge_kinks(self._run(x)[1][2], margin)
        return self

    def inputs(self, intents, spec: GridSpec):
        u = [np.stack(col) for col in zip(*(intent_inputs(i) for i in intents))]
        pe = position_embedding(spec.centers().reshape(-1, 2), self.C)
        return u, pe

    def predict(self, intent: EgoIntent, spec: GridSpec) -> BevGrid:
        p = self.forward(self.inputs([intent], spec))[0]
        return BevGrid(spec, p.reshape(spec.shape))

    def to_dict(self):
        return {"schema": "netlet/1", "C": self.C,
                "intent": [n.to_dict() for n in self.intent.nets],
                "proj": self.proj.to_dict(), "se": self.se.to_dict()}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != "netlet/1":
            raise ValueError("not a netlet/1 checkpoint")
        return cls([DenseNet.from_dict(n) for n in d["intent"]],
                   DenseNet.from_dict(d["proj"]), SEBlock.from_dict(d["se"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- gradient check

def quadratic_loss(target):
    target = np.asarray(target, dtype=np.float64)

    def loss(out):
        r = out - target
        return 0.5 * float(np.sum(r * r)), r

    return loss


def _output_like(component, x):
    return np.asarray(component.forward(x), dtype=np.float64)


def grad_check(component, x, loss=None, eps=1e-5, seed=0, nudge=True):
    """Max relative error between analytic and central-difference parameter gradients.

    ``loss`` maps the component output to ``(value, d value / d output)``; by
    default it is a quadratic pull toward a seeded random target. With
    ``nudge`` the check runs on a copy whose relu biases have been shifted away
    from kinks at ``x``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    comp = copy.deepcopy(component)
    if nudge and hasattr(comp, "nudge_kinks"):
        comp.nudge_kinks(x, margin=max(1e-3, 100 * eps))
    if loss is None:
        out = _output_like(comp, x)
        loss = quadratic_loss(substream(seed, "init", 7).normal(size=out.shape))
    _, dout = loss(comp.forward(x))
    analytic = comp.backward(x, dout)
    worst = 0.0
    for p, g in zip(comp.params(), analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            fp = loss(comp.forward(x))[0]
            flat[k] = old - eps
            fm = loss(comp.forward(x))[0]
            flat[k] = old
            num = (fp - fm) / (2 * eps)
            denom = max(abs(num), abs(gflat[k]), 1e-8)
            worst = max(worst, abs(num - gflat[k]) / denom)
    return worst


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class LossRecord:
    step: int
    bce: float
    l2: float
    total: float


def _targets(scenarios, spec):
    return np.stack([response_target(spec, s.ego_gt_future).values.reshape(-1) for s in scenarios])


def _fused_step(model, u, pe, targets, w_bce, w_l2):
    """Loss and parameter gradients of one training step via the compiled kernels."""
    se = model.se
    layer = model.proj.layers[0]
    C = model.C
    ie = model.intent.forward(u)
    wi, wp = layer.weight[:, :C], layer.weight[:, C:]
    A = ie @ wi.T
    P = pe @ wp.T
    s = kernels.response_squeeze(A, P, layer.bias)
    z1 = s @ se.w1.T + se.b1
    a1 = np.maximum(z1, 0.0)
    g = sigmoid(a1 @ se.w2.T + se.b2)
    gh = g * se.head_w
    _, dl, dlx, bce_sum, l2_sum, pos = kernels.response_head(
        A, P, layer.bias, gh, float(se.head_b[0]), targets, w_bce, w_l2, TAU_REF)
    m = targets.size
    rec = InteractLoss(bce_sum / m, l2_sum / m, w_bce * bce_sum / m + w_l2 * l2_sum / m, pos)
    g_se, ds = se._param_grads((s, z1, a1, g), dlx, float(dl.sum()))
    dzb, dzn = kernels.response_backprop(A, P, layer.bias, dl, gh, ds / pe.shape[0])
    d_w = np.concatenate([dzb.T @ ie, dzn.T @ pe], axis=1)
    g_int = model.intent.backward(u, dzb @ wi)
    return rec, g_int + [d_w, dzb.sum(axis=0)] + g_se


def train_response(scenarios, spec: GridSpec, cfg: TrainConfig):
    """Fit a ResponseRegressor to response targets by plain gradient descent.

    Returns ``(regressor, curve)`` where ``curve[k]`` is the loss evaluated
    before update ``k`` (and the last entry after the final update).
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise EmptyInputError("train_response needs at least one scenario")
    rng = substream(cfg.seed, "init")
    model = ResponseRegressor.init(cfg.C, cfg.se_ratio, rng)
    targets = _targets(scenarios, spec)
    u_all, pe = model.inputs([s.ego_intent for s in scenarios], spec)
    batch = cfg.batch_size if 0 < cfg.batch_size < len(scenarios) else len(scenarios)
    order_rng = substream(cfg.seed, "train")
    order = np.arange(len(scenarios))
    pos = len(scenarios)
    curve = []
    for step in range(cfg.steps + 1):
        if batch == len(scenarios):
            idx = order
        else:
            if pos + batch > len(scenarios):
                order = order_rng.permutation(len(scenarios))
                pos = 0
            idx = order[pos:pos + batch]
            pos += batch
        u = [col[idx] for col in u_all]
        rec, grads = _fused_step(model, u, pe, targets[idx], cfg.w_bce, cfg.w_l2)
        curve.append(LossRecord(step, rec.bce, rec.l2, rec.total))
        if step == cfg.steps:
            break
        for param, g in zip(model.params(), grads):
            param -= cfg.lr * g
    return model, curve


def evaluate_response(model: ResponseRegressor, scenarios, spec: GridSpec, w_bce=0.05, w_l2=1.0):
    """Interaction loss of ``model`` pooled over all cells of ``scenarios``."""
    scenarios = list(scenarios)
    if not scenarios:
        raise EmptyInputError("no scenarios to evaluate")
    p = model.forward(model.inputs([s.ego_intent for s in scenarios], spec))
    return _interact_loss_arrays(p, _targets(scenarios, spec), w_bce, w_l2)


def write_loss_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "bce", "l2", "total"])
        for r in curve:
            w.writerow([r.step, repr(r.bce), repr(r.l2), repr(r.total)])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        return [LossRecord(int(r["step"]), float(r["bce"]), float(r["l2"]), float(r["total"]))
                for r in csv.DictReader(fh)]
