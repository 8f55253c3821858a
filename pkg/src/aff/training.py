"""Joint training of the gallery mixer and the lightweight query encoder.

The mixer is trained with an additive-angular-margin softmax loss against its
own prototype head. The query encoder is trained with the same loss against a
second head that never receives gradients: after every optimizer step it is
moved towards the mixer head by an exponential moving average. Both heads
therefore describe the same class geometry, which is what makes query
embeddings comparable with gallery embeddings.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, SchemaError, StateError, TrainingError
from .fusion import BaselineMixer, Mixer, MixerConfig

COS_CLAMP = 1e-7
MODES = ("joint", "two-stage", "coupled")


@dataclass
class ClassifierHead:
    prototypes: np.ndarray
    scale: float = 32.0
    margin: float = 0.3

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if not 0 <= self.margin < np.pi / 2:
            raise ConfigError("margin must lie in [0, pi/2)")
        if not np.all(np.isfinite(self.prototypes)):
            raise ConfigError("prototypes must be finite")

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    def copy(self):
        return ClassifierHead(self.prototypes.copy(), self.scale, self.margin)


def arcface_forward(features, prototypes, labels, scale, margin):
    """Mean additive-angular-margin cross-entropy over a batch.

    The margin is added to the target angle only; cosines are clamped to
    ``[-1 + 1e-7, 1 - 1e-7]`` before ``arccos`` and the clamp is part of the
    function (clamped entries get zero gradient). Where ``theta + m`` would
    pass ``pi`` the target logit falls back to ``cos(theta) - m * sin(m)`` so
    that it stays decreasing in the angle.
    """
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= prototypes.shape[0]):
        raise SchemaError("label out of range for the classifier head")
    fn, c_f = nx.l2_normalize_forward(features)
    wn, c_w = nx.l2_normalize_forward(prototypes)
    raw = fn @ wn.T
    lo, hi = -1.0 + COS_CLAMP, 1.0 - COS_CLAMP
    cos = np.clip(raw, lo, hi)
    rows = np.arange(features.shape[0])
    cos_y = cos[rows, labels]
    theta = np.arccos(cos_y)
    wrapped = theta + margin > np.pi
    logits = cos.copy()
    logits[rows, labels] = np.where(wrapped, cos_y - margin * np.sin(margin), np.cos(theta + margin))
    z = scale * logits
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sumexp = ez.sum(axis=1)
    losses = zmax[:, 0] + np.log(sumexp) - z[rows, labels]
    cache = (fn, c_f, wn, c_w, raw, theta, wrapped, ez / sumexp[:, None], labels, scale, margin)
    return float(np.mean(losses)), cache


def arcface_backward(cache, dloss=1.0):
    fn, c_f, wn, c_w, raw, theta, wrapped, prob, labels, scale, margin = cache
    b = fn.shape[0]
    rows = np.arange(b)
    dz = prob.copy()
    dz[rows, labels] -= 1.0
    dlogits = dz * (scale * dloss / b)
    dcos = dlogits.copy()
    # d cos(theta + m) / d cos(theta) = sin(theta + m) / sin(theta)
    slope = np.where(wrapped, 1.0, np.sin(theta + margin) / np.sin(theta))
    dcos[rows, labels] = dlogits[rows, labels] * slope
    inside = (raw > -1.0 + COS_CLAMP) & (raw < 1.0 - COS_CLAMP)
    dcos = dcos * inside
    dfn = dcos @ wn
    dwn = dcos.T @ fn
    return nx.l2_normalize_backward(dfn, c_f), nx.l2_normalize_backward(dwn, c_w)


def arcface_loss(feature, head, label):
    """Loss and gradients for one feature vector.

    Returns ``(loss, {"feature": ..., "prototypes": ...})``.
    """
    f = np.asarray(feature)[None]
    loss, cache = arcface_forward(f, head.prototypes, np.array([label]), head.scale, head.margin)
    df, dw = arcface_backward(cache)
    return loss, {"feature": df[0], "prototypes": dw}


class ArcFaceLayer(nx.Layer):
    """Adapter exposing the loss to ``numerics.grad_check``."""

    def __init__(self, dim=6, num_classes=5, scale=32.0, margin=0.3, batch=3, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.scale, self.margin, self.batch = scale, margin, batch
        self.params["prototypes"] = rng.standard_normal((num_classes, dim))
        self.labels = rng.integers(0, num_classes, batch)

    def _forward(self, x):
        return arcface_forward(x, self.params["prototypes"], self.labels, self.scale, self.margin)

    def _backward(self, dout, cache):
        dx, dw = arcface_backward(cache, float(dout))
        return dx, {"prototypes": dw}

    def sample_input(self, rng):
        return rng.standard_normal((self.batch, self.params["prototypes"].shape[1]))


def momentum_update(query_head, mixer_head, alpha):
    """In place: ``w_q <- alpha * w_q + (1 - alpha) * w_mix``."""
    if not 0 <= alpha < 1:
        raise ConfigError("momentum coefficient must lie in [0, 1)")
    wq, wm = query_head.prototypes, mixer_head.prototypes
    if wq.shape != wm.shape:
        raise SchemaError(f"head shapes differ: {wq.shape} vs {wm.shape}")
    wq[...] = alpha * wq + (1.0 - alpha) * wm
    return query_head


class QueryEncoder:
    """Two fully-connected layers with a GeLU between them, on the query view."""

    kind = "encoder"

    def __init__(self, in_dim, dim=32, hidden=None, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        hidden = dim if hidden is None else hidden
        self.in_dim, self.dim, self.hidden = in_dim, dim, hidden
        self.params = {
            "fc0.w": rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim),
            "fc0.b": np.zeros(hidden),
            "fc1.w": rng.standard_normal((hidden, dim)) / np.sqrt(hidden),
            "fc1.b": np.zeros(dim),
        }
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self._tape = None

    def num_parameters(self):
        return sum(v.size for v in self.params.values())

    def _inputs(self, batch):
        x = batch if isinstance(batch, np.ndarray) else batch.query_views
        if x is None or x.shape[-1] != self.in_dim:
            raise SchemaError("query views missing or of the wrong width")
        return x

    def _run(self, x):
        h, c0 = nx.linear_forward(x, self.params["fc0.w"], self.params["fc0.b"])
        a, ca = nx.gelu_forward(h)
        out, c1 = nx.linear_forward(a, self.params["fc1.w"], self.params["fc1.b"])
        return out, (c0, ca, c1)

    def forward(self, batch):
        out, self._tape = self._run(self._inputs(batch))
        return out

    def backward(self, dout):
        if self._tape is None:
            raise StateError("QueryEncoder.backward called before forward")
        c0, ca, c1 = self._tape
        da, g1 = nx.linear_backward(dout, c1)
        _, g0 = nx.linear_backward(nx.gelu_backward(da, ca), c0)
        return {"fc0.w": g0["w"], "fc0.b": g0["b"], "fc1.w": g1["w"], "fc1.b": g1["b"]}

    def embed(self, batch):
        out, _ = self._run(self._inputs(batch))
        return nx.l2_normalize(out.astype(np.float64))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.001
    weight_decay: float = 0.01
    momentum: float = 0.99
    margin: float = 0.3
    scale: float = 32.0
    seed: int = 0
    mode: str = "joint"
    mixer: str = "transformer"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mixer not in ("transformer", "mlp"):
            raise ConfigError(f"unknown mixer kind {self.mixer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")


@dataclass
class TrainState:
    mixer: object
    encoder: QueryEncoder
    mixer_head: ClassifierHead
    query_head: ClassifierHead
    step: int = 0


@dataclass
class TrainReport:
    mode: str
    seed: int
    disc_loss: list = field(default_factory=list)
    comp_loss: list = field(default_factory=list)
    param_digest: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d


@dataclass
class TrainResult:
    state: TrainState
    report: TrainReport

    @property
    def mixer(self):
        return self.state.mixer

    @property
    def encoder(self):
        return self.state.encoder


def build_state(train_set, num_classes, config, model_config=MixerConfig(), encoder_hidden=None,
                dtype=np.float32):
    """Freshly initialized models for ``train_set``'s schema, seeded from ``config.seed``."""
    ss = np.random.SeedSequence(config.seed)
    r_mix, r_enc, r_head = (np.random.default_rng(s) for s in ss.spawn(3))
    if config.mixer == "transformer":
        mixer = Mixer(train_set.schema, model_config, r_mix, dtype)
    else:
        mixer = BaselineMixer(train_set.schema, model_config.dim, rng=r_mix, dtype=dtype)
    if train_set.query_views is None:
        raise SchemaError("training items need query views")
    encoder = QueryEncoder(train_set.query_views.shape[1], model_config.dim, encoder_hidden,
                           r_enc, dtype)
    protos = r_head.standard_normal((num_classes, model_config.dim)).astype(dtype)
    mixer_head = ClassifierHead(protos, config.scale, config.margin)
    # the query head starts as an exact copy of the mixer head
    return TrainState(mixer, encoder, mixer_head, mixer_head.copy())


def loss_gradients(state, batch, which, mode="joint"):
    """Gradients of one loss term (``"disc"`` or ``"comp"``) for every trainable tensor.

    Returns ``(loss, grads)`` where ``grads`` has keys ``mixer``, ``mixer_head``,
    ``encoder``, ``query_head``; tensors a term does not reach stay exactly zero.
    """
    grads = {
        "mixer": {k: np.zeros_like(v) for k, v in state.mixer.params.items()},
        "mixer_head": np.zeros_like(state.mixer_head.prototypes),
        "encoder": {k: np.zeros_like(v) for k, v in state.encoder.params.items()},
        "query_head": np.zeros_like(state.query_head.prototypes),
    }
    if which == "disc":
        head = state.mixer_head
        out = state.mixer.forward(batch)
        loss, cache = arcface_forward(out, head.prototypes, batch.labels, head.scale, head.margin)
        dout, dproto = arcface_backward(cache)
        for k, v in state.mixer.backward(dout).items():
            grads["mixer"][k] += v
        grads["mixer_head"] += dproto
    elif which == "comp":
        head = state.mixer_head if mode == "coupled" else state.query_head
        out = state.encoder.forward(batch)
        loss, cache = arcface_forward(out, head.prototypes, batch.labels, head.scale, head.margin)
        dout, dproto = arcface_backward(cache)
        for k, v in state.encoder.backward(dout).items():
            grads["encoder"][k] += v
        if mode == "coupled":
            # one shared head: the compatibility loss also trains it
            grads["mixer_head"] += dproto
    else:
        raise ValueError(f"unknown loss term {which!r}")
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite {which} loss")
    return loss, grads


def sgd_update(param, grad, lr, weight_decay):
    """Plain SGD with decoupled weight decay, in place."""
    param *= param.dtype.type(1.0 - lr * weight_decay)
    param -= param.dtype.type(lr) * grad


def joint_step(state, batch, config, lr, train_mixer=True, train_encoder=True):
    """One optimizer step; returns ``(disc_loss, comp_loss)`` (``nan`` for a skipped term)."""
    if batch.labels is None or np.any(batch.labels < 0):
        raise SchemaError("training batches need labels")
    disc = comp = float("nan")
    if train_mixer:
        disc, g = loss_gradients(state, batch, "disc", config.mode)
        for k, p in state.mixer.params.items():
            sgd_update(p, g["mixer"][k], lr, config.weight_decay)
        head_grad = g["mixer_head"]
    else:
        head_grad = np.zeros_like(state.mixer_head.prototypes)
    if train_encoder:
        comp, g = loss_gradients(state, batch, "comp", config.mode)
        for k, p in state.encoder.params.items():
            sgd_update(p, g["encoder"][k], lr, config.weight_decay)
        head_grad = head_grad + g["mixer_head"]
    if train_mixer or config.mode == "coupled":
        sgd_update(state.mixer_head.prototypes, head_grad, lr, config.weight_decay)
    # a frozen mixer head leaves nothing to track (and alpha*w + (1-alpha)*w
    # need not round back to w)
    if config.mode != "coupled" and train_mixer:
        momentum_update(state.query_head, state.mixer_head, config.momentum)
    state.step += 1
    return disc, comp


def _param_digest(state):
    digest = {}
    for group, params in (("mixer", state.mixer.params), ("encoder", state.encoder.params)):
        for k, v in params.items():
            digest[f"{group}.{k}"] = f"{zlib.crc32(np.ascontiguousarray(v).tobytes()):08x}"
    digest["mixer_head"] = f"{zlib.crc32(state.mixer_head.prototypes.tobytes()):08x}"
    digest["query_head"] = f"{zlib.crc32(state.query_head.prototypes.tobytes()):08x}"
    return digest


def _run_phase(state, train_set, config, rng, report, train_mixer, train_encoder):
    n = len(train_set)
    per_epoch = -(-n // config.batch_size)
    total = max(1, config.epochs * per_epoch)
    t = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        d_sum = c_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = config.lr * (1.0 - t / total)
            try:
                d, c = joint_step(state, train_set.subset(idx), config, lr, train_mixer, train_encoder)
            except TrainingError as exc:
                raise TrainingError(str(exc), epoch) from None
            t += 1
            d_sum += d * len(idx)
            c_sum += c * len(idx)
        if train_mixer:
            report.disc_loss.append(d_sum / n)
        if train_encoder:
            report.comp_loss.append(c_sum / n)
        for v in (d_sum, c_sum):
            if v == v and not np.isfinite(v):
                raise TrainingError("loss diverged", epoch)


def train(train_set, config, model_config=MixerConfig(), num_classes=None, encoder_hidden=None,
          state=None):
    """Train mixer and query encoder on ``train_set`` (a ``FeatureSet`` with query views).

    ``two-stage`` trains the mixer for ``epochs`` epochs, freezes it, then trains
    the encoder for another ``epochs`` epochs against the frozen head.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    if num_classes is None:
        num_classes = int(train_set.labels.max()) + 1
    started = time.perf_counter()
    if state is None:
        state = build_state(train_set, num_classes, config, model_config, encoder_hidden)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
    report = TrainReport(config.mode, config.seed)
    if config.mode == "two-stage":
        _run_phase(state, train_set, config, rng, report, True, False)
        state.query_head.prototypes[...] = state.mixer_head.prototypes
        _run_phase(state, train_set, config, rng, report, False, True)
    else:
        _run_phase(state, train_set, config, rng, report, True, True)
    report.param_digest = _param_digest(state)
    report.wall_clock = time.perf_counter() - started
    return TrainResult(state, report)
