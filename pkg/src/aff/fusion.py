"""Gallery-side feature fusion.

``Mixer`` projects every family to a common width, prepends a learnable
fusion token and runs a post-norm transformer layer over the sequence ``depth``
times; the fusion token's final state is the aggregated embedding.
``BaselineMixer`` is the concatenate-then-MLP alternative.

Both models expose the same training surface: ``forward(batch)`` returns the
raw ``(B, d)`` output and records what ``backward`` needs, ``backward(dout)``
returns a gradient for every parameter, ``embed(batch)`` returns L2-normalized
embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, SchemaError, StateError
from .features import GLOBAL, FeatureSet, Family


@dataclass(frozen=True)
class MixerConfig:
    dim: int = 32
    hidden: int | None = None
    depth: int = 4
    heads: int = 4
    share_weights: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("mixer depth must be at least 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def hidden_dim(self):
        return 2 * self.dim if self.hidden is None else self.hidden


@dataclass
class FeatureSequence:
    tokens: np.ndarray
    provenance: list

    @property
    def num_tokens(self):
        return self.tokens.shape[0]


@dataclass
class ProjectionSet:
    global_proj: list
    local_proj: list

    @property
    def dim(self):
        dims = {w.shape[1] for w in (*self.global_proj, *self.local_proj)}
        if len(dims) != 1:
            raise SchemaError("all projections must map to the same width")
        return dims.pop()


def project_and_stack(bundle, proj):
    """Map every family of one bundle to width ``d`` and stack: globals, then locals."""
    if len(bundle.globals) != len(proj.global_proj) or len(bundle.locals) != len(proj.local_proj):
        raise SchemaError("bundle family count does not match the projection set")
    d = proj.dim
    rows, tags = [], []
    for i, (g, w) in enumerate(zip(bundle.globals, proj.global_proj)):
        if g.shape[0] != w.shape[0]:
            raise SchemaError(f"global family {i}: dim {g.shape[0]} vs projection {w.shape[0]}")
        rows.append((g @ w)[None, :])
        tags.append(f"g{i}")
    for i, (m, w) in enumerate(zip(bundle.locals, proj.local_proj)):
        if m.shape[1] != w.shape[0]:
            raise SchemaError(f"local family {i}: dim {m.shape[1]} vs projection {w.shape[0]}")
        rows.append(m @ w)
        tags.extend([f"l{i}"] * m.shape[0])
    tokens = np.concatenate(rows, axis=0) if rows else np.zeros((0, d))
    return FeatureSequence(tokens, tags)


PROJ_GAIN = 0.1
QK_GAIN = 0.1
FUSION_GAIN = 0.02


def _layer_prefix(config, i):
    return "layer." if config.share_weights else f"layer{i}."


class Mixer:
    """Transformer aggregator over a fixed family schema."""

    kind = "transformer"

    def __init__(self, schema, config=MixerConfig(), rng=None, dtype=np.float32):
        self.schema = tuple(schema)
        self.config = config
        rng = np.random.default_rng(rng)
        d = config.dim
        # Every path from a projection to the output passes through a LayerNorm,
        # so the output barely depends on the projection scale, and plain SGD's
        # effective step on such weights shrinks like 1 / |W|^2. Small
        # projections (and a fusion token scaled with them) therefore learn at
        # a useful rate; small query/key maps start attention near uniform.
        p = {"fusion": FUSION_GAIN * PROJ_GAIN * rng.standard_normal(d)}
        gi = li = 0
        for fam in self.schema:
            if fam.kind == GLOBAL:
                p[f"proj.g{gi}"] = PROJ_GAIN * rng.standard_normal((fam.dim, d)) / np.sqrt(fam.dim)
                gi += 1
            else:
                p[f"proj.l{li}"] = PROJ_GAIN * rng.standard_normal((fam.dim, d)) / np.sqrt(fam.dim)
                li += 1
        copies = 1 if config.share_weights else config.depth
        for i in range(copies):
            layer = nx.init_transformer_params(d, config.hidden_dim, rng)
            layer["wq"] *= QK_GAIN
            layer["wk"] *= QK_GAIN
            prefix = _layer_prefix(config, i)
            p.update({prefix + k: v for k, v in layer.items()})
        self.params = {k: np.asarray(v, dtype=dtype) for k, v in p.items()}
        self._tape = None

    @property
    def num_globals(self):
        return sum(f.kind == GLOBAL for f in self.schema)

    def projection_set(self):
        ng = self.num_globals
        return ProjectionSet([self.params[f"proj.g{i}"] for i in range(ng)],
                             [self.params[f"proj.l{i}"] for i in range(len(self.schema) - ng)])

    def layer_params(self, i):
        prefix = _layer_prefix(self.config, i)
        return {k: self.params[prefix + k] for k in nx.TRANSFORMER_KEYS}

    def num_parameters(self):
        return sum(v.size for v in self.params.values())

    def _check(self, batch):
        # local families may vary in vector count; kinds and widths may not
        if [(f.kind, f.dim) for f in batch.schema] != [(f.kind, f.dim) for f in self.schema]:
            raise SchemaError(f"batch schema {batch.schema} does not match mixer schema {self.schema}")

    def project(self, batch):
        """``(B, N, d)`` token tensor for a batch (globals first, then locals)."""
        self._check(batch)
        parts = [(g @ self.params[f"proj.g{i}"])[:, None, :] for i, g in enumerate(batch.globals)]
        parts += [m @ self.params[f"proj.l{i}"] for i, m in enumerate(batch.locals)]
        return np.concatenate(parts, axis=1)

    def run_tokens(self, tokens):
        """Prepend the fusion token and apply the layer ``depth`` times."""
        b = tokens.shape[0]
        fusion = np.broadcast_to(self.params["fusion"], (b, 1, self.config.dim))
        z = np.concatenate([fusion, tokens], axis=1)
        caches = []
        for i in range(self.config.depth):
            z, cache = nx.transformer_layer_forward(z, self.layer_params(i), self.config.heads)
            caches.append(cache)
        return z[:, 0, :], (caches, z.shape)

    def forward(self, batch):
        tokens = self.project(batch)
        out, (caches, shape) = self.run_tokens(tokens)
        self._tape = (batch, caches, shape)
        return out

    def backward(self, dout):
        if self._tape is None:
            raise StateError("Mixer.backward called before forward")
        batch, caches, shape = self._tape
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dz = np.zeros(shape, dtype=dout.dtype)
        dz[:, 0, :] = dout
        for i in range(self.config.depth - 1, -1, -1):
            dz, g = nx.transformer_layer_backward(dz, caches[i])
            prefix = _layer_prefix(self.config, i)
            for k, v in g.items():
                grads[prefix + k] += v
        grads["fusion"] += dz[:, 0, :].sum(axis=0)
        dtok = dz[:, 1:, :]
        width = self.config.dim
        for i, g in enumerate(batch.globals):
            grads[f"proj.g{i}"] += g.T @ dtok[:, i, :]
        offset = len(batch.globals)
        for i, m in enumerate(batch.locals):
            n = m.shape[1]
            grads[f"proj.l{i}"] += m.reshape(-1, m.shape[2]).T @ dtok[:, offset:offset + n, :].reshape(-1, width)
            offset += n
        return grads

    def embed(self, batch):
        out, _ = self.run_tokens(self.project(batch))
        return nx.l2_normalize(out.astype(np.float64))


def mixer_forward(seq, mixer):
    """Aggregated, L2-normalized embedding of a single feature sequence."""
    if seq.num_tokens < 1:
        raise SchemaError("feature sequence is empty")
    out, _ = mixer.run_tokens(np.asarray(seq.tokens, dtype=mixer.params["fusion"].dtype)[None])
    return nx.l2_normalize(out[0].astype(np.float64))


class BaselineMixer:
    """Concatenate every raw feature, then stacked fully-connected layers with GeLU."""

    kind = "mlp"

    def __init__(self, schema, dim=32, hidden=None, rng=None, dtype=np.float32):
        self.schema = tuple(schema)
        self.dim = dim
        self.hidden = [2 * dim] if hidden is None else list(hidden)
        rng = np.random.default_rng(rng)
        widths = [sum(f.width for f in self.schema)] + self.hidden + [dim]
        self.params = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"fc{i}.w"] = (rng.standard_normal((a, b)) / np.sqrt(a)).astype(dtype)
            self.params[f"fc{i}.b"] = np.zeros(b, dtype=dtype)
        self._tape = None

    @property
    def input_width(self):
        return self.params["fc0.w"].shape[0]

    def num_parameters(self):
        return sum(v.size for v in self.params.values())

    def _run(self, x):
        caches = []
        n = len(self.hidden) + 1
        for i in range(n):
            x, c = nx.linear_forward(x, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            caches.append(c)
            if i < n - 1:
                x, c = nx.gelu_forward(x)
                caches.append(c)
        return x, caches

    def _inputs(self, batch):
        if batch.schema != self.schema:
            raise SchemaError(f"batch schema {batch.schema} does not match baseline schema {self.schema}")
        return batch.flat()

    def forward(self, batch):
        out, caches = self._run(self._inputs(batch))
        self._tape = caches
        return out

    def backward(self, dout):
        if self._tape is None:
            raise StateError("BaselineMixer.backward called before forward")
        caches = list(self._tape)
        grads = {}
        for i in range(len(self.hidden), -1, -1):
            dout, g = nx.linear_backward(dout, caches.pop())
            grads[f"fc{i}.w"], grads[f"fc{i}.b"] = g["w"], g["b"]
            if i > 0:
                dout = nx.gelu_backward(dout, caches.pop())
        return grads

    def embed(self, batch):
        out, _ = self._run(self._inputs(batch))
        return nx.l2_normalize(out.astype(np.float64))


def baseline_forward(bundle, mixer):
    if bundle.schema != mixer.schema:
        raise SchemaError("bundle arity does not match the baseline mixer")
    x = np.concatenate([*bundle.globals, *[m.reshape(-1) for m in bundle.locals]])
    out, _ = mixer._run(x[None].astype(mixer.params["fc0.w"].dtype))
    return nx.l2_normalize(out[0].astype(np.float64))


def schema_from_spec(entries):
    return tuple(Family(*e) if not isinstance(e, Family) else e for e in entries)


def batch_from_bundle(bundle):
    return FeatureSet.from_bundles([bundle])
