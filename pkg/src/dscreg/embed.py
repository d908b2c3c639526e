"""Spatial-consistency guided nonlocal feature embedding.

A small numpy network with hand-written reverse mode. Each block is

    h = x W_in + b_in -> batch norm (optional) -> ReLU -> a
    A = softmax_rows((a W_q)(a W_k)^T / sqrt(d) * beta)
    x' = a + ReLU((A a W_v) W_out + b_out)

where ``beta`` is the length-consistency matrix of the input correspondences.
A two-layer head maps the final features to per-correspondence confidences.
Training minimizes ``L_sm + lambda * L_class`` with Adam.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .consistency import normalize_rows, spatial_consistency_matrix
from .errors import NonFiniteLoss, WeightFileError
from .geom import Correspondences, as_correspondences, random_pose

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CLAMP = 1e-7
AUGMENT_NOISE = 0.005


@dataclass(frozen=True)
class EmbedConfig:
    num_blocks: int = 3
    feature_dim: int = 32
    use_normalization: bool = True
    sigma_f_init: float = 1.0
    learn_sigma_f: bool = True

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be at least 1")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if not self.sigma_f_init > 0:
            raise ValueError("sigma_f_init must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 2000
    batch: int = 4
    lam: float = 1.0
    seed: int = 0
    augment: bool = True
    sigma_d: float = 0.10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")


def _param_shapes(cfg: EmbedConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.feature_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for b in range(cfg.num_blocks):
        p = f"block{b}."
        shapes[p + "w_in"] = (6 if b == 0 else d, d)
        shapes[p + "b_in"] = (d,)
        if cfg.use_normalization:
            shapes[p + "bn_gamma"] = (d,)
            shapes[p + "bn_beta"] = (d,)
        shapes[p + "w_q"] = (d, d)
        shapes[p + "w_k"] = (d, d)
        shapes[p + "w_v"] = (d, d)
        shapes[p + "w_out"] = (d, d)
        shapes[p + "b_out"] = (d,)
    shapes["head.w1"] = (d, d)
    shapes["head.b1"] = (d,)
    shapes["head.w2"] = (d, 1)
    shapes["head.b2"] = (1,)
    shapes["log_sigma_f"] = ()
    return shapes


def _buffer_shapes(cfg: EmbedConfig) -> dict[str, tuple[int, ...]]:
    if not cfg.use_normalization:
        return {}
    d = cfg.feature_dim
    out = {}
    for b in range(cfg.num_blocks):
        out[f"block{b}.bn_mean"] = (d,)
        out[f"block{b}.bn_var"] = (d,)
    return out


@dataclass(eq=False)
class EmbeddingNetwork:
    config: EmbedConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EmbedConfig = EmbedConfig(), seed: int = 0) -> EmbeddingNetwork:
        rng = np.random.Generator(np.random.PCG64(seed))
        params = {}
        for name, shape in _param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "log_sigma_f":
                params[name] = np.array(math.log(config.sigma_f_init))
            elif leaf == "bn_gamma":
                params[name] = np.ones(shape)
            elif leaf.startswith("b"):
                params[name] = np.zeros(shape)
            elif leaf in ("w_q", "w_k"):
                params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            else:
                params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
        buffers = {}
        for name, shape in _buffer_shapes(config).items():
            buffers[name] = np.zeros(shape) if name.endswith("mean") else np.ones(shape)
        return cls(config, params, buffers)

    @property
    def sigma_f(self) -> float:
        return float(np.exp(self.params["log_sigma_f"]))

    def copy(self) -> EmbeddingNetwork:
        return EmbeddingNetwork(self.config, copy.deepcopy(self.params), copy.deepcopy(self.buffers))

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


# --- forward / backward ----------------------------------------------------

def _relu(x):
    return np.maximum(x, 0.0)


def _softmax_rows(s):
    z = s - s.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _forward(net: EmbeddingNetwork, coords: np.ndarray, betas: Sequence[np.ndarray],
             training: bool):
    """Forward pass over one or more scenes stacked row-wise in ``coords``.

    Row-wise layers (perceptrons, normalization) see all rows at once, so in
    training mode the normalization statistics are pooled over the batch.
    Attention is restricted to each scene's own rows.
    """
    cfg = net.config
    p = net.params
    scale = 1.0 / math.sqrt(cfg.feature_dim)
    bounds = np.cumsum([0] + [len(b) for b in betas])
    segs = [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(len(betas))]
    x = coords
    caches = []
    for b in range(cfg.num_blocks):
        pre = f"block{b}."
        c = {"x": x}
        h = x @ p[pre + "w_in"] + p[pre + "b_in"]
        if cfg.use_normalization:
            if training:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
            else:
                mu = net.buffers[pre + "bn_mean"]
                var = net.buffers[pre + "bn_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mu) * inv_std
            hn = xhat * p[pre + "bn_gamma"] + p[pre + "bn_beta"]
            c.update(mu=mu, var=var, inv_std=inv_std, xhat=xhat)
        else:
            hn = h
        a = _relu(hn)
        q = a @ p[pre + "w_q"]
        k = a @ p[pre + "w_k"]
        v = a @ p[pre + "w_v"]
        attn = []
        agg = np.empty_like(v)
        for seg, beta in zip(segs, betas):
            att = _softmax_rows((q[seg] @ k[seg].T) * scale * beta)
            agg[seg] = att @ v[seg]
            attn.append(att)
        z = agg @ p[pre + "w_out"] + p[pre + "b_out"]
        x = a + _relu(z)
        c.update(hn=hn, a=a, q=q, k=k, v=v, attn=attn, agg=agg, z=z)
        caches.append(c)
    u_pre = x @ p["head.w1"] + p["head.b1"]
    u = _relu(u_pre)
    logit = (u @ p["head.w2"] + p["head.b2"])[:, 0]
    conf = 1.0 / (1.0 + np.exp(-logit))
    return x, conf, {"blocks": caches, "u_pre": u_pre, "u": u, "segs": segs, "betas": betas}


def attention_maps(net: EmbeddingNetwork, corrs, sigma_d: float, training: bool = False):
    """Per-block row-stochastic attention matrices (for inspection and tests)."""
    corrs = as_correspondences(corrs)
    beta = spatial_consistency_matrix(corrs, sigma_d)
    _, _, cache = _forward(net, corrs.coords, [beta], training)
    return [c["attn"][0] for c in cache["blocks"]]


def forward(net: EmbeddingNetwork, corrs, sigma_d: float, training: bool = False
            ) -> tuple[np.ndarray, np.ndarray]:
    """Features ``(n, d)`` and confidences ``(n,)`` for a correspondence set.

    Inference mode (the default) normalizes with stored running statistics;
    ``training=True`` uses statistics of this set.
    """
    corrs = as_correspondences(corrs)
    beta = spatial_consistency_matrix(corrs, sigma_d)
    feats, conf, _ = _forward(net, corrs.coords, [beta], training)
    return feats, conf


def classification_loss(confidences, gt_labels) -> float:
    """Mean binary cross-entropy with confidences clamped to ``[1e-7, 1 - 1e-7]``."""
    v = np.clip(np.asarray(confidences, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    w = np.asarray(gt_labels, dtype=np.float64)
    return float(-np.mean(w * np.log(v) + (1.0 - w) * np.log(1.0 - v)))


def _similarity_parts(feats, log_sigma_f):
    fn, small = normalize_rows(feats)
    sq = np.einsum("ij,ij->i", fn, fn)
    gram = fn @ fn.T
    gram = 0.5 * (gram + gram.T)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
    inv_s2 = math.exp(-2.0 * float(log_sigma_f))
    raw = 1.0 - dist2 * inv_s2
    return fn, small, dist2, inv_s2, raw


def spectral_matching_loss(feats, gt_labels, sigma_f: float) -> float:
    """``mean_ij (gamma_ij - [i and j both inliers])^2`` over all ordered pairs."""
    _, _, _, _, raw = _similarity_parts(np.asarray(feats, dtype=np.float64), math.log(sigma_f))
    gamma = np.maximum(raw, 0.0)
    w = np.asarray(gt_labels, dtype=np.float64)
    target = np.outer(w, w)
    return float(np.mean((gamma - target) ** 2))


def total_loss(l_sm: float, l_class: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return l_sm + lam * l_class


def _batch_loss_grad(net: EmbeddingNetwork, batch, sigma_d: float, lam: float, training: bool,
                     want_grad: bool = True):
    """Mean over scenes of ``L_sm + lam * L_class`` and its gradients."""
    cfg = net.config
    p = net.params
    items = [_scene_arrays(*it) if isinstance(it, tuple) else _scene_arrays(it) for it in batch]
    if not items:
        raise ValueError("empty batch")
    m = len(items)
    coords = np.vstack([c.coords for c, _ in items])
    labels = np.concatenate([lab for _, lab in items]).astype(np.float64)
    betas = [spatial_consistency_matrix(c, sigma_d) for c, _ in items]
    feats, conf, cache = _forward(net, coords, betas, training)
    segs = cache["segs"]

    l_sm_all, l_class_all = [], []
    g_x = np.zeros_like(feats)
    g_logsig = 0.0
    g_logit = np.zeros_like(conf)
    for seg in segs:
        f = feats[seg]
        w = labels[seg]
        n = len(w)
        fn, small, dist2, inv_s2, raw = _similarity_parts(f, p["log_sigma_f"])
        active = raw > 0.0
        gamma = np.where(active, raw, 0.0)
        diff = gamma - np.outer(w, w)
        l_sm_all.append(float(np.mean(diff * diff)))
        v = np.clip(conf[seg], CLAMP, 1.0 - CLAMP)
        l_class_all.append(float(-np.mean(w * np.log(v) + (1.0 - w) * np.log(1.0 - v))))
        if not want_grad:
            continue
        g_gamma = np.where(active, 2.0 * diff / (n * n * m), 0.0)
        g_logsig += float(np.sum(g_gamma * 2.0 * dist2 * inv_s2))
        g_dist = -g_gamma * inv_s2
        sym = g_dist + g_dist.T
        g_fn = 2.0 * (sym.sum(axis=1)[:, None] * fn - sym @ fn)
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        norms = np.where(small[:, None], 1.0, norms)
        gx = (g_fn - fn * np.einsum("ij,ij->i", fn, g_fn)[:, None]) / norms
        gx[small] = 0.0
        g_x[seg] = gx
        inside = (conf[seg] > CLAMP) & (conf[seg] < 1.0 - CLAMP)
        g_logit[seg] = np.where(inside, lam * (conf[seg] - w) / (n * m), 0.0)

    l_sm = float(np.mean(l_sm_all))
    l_class = float(np.mean(l_class_all))
    loss = l_sm + lam * l_class
    stats = {"l_sm": l_sm, "l_class": l_class, "cache": cache}
    if not want_grad:
        return loss, None, stats

    grads = {name: np.zeros_like(val) for name, val in p.items()}
    if cfg.learn_sigma_f:
        grads["log_sigma_f"] = np.array(g_logsig)

    grads["head.w2"] = cache["u"].T @ g_logit[:, None]
    grads["head.b2"] = np.array([g_logit.sum()])
    g_u = np.outer(g_logit, p["head.w2"][:, 0]) * (cache["u_pre"] > 0)
    grads["head.w1"] = feats.T @ g_u
    grads["head.b1"] = g_u.sum(axis=0)
    g_x = g_x + g_u @ p["head.w1"].T

    rows = feats.shape[0]
    scale = 1.0 / math.sqrt(cfg.feature_dim)
    for b in reversed(range(cfg.num_blocks)):
        pre = f"block{b}."
        c = cache["blocks"][b]
        g_a = g_x.copy()
        g_z = g_x * (c["z"] > 0)
        grads[pre + "w_out"] = c["agg"].T @ g_z
        grads[pre + "b_out"] = g_z.sum(axis=0)
        g_agg = g_z @ p[pre + "w_out"].T
        g_q = np.empty_like(c["q"])
        g_k = np.empty_like(c["k"])
        g_v = np.empty_like(c["v"])
        for seg, attn, beta in zip(segs, c["attn"], cache["betas"]):
            g_attn = g_agg[seg] @ c["v"][seg].T
            g_v[seg] = attn.T @ g_agg[seg]
            g_s = attn * (g_attn - np.sum(g_attn * attn, axis=1, keepdims=True))
            g_alpha = g_s * beta * scale
            g_q[seg] = g_alpha @ c["k"][seg]
            g_k[seg] = g_alpha.T @ c["q"][seg]
        a = c["a"]
        grads[pre + "w_q"] = a.T @ g_q
        grads[pre + "w_k"] = a.T @ g_k
        grads[pre + "w_v"] = a.T @ g_v
        g_a += g_q @ p[pre + "w_q"].T + g_k @ p[pre + "w_k"].T + g_v @ p[pre + "w_v"].T
        g_hn = g_a * (c["hn"] > 0)
        if cfg.use_normalization:
            xhat = c["xhat"]
            grads[pre + "bn_gamma"] = np.sum(g_hn * xhat, axis=0)
            grads[pre + "bn_beta"] = g_hn.sum(axis=0)
            g_xhat = g_hn * p[pre + "bn_gamma"]
            if training:
                g_h = c["inv_std"] / rows * (rows * g_xhat - g_xhat.sum(axis=0)
                                             - xhat * np.sum(g_xhat * xhat, axis=0))
            else:
                g_h = g_xhat * c["inv_std"]
        else:
            g_h = g_hn
        grads[pre + "w_in"] = c["x"].T @ g_h
        grads[pre + "b_in"] = g_h.sum(axis=0)
        if b > 0:
            g_x = g_h @ p[pre + "w_in"].T
    return loss, grads, stats


def _scene_arrays(scene, labels=None):
    corrs = getattr(scene, "corrs", scene)
    corrs = as_correspondences(corrs)
    if labels is None:
        labels = corrs.labels
    if labels is None:
        raise ValueError("training and gradients need ground-truth labels")
    labels = np.asarray(labels, dtype=bool)
    if len(labels) != len(corrs):
        raise ValueError("one label per correspondence required")
    return corrs, labels


def loss_and_gradients(net: EmbeddingNetwork, batch: Sequence, sigma_d: float, lam: float,
                       training: bool = True):
    """Mean loss, gradients and loss parts over a batch of labeled scenes.

    Each element may be a ``Scene``, a labeled ``Correspondences`` or a
    ``(corrs, labels)`` pair.
    """
    return _batch_loss_grad(net, batch, sigma_d, lam, training)


def backward(net: EmbeddingNetwork, corrs, gt_labels, sigma_d: float, lam: float = 1.0,
             training: bool = True) -> dict[str, np.ndarray]:
    """Gradients of ``L_sm + lam * L_class`` for one scene, keyed by parameter name.

    ``log_sigma_f`` receives the derivative with respect to the logarithm of
    sigma_f (zero when sigma_f is frozen). Hinges and ReLUs use subgradient 0
    at their kinks.
    """
    _, grads, _ = _batch_loss_grad(net, [(corrs, gt_labels)], sigma_d, lam, training)
    return grads


def scene_loss(net: EmbeddingNetwork, corrs, gt_labels=None, sigma_d: float = 0.10,
               lam: float = 1.0, training: bool = True) -> float:
    loss, _, _ = _batch_loss_grad(net, [(corrs, gt_labels)], sigma_d, lam, training, want_grad=False)
    return loss


# --- training --------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], skip=()):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            if name in skip:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] = np.asarray(params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def augment(corrs: Correspondences, rng: np.random.Generator) -> Correspondences:
    """Perturb the source side: Gaussian noise (0.005), random rotation about a
    random axis and per-axis translation in [-0.5, 0.5]. Labels are kept."""
    pose = random_pose(rng)
    src = pose.apply(corrs.src) + rng.normal(0.0, AUGMENT_NOISE, size=corrs.src.shape)
    return Correspondences(src, corrs.dst, corrs.labels)


@dataclass
class TrainResult:
    net: EmbeddingNetwork
    losses: list[float]
    sm_losses: list[float] = field(default_factory=list)
    class_losses: list[float] = field(default_factory=list)


def train(net: EmbeddingNetwork, scenes: Iterable, cfg: TrainConfig = TrainConfig(),
          progress=None) -> TrainResult:
    """Adam on ``L_sm + lam * L_class``, cycling through ``scenes`` in order.

    Returns a trained copy; the input network is not modified. Deterministic
    given ``cfg.seed``. Raises ``NonFiniteLoss`` on divergence.
    """
    scenes = [_scene_arrays(s) for s in scenes]
    if not scenes:
        raise ValueError("train needs at least one scene")
    net = net.copy()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = Adam(net.params, lr=cfg.learning_rate)
    skip = () if net.config.learn_sigma_f else ("log_sigma_f",)
    result = TrainResult(net, [])
    cursor = 0
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch):
            corrs, labels = scenes[cursor % len(scenes)]
            cursor += 1
            if cfg.augment:
                corrs = augment(corrs, rng)
            batch.append((corrs, labels))
        loss, grads, stats = loss_and_gradients(net, batch, cfg.sigma_d, cfg.lam, training=True)
        if not math.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        opt.step(net.params, grads, skip)
        _update_running_stats(net, stats)
        result.losses.append(loss)
        result.sm_losses.append(stats["l_sm"])
        result.class_losses.append(stats["l_class"])
        if progress is not None:
            progress(step, loss)
    return result


def _update_running_stats(net: EmbeddingNetwork, stats) -> None:
    if not net.config.use_normalization:
        return
    for b in range(net.config.num_blocks):
        pre = f"block{b}."
        mu = stats["cache"]["blocks"][b]["mu"]
        var = stats["cache"]["blocks"][b]["var"]
        net.buffers[pre + "bn_mean"] = (1 - BN_MOMENTUM) * net.buffers[pre + "bn_mean"] + BN_MOMENTUM * mu
        net.buffers[pre + "bn_var"] = (1 - BN_MOMENTUM) * net.buffers[pre + "bn_var"] + BN_MOMENTUM * var


# --- serialization ---------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_weights(net: EmbeddingNetwork) -> str:
    """Text document: the config plus ``{name, shape, values}`` records in a fixed order."""
    records = []
    tensors = list(net.params.items()) + list(net.buffers.items())
    for name, arr in tensors:
        values = ", ".join(_fmt(x) for x in np.ravel(arr))
        records.append('    {"name": %s, "shape": %s, "values": [%s]}'
                       % (json.dumps(name), json.dumps(list(arr.shape)), values))
    return ('{\n  "format": "dscreg-weights-v1",\n  "config": %s,\n  "tensors": [\n%s\n  ]\n}\n'
            % (json.dumps(asdict(net.config), sort_keys=True), ",\n".join(records)))


def loads_weights(text: str) -> EmbeddingNetwork:
    try:
        doc = json.loads(text)
        cfg = EmbedConfig(**doc["config"])
        records = doc["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"malformed weight document: {exc}") from exc
    expected = {**_param_shapes(cfg), **_buffer_shapes(cfg)}
    found = {}
    for rec in records:
        name, shape = rec["name"], tuple(rec["shape"])
        if name not in expected:
            raise WeightFileError(f"unexpected tensor {name!r}")
        if shape != expected[name]:
            raise WeightFileError(f"tensor {name!r} has shape {shape}, expected {expected[name]}")
        values = np.array(rec["values"], dtype=np.float64)
        if values.size != math.prod(shape):
            raise WeightFileError(f"tensor {name!r} has {values.size} values for shape {shape}")
        found[name] = values.reshape(shape)
    missing = set(expected) - set(found)
    if missing:
        raise WeightFileError(f"missing tensors: {sorted(missing)}")
    params = {k: found[k] for k in _param_shapes(cfg)}
    buffers = {k: found[k] for k in _buffer_shapes(cfg)}
    return EmbeddingNetwork(cfg, params, buffers)


def save_weights(net: EmbeddingNetwork, path) -> None:
    Path(path).write_text(dumps_weights(net))


def load_weights(path) -> EmbeddingNetwork:
    return loads_weights(Path(path).read_text())
