"""Similarity-weighted fusion of neighbor priors into base logits, and its trainer."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .data import NUM_AA, NUM_TOKENS, softmax_rows
from .stacker import StackedAlignment

log = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    d: int = 64
    heads: int = 4
    d_ff: int = 128
    kernel: int = 5
    alpha_init: float = 1.0
    lambda_init: float = 0.1
    beta0_init: float = 0.1
    no_tm_bias: bool = False  # alpha forced to 0
    row_only: bool = False  # skip attention across rows; z_ref from anchor features
    priors_only: bool = False  # anchor excluded from values, prediction from z_ref alone
    query_mode: str = "anchor"  # "anchor" or "mean" (every valid row queries, outputs averaged)

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.query_mode not in ("anchor", "mean"):
            raise ValueError(f"unknown query_mode {self.query_mode!r}")


_SHAPES = {
    "embedding": lambda c: (NUM_TOKENS, c.d),
    "dw_kernel": lambda c: (c.d, c.kernel),
    "pw_weight": lambda c: (c.d, c.d),
    "pw_bias": lambda c: (c.d,),
    "wq": lambda c: (c.d, c.d),
    "wk": lambda c: (c.d, c.d),
    "wv": lambda c: (c.d, c.d),
    "wo": lambda c: (c.d, c.d),
    "ff1_weight": lambda c: (c.d, c.d_ff),
    "ff1_bias": lambda c: (c.d_ff,),
    "ff2_weight": lambda c: (c.d_ff, NUM_AA),
    "ff2_bias": lambda c: (NUM_AA,),
    "alpha_raw": lambda c: (),
    "lam": lambda c: (),
    "beta0": lambda c: (),
}

# fan-in used for the uniform init scale; one-hot embedding rows have a single active input
_FAN_IN = {
    "embedding": lambda c: 1,
    "dw_kernel": lambda c: c.kernel,
    "pw_weight": lambda c: c.d,
    "pw_bias": lambda c: c.d,
    "wq": lambda c: c.d,
    "wk": lambda c: c.d,
    "wv": lambda c: c.d,
    "wo": lambda c: c.d,
    "ff1_weight": lambda c: c.d,
    "ff1_bias": lambda c: c.d,
    "ff2_weight": lambda c: c.d_ff,
    "ff2_bias": lambda c: c.d_ff,
}


class FusionParams:
    """All trainable fusion tensors. ``alpha`` is stored through a softplus."""

    def __init__(self, tensors: dict, config: FusionConfig):
        self.tensors = tensors
        self.config = config

    @classmethod
    def init(cls, config: FusionConfig | None = None, seed: int = 0) -> "FusionParams":
        config = config or FusionConfig()
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape_of in _SHAPES.items():
            shape = shape_of(config)
            if name in _FAN_IN:
                scale = 1.0 / np.sqrt(_FAN_IN[name](config))
                data = rng.uniform(-scale, scale, size=shape)
            elif name == "alpha_raw":
                data = np.log(np.expm1(config.alpha_init))
            elif name == "lam":
                data = config.lambda_init
            else:
                data = config.beta0_init
            tensors[name] = ad.parameter(data, name)
        return cls(tensors, config)

    def __getitem__(self, name) -> ad.Tensor:
        return self.tensors[name]

    def parameters(self) -> list:
        return list(self.tensors.values())

    @property
    def alpha(self) -> float:
        return float(np.logaddexp(0.0, self.tensors["alpha_raw"].data))

    @property
    def lam(self) -> float:
        return float(self.tensors["lam"].data)

    @property
    def beta0(self) -> float:
        return float(self.tensors["beta0"].data)

    def to_arrays(self) -> dict:
        return {f"fusion.{k}": v.data.copy() for k, v in self.tensors.items()}

    def meta(self) -> dict:
        return {f"fusion.{k}": v for k, v in asdict(self.config).items()}

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "FusionParams":
        config = FusionConfig(**_config_from_meta(FusionConfig, meta, "fusion."))
        tensors = {}
        for name, shape_of in _SHAPES.items():
            data = np.asarray(arrays[f"fusion.{name}"], dtype=np.float64).reshape(shape_of(config))
            tensors[name] = ad.parameter(data, name)
        return cls(tensors, config)

    def copy(self) -> "FusionParams":
        return FusionParams({k: ad.parameter(v.data.copy(), k) for k, v in self.tensors.items()},
                            FusionConfig(**asdict(self.config)))


def _config_from_meta(cls, meta: dict, prefix: str) -> dict:
    out = {}
    for f in fields(cls):
        key = prefix + f.name
        if key not in meta:
            continue
        raw = meta[key]
        if f.type in ("bool", bool):
            out[f.name] = raw in ("True", "true", "1")
        elif f.type in ("int", int):
            out[f.name] = int(raw)
        elif f.type in ("float", float):
            out[f.name] = float(raw)
        else:
            out[f.name] = raw
    return out


@dataclass(eq=False)
class FusionOutput:
    z_ref: np.ndarray
    z_fused: np.ndarray
    p_fused: np.ndarray
    attention: np.ndarray | None  # (L, heads, K+1) for anchor queries


@dataclass(eq=False)
class _Graph:
    z_ref: ad.Tensor
    z_fused: ad.Tensor
    attention: np.ndarray | None


def _tm_softmax(tm_scores) -> np.ndarray:
    s = np.asarray(tm_scores, dtype=np.float64)
    if s.size == 0:
        return s
    e = np.exp(s - s.max())
    return e / e.sum()


def forward_graph(tokens, valid, tm_scores, z_base, params: FusionParams) -> _Graph:
    """Differentiable forward on raw arrays; ``z_base`` may be a Tensor (joint training)."""
    cfg = params.config
    p = params.tensors
    tokens = np.asarray(tokens, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    rows, length = tokens.shape
    z_base = ad.as_tensor(z_base)
    if z_base.shape != (length, NUM_AA):
        raise ValueError(f"alignment has {length} columns but z_base has shape {z_base.shape}")
    if len(tm_scores) != rows - 1:
        raise ValueError("need one TM-score per neighbor row")
    has_neighbor = valid[1:].any(axis=0)

    if cfg.priors_only:
        tokens = tokens.copy()
        tokens[0] = 0  # argmax of uniform logits
    vmask = valid[..., None].astype(np.float64)
    x0 = ad.mul(ad.embedding_lookup(p["embedding"], tokens), vmask)
    smoothed = ad.masked_depthwise_conv1d(x0, p["dw_kernel"], valid)
    mixed = ad.gelu(ad.pointwise_conv(smoothed, p["pw_weight"], p["pw_bias"]))
    x = ad.add(ad.mul(mixed, vmask), x0)  # (R, L, d)

    attention = None
    if cfg.row_only:
        h = x[0]
    else:
        h, attention = _row_attention(x, valid, has_neighbor, tm_scores, params)
    hidden = ad.gelu(ad.add(ad.matmul(h, p["ff1_weight"]), p["ff1_bias"]))
    z_ref = ad.add(ad.matmul(hidden, p["ff2_weight"]), p["ff2_bias"])
    z_ref = ad.mul(z_ref, has_neighbor[:, None].astype(np.float64))
    if cfg.priors_only:
        z_fused = z_ref
    else:
        z_fused = ad.add(z_base, ad.mul(p["lam"], z_ref))
    return _Graph(z_ref, z_fused, attention)


def _row_attention(x, valid, has_neighbor, tm_scores, params):
    cfg = params.config
    p = params.tensors
    rows, length, d = x.shape
    nh, dh = cfg.heads, cfg.d // cfg.heads

    key_mask = valid.T.copy()  # (L, R)
    if cfg.priors_only:
        key_mask[has_neighbor, 0] = False

    beta = ad.concat([ad.reshape(p["beta0"], (1,)), ad.Tensor(_tm_softmax(tm_scores))])
    k = ad.reshape(ad.matmul(x, p["wk"]), (rows, length, nh, dh))
    v = ad.reshape(ad.matmul(x, p["wv"]), (rows, length, nh, dh))
    scale = 1.0 / np.sqrt(dh)

    if cfg.query_mode == "anchor":
        q = ad.reshape(ad.matmul(x[0], p["wq"]), (length, nh, dh))
        scores = ad.mul(ad.einsum("jhe,rjhe->jhr", q, k), scale)
        if not cfg.no_tm_bias:
            alpha = ad.softplus(p["alpha_raw"])
            scores = ad.add(scores, ad.mul(alpha, beta))
        w = ad.softmax(scores, axis=-1, mask=key_mask[:, None, :])
        out = ad.einsum("jhr,rjhe->jhe", w, v)
        attention = w.data
    else:
        q = ad.reshape(ad.matmul(x, p["wq"]), (rows, length, nh, dh))
        scores = ad.mul(ad.einsum("qjhe,rjhe->jhqr", q, k), scale)
        if not cfg.no_tm_bias:
            alpha = ad.softplus(p["alpha_raw"])
            scores = ad.add(scores, ad.mul(alpha, beta))
        w = ad.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
        per_query = ad.einsum("jhqr,rjhe->jhqe", w, v)
        qmask = valid.T.astype(np.float64)  # (L, R) valid query rows
        qweight = (qmask / qmask.sum(axis=1, keepdims=True))[:, None, :, None]
        out = ad.sum(ad.mul(per_query, qweight), axis=2)
        attention = w.data[:, :, 0, :]
    h = ad.matmul(ad.reshape(out, (length, d)), p["wo"])
    return h, attention


def forward(alignment: StackedAlignment, z_base, params: FusionParams) -> FusionOutput:
    """Inference-time fusion of one protein; returns plain arrays."""
    g = forward_graph(alignment.tokens, alignment.valid, alignment.tm_scores,
                      np.asarray(z_base, dtype=np.float64), params)
    z_fused = g.z_fused.data
    return FusionOutput(g.z_ref.data, z_fused, softmax_rows(z_fused), g.attention)


# -- stage one training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    warmup_steps: int = 500
    batch_size: int = 8
    seed: int = 0
    mode: str = "frozen"  # "frozen" or "joint"
    k_min: int | None = None  # if set, each sample is cut to a random K in [k_min, its K] per epoch


@dataclass(eq=False)
class FusionSample:
    """One training protein: stacked alignment, base logits and native residue indices.

    ``base_features`` (from :func:`refold.toybase.featurize_backbone`) is needed only in
    joint mode, where base logits are recomputed from the trainable base model.
    """

    id: str
    alignment: StackedAlignment
    z_base: np.ndarray
    target: np.ndarray
    base_features: np.ndarray | None = None


def _sample_loss(sample: FusionSample, params: FusionParams, base=None, k: int | None = None) -> ad.Tensor:
    a = sample.alignment if k is None else sample.alignment.truncated(k)
    tokens = a.tokens
    if base is not None:
        z_base = base.forward_tensor(sample.base_features)
        tokens = tokens.copy()
        tokens[0] = np.argmax(z_base.data, axis=-1)
    else:
        z_base = sample.z_base
    g = forward_graph(tokens, a.valid, a.tm_scores, z_base, params)
    return ad.cross_entropy(g.z_fused, sample.target)


def train_stage1(samples, params: FusionParams, config: TrainConfig | None = None, base=None):
    """Minimise per-token cross-entropy of the fused distribution.

    Frozen mode updates only ``params``; joint mode also updates ``base`` (a
    :class:`refold.toybase.ToyBase`). Returns ``(params, per-epoch mean loss)``.
    """
    config = config or TrainConfig()
    samples = list(samples)
    if not samples:
        raise ValueError("train_stage1 needs a non-empty dataset")
    if config.mode not in ("frozen", "joint"):
        raise ValueError(f"unknown training mode {config.mode!r}")
    joint = config.mode == "joint"
    if joint:
        if base is None:
            raise ValueError("joint mode needs a trainable base model; file-based logits force frozen mode")
        if any(s.base_features is None for s in samples):
            raise ValueError("joint mode needs backbone features for every sample (file-based logits given)")
    trainable = params.parameters() + (base.parameters() if joint else [])
    opt = ad.Adam(trainable, lr=config.lr, warmup_steps=config.warmup_steps)
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            opt.zero_grad()
            for i in batch:
                k = None
                if config.k_min is not None:
                    top = samples[i].alignment.num_neighbors
                    k = int(rng.integers(min(config.k_min, top), top + 1))
                loss = _sample_loss(samples[i], params, base if joint else None, k)
                loss.backward()
                total += loss.item()
            opt.step(scale=1.0 / len(batch))
        trace.append(total / len(samples))
        log.debug("stage1 epoch %d loss %.4f", epoch, trace[-1])
    return params, trace


def mean_loss(samples, params: FusionParams) -> float:
    return float(np.mean([_sample_loss(s, params).item() for s in samples]))
