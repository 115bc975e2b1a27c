"""Hookable numpy forward pass of the square-per-token policy transformer.

Per layer (post-LN, the residual stream itself is normalized)::

    scores = Q K^T / sqrt(d_head) + smolgen(x)        # per head, 64x64
    attn   = softmax(scores)                          # row-wise
    heads  = attn @ V                                 # per head, 64 x d_head
    x      = LN1(alpha * x + concat(heads) W_o + b_o)
    x      = LN2(alpha * x + MLP(x))                  # "residual after layer"

Layers and heads are 0-based here; reports add 1 (see ActivationSite.label).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..chess.board import Board, orient_to_player
from ..chess.encoding import InputPlanes, encode_input
from .archive import read_archive, write_archive
from .config import ModelConfig, ModelSpec, expected_shapes
from .outputs import MoveDist, PolicyOutput, ValueOutput, policy_distribution, value_score

F32 = np.float32


class ModelLoadError(ValueError):
    pass


class HookError(ValueError):
    pass


class NumericFault(FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite values after {where}")
        self.where = where


# -- activations ---------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(F32(0), x)


ACTIVATIONS = {
    "none": lambda x: x,
    "relu": lambda x: np.maximum(x, F32(0)),
    "mish": lambda x: x * np.tanh(_softplus(x)),
    "swish": lambda x: x / (F32(1) + np.exp(-x)),
    "selu": lambda x: F32(1.0507009873554805) * np.where(x > 0, x, F32(1.6732632423543772) * np.expm1(np.minimum(x, F32(0)))),
    "gelu": lambda x: F32(0.5) * x * (F32(1) + np.tanh(F32(0.7978845608028654) * (x + F32(0.044715) * x ** 3))),
}


def _act(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ModelLoadError(f"unknown activation {name!r}") from None


def _rowwise(a, w):
    """(B, K) @ (K, N) as B independent products, so each row's result is batch-size independent."""
    return np.matmul(a[:, None, :], w)[:, 0, :]


def _layernorm(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + F32(eps))) * gamma + beta


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


# -- sites and hooks -------------------------------------------------------------

ZERO = "ZERO"  # write marker: zero the site

_LABEL = re.compile(r"^L(\d+)(?:H(\d+))?$")


@dataclass(frozen=True, order=True)
class ActivationSite:
    """One addressable activation. `layer`/`head` are 0-based.

    kind "residual": residual stream after `layer` at `square` (None: all squares).
    kind "head_output": per-head output before W_o; head None means all heads.
    kind "attn_entry": post-softmax weight (query, key) of one head.
    """

    kind: str
    layer: int
    head: Optional[int] = None
    square: Optional[int] = None
    query: Optional[int] = None
    key: Optional[int] = None

    def __post_init__(self):
        if self.kind == "residual":
            if self.head is not None or self.query is not None or self.key is not None:
                raise HookError(f"residual site takes only layer and square: {self}")
        elif self.kind == "head_output":
            if self.query is not None or self.key is not None:
                raise HookError(f"head_output site takes layer, head, square: {self}")
        elif self.kind == "attn_entry":
            if self.head is None or self.query is None or self.key is None:
                raise HookError(f"attn_entry site needs head, query and key: {self}")
            if self.square is not None:
                raise HookError(f"attn_entry site takes no square: {self}")
        else:
            raise HookError(f"unknown site kind {self.kind!r}")

    @classmethod
    def residual(cls, layer, square=None):
        return cls("residual", layer, square=square)

    @classmethod
    def head_output(cls, layer, head=None, square=None):
        return cls("head_output", layer, head=head, square=square)

    @classmethod
    def attn_entry(cls, layer, head, query, key):
        return cls("attn_entry", layer, head=head, query=query, key=key)

    @property
    def label(self) -> str:
        """1-based name, e.g. layer 11 head 11 -> "L12H12"."""
        s = f"L{self.layer + 1}"
        if self.head is not None:
            s += f"H{self.head + 1}"
        return s

    def validate(self, spec: ModelSpec):
        if not 0 <= self.layer < spec.n_layers:
            raise HookError(f"layer {self.layer} out of range for {spec.n_layers} layers")
        if self.head is not None and not 0 <= self.head < spec.n_heads:
            raise HookError(f"head {self.head} out of range for {spec.n_heads} heads")
        for sq in (self.square, self.query, self.key):
            if sq is not None and not 0 <= sq < 64:
                raise HookError(f"square {sq} out of range")

    def overlaps(self, other: "ActivationSite") -> bool:
        if self.kind != other.kind or self.layer != other.layer:
            return False

        def same(a, b):
            return a is None or b is None or a == b

        if self.kind == "attn_entry":
            return self == other
        return same(self.head, other.head) and same(self.square, other.square)


def parse_label(label: str) -> tuple[int, Optional[int]]:
    """"L12H12" -> (11, 11); "L3" -> (2, None)."""
    m = _LABEL.match(label)
    if not m:
        raise ValueError(f"bad layer/head label {label!r}")
    return int(m.group(1)) - 1, None if m.group(2) is None else int(m.group(2)) - 1


@dataclass
class HookSet:
    """Reads to record and writes to apply during one forward pass.

    Write values: ZERO, or an array shaped like the site (optionally with a
    leading batch axis). attention_mode "zero" zeroes post-softmax weights
    without renormalizing; "mask" sets the pre-softmax score to -inf instead.
    """

    reads: frozenset = frozenset()
    writes: dict = field(default_factory=dict)
    attention_mode: str = "zero"

    def __post_init__(self):
        self.reads = frozenset(self.reads)
        if self.attention_mode not in ("zero", "mask"):
            raise HookError(f"unknown attention_mode {self.attention_mode!r}")
        sites = list(self.writes)
        by_layer = {}
        for s in sites:
            if s.kind != "attn_entry":
                by_layer.setdefault((s.kind, s.layer), []).append(s)
        for group in by_layer.values():
            for i, a in enumerate(group):
                for b in group[i + 1:]:
                    if a.overlaps(b):
                        raise HookError(f"overlapping write sites {a} and {b}")

    @classmethod
    def zero_attention(cls, entries, mode: str = "zero") -> "HookSet":
        """Zero-ablate (layer, head, query, key) entries."""
        return cls(writes={ActivationSite.attn_entry(*e): ZERO for e in entries}, attention_mode=mode)


def _site_shape(site: ActivationSite, spec: ModelSpec) -> tuple:
    if site.kind == "residual":
        return (spec.d_model,) if site.square is not None else (64, spec.d_model)
    if site.kind == "head_output":
        shape = (spec.d_head,) if site.square is not None else (64, spec.d_head)
        return shape if site.head is not None else (spec.n_heads,) + shape
    return ()


class _Compiled:
    """Hook writes grouped per layer for the forward loop."""

    def __init__(self, hooks: Optional[HookSet], spec: ModelSpec, batch: int):
        self.resid = {}
        self.heads = {}
        self.attn_zero = {}
        self.attn_set = {}
        self.reads = hooks.reads if hooks else frozenset()
        self.mode = hooks.attention_mode if hooks else "zero"
        if hooks is None:
            return
        for s in self.reads:
            s.validate(spec)
        for site, value in hooks.writes.items():
            site.validate(spec)
            if site.kind == "attn_entry":
                if value is ZERO or (isinstance(value, str) and value == ZERO):
                    m = self.attn_zero.setdefault(site.layer, np.zeros((spec.n_heads, 64, 64), dtype=bool))
                    m[site.head, site.query, site.key] = True
                else:
                    if self.mode == "mask":
                        raise HookError("mask mode supports only ZERO writes on attention entries")
                    v = np.asarray(value, dtype=F32)
                    if v.shape not in ((), (batch,)):
                        raise HookError(f"attention write for {site} must be scalar or per-batch, got {v.shape}")
                    self.attn_set.setdefault(site.layer, []).append((site, v))
                continue
            shape = _site_shape(site, spec)
            if value is ZERO or (isinstance(value, str) and value == ZERO):
                v = np.zeros(shape, dtype=F32)
            else:
                v = np.asarray(value, dtype=F32)
                if v.shape != shape and v.shape != (batch,) + shape:
                    raise HookError(f"write for {site} has shape {v.shape}, expected {shape} (or batched)")
            target = self.resid if site.kind == "residual" else self.heads
            target.setdefault(site.layer, []).append((site, v))


# -- trace -----------------------------------------------------------------------

TRACE_LEVELS = ("none", "policy", "full")


@dataclass
class ForwardTrace:
    """Recorded activations; batched arrays carry a leading batch axis.

    residual[layer]: after that layer's final LayerNorm, (64, d_model).
    qk_scores / smolgen_scores / attn: per layer, (n_heads, 64, 64); attn is post-write.
    head_out: per layer, (n_heads, 64, d_head).
    reads: values of explicitly requested sites (populated at every trace level).
    """

    embedding: Optional[np.ndarray] = None
    residual: Optional[np.ndarray] = None
    qk_scores: Optional[np.ndarray] = None
    smolgen_scores: Optional[np.ndarray] = None
    attn: Optional[np.ndarray] = None
    head_out: Optional[np.ndarray] = None
    policy_logits: Optional[np.ndarray] = None
    value_wdl: Optional[np.ndarray] = None
    reads: dict = field(default_factory=dict)

    @property
    def attn_scores(self):
        if self.qk_scores is None:
            return None
        return self.qk_scores + self.smolgen_scores

    def item(self, i: int) -> "ForwardTrace":
        def pick(a):
            return None if a is None else a[i]

        return ForwardTrace(
            pick(self.embedding), pick(self.residual), pick(self.qk_scores), pick(self.smolgen_scores),
            pick(self.attn), pick(self.head_out), pick(self.policy_logits), pick(self.value_wdl),
            {k: v[i] for k, v in self.reads.items()},
        )


@dataclass
class ForwardResult:
    policy: PolicyOutput
    value: ValueOutput
    trace: ForwardTrace


@dataclass
class BatchResult:
    policy_logits: np.ndarray  # (B, 64, 64)
    promotion_offsets: Optional[np.ndarray]  # (B, 8, 4)
    value_wdl: np.ndarray  # (B, 3)
    trace: ForwardTrace

    def __len__(self):
        return self.policy_logits.shape[0]

    def item(self, i: int) -> ForwardResult:
        promo = None if self.promotion_offsets is None else self.promotion_offsets[i]
        return ForwardResult(PolicyOutput(self.policy_logits[i], promo), ValueOutput(self.value_wdl[i]), self.trace.item(i))


# -- model -------------------------------------------------------------------------


@dataclass
class Evaluation:
    """Legal-move distribution (player frame) and WDL of one position."""

    dist: MoveDist
    wdl: np.ndarray
    mirrored: bool = False  # the position had black to move

    @property
    def value(self) -> float:
        return value_score(self.wdl)

    def prob(self, move) -> float:
        """Probability of a move given in the absolute frame; 0 if illegal."""
        return self.dist.prob(move.mirror() if self.mirrored else move)

    def top(self):
        """Most likely move, in the absolute frame."""
        m = self.dist.top()
        return m.mirror() if self.mirrored else m


class Model:
    """Immutable weights plus config. Safe to share across threads."""

    def __init__(self, config: ModelConfig, weights: dict, name: str = "model", content_hash: Optional[str] = None):
        self.config = config
        self.name = name
        shapes = expected_shapes(config)
        missing = sorted(set(shapes) - set(weights))
        if missing:
            raise ModelLoadError(f"missing tensor {missing[0]} (and {len(missing) - 1} more)")
        self.weights = {}
        for k, shape in shapes.items():
            arr = np.asarray(weights[k], dtype=F32)
            if tuple(arr.shape) != tuple(shape):
                raise ModelLoadError(f"tensor {k} has shape {tuple(arr.shape)}, config implies {tuple(shape)}")
            arr = np.array(arr, dtype=F32, copy=True) if arr.flags.writeable else arr
            arr.setflags(write=False)
            self.weights[k] = arr
        self._hash = content_hash

    @property
    def spec(self) -> ModelSpec:
        return self.config.spec

    @property
    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.weights.values()))

    @property
    def content_hash(self) -> str:
        if self._hash is None:
            h = hashlib.sha256()
            for k in sorted(self.weights):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self.weights[k]).tobytes())
            self._hash = h.hexdigest()
        return self._hash

    def save(self, path) -> str:
        digest = write_archive(path, self.config.to_dict(), self.weights)
        return digest

    # -- inputs ------------------------------------------------------------------

    def encode(self, board: Board) -> InputPlanes:
        return encode_input(orient_to_player(board), self.config.layout, self.config.layout.input_width)

    def features(self, boards) -> np.ndarray:
        return np.stack([self.encode(b).features() for b in boards])

    # -- execution -----------------------------------------------------------------

    def forward(self, planes, hooks: Optional[HookSet] = None, trace: str = "full") -> ForwardResult:
        """Single position; `planes` is InputPlanes, a (64, width) array or a Board."""
        if isinstance(planes, Board):
            planes = self.encode(planes)
        feats = planes.features() if isinstance(planes, InputPlanes) else np.asarray(planes, dtype=F32)
        return self.run(feats[None], hooks, trace).item(0)

    def run(self, feats: np.ndarray, hooks: Optional[HookSet] = None, trace: str = "full",
            resume: Optional[tuple] = None) -> BatchResult:
        """Batched forward over (B, 64, width) features.

        resume=(layer, residual) skips everything up to and including `layer`
        (-1 = embedding) and continues from the given (B, 64, d_model) residual.
        """
        if trace not in TRACE_LEVELS:
            raise ValueError(f"trace level must be one of {TRACE_LEVELS}")
        cfg, spec, w = self.config, self.config.spec, self.weights
        full = trace == "full"
        if resume is None:
            feats = np.asarray(feats, dtype=F32)
            if feats.ndim != 3 or feats.shape[1:] != (64, cfg.layout.input_width):
                raise HookError(f"input features have shape {feats.shape}, expected (B, 64, {cfg.layout.input_width})")
            B = feats.shape[0]
        else:
            B = resume[1].shape[0]
        hk = _Compiled(hooks, spec, B)
        L, H, dh, d = spec.n_layers, spec.n_heads, spec.d_head, spec.d_model
        tr = ForwardTrace()
        if full:
            tr.residual = np.zeros((B, L, 64, d), F32)
            tr.qk_scores = np.zeros((B, L, H, 64, 64), F32)
            tr.smolgen_scores = np.zeros((B, L, H, 64, 64), F32)
            tr.attn = np.zeros((B, L, H, 64, 64), F32)
            tr.head_out = np.zeros((B, L, H, 64, dh), F32)

        if resume is None:
            x = feats @ w["embedding.weight"] + w["embedding.bias"]
            x = _act(cfg.embedding_activation)(x)
            self._check(x, "embedding")
            start = 0
            if full:
                tr.embedding = x.copy()
        else:
            start = resume[0] + 1
            x = np.array(resume[1], dtype=F32, copy=True)

        alpha = F32(cfg.residual_scale)
        for li in range(start, L):
            x = self._layer(x, li, hk, tr, full, alpha)
            for site, v in hk.resid.get(li, ()):
                if site.square is None:
                    x = np.broadcast_to(v, x.shape).copy() if v.ndim == 3 else np.broadcast_to(v, x.shape).copy()
                else:
                    x[:, site.square] = v
            if full:
                tr.residual[:, li] = x
            for s in hk.reads:
                if s.kind == "residual" and s.layer == li:
                    tr.reads[s] = (x if s.square is None else x[:, s.square]).copy()

        logits, promo = self._policy(x)
        wdl = self._value(x)
        if trace in ("policy", "full"):
            tr.policy_logits = logits
            tr.value_wdl = wdl
        return BatchResult(logits, promo, wdl, tr)

    def _check(self, x, where):
        if not np.isfinite(x).all():
            raise NumericFault(where)

    def _smolgen(self, x, li):
        cfg, w = self.config, self.weights
        g = cfg.smolgen
        p = f"layers.{li}.smolgen."
        B = x.shape[0]
        act = _act(g.activation)
        c = (x @ w[p + "compress"]).reshape(B, 64 * g.hidden_channels)
        h = act(_rowwise(c, w[p + "dense1.weight"]) + w[p + "dense1.bias"])
        h = _layernorm(h, w[p + "ln1.gamma"], w[p + "ln1.beta"], cfg.ln_eps)
        h = act(_rowwise(h, w[p + "dense2.weight"]) + w[p + "dense2.bias"])
        h = _layernorm(h, w[p + "ln2.gamma"], w[p + "ln2.beta"], cfg.ln_eps)
        h = h.reshape(B, cfg.spec.n_heads, g.gen_size)
        return (h @ w["smolgen.global"]).reshape(B, cfg.spec.n_heads, 64, 64)

    def _layer(self, x, li, hk: _Compiled, tr: ForwardTrace, full: bool, alpha):
        cfg, w = self.config, self.weights
        spec = cfg.spec
        B, H, dh = x.shape[0], spec.n_heads, spec.d_head
        p = f"layers.{li}."

        def proj(n):
            y = x @ w[p + f"attn.w{n}"] + w[p + f"attn.b{n}"]
            return y.reshape(B, 64, H, dh).transpose(0, 2, 1, 3)

        q, k, v = proj("q"), proj("k"), proj("v")
        qk = (q @ k.transpose(0, 1, 3, 2)) * F32(1.0 / np.sqrt(dh))
        sg = self._smolgen(x, li) if cfg.smolgen is not None else np.zeros_like(qk)
        scores = qk + sg
        zmask = hk.attn_zero.get(li)
        if zmask is not None and hk.mode == "mask":
            scores = np.where(zmask, F32(-np.inf), scores)
        attn = _softmax(scores)
        if zmask is not None and hk.mode == "zero":
            attn = np.where(zmask, F32(0), attn)
        for site, val in hk.attn_set.get(li, ()):
            attn[:, site.head, site.query, site.key] = val
        self._check(attn, f"layer {li} attention")
        heads = attn @ v
        for site, val in hk.heads.get(li, ()):
            if site.head is None:
                if site.square is None:
                    heads = np.broadcast_to(val, heads.shape).copy()
                else:
                    heads[:, :, site.square] = val
            elif site.square is None:
                heads[:, site.head] = val
            else:
                heads[:, site.head, site.square] = val
        if full:
            tr.qk_scores[:, li] = qk
            tr.smolgen_scores[:, li] = sg
            tr.attn[:, li] = attn
            tr.head_out[:, li] = heads
        for s in hk.reads:
            if s.layer != li:
                continue
            if s.kind == "head_output":
                hv = heads if s.head is None else heads[:, s.head]
                if s.square is not None:
                    hv = hv[..., s.square, :]
                tr.reads[s] = hv.copy()
            elif s.kind == "attn_entry":
                tr.reads[s] = attn[:, s.head, s.query, s.key].copy()
        out = heads.transpose(0, 2, 1, 3).reshape(B, 64, H * dh) @ w[p + "attn.wo"] + w[p + "attn.bo"]
        x = _layernorm(alpha * x + out, w[p + "ln1.gamma"], w[p + "ln1.beta"], cfg.ln_eps)
        m = _act(cfg.mlp_activation)(x @ w[p + "mlp.w1"] + w[p + "mlp.b1"]) @ w[p + "mlp.w2"] + w[p + "mlp.b2"]
        x = _layernorm(alpha * x + m, w[p + "ln2.gamma"], w[p + "ln2.beta"], cfg.ln_eps)
        self._check(x, f"layer {li}")
        return x

    def _policy(self, x):
        cfg, w = self.config, self.weights
        h = _act(cfg.policy_activation)(x @ w["policy.w1"] + w["policy.b1"])
        src = h @ w["policy.wsrc"] + w["policy.bsrc"]
        tgt = h @ w["policy.wtgt"] + w["policy.btgt"]
        scale = F32(1.0 / np.sqrt(cfg.d_policy))
        logits = (src @ tgt.transpose(0, 2, 1)) * scale
        promo = None
        if cfg.promotion == "offsets":
            promo = (tgt[:, 56:64] @ w["policy.promotion"]) * scale
        self._check(logits, "policy head")
        return logits, promo

    def _value(self, x):
        cfg, w = self.config, self.weights
        act = _act(cfg.value_activation)
        B = x.shape[0]
        v = act(x @ w["value.w1"] + w["value.b1"]).reshape(B, 64 * cfg.d_value)
        v = act(_rowwise(v, w["value.w2"]) + w["value.b2"])
        logits = (_rowwise(v, w["value.w3"]) + w["value.b3"]).astype(np.float64)
        self._check(logits, "value head")
        z = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    # -- convenience -----------------------------------------------------------------

    def evaluate(self, board: Board) -> Evaluation:
        return self.evaluate_many([board])[0]

    def evaluate_many(self, boards, batch_size: int = 64) -> list[Evaluation]:
        """Legal-move distribution and WDL for each board (any orientation)."""
        out = []
        boards = list(boards)
        for i in range(0, len(boards), batch_size):
            chunk = [orient_to_player(b) for b in boards[i:i + batch_size]]
            res = self.run(self.features(chunk), trace="none")
            for j, b in enumerate(chunk):
                r = res.item(j)
                out.append(Evaluation(policy_distribution(r.policy, b), r.value.wdl, b.mirrored))
        return out


def load_weights(path, verify_hash: bool = True) -> tuple[ModelSpec, Model]:
    config_dict, tensors, digest = read_archive(path, verify_hash=verify_hash)
    try:
        config = ModelConfig.from_dict(config_dict)
    except (TypeError, KeyError, ValueError) as e:
        raise ModelLoadError(f"inconsistent hyperparameters in manifest: {e}") from None
    model = Model(config, tensors, name=str(path), content_hash=digest)
    return config.spec, model


def forward(model: Model, planes, hooks: Optional[HookSet] = None, trace: str = "full") -> ForwardResult:
    return model.forward(planes, hooks, trace)
