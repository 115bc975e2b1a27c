"""Model hyperparameters and the tensor shapes they imply."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from ..chess.encoding import LayoutDescriptor


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int = 15
    d_model: int = 768
    n_heads: int = 24
    d_head: int = 32
    d_mlp: int = 1024
    n_squares: int = 64

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"{k} must be >= 1, got {v}")
        if self.n_squares != 64:
            raise ValueError("only 64-square boards are supported")

    @property
    def attention_entries(self) -> int:
        return self.n_layers * self.n_heads * self.n_squares * self.n_squares

    @property
    def residual_sites(self) -> int:
        return self.n_layers * self.n_squares

    @property
    def head_sites(self) -> int:
        return self.n_layers * self.n_heads


@dataclass(frozen=True)
class SmolgenConfig:
    hidden_channels: int = 32
    hidden_size: int = 256
    gen_size: int = 256
    activation: str = "swish"


@dataclass(frozen=True)
class ModelConfig:
    spec: ModelSpec = ModelSpec()
    layout: LayoutDescriptor = LayoutDescriptor()
    smolgen: Optional[SmolgenConfig] = SmolgenConfig()
    embedding_activation: str = "mish"
    mlp_activation: str = "mish"
    ln_eps: float = 1e-6
    residual_scale: float = 1.0
    d_policy: int = 768
    policy_activation: str = "selu"
    promotion: str = "offsets"  # or "queen_only"
    d_value: int = 32
    d_value_hidden: int = 128
    value_activation: str = "mish"
    extra: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "layout": self.layout.to_dict(),
            "smolgen": None if self.smolgen is None else asdict(self.smolgen),
            "embedding_activation": self.embedding_activation,
            "mlp_activation": self.mlp_activation,
            "ln_eps": self.ln_eps,
            "residual_scale": self.residual_scale,
            "d_policy": self.d_policy,
            "policy_activation": self.policy_activation,
            "promotion": self.promotion,
            "d_value": self.d_value,
            "d_value_hidden": self.d_value_hidden,
            "value_activation": self.value_activation,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        spec = ModelSpec(**d.pop("spec"))
        layout = LayoutDescriptor.from_dict(d.pop("layout"))
        sg = d.pop("smolgen", None)
        return cls(spec=spec, layout=layout, smolgen=None if sg is None else SmolgenConfig(**sg), **d)

    def with_spec(self, **kw) -> "ModelConfig":
        return replace(self, spec=replace(self.spec, **kw))


def expected_shapes(cfg: ModelConfig) -> dict:
    s = cfg.spec
    d, hd = s.d_model, s.n_heads * s.d_head
    shapes = {
        "embedding.weight": (cfg.layout.input_width, d),
        "embedding.bias": (d,),
    }
    for i in range(s.n_layers):
        p = f"layers.{i}."
        for n in ("q", "k", "v"):
            shapes[p + f"attn.w{n}"] = (d, hd)
            shapes[p + f"attn.b{n}"] = (hd,)
        shapes[p + "attn.wo"] = (hd, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "mlp.w1"] = (d, s.d_mlp)
        shapes[p + "mlp.b1"] = (s.d_mlp,)
        shapes[p + "mlp.w2"] = (s.d_mlp, d)
        shapes[p + "mlp.b2"] = (d,)
        for ln in ("ln1", "ln2"):
            shapes[p + f"{ln}.gamma"] = (d,)
            shapes[p + f"{ln}.beta"] = (d,)
        if cfg.smolgen is not None:
            g = cfg.smolgen
            shapes[p + "smolgen.compress"] = (d, g.hidden_channels)
            shapes[p + "smolgen.dense1.weight"] = (64 * g.hidden_channels, g.hidden_size)
            shapes[p + "smolgen.dense1.bias"] = (g.hidden_size,)
            shapes[p + "smolgen.ln1.gamma"] = (g.hidden_size,)
            shapes[p + "smolgen.ln1.beta"] = (g.hidden_size,)
            shapes[p + "smolgen.dense2.weight"] = (g.hidden_size, s.n_heads * g.gen_size)
            shapes[p + "smolgen.dense2.bias"] = (s.n_heads * g.gen_size,)
            shapes[p + "smolgen.ln2.gamma"] = (s.n_heads * g.gen_size,)
            shapes[p + "smolgen.ln2.beta"] = (s.n_heads * g.gen_size,)
    if cfg.smolgen is not None:
        shapes["smolgen.global"] = (cfg.smolgen.gen_size, 64 * 64)
    dp = cfg.d_policy
    shapes.update({
        "policy.w1": (d, dp),
        "policy.b1": (dp,),
        "policy.wsrc": (dp, dp),
        "policy.bsrc": (dp,),
        "policy.wtgt": (dp, dp),
        "policy.btgt": (dp,),
    })
    if cfg.promotion == "offsets":
        shapes["policy.promotion"] = (dp, 4)
    shapes.update({
        "value.w1": (d, cfg.d_value),
        "value.b1": (cfg.d_value,),
        "value.w2": (64 * cfg.d_value, cfg.d_value_hidden),
        "value.b2": (cfg.d_value_hidden,),
        "value.w3": (cfg.d_value_hidden, 3),
        "value.b3": (3,),
    })
    return shapes
