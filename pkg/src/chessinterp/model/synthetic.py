"""Hand-built toy transformers with a known causal story.

The planted model stores a few named scalar features in fixed residual
dimensions. LayerNorm runs with a huge epsilon (and a matching gamma), which
turns it into plain mean-centering; every planted read takes the difference
with a "ref" dimension that nothing ever writes, so the centering cancels
exactly. What is planted:

* a copy head that moves occupancy(carrier) into the readout square's "copy"
  feature (everything else in the readout row underflows to weight 0),
* a knight head whose pattern comes from a constant smolgen bias,
* a policy head whose logits are
  ``-a*R(t) + b*copy(t) + g*S1(s)*R(t) + h*N(s)*C(t)``
  with R/C/S1 the readout/carrier/first-source indicators and N the player
  knight plane. With the carrier occupied, source->readout is the top move;
  emptying the carrier makes it a long shot.

All other heads, MLPs and smolgen noise write only to "junk" dimensions that
the policy never reads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from ..chess.encoding import COMPACT_LAYOUT, PIECE_PLANE_ORDER
from ..chess.masks import kind_matrix, positional_encoding
from ..chess.squares import parse_square
from .config import ModelConfig, ModelSpec, SmolgenConfig, expected_shapes
from .engine import Model

FEATURES = ("ref", "const", "readout", "carrier", "first_source", "occupancy", "copy", "knight")
F = {name: i for i, name in enumerate(FEATURES)}

LN_EPS = 1e10  # float32-exact; var + eps == eps for var < 512
LN_GAIN = 1e5  # sqrt(LN_EPS)

SYNTHETIC_SPEC = ModelSpec(n_layers=3, d_model=32, n_heads=4, d_head=8, d_mlp=16)


class PlantError(ValueError):
    pass


@dataclass(frozen=True)
class PlantDescriptor:
    """Where the planted structure lives. Squares in the player frame; layer/head 0-based."""

    carrier: int = parse_square("d5")
    readout: int = parse_square("g6")
    first_source: int = parse_square("g2")
    copy_head: tuple = (1, 2)
    knight_head: tuple = (0, 0)
    copy_score: float = 120.0  # readout->carrier score
    park_score: float = 16.0  # every other query parks on the readout key
    knight_score: float = 12.0
    readout_penalty: float = 8.0  # a
    copy_gain: float = 11.0  # b
    source_bonus: float = 3.0  # g
    knight_capture: float = 4.0  # h

    def __post_init__(self):
        object.__setattr__(self, "copy_head", tuple(self.copy_head))
        object.__setattr__(self, "knight_head", tuple(self.knight_head))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["copy_head"] = list(self.copy_head)
        d["knight_head"] = list(self.knight_head)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantDescriptor":
        return cls(**d)


def synthetic_config(spec: ModelSpec = SYNTHETIC_SPEC, plant: PlantDescriptor | None = None) -> ModelConfig:
    plant = plant or PlantDescriptor()
    return ModelConfig(
        spec=spec,
        layout=COMPACT_LAYOUT,
        smolgen=SmolgenConfig(hidden_channels=2, hidden_size=8, gen_size=4),
        embedding_activation="none",
        mlp_activation="relu",
        ln_eps=LN_EPS,
        d_policy=8,
        policy_activation="none",
        promotion="offsets",
        d_value=4,
        d_value_hidden=8,
        value_activation="mish",
        extra={"plant": plant.to_dict()},
    )


def plant_of(model: Model) -> PlantDescriptor:
    d = model.config.extra.get("plant")
    if d is None:
        raise PlantError(f"{model.name} carries no plant descriptor")
    return PlantDescriptor.from_dict(d)


def _check(spec: ModelSpec, plant: PlantDescriptor):
    if spec.n_layers > 4 or spec.d_model > 64:
        raise PlantError("synthetic models are limited to 4 layers and d_model <= 64")
    need = len(FEATURES) + 2
    if spec.d_model < need:
        raise PlantError(f"d_model {spec.d_model} too small: the plant needs {need} dimensions")
    if spec.d_head < 2:
        raise PlantError("d_head must be >= 2 for the copy head")
    (cl, ch), (kl, kh) = plant.copy_head, plant.knight_head
    if cl < 1:
        raise PlantError("copy head must sit at layer >= 1 so the carrier is patchable before the copy")
    if cl >= spec.n_layers or kl >= spec.n_layers or max(ch, kh) >= spec.n_heads:
        raise PlantError(f"plant heads {plant.copy_head}/{plant.knight_head} outside {spec}")
    if (cl, ch) == (kl, kh):
        raise PlantError("copy head and knight head must differ")
    if len({plant.carrier, plant.readout, plant.first_source}) != 3:
        raise PlantError("carrier, readout and first source must be distinct squares")


def _indicator_weights() -> np.ndarray:
    """W with positional(q) @ W[:, r] == [q == r]; the reachability matrix is invertible."""
    return np.linalg.inv(positional_encoding().astype(np.float64))


def build_synthetic_model(spec: ModelSpec = SYNTHETIC_SPEC, plant: PlantDescriptor | None = None,
                          seed: int = 0) -> Model:
    plant = plant or PlantDescriptor()
    _check(spec, plant)
    cfg = synthetic_config(spec, plant)
    rng = np.random.default_rng(seed)
    d, H, dh = spec.d_model, spec.n_heads, spec.d_head
    junk = np.arange(len(FEATURES), d)
    shapes = expected_shapes(cfg)
    w = {k: np.zeros(s, dtype=np.float64) for k, s in shapes.items()}

    def noise(shape, scale):
        return rng.normal(0.0, scale, shape)

    # embedding: planes | aux | positional
    lay = cfg.layout
    n_planes = lay.n_planes
    emb = w["embedding.weight"]
    emb[:12, F["occupancy"]] = 1.0
    emb[PIECE_PLANE_ORDER.index("N"), F["knight"]] = 1.0
    ind = _indicator_weights()
    for name, sq in (("readout", plant.readout), ("carrier", plant.carrier), ("first_source", plant.first_source)):
        emb[n_planes:, F[name]] = ind[:, sq]
    emb[:, junk] = noise((emb.shape[0], len(junk)), 0.1)
    w["embedding.bias"][F["const"]] = 1.0

    def col(head):
        return slice(head * dh, (head + 1) * dh)

    for li in range(spec.n_layers):
        p = f"layers.{li}."
        for h in range(H):
            c = col(h)
            if (li, h) == plant.copy_head:
                q0, q1 = h * dh, h * dh + 1
                s = np.sqrt(dh)
                w[p + "attn.wq"][F["readout"], q0] = plant.copy_score * s
                w[p + "attn.wq"][F["ref"], q0] = -plant.copy_score * s
                w[p + "attn.wk"][F["carrier"], q0] = 1.0
                w[p + "attn.wk"][F["ref"], q0] = -1.0
                w[p + "attn.wq"][F["const"], q1] = plant.park_score * s
                w[p + "attn.wq"][F["readout"], q1] = -plant.park_score * s
                w[p + "attn.wk"][F["readout"], q1] = 1.0
                w[p + "attn.wk"][F["ref"], q1] = -1.0
                w[p + "attn.wv"][F["occupancy"], q0] = 1.0
                w[p + "attn.wv"][F["ref"], q0] = -1.0
                w[p + "attn.wo"][q0, F["copy"]] = 1.0
            elif (li, h) == plant.knight_head:
                continue  # pattern from smolgen, no value path
            else:
                w[p + "attn.wq"][:, c] = noise((d, dh), 0.1)
                w[p + "attn.wk"][:, c] = noise((d, dh), 0.1)
                w[p + "attn.wv"][:, c] = noise((d, dh), 0.1)
                w[p + "attn.wo"][np.ix_(np.arange(c.start, c.stop), junk)] = noise((dh, len(junk)), 0.1)
        w[p + "mlp.w1"][:] = noise((d, spec.d_mlp), 0.1)
        w[p + "mlp.w2"][:, junk] = noise((spec.d_mlp, len(junk)), 0.1)
        for ln in ("ln1", "ln2"):
            w[p + f"{ln}.gamma"][:] = LN_GAIN

        # smolgen: constant per-head codes plus small input-dependent noise
        g = cfg.smolgen
        w[p + "smolgen.compress"][:] = noise(shapes[p + "smolgen.compress"], 0.1)
        w[p + "smolgen.dense1.weight"][:] = noise(shapes[p + "smolgen.dense1.weight"], 0.1)
        w[p + "smolgen.ln1.gamma"][:] = LN_GAIN
        dense2 = noise(shapes[p + "smolgen.dense2.weight"], 0.05)
        gamma2 = np.full(H * g.gen_size, LN_GAIN)
        beta2 = np.zeros(H * g.gen_size)
        for h in range(H):
            knight_slot = h * g.gen_size
            dense2[:, knight_slot] = 0.0
            gamma2[knight_slot] = 0.0
            beta2[knight_slot + 1:(h + 1) * g.gen_size] = noise(g.gen_size - 1, 0.3)
            if (li, h) == plant.knight_head:
                beta2[knight_slot] = 1.0
        w[p + "smolgen.dense2.weight"][:] = dense2
        w[p + "smolgen.ln2.gamma"][:] = gamma2
        w[p + "smolgen.ln2.beta"][:] = beta2
    glob = noise(shapes["smolgen.global"], 0.3)
    glob[0] = plant.knight_score * kind_matrix("knight").astype(np.float64).reshape(-1)
    w["smolgen.global"][:] = glob

    # policy: h = (feature - ref) for six features, then a fixed bilinear form
    hf = ("readout", "copy", "first_source", "knight", "carrier", "const")
    for j, name in enumerate(hf):
        w["policy.w1"][F[name], j] = 1.0
        w["policy.w1"][F["ref"], j] = -1.0
    H_ = {name: j for j, name in enumerate(hf)}
    s = np.sqrt(cfg.d_policy)
    ws, wt = w["policy.wsrc"], w["policy.wtgt"]
    ws[H_["const"], 0], wt[H_["readout"], 0] = -plant.readout_penalty * s, 1.0
    ws[H_["const"], 1], wt[H_["copy"], 1] = plant.copy_gain * s, 1.0
    ws[H_["first_source"], 2], wt[H_["readout"], 2] = plant.source_bonus * s, 1.0
    ws[H_["knight"], 3], wt[H_["carrier"], 3] = plant.knight_capture * s, 1.0

    # value head: small random weights
    for k in ("value.w1", "value.w2", "value.w3"):
        w[k][:] = noise(shapes[k], 0.1)

    return Model(cfg, {k: v.astype(np.float32) for k, v in w.items()}, name="planted")


def random_weights(config: ModelConfig, seed: int, std: float = 0.02) -> dict:
    """Gaussian N(0, std) for every tensor except LayerNorm gains (1) and shifts (0)."""
    rng = np.random.default_rng(seed)
    out = {}
    for k, shape in sorted(expected_shapes(config).items()):
        if k.endswith(".gamma"):
            out[k] = np.ones(shape, dtype=np.float32)
        elif k.endswith(".beta"):
            out[k] = np.zeros(shape, dtype=np.float32)
        else:
            out[k] = rng.normal(0.0, std, shape).astype(np.float32)
    return out


def random_init_like(model: Model, seed: int) -> Model:
    """Same config and shapes as `model`, fresh random weights."""
    cfg = replace(model.config, extra={k: v for k, v in model.config.extra.items() if k != "plant"})
    return Model(cfg, random_weights(cfg, seed), name=f"random-init({model.name}, seed={seed})")
