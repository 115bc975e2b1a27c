"""Input-plane encoding driven by a serializable layout descriptor."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .board import Board
from .masks import positional_encoding

PIECE_PLANE_ORDER = ("P", "N", "B", "R", "Q", "K", "p", "n", "b", "r", "q", "k")

# per-slot plane vocabulary: the 12 piece symbols plus "repetition"
SLOT_PLANES = set(PIECE_PLANE_ORDER) | {"repetition"}

AUX_CHANNELS = {
    "castle_us_ooo",
    "castle_us_oo",
    "castle_them_ooo",
    "castle_them_oo",
    "black_to_move",
    "rule50",
    "zeros",
    "ones",
}


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LayoutDescriptor:
    """Channel order of the model input.

    history_slots counts board slots including the current one; slot 0 is the
    current position. Earlier slots are zero-filled ("zeros") or copies of the
    current position ("repeat").
    """

    slot_planes: tuple = PIECE_PLANE_ORDER + ("repetition",)
    history_slots: int = 8
    history_policy: str = "zeros"
    aux: tuple = (
        "castle_us_ooo",
        "castle_us_oo",
        "castle_them_ooo",
        "castle_them_oo",
        "black_to_move",
        "rule50",
        "zeros",
        "ones",
    )
    rule50_scale: float = 99.0
    positional: str = "reachability"  # or "none"

    def __post_init__(self):
        bad = [p for p in self.slot_planes if p not in SLOT_PLANES]
        if bad:
            raise LayoutError(f"unknown slot planes {bad}")
        bad = [a for a in self.aux if a not in AUX_CHANNELS]
        if bad:
            raise LayoutError(f"unknown auxiliary channels {bad}")
        if self.history_slots < 1:
            raise LayoutError("history_slots must be >= 1")
        if self.history_policy not in ("zeros", "repeat"):
            raise LayoutError(f"unknown history policy {self.history_policy!r}")
        if self.positional not in ("reachability", "none"):
            raise LayoutError(f"unknown positional encoding {self.positional!r}")

    @property
    def n_planes(self) -> int:
        return len(self.slot_planes) * self.history_slots + len(self.aux)

    @property
    def n_positional(self) -> int:
        return 64 if self.positional == "reachability" else 0

    @property
    def input_width(self) -> int:
        """Per-square feature count fed to the embedding."""
        return self.n_planes + self.n_positional

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slot_planes"] = list(self.slot_planes)
        d["aux"] = list(self.aux)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutDescriptor":
        d = dict(d)
        d["slot_planes"] = tuple(d.get("slot_planes", cls.slot_planes))
        d["aux"] = tuple(d.get("aux", cls.aux))
        return cls(**d)


COMPACT_LAYOUT = LayoutDescriptor(
    slot_planes=PIECE_PLANE_ORDER,
    history_slots=1,
    aux=("castle_us_ooo", "castle_us_oo", "castle_them_ooo", "castle_them_oo", "rule50", "ones"),
)


@dataclass(frozen=True)
class InputPlanes:
    planes: np.ndarray  # (n_planes, 64) float32
    positional: np.ndarray  # (64, n_positional) float32
    layout: LayoutDescriptor = field(compare=False)

    def features(self) -> np.ndarray:
        """Per-square embedding input, shape (64, input_width)."""
        return np.concatenate([self.planes.T, self.positional], axis=1).astype(np.float32, copy=False)


def _piece_planes(board: Board, slot_planes) -> np.ndarray:
    occ = {}
    for sq, x in enumerate(board.pieces):
        if x is not None:
            occ.setdefault(x, []).append(sq)
    out = np.zeros((len(slot_planes), 64), dtype=np.float32)
    for i, name in enumerate(slot_planes):
        for sq in occ.get(name, ()):
            out[i, sq] = 1.0
    return out


def encode_input(board: Board, layout: LayoutDescriptor, expected_width: int | None = None) -> InputPlanes:
    if board.orientation != "player":
        raise LayoutError("encode_input expects a player-relative board (call orient_to_player)")
    if expected_width is not None and expected_width != layout.input_width:
        raise LayoutError(f"layout yields {layout.input_width} features per square, model expects {expected_width}")
    current = _piece_planes(board, layout.slot_planes)
    slots = [current]
    for _ in range(layout.history_slots - 1):
        slots.append(current.copy() if layout.history_policy == "repeat" else np.zeros_like(current))
    aux_values = {
        "castle_us_ooo": float("Q" in board.castling),
        "castle_us_oo": float("K" in board.castling),
        "castle_them_ooo": float("q" in board.castling),
        "castle_them_oo": float("k" in board.castling),
        "black_to_move": float(board.mirrored),
        "rule50": board.halfmove / layout.rule50_scale,
        "zeros": 0.0,
        "ones": 1.0,
    }
    aux = np.array([[aux_values[a]] * 64 for a in layout.aux], dtype=np.float32).reshape(len(layout.aux), 64)
    planes = np.concatenate(slots + [aux], axis=0)
    if layout.positional == "reachability":
        pos = np.array(positional_encoding(), dtype=np.float32)
    else:
        pos = np.zeros((64, 0), dtype=np.float32)
    return InputPlanes(planes, pos, layout)
