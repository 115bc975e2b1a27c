from .archive import ArchiveError, read_archive, write_archive
from .config import ModelConfig, ModelSpec, SmolgenConfig, expected_shapes
from .engine import (
    ZERO,
    ActivationSite,
    BatchResult,
    Evaluation,
    ForwardResult,
    ForwardTrace,
    HookError,
    HookSet,
    Model,
    ModelLoadError,
    NumericFault,
    forward,
    load_weights,
    parse_label,
)
from .outputs import MoveDist, PolicyOutput, TerminalPositionError, ValueOutput, policy_distribution, value_score
