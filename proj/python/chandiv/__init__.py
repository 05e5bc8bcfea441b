"""Channel-diversity attention, CNN backbones and training.

Command wrappers (train, evaluate, ablate, inspect) return (exit_code, stdout, stderr).
"""

from ._core import (
    Config,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    IoError,
    Network,
    NumericError,
    ablate,
    build_network,
    chandiv_forward,
    channel_relation,
    channel_significance,
    compute_cam,
    evaluate,
    inspect,
    load_checkpoint,
    load_cifar10_bytes,
    se_forward,
    synth_dataset,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
