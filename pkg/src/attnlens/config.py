"""Run configuration: method presets, CLI flag bundle, environment."""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .attribution import UPSAMPLE_METHODS, AttributionOptions
from .errors import ConfigError

# Caps worker threads of the evaluation commands
THREADS_ENV = "ATTNLENS_THREADS"

# method -> (use_std_scaling, use_sum_normalize)
METHOD_PRESETS = {
    "attn-ln": (True, True),
    "attn": (False, False),
    "rollout": (False, False),
}


def eval_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads


def parse_target(value: Union[str, int, None]) -> Union[str, int]:
    """'predicted' (or None) or a non-negative class index."""
    if value is None or value == "predicted":
        return "predicted"
    try:
        index = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"target class must be 'predicted' or an integer, got {value!r}") from None
    if index < 0:
        raise ConfigError(f"target class must be >= 0, got {index}")
    return index


@dataclass(frozen=True)
class RunConfig:
    """
    Everything one attribute/eval invocation needs.

    The method preset chooses which scaling steps run; the no_* flags can
    only turn steps off on top of it.
    """

    config_path: Path
    weights_path: Path
    method: str = "attn-ln"
    start_stage: Optional[int] = None
    no_gradients: bool = False
    no_std: bool = False
    no_normalize: bool = False
    target: Union[str, int] = "predicted"
    upsample: str = "nearest"
    merge_reduce: str = "mean"
    out_dir: Path = Path("out")
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHOD_PRESETS:
            raise ConfigError(f"Unknown method: {self.method}")
        if self.upsample not in UPSAMPLE_METHODS:
            raise ConfigError(f"Unknown upsample method: {self.upsample}")
        object.__setattr__(self, "target", parse_target(self.target))
        # Fails early on invalid combinations
        self.attribution_options()

    @property
    def is_rollout(self) -> bool:
        return self.method == "rollout"

    def attribution_options(self) -> AttributionOptions:
        use_std, use_normalize = METHOD_PRESETS[self.method]
        return AttributionOptions(
            start_stage=self.start_stage,
            use_std_scaling=use_std and not self.no_std,
            use_sum_normalize=use_normalize and not self.no_normalize,
            use_gradients=not self.no_gradients,
            target=self.target,
            merge_reduce=self.merge_reduce,
        )
