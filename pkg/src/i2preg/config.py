"""Pipeline configuration: documented defaults, flat key=value files, overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import DomainError


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # enhancement
    use_ime: bool = True
    ice_kernel: int = 7
    ice_std: float = 0.1
    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 1.0
    mu: float = 0.5
    positional_L: int = 0  # 0 disables the positional embedding
    params_file: str = ""  # bundle holding ice/pce parameter tensors; empty means seeded random
    # filtering
    use_cmcf: bool = True
    cmcf_iters: int = 1
    fuse_weight: float = 0.5
    # selection
    mode: str = "ot"  # ot | topk
    k: int = 1
    epsilon: float = 0.05
    sinkhorn_iters: int = 10
    sinkhorn_tol: float = 1e-6
    sinkhorn_polish: bool = False
    accept_threshold: float = 0.5
    # pose
    ransac_iters: int = 1000
    ransac_threshold: float = 3.0
    ransac_confidence: float = 0.999
    # metrics
    tau1: float = 0.05
    tau2: float = 0.1
    tau3: float = 0.1
    pir_radius: float = 0.0  # 0 means the patch-node spacing

    def __post_init__(self) -> None:
        if self.mode not in ("ot", "topk"):
            raise DomainError(f"mode must be 'ot' or 'topk', got {self.mode!r}")
        if self.k < 1:
            raise DomainError("k must be at least 1")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if self.sinkhorn_iters < 0 or self.cmcf_iters < 1:
            raise DomainError("iteration counts out of range")
        if self.ice_kernel < 1 or self.ice_kernel % 2 == 0:
            raise DomainError("ICE kernel size must be odd")
        if self.positional_L < 0:
            raise DomainError("positional_L must be nonnegative")

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str):
    kind = type(getattr(PipelineConfig(), name))
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise DomainError(f"bad value for {name}: {raw!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise DomainError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Defaults, then file values, then non-None overrides."""
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


def config_text(cfg: PipelineConfig) -> str:
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        lines.append(f"{name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
