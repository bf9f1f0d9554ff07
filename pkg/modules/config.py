# modules/config.py
import os
import logging
import sys
from typing import Dict, Any, Optional, List

from pydantic import BaseModel, Field, ValidationError, model_validator

from modules.errors import ConfigError

DATA_DIR: str = os.getenv("PAINET_DATA_DIR", "data")
if not os.path.exists(DATA_DIR):
    os.makedirs(DATA_DIR, exist_ok=True)

LOG_FILE: str = os.path.join(DATA_DIR, "app.log")
DEBUG_MODE: bool = os.getenv("DEBUG_MODE", "false").lower() == "true"
DEFAULT_SEED: int = 0

logging.basicConfig(
    level=logging.DEBUG if DEBUG_MODE else logging.INFO,
    format='%(asctime)s [%(levelname)s] %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S',
    handlers=[
        logging.FileHandler(LOG_FILE, encoding='utf-8'),
        logging.StreamHandler(sys.stdout)
    ]
)
logger: logging.Logger = logging.getLogger("PainetEngine")


class SimConfig(BaseModel):
    n_particles: int = Field(10, ge=1)
    spring_k: float = Field(1.0, ge=0.0)
    rest_length: float = Field(1.0, gt=0.0)
    coulomb_c: float = Field(0.5, ge=0.0)
    mass: float = Field(1.0, gt=0.0)
    dt_sim: float = Field(0.001, gt=0.0)
    frames: int = Field(5, ge=1)
    stride: int = Field(100, ge=1)
    edge_prob: float = Field(0.2, ge=0.0, le=1.0)
    box: float = Field(2.0, gt=0.0)
    velocity_scale: float = Field(0.5, ge=0.0)
    seed: int = 0


class ModelConfig(BaseModel):
    hidden: int = Field(16, ge=1)
    horizon: int = Field(5, ge=1)
    layers: int = Field(3, ge=1)
    eta: float = Field(0.5, gt=0.0, lt=1.0)
    num_heads: int = Field(1, ge=1)
    n_types: int = Field(2, ge=1)
    feature_dim: int = Field(2, ge=0)
    edge_dim: int = Field(2, ge=0)
    tie_steps: bool = False
    layers_per_step: int = Field(1, ge=1)
    attention: bool = True
    pairwise_mode: str = "learned"
    fixed_psi: float = Field(0.5, gt=0.0, lt=1.0)
    strict_eq9: bool = False
    paper_literal_encoder: bool = False
    decoder_mode: str = "parallel"
    aggr: str = "sum"
    zero_init_heads: bool = True
    parallel_decode: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check_choices(self) -> "ModelConfig":
        if self.hidden % self.num_heads != 0:
            raise ValueError(f"hidden={self.hidden} is not divisible by num_heads={self.num_heads}")
        if self.pairwise_mode not in ("learned", "fixed"):
            raise ValueError(f"pairwise_mode must be learned|fixed, got {self.pairwise_mode}")
        if self.decoder_mode not in ("parallel", "recurrent", "mlp_add", "mlp_concat"):
            raise ValueError(f"decoder_mode must be parallel|recurrent|mlp_add|mlp_concat, got {self.decoder_mode}")
        if self.aggr not in ("sum", "mean"):
            raise ValueError(f"aggr must be sum|mean, got {self.aggr}")
        return self


class TrainConfig(BaseModel):
    lr: float = Field(5e-4, ge=0.0)
    weight_decay: float = Field(1e-15, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    epochs: int = Field(100, ge=1)
    patience: int = Field(50, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: int = 0


SECTIONS: Dict[str, Any] = {"sim": SimConfig, "model": ModelConfig, "train": TrainConfig}


def get_seed(explicit: Optional[int] = None, flat: Optional[Dict[str, str]] = None) -> int:
    """--seed, then `run.seed` from a config file, then PAINET_SEED, then 0."""
    if explicit is not None:
        return explicit
    if flat and "run.seed" in flat:
        try:
            return int(flat["run.seed"])
        except ValueError:
            raise ConfigError(f"run.seed must be an integer, got '{flat['run.seed']}'")
    env_seed = os.getenv("PAINET_SEED")
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError(f"PAINET_SEED must be an integer, got '{env_seed}'")
    return DEFAULT_SEED


def parse_config_lines(lines: List[str], source: str = "<config>") -> Dict[str, str]:
    """Parse flat dotted key=value text; later keys win."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value.strip()
    return values


def load_config_file(path: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return parse_config_lines(f.readlines(), source=path)


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    return parse_config_lines(pairs or [], source="--set")


def _coerce(value: str) -> Any:
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    return value


def build_section(name: str, flat: Dict[str, str], **explicit: Any) -> Any:
    """Validate the `name.*` keys of a flat config plus explicit flag values."""
    schema = SECTIONS[name]
    raw: Dict[str, Any] = {}
    prefix = f"{name}."
    for key, value in flat.items():
        if key.startswith(prefix):
            field = key[len(prefix):]
            if field not in schema.model_fields:
                raise ConfigError(f"Unknown config key '{key}'")
            raw[field] = _coerce(value)
    raw.update({k: v for k, v in explicit.items() if v is not None})
    try:
        return schema(**raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid {name} config: {e}")


def flatten_sections(**sections: BaseModel) -> Dict[str, str]:
    flat: Dict[str, str] = {}
    for name, section in sections.items():
        for field, value in section.model_dump().items():
            flat[f"{name}.{field}"] = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
    return flat


def save_run_snapshot(out_dir: str, flat: Dict[str, str], seed: int) -> None:
    """Write `config.resolved` (replayable with --config) and `seed`."""
    os.makedirs(out_dir, exist_ok=True)
    flat = {**flat, "run.seed": str(seed)}
    with open(os.path.join(out_dir, "config.resolved"), 'w', encoding='utf-8') as f:
        for key in sorted(flat):
            f.write(f"{key}={flat[key]}\n")
    with open(os.path.join(out_dir, "seed"), 'w', encoding='utf-8') as f:
        f.write(f"{seed}\n")
    logger.debug(f"Resolved config written to {out_dir}")
