import copy
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .errors import ConfigError
from .motifs import SAMPLING_CHOICES
from .utils import atomic_write_text

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataSettings:
    interactions: Dict[int, str] = field(default_factory=dict)
    overlap: Optional[str] = None
    overlap_domains: Tuple[int, int] = (0, 1)
    output_dir: str = "./runs"


@dataclass(frozen=True)
class MotifSettings:
    kind: str = "butterfly"
    walk_length: int = 6
    budget: int = 8
    lambda_f: float = 100.0
    merge_hyperedges: bool = False
    cover_members: bool = True


@dataclass(frozen=True)
class ModelSettings:
    d: int = 32
    heads: int = 4
    hypergraph_layers: int = 4
    transformer_layers: int = 2
    use_hypergraph: bool = True
    transformer: str = "mode"


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.5
    lambda1: float = 0.5
    lr: float = 0.001
    optimizer: str = "sgd"
    batch_size: int = 64
    negatives: int = 4
    pretrain_epochs: int = 20
    tune_epochs: int = 20
    patience: int = 5
    denominator: str = "with_pos"
    prompt_mode: str = "elementwise"
    paradigm: str = "ppt"
    oracle_epochs: int = 20
    oracle_lr: float = 0.01


@dataclass(frozen=True)
class EvalSettings:
    protocol: str = "sampled"
    negatives: int = 999
    k: int = 10
    cold_fraction: float = 0.2


SECTIONS = {
    "data": DataSettings,
    "motifs": MotifSettings,
    "model": ModelSettings,
    "train": TrainConfig,
    "eval": EvalSettings,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    data: DataSettings = field(default_factory=DataSettings)
    motifs: MotifSettings = field(default_factory=MotifSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    threads: int = 1
    debug: bool = False

    def __post_init__(self):
        _validate(self)

    def to_dict(self) -> Dict[str, Any]:
        raw = asdict(self)
        raw["data"]["overlap_domains"] = list(self.data.overlap_domains)
        raw["data"]["interactions"] = {int(k): v for k, v in sorted(self.data.interactions.items())}
        return raw

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "PipelineConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a mapping")
        unknown = set(raw) - set(SECTIONS) - {"seed", "threads", "debug"}
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
        if raw.get("seed") is None:
            raise ConfigError("a seed is mandatory")

        sections = {}
        for name, section_cls in SECTIONS.items():
            values = dict(raw.get(name) or {})
            known = {f.name for f in fields(section_cls)}
            extra = set(values) - known
            if extra:
                raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(extra))}")
            if name == "data":
                if "interactions" in values:
                    values["interactions"] = _domain_paths(values["interactions"])
                if "overlap_domains" in values:
                    values["overlap_domains"] = tuple(int(d) for d in values["overlap_domains"])
            try:
                sections[name] = section_cls(**values)
            except TypeError as e:
                raise ConfigError(f"bad '{name}' section: {e}") from None

        try:
            seed = int(raw["seed"])
            threads = int(raw.get("threads", 1))
        except (TypeError, ValueError):
            raise ConfigError("seed and threads must be integers") from None
        return cls(seed=seed, threads=threads, debug=bool(raw.get("debug", False)), **sections)

    def with_overrides(self, **top_level) -> "PipelineConfig":
        raw = self.to_dict()
        raw.update({k: v for k, v in top_level.items() if v is not None})
        return PipelineConfig.from_dict(raw)


def _domain_paths(value: Any) -> Dict[int, str]:
    if isinstance(value, list):
        value = dict(enumerate(value))
    if not isinstance(value, dict):
        raise ConfigError("data.interactions must map domain ids to files")
    try:
        return {int(k): str(v) for k, v in value.items()}
    except (TypeError, ValueError):
        raise ConfigError("data.interactions keys must be integer domain ids") from None


def _check(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def _validate(cfg: PipelineConfig):
    _check(cfg.seed >= 0, f"seed must be non-negative, got {cfg.seed}")
    _check(cfg.threads >= 1, f"threads must be at least 1, got {cfg.threads}")

    a, b = cfg.data.overlap_domains
    _check(a != b, "overlap_domains must name two different domains")

    m = cfg.motifs
    _check(m.kind in SAMPLING_CHOICES, f"motifs.kind must be one of {SAMPLING_CHOICES}, got {m.kind!r}")
    _check(m.walk_length >= 2, f"motifs.walk_length must be at least 2, got {m.walk_length}")
    _check(m.budget >= 1, f"motifs.budget must be positive, got {m.budget}")
    _check(m.lambda_f > 0, f"motifs.lambda_f must be positive, got {m.lambda_f}")

    md = cfg.model
    _check(md.d >= 1, f"model.d must be positive, got {md.d}")
    _check(md.heads >= 1 and md.d % md.heads == 0, f"model.heads ({md.heads}) must divide model.d ({md.d})")
    _check(md.hypergraph_layers >= 0, "model.hypergraph_layers must be non-negative")
    _check(md.transformer_layers >= 1, "model.transformer_layers must be at least 1")
    _check(md.transformer in ("mode", "vanilla", "none"), f"unknown model.transformer {md.transformer!r}")

    t = cfg.train
    _check(t.tau > 0, f"train.tau must be positive, got {t.tau}")
    _check(0.0 <= t.lambda1 <= 1.0, f"train.lambda1 must lie in [0, 1], got {t.lambda1}")
    _check(t.lr >= 0, f"train.lr must be non-negative, got {t.lr}")
    _check(t.optimizer in ("sgd", "adam"), f"unknown train.optimizer {t.optimizer!r}")
    _check(t.batch_size >= 2, f"train.batch_size must be at least 2, got {t.batch_size}")
    _check(t.negatives >= 1, f"train.negatives must be positive, got {t.negatives}")
    _check(t.pretrain_epochs >= 0 and t.tune_epochs >= 0, "epoch counts must be non-negative")
    _check(t.patience >= 1, f"train.patience must be positive, got {t.patience}")
    _check(t.denominator in ("with_pos", "without_pos"), f"unknown train.denominator {t.denominator!r}")
    _check(t.prompt_mode in ("elementwise", "matrix", "attention"), f"unknown train.prompt_mode {t.prompt_mode!r}")
    _check(t.paradigm in ("ppt", "pf"), f"unknown train.paradigm {t.paradigm!r}")
    _check(t.oracle_epochs >= 0 and t.oracle_lr >= 0, "oracle settings must be non-negative")

    e = cfg.eval
    _check(e.protocol in ("sampled", "full"), f"unknown eval.protocol {e.protocol!r}")
    _check(e.negatives >= 1, f"eval.negatives must be positive, got {e.negatives}")
    _check(e.k >= 1, f"eval.k must be positive, got {e.k}")
    _check(0.0 <= e.cold_fraction <= 0.5, f"eval.cold_fraction must lie in [0, 0.5], got {e.cold_fraction}")


CONFIG_ENV = "MOTIF_CDR_CONFIG"


def default_config_path() -> Path:
    """`$MOTIF_CDR_CONFIG`, then `./config.yaml` when present, then the per-user config directory."""
    if os.environ.get(CONFIG_ENV):
        return Path(os.environ[CONFIG_ENV])
    local = Path.cwd() / "config.yaml"
    if local.exists():
        return local
    if sys.platform == "win32":
        root = Path(os.environ.get("APPDATA") or Path.home() / "AppData" / "Roaming")
    else:
        root = Path(os.environ.get("XDG_CONFIG_HOME") or Path.home() / ".config")
    return root / "motif-cdr" / "config.yaml"


class ConfigManager:
    """YAML pipeline configs: one file per run, data paths relative to that file."""

    DEFAULT_CONFIG = {
        "seed": 7,
        "threads": 1,
        "debug": False,
        "data": {
            "interactions": {0: "./data/domain0.tsv", 1: "./data/domain1.tsv"},
            "overlap": "./data/overlap.tsv",
            "overlap_domains": [0, 1],
            "output_dir": "./runs",
        },
        "motifs": asdict(MotifSettings()),
        "model": asdict(ModelSettings()),
        "train": asdict(TrainConfig()),
        "eval": asdict(EvalSettings()),
    }

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self.config_path = Path(config_path) if config_path else default_config_path()

    def load_raw(self) -> Dict[str, Any]:
        """Read the YAML mapping, creating the default file if it is missing."""
        if not self.config_path.exists():
            self._create_default_config()
            return copy.deepcopy(self.DEFAULT_CONFIG)
        try:
            raw = yaml.safe_load(self.config_path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {self.config_path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{self.config_path} must contain a mapping")
        if raw.get("seed") is None:
            raise ConfigError(f"{self.config_path} has no seed; seeds are mandatory")
        return raw

    def load(self) -> PipelineConfig:
        raw = self.load_raw()
        data = dict(raw.get("data") or {})
        base = self.config_path.parent
        if "interactions" in data:
            data["interactions"] = {
                k: self._resolve(v, base) for k, v in _domain_paths(data["interactions"]).items()
            }
        for key in ("overlap", "output_dir"):
            if data.get(key):
                data[key] = self._resolve(data[key], base)
        raw["data"] = data
        return self.parse(raw)

    @staticmethod
    def _resolve(value: str, base: Path) -> str:
        """Expand ${VARS}; relative paths are taken relative to the config file."""
        path = Path(os.path.expandvars(str(value)))
        return str(path if path.is_absolute() else base / path)

    @staticmethod
    def parse(raw: Dict[str, Any]) -> PipelineConfig:
        return PipelineConfig.from_dict(raw)

    @staticmethod
    def dump(config: PipelineConfig) -> str:
        return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=False)

    def save(self, config: PipelineConfig) -> Path:
        return atomic_write_text(self.config_path, self.dump(config))

    def _create_default_config(self):
        """Write DEFAULT_CONFIG; its data paths point at ./data next to the new file."""
        atomic_write_text(self.config_path,
                          yaml.safe_dump(self.DEFAULT_CONFIG, sort_keys=False, default_flow_style=False))
        logger.info(f"Created default config at {self.config_path}")
        logger.info("Edit the data section to point at your interaction files")
