# src/config.py
import dataclasses
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from src.errors import ConfigError
from src.kg_embed import KgTrainConfig
from src.metrics import DEFAULT_BEDROC_ALPHA, DEFAULT_FRACTIONS, DEFAULT_KS
from src.pseudo_labeler import ABLATION_STRATEGIES, PseudoConfig
from src.score_model import ScoreTrainConfig
from src.synth import INTERACTS, SynthConfig

# Load environment variables
load_dotenv()


class Config:
    """Environment defaults; none are required"""

    SEED = int(os.getenv('OTPL_SEED', '0'))
    OUT_DIR = os.getenv('OTPL_OUT_DIR', 'outputs')
    LOG_LEVEL = os.getenv('LOG_LEVEL')

    # Artifact names inside the output directory
    EMBEDDINGS_FILE = 'embeddings.tsv'
    TRIPLES_FILE = 'triples.tsv'
    HIDDEN_PAIRS_FILE = 'hidden_pairs.tsv'
    TRAIN_TRIPLES_FILE = 'train_triples.tsv'
    TEST_TRIPLES_FILE = 'test_triples.tsv'
    SCORE_MODEL_FILE = 'score_model.smp'
    SCORE_TRACE_FILE = 'score_trace.json'
    PSEUDO_LABELS_FILE = 'pseudo_labels.tsv'
    PSEUDO_SUMMARY_FILE = 'pseudo_summary.json'
    KG_MODEL_FILE = 'kg_model.kge'
    KG_TRACE_FILE = 'kg_trace.json'
    METRICS_FILE = 'metrics.json'
    ABLATION_FILE = 'ablation.json'
    SCREENING_SCORES_FILE = 'screening_scores.tsv'

    # Built from the synthetic data; stale once synth rewrites it
    DERIVED_FILES = (TRAIN_TRIPLES_FILE, TEST_TRIPLES_FILE, SCORE_MODEL_FILE, SCORE_TRACE_FILE, PSEUDO_LABELS_FILE,
                     PSEUDO_SUMMARY_FILE, KG_MODEL_FILE, KG_TRACE_FILE, METRICS_FILE, SCREENING_SCORES_FILE)


def stage_seed(global_seed: int, stage: str) -> int:
    """Independent per-stage seed derived from the global seed"""
    seq = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFF, zlib.crc32(stage.encode('utf-8'))])
    return int(seq.generate_state(1)[0])


@dataclass(frozen=True)
class PathsConfig:
    """Input overrides; unset inputs are read from out_dir under their fixed names"""

    out_dir: str = Config.OUT_DIR
    embeddings: Optional[str] = None
    triples: Optional[str] = None
    hidden_pairs: Optional[str] = None
    pseudo_labels: Optional[str] = None
    score_model: Optional[str] = None
    kg_model: Optional[str] = None
    screening_scores: Optional[str] = None


@dataclass(frozen=True)
class SplitConfig:
    relation: str = INTERACTS
    n_test: int = 100

    def __post_init__(self):
        if self.n_test < 0:
            raise ValueError("n_test must be non-negative")


LINK_PREDICTION = 'link_prediction'
SCREENING = 'screening'


@dataclass(frozen=True)
class EvalConfig:
    mode: str = LINK_PREDICTION
    ks: Tuple[int, ...] = DEFAULT_KS
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS
    bedroc_alpha: float = DEFAULT_BEDROC_ALPHA

    def __post_init__(self):
        if self.mode not in (LINK_PREDICTION, SCREENING):
            raise ValueError(f"mode must be {LINK_PREDICTION!r} or {SCREENING!r}")
        if not self.ks or min(self.ks) < 1:
            raise ValueError("ks must be positive integers")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")


ABLATE_PSEUDO = 'pseudo'
ABLATE_LOSS = 'loss'
ABLATE_RELATIONS = 'relations'


@dataclass(frozen=True)
class AblateConfig:
    kind: str = ABLATE_PSEUDO
    strategies: Tuple[str, ...] = ABLATION_STRATEGIES
    loss_kinds: Tuple[str, ...] = ('ot_kl', 'infonce')
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    family: str = 'toruse'
    workers: int = 1

    def __post_init__(self):
        if self.kind not in (ABLATE_PSEUDO, ABLATE_LOSS, ABLATE_RELATIONS):
            raise ValueError(f"kind must be one of {ABLATE_PSEUDO!r}, {ABLATE_LOSS!r}, {ABLATE_RELATIONS!r}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        unknown = set(self.strategies) - set(ABLATION_STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies {sorted(unknown)}")
        if self.workers < 1:
            raise ValueError("workers must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    score: ScoreTrainConfig = field(default_factory=ScoreTrainConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    kg: KgTrainConfig = field(default_factory=KgTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def path(self, name: str) -> str:
        return os.path.join(self.paths.out_dir, name)

    def input_path(self, key: str, default_name: str) -> str:
        return getattr(self.paths, key) or self.path(default_name)

    def with_seed(self, seed: int) -> 'RunConfig':
        return dataclasses.replace(self, seed=seed, synth=dataclasses.replace(self.synth, seed=stage_seed(seed, 'synth')),
                                   kg=dataclasses.replace(self.kg, seed=stage_seed(seed, 'kg-train')))

    def describe(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


SECTIONS = {
    'paths': PathsConfig,
    'synth': SynthConfig,
    'split': SplitConfig,
    'score': ScoreTrainConfig,
    'pseudo': PseudoConfig,
    'kg': KgTrainConfig,
    'eval': EvalConfig,
    'ablate': AblateConfig,
}

# Derived from the top-level seed; not settable per section.
DERIVED_KEYS = {('synth', 'seed'), ('kg', 'seed')}


def _type_name(hint) -> str:
    return getattr(hint, '__name__', str(hint))


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {type(value).__name__}", key)
        item = args[0] if args else Any
        return tuple(_coerce(v, item, f"{key}[{i}]") for i, v in enumerate(value))
    if hint is Any:
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    raise ConfigError(f"unsupported type {_type_name(hint)}", key)


def _field_name(cls, key: str) -> Optional[str]:
    names = {f.name for f in dataclasses.fields(cls)}
    if key in names:
        return key
    # Python keywords carry a trailing underscore (lambda -> lambda_).
    if f"{key}_" in names:
        return f"{key}_"
    return None


def _build_section(section: str, cls, raw: Dict[str, Any], overrides: Dict[str, Any]):
    if not isinstance(raw, dict):
        raise ConfigError("expected a table", section)
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in raw.items():
        dotted = f"{section}.{key}"
        name = _field_name(cls, key)
        if name is None:
            raise ConfigError("unknown key", dotted)
        if (section, name) in DERIVED_KEYS:
            raise ConfigError("derived from the top-level seed; set `seed` instead", dotted)
        kwargs[name] = _coerce(value, hints[name], dotted)
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), section)


def parse_run_config(data: Dict[str, Any], seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    """Validate a parsed TOML document; seed/out_dir override the file"""
    unknown = set(data) - set(SECTIONS) - {'seed'}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError("unknown key", key)
    if seed is None:
        if 'seed' not in data:
            raise ConfigError("missing required key", 'seed')
        seed = _coerce(data['seed'], int, 'seed')

    overrides = {
        'synth': {'seed': stage_seed(seed, 'synth')},
        'kg': {'seed': stage_seed(seed, 'kg-train')},
        'paths': {'out_dir': out_dir} if out_dir else {},
    }
    sections = {name: _build_section(name, cls, data.get(name, {}), overrides.get(name, {}))
                for name, cls in SECTIONS.items()}
    return RunConfig(seed=seed, **sections)


def load_run_config(path: str, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")
    return parse_run_config(data, seed, out_dir)
