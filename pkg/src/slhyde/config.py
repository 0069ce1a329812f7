"""Run configuration: a YAML file with ${ENV_VAR} interpolation, flag overrides,
and a resolved snapshot written next to every run's outputs."""
from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .embed import MockEmbedderClient, RemoteEmbedderClient
from .errors import ValidationError
from .hyde import FusionConfig
from .textgen import MockGeneratorClient, RemoteGeneratorClient, TEMPLATE_FILES, load_template
from .util import atomic_write_text, derive_seed, dump_json

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value):
    if isinstance(value, str):
        def _sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ValidationError(f"environment variable {name!r} referenced in config is not set")
            return os.environ[name]

        return _ENV_RE.sub(_sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


@dataclass
class DatasetPaths:
    name: str = "dataset"
    corpus: str = ""
    queries: str = ""
    qrels: str = ""
    template: str | None = None  # per-dataset override of fusion.template


@dataclass
class GeneratorSettings:
    endpoint: str = ""
    model: str = ""
    api_key: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    backoff: float = 1.0


@dataclass
class EmbedderSettings:
    endpoint: str = ""
    model: str = ""
    api_key: str = ""
    dim: int = 256
    truncate_chars: int = 1024
    batch_size: int = 64
    timeout: float = 30.0
    max_retries: int = 2
    backoff: float = 1.0


@dataclass
class FusionSettings:
    strategy: str = "mean_pool"
    n: int | None = None
    template: str = "Q2P"


@dataclass
class SelfLearnSettings:
    candidates_per_query: int = 5
    negatives: int = 7
    tau: float = 0.02
    rank_cutoff: int = 100
    rank_scoring: str = "candidate"
    reuse_pseudo: bool = True
    sample_docs: int | None = None
    max_skip_fraction: float = 0.5


@dataclass
class EvalSettings:
    k_values: list[int] = field(default_factory=lambda: [10, 100])
    primary_k: int = 10
    repeats: int = 5
    pairing: str = "query"
    compare_to_dense: bool = True


@dataclass
class AnnSettings:
    graph_degree: int = 16
    build_breadth: int = 200
    search_breadth: int = 64


@dataclass
class Bm25Settings:
    k1: float = 0.9
    b: float = 0.4
    tokenizer: str = "cjk"


@dataclass
class BenchmarkSettings:
    raw_texts: str = ""
    raw_queries: str = ""
    med_threshold: float | None = None
    rel_threshold: float | None = None
    bm25_top_k: int = 20
    rerank_top_m: int = 3
    max_review_fraction: float = 0.25


@dataclass
class SamplingSettings:
    temperature: float = 0.7
    max_output_tokens: int = 512


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    clients: str = "mock"  # mock | remote
    parallelism: int = 1
    dataset: DatasetPaths = field(default_factory=DatasetPaths)
    datasets: list[DatasetPaths] = field(default_factory=list)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    embedder: EmbedderSettings = field(default_factory=EmbedderSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    selflearn: SelfLearnSettings = field(default_factory=SelfLearnSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ann: AnnSettings = field(default_factory=AnnSettings)
    bm25: Bm25Settings = field(default_factory=Bm25Settings)
    benchmark: BenchmarkSettings = field(default_factory=BenchmarkSettings)
    sampling: SamplingSettings = field(default_factory=SamplingSettings)

    def all_datasets(self) -> list[DatasetPaths]:
        if self.datasets:
            return self.datasets
        return [self.dataset]

    def validate(self) -> None:
        if self.clients not in ("mock", "remote"):
            raise ValidationError(f"clients must be 'mock' or 'remote', got {self.clients!r}")
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")
        if self.fusion.template not in TEMPLATE_FILES:
            raise ValidationError(f"unknown fusion template {self.fusion.template!r}")
        FusionConfig(strategy=self.fusion.strategy, n=self.fusion.n, template=self.fusion.template)
        for dataset in self.all_datasets():
            if dataset.template is not None and dataset.template not in TEMPLATE_FILES:
                raise ValidationError(
                    f"unknown template {dataset.template!r} for dataset {dataset.name!r}"
                )
        if self.eval.primary_k < 1 or self.eval.repeats < 1:
            raise ValidationError("eval.primary_k and eval.repeats must be >= 1")
        if self.selflearn.tau <= 0:
            raise ValidationError("selflearn.tau must be > 0")
        if self.clients == "remote":
            if not self.generator.endpoint or not self.embedder.endpoint:
                raise ValidationError("remote clients require generator.endpoint and embedder.endpoint")


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {path!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys in {path!r}: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    """Load YAML config (optional), interpolate ${ENV}, apply flag overrides, validate."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text("utf-8"))
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValidationError("config root must be a mapping")
        data = _interpolate(loaded)

    sections = {
        "dataset": DatasetPaths,
        "generator": GeneratorSettings,
        "embedder": EmbedderSettings,
        "fusion": FusionSettings,
        "selflearn": SelfLearnSettings,
        "eval": EvalSettings,
        "ann": AnnSettings,
        "bm25": Bm25Settings,
        "benchmark": BenchmarkSettings,
        "sampling": SamplingSettings,
    }
    kwargs: dict = {}
    for key, value in data.items():
        if key in sections:
            kwargs[key] = _build_section(sections[key], value, key)
        elif key == "datasets":
            if not isinstance(value, list):
                raise ValidationError("config key 'datasets' must be a list")
            kwargs["datasets"] = [
                _build_section(DatasetPaths, entry, f"datasets[{i}]") for i, entry in enumerate(value)
            ]
        elif key in {"seed", "out_dir", "clients", "parallelism"}:
            kwargs[key] = value
        else:
            raise ValidationError(f"unknown top-level config key {key!r}")
    config = RunConfig(**kwargs)
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    config.validate()
    return config


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def write_resolved_config(config: RunConfig, out_dir: str | Path) -> None:
    """Snapshot everything needed to re-execute: resolved config plus the
    prompt-template bodies in use (their text is the version)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    redacted = config_to_dict(config)
    for section in ("generator", "embedder"):
        if redacted[section].get("api_key"):
            redacted[section]["api_key"] = "<redacted>"
    atomic_write_text(
        out_dir / "resolved_config.yaml",
        yaml.safe_dump(redacted, sort_keys=True, allow_unicode=True),
    )
    manifest = {name: load_template(name).body for name in sorted(TEMPLATE_FILES)}
    atomic_write_text(out_dir / "prompt_templates.json", dump_json(manifest))


def build_generator_client(config: RunConfig):
    if config.clients == "mock":
        return MockGeneratorClient(seed=derive_seed(config.seed, "generator"))
    return RemoteGeneratorClient(
        endpoint=config.generator.endpoint,
        model=config.generator.model,
        api_key=config.generator.api_key or None,
        timeout=config.generator.timeout,
        max_retries=config.generator.max_retries,
        backoff=config.generator.backoff,
    )


def build_embedder_client(config: RunConfig):
    if config.clients == "mock":
        return MockEmbedderClient(
            dim=config.embedder.dim, truncate_chars=config.embedder.truncate_chars
        )
    return RemoteEmbedderClient(
        endpoint=config.embedder.endpoint,
        model=config.embedder.model,
        dim=config.embedder.dim,
        api_key=config.embedder.api_key or None,
        timeout=config.embedder.timeout,
        max_retries=config.embedder.max_retries,
        backoff=config.embedder.backoff,
        batch_size=config.embedder.batch_size,
        truncate_chars=config.embedder.truncate_chars,
    )
