"""Run configuration: one validated object shared by every CLI command."""

from __future__ import annotations

import importlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .extraction import ModelSpec
from .gateway import EndpointConfig, LLMGateway

EXIT_OK = 0
EXIT_QUALITY = 1
EXIT_CONFIG = 2
EXIT_MISSING_STAGE = 3
EXIT_LOSS = 4

STAGE_NAMES = ("ingest", "extract-expert", "generate", "annotate", "irr", "evaluate", "report")


class ConfigError(ValueError):
    pass


class MissingStageError(RuntimeError):
    def __init__(self, name: str, path: Path):
        self.stage = name
        self.path = path
        super().__init__(f"stage {name!r} output missing: {path} (run that stage first)")


@dataclass
class RunConfig:
    work_dir: Path = Path("work")
    cache_dir: Path = Path("cache")
    export_path: Path | None = None
    export_schema: str = "generic"
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    models: dict[str, dict[str, Any]] = field(default_factory=dict)
    generation_models: list[str] = field(default_factory=list)
    annotator_model: str | None = None
    chain_model: str | None = None
    stage_toggles: dict[str, bool] = field(default_factory=dict)
    annotation_temperature: float = 0.0
    chain_temperature: float = 0.0
    generation_temperature: float = 1.0
    max_input_tokens: int = 60000
    max_output_tokens: int = 4096
    annotation_max_output_tokens: int = 64
    epsilon: float = 1e-6
    kl_direction: str = "human_to_model"
    collapse_pairs_to_set: bool = False
    parallelism: int = 4
    sample_fraction: float = 1.0
    sample_seed: int = 0
    decision_filter: list[str] = field(default_factory=lambda: ["rejected"])
    venue_years: tuple[int | None, int | None] = (None, None)
    loss_threshold: float = 0.05
    irr_floor: float = 0.0
    embedding_backend: str | None = None

    @classmethod
    def from_file(cls, path: Path | str) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=Path(path).resolve().parent)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kwargs: dict[str, Any] = dict(data)

        def resolve(p: Any) -> Path:
            path = Path(p)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return path

        for key in ("work_dir", "cache_dir"):
            if key in kwargs:
                kwargs[key] = resolve(kwargs[key])
        if kwargs.get("export_path"):
            kwargs["export_path"] = resolve(kwargs["export_path"])
        if "endpoints" in kwargs:
            endpoints: dict[str, EndpointConfig] = {}
            for endpoint_id, raw in kwargs["endpoints"].items():
                try:
                    endpoints[endpoint_id] = EndpointConfig(endpoint_id=endpoint_id, **raw)
                except TypeError as exc:
                    raise ConfigError(f"endpoint {endpoint_id!r}: {exc}") from exc
            kwargs["endpoints"] = endpoints
        if "venue_years" in kwargs:
            lo, hi = kwargs["venue_years"]
            kwargs["venue_years"] = (lo, hi)
        return cls(**kwargs)

    def validate(self, require_llm: bool = False) -> None:
        problems: list[str] = []
        if not 0 < self.sample_fraction <= 1:
            problems.append(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        if self.epsilon <= 0:
            problems.append("epsilon must be positive")
        if self.kl_direction not in ("human_to_model", "model_to_human"):
            problems.append(f"bad kl_direction {self.kl_direction!r}")
        if self.parallelism < 1:
            problems.append("parallelism must be >= 1")
        if not 0 <= self.loss_threshold <= 1:
            problems.append("loss_threshold must be in [0, 1]")
        if self.export_path is not None and not self.export_path.exists():
            problems.append(f"export_path does not exist: {self.export_path}")
        for stage in self.stage_toggles:
            if stage not in STAGE_NAMES:
                problems.append(f"unknown stage in stage_toggles: {stage!r}")
        for model_id, entry in self.models.items():
            endpoint = entry.get("endpoint")
            if not endpoint:
                problems.append(f"model {model_id!r} has no endpoint")
            elif endpoint not in self.endpoints:
                problems.append(f"model {model_id!r} references unknown endpoint {endpoint!r}")
        if require_llm:
            for role, model_id in (
                ("annotator_model", self.annotator_model),
                ("chain_model", self.chain_model),
            ):
                if model_id is not None and model_id not in self.models:
                    problems.append(f"{role} {model_id!r} is not a configured model")
            for model_id in self.generation_models:
                if model_id not in self.models:
                    problems.append(f"generation model {model_id!r} is not a configured model")
        if problems:
            raise ConfigError("; ".join(problems))

    def stage_enabled(self, name: str) -> bool:
        return self.stage_toggles.get(name, True)

    def model_spec(self, model_id: str, purpose: str) -> ModelSpec:
        entry = self.models.get(model_id)
        if entry is None:
            raise ConfigError(f"model {model_id!r} is not configured")
        endpoint = entry.get("endpoint")
        if endpoint not in self.endpoints:
            raise ConfigError(f"model {model_id!r} references unknown endpoint {endpoint!r}")
        temperature = {
            "generation": self.generation_temperature,
            "annotation": self.annotation_temperature,
            "chain": self.chain_temperature,
        }[purpose]
        if "temperature" in entry:
            temperature = entry["temperature"]
        max_output = entry.get(
            "max_output_tokens",
            self.annotation_max_output_tokens if purpose == "annotation" else self.max_output_tokens,
        )
        return ModelSpec(
            endpoint_id=endpoint,
            model_id=model_id,
            temperature=temperature,
            max_output_tokens=max_output,
        )

    def gateway(self, transport=None) -> LLMGateway:
        return LLMGateway(self.endpoints, self.cache_dir, transport=transport)

    def load_embedding_backend(self):
        """Instantiate the optional embedding backend from a dotted path."""
        if not self.embedding_backend:
            return None
        module_name, _, attr = self.embedding_backend.partition(":")
        if not attr:
            raise ConfigError(
                f"embedding_backend must look like 'pkg.module:factory', got {self.embedding_backend!r}"
            )
        try:
            factory = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load embedding backend {self.embedding_backend!r}: {exc}") from exc
        return factory()

    def stage_file(self, filename: str) -> Path:
        return self.work_dir / filename

    def require_stage(self, stage: str, filename: str) -> Path:
        path = self.stage_file(filename)
        if not path.exists():
            raise MissingStageError(stage, path)
        return path
