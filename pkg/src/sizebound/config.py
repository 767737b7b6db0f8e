"""Run configuration: schema, loader, validation.

Configs are JSON; TOML is accepted too when the interpreter ships tomllib
(Python 3.11+). Validation errors name the offending key and value rather
than dumping a traceback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import DEFAULT_LENGTHS, DEFAULT_SAMPLES_PER_LENGTH
from .errors import ConfigError
from .model_client import ModelSpec, SimulatedModel, SimulatorLink
from .pairwise import DEFAULT_TAU_GRID

MIN_REFERENCES_FOR_FIT = 3


@dataclass(frozen=True)
class CorpusConfig:
    manifest: str | None = None   # None selects the built-in manifest
    lengths: tuple[int, ...] = DEFAULT_LENGTHS
    samples_per_length: int = DEFAULT_SAMPLES_PER_LENGTH
    seed: int = 1234


@dataclass(frozen=True)
class SimulatorConfig:
    pseudo_size: float
    noise_seed: int = 0
    # None means "spread defaults over source texts" once the corpus is known.
    popularity: Mapping[str, float] | None = None
    link: SimulatorLink = SimulatorLink()


@dataclass(frozen=True)
class ModelEntry:
    model_id: str
    role: str = "target"
    architecture: str = "unknown"
    known_size: float | None = None
    endpoint: str | None = None
    credential_ref: str | None = None
    reasoning_disabled: bool = True
    simulator: SimulatorConfig | None = None
    extra_body: Mapping[str, object] | None = None

    def to_spec(self, popularity: Mapping[str, float]) -> ModelSpec:
        """Materialize a ModelSpec, resolving deferred simulator popularity."""
        simulator = None
        if self.simulator is not None:
            weights = self.simulator.popularity
            if weights is None:
                weights = popularity
            simulator = SimulatedModel(
                pseudo_size=self.simulator.pseudo_size,
                popularity_weights=dict(weights),
                noise_seed=self.simulator.noise_seed,
                link=self.simulator.link,
            )
        return ModelSpec(
            model_id=self.model_id,
            role=self.role,
            architecture=self.architecture,
            known_size=self.known_size,
            endpoint=self.endpoint,
            credential_ref=self.credential_ref,
            reasoning_disabled=self.reasoning_disabled,
            simulator=simulator,
            extra_body=self.extra_body,
        )


@dataclass(frozen=True)
class InferenceSettings:
    alpha_sig: float = 0.05
    exact_threshold: int = 20
    resamples: int = 100_000
    pca_tol: float = 1e-10
    pca_max_iter: int = 10_000
    safety_factor: float = 0.5
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID
    agreement_bar: float = 0.80
    permutation_seed: int = 0


@dataclass(frozen=True)
class TransportConfig:
    requests_per_second: float = 4.0
    burst: float = 8.0
    max_in_flight: int = 4
    timeout: float = 60.0
    max_attempts: int = 5


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = CorpusConfig()
    models: tuple[ModelEntry, ...] = ()
    inference: InferenceSettings = InferenceSettings()
    transport: TransportConfig = TransportConfig()
    output_dir: str = "out"
    cache_path: str | None = None

    def reference_entries(self) -> list[ModelEntry]:
        return [m for m in self.models if m.role == "reference"]

    def target_entries(self) -> list[ModelEntry]:
        return [m for m in self.models if m.role == "target"]


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

def _expect(obj: Mapping, key: str, types, where: str, default=..., required=False):
    if key not in obj:
        if required:
            raise ConfigError(f"{where}: missing required key '{key}'")
        return default
    value = obj[key]
    if types is not None and not isinstance(value, types):
        names = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(
            f"{where}: key '{key}' must be {names}, got {type(value).__name__} ({value!r})"
        )
    return value


def _reject_unknown(obj: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _parse_corpus(obj: Mapping) -> CorpusConfig:
    _reject_unknown(obj, {"manifest", "lengths", "samples_per_length", "seed"}, "corpus")
    lengths = _expect(obj, "lengths", list, "corpus", default=list(DEFAULT_LENGTHS))
    for l in lengths:
        if not isinstance(l, int) or l < 1:
            raise ConfigError(f"corpus: lengths must be positive integers, got {l!r}")
    samples = _expect(obj, "samples_per_length", int, "corpus",
                      default=DEFAULT_SAMPLES_PER_LENGTH)
    if samples < 1:
        raise ConfigError(f"corpus: samples_per_length must be >= 1, got {samples}")
    return CorpusConfig(
        manifest=_expect(obj, "manifest", str, "corpus", default=None),
        lengths=tuple(lengths),
        samples_per_length=samples,
        seed=_expect(obj, "seed", int, "corpus", default=1234),
    )


def _parse_link(obj: Mapping, where: str) -> SimulatorLink:
    _reject_unknown(obj, {"size_coef", "length_coef", "popularity_coef", "intercept"}, where)
    defaults = SimulatorLink()
    return SimulatorLink(
        size_coef=float(_expect(obj, "size_coef", (int, float), where,
                                default=defaults.size_coef)),
        length_coef=float(_expect(obj, "length_coef", (int, float), where,
                                  default=defaults.length_coef)),
        popularity_coef=float(_expect(obj, "popularity_coef", (int, float), where,
                                      default=defaults.popularity_coef)),
        intercept=float(_expect(obj, "intercept", (int, float), where,
                                default=defaults.intercept)),
    )


def _parse_simulator(obj: Mapping, where: str) -> SimulatorConfig:
    _reject_unknown(obj, {"pseudo_size", "noise_seed", "popularity", "link"}, where)
    pseudo = _expect(obj, "pseudo_size", (int, float), where, required=True)
    if pseudo <= 0:
        raise ConfigError(f"{where}: pseudo_size must be > 0, got {pseudo}")
    popularity = _expect(obj, "popularity", dict, where, default=None)
    if popularity is not None:
        for t, w in popularity.items():
            if not isinstance(w, (int, float)) or not 0.0 <= w <= 1.0:
                raise ConfigError(f"{where}: popularity['{t}'] must be in [0, 1], got {w!r}")
        popularity = {str(t): float(w) for t, w in popularity.items()}
    link_obj = _expect(obj, "link", dict, where, default=None)
    return SimulatorConfig(
        pseudo_size=float(pseudo),
        noise_seed=_expect(obj, "noise_seed", int, where, default=0),
        popularity=popularity,
        link=_parse_link(link_obj, f"{where}.link") if link_obj is not None else SimulatorLink(),
    )


def _parse_model(obj: Mapping, index: int) -> ModelEntry:
    where = f"models[{index}]"
    _reject_unknown(obj, {"model_id", "role", "architecture", "known_size", "endpoint",
                          "credential_ref", "reasoning_disabled", "simulator",
                          "extra_body"}, where)
    model_id = _expect(obj, "model_id", str, where, required=True)
    where = f"models[{index}] ({model_id})"
    role = _expect(obj, "role", str, where, default="target")
    if role not in ("reference", "target"):
        raise ConfigError(f"{where}: role must be 'reference' or 'target', got {role!r}")
    architecture = _expect(obj, "architecture", str, where, default="unknown")
    if architecture not in ("dense", "moe", "unknown"):
        raise ConfigError(
            f"{where}: architecture must be 'dense', 'moe' or 'unknown', got {architecture!r}"
        )
    known_size = _expect(obj, "known_size", (int, float), where, default=None)
    if known_size is not None and known_size <= 0:
        raise ConfigError(f"{where}: known_size must be > 0, got {known_size}")
    if role == "reference":
        if known_size is None:
            raise ConfigError(f"{where}: reference models need known_size")
        if architecture != "dense":
            raise ConfigError(f"{where}: reference models must be dense")
    sim_obj = _expect(obj, "simulator", dict, where, default=None)
    endpoint = _expect(obj, "endpoint", str, where, default=None)
    if sim_obj is None and endpoint is None:
        raise ConfigError(f"{where}: needs either 'endpoint' or 'simulator'")
    if sim_obj is not None and endpoint is not None:
        raise ConfigError(f"{where}: 'endpoint' and 'simulator' are mutually exclusive")
    credential_ref = _expect(obj, "credential_ref", str, where, default=None)
    if endpoint is not None and not credential_ref:
        raise ConfigError(f"{where}: live endpoints need credential_ref "
                          "(the environment variable holding the key)")
    return ModelEntry(
        model_id=model_id,
        role=role,
        architecture=architecture,
        known_size=float(known_size) if known_size is not None else None,
        endpoint=endpoint,
        credential_ref=credential_ref,
        reasoning_disabled=_expect(obj, "reasoning_disabled", bool, where, default=True),
        simulator=_parse_simulator(sim_obj, f"{where}.simulator") if sim_obj else None,
        extra_body=_expect(obj, "extra_body", dict, where, default=None),
    )


def _parse_inference(obj: Mapping) -> InferenceSettings:
    _reject_unknown(obj, {"alpha_sig", "exact_threshold", "resamples", "pca_tol",
                          "pca_max_iter", "safety_factor", "tau_grid",
                          "agreement_bar", "permutation_seed"}, "inference")
    d = InferenceSettings()
    alpha = float(_expect(obj, "alpha_sig", (int, float), "inference", default=d.alpha_sig))
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"inference: alpha_sig must be in (0, 1), got {alpha}")
    resamples = _expect(obj, "resamples", int, "inference", default=d.resamples)
    if resamples < 1:
        raise ConfigError(f"inference: resamples must be >= 1, got {resamples}")
    safety = float(_expect(obj, "safety_factor", (int, float), "inference",
                           default=d.safety_factor))
    if not 0.0 < safety <= 1.0:
        raise ConfigError(f"inference: safety_factor must be in (0, 1], got {safety}")
    tau_grid = _expect(obj, "tau_grid", list, "inference", default=list(d.tau_grid))
    for t in tau_grid:
        if not isinstance(t, (int, float)) or t < 0:
            raise ConfigError(f"inference: tau_grid entries must be >= 0, got {t!r}")
    return InferenceSettings(
        alpha_sig=alpha,
        exact_threshold=_expect(obj, "exact_threshold", int, "inference",
                                default=d.exact_threshold),
        resamples=resamples,
        pca_tol=float(_expect(obj, "pca_tol", (int, float), "inference", default=d.pca_tol)),
        pca_max_iter=_expect(obj, "pca_max_iter", int, "inference", default=d.pca_max_iter),
        safety_factor=safety,
        tau_grid=tuple(float(t) for t in tau_grid),
        agreement_bar=float(_expect(obj, "agreement_bar", (int, float), "inference",
                                    default=d.agreement_bar)),
        permutation_seed=_expect(obj, "permutation_seed", int, "inference",
                                 default=d.permutation_seed),
    )


def _parse_transport(obj: Mapping) -> TransportConfig:
    _reject_unknown(obj, {"requests_per_second", "burst", "max_in_flight",
                          "timeout", "max_attempts"}, "transport")
    d = TransportConfig()
    rps = float(_expect(obj, "requests_per_second", (int, float), "transport",
                        default=d.requests_per_second))
    if rps <= 0:
        raise ConfigError(f"transport: requests_per_second must be > 0, got {rps}")
    return TransportConfig(
        requests_per_second=rps,
        burst=float(_expect(obj, "burst", (int, float), "transport", default=d.burst)),
        max_in_flight=_expect(obj, "max_in_flight", int, "transport",
                              default=d.max_in_flight),
        timeout=float(_expect(obj, "timeout", (int, float), "transport",
                              default=d.timeout)),
        max_attempts=_expect(obj, "max_attempts", int, "transport",
                             default=d.max_attempts),
    )


def parse_config(obj: Mapping) -> RunConfig:
    if not isinstance(obj, Mapping):
        raise ConfigError(f"config root must be an object, got {type(obj).__name__}")
    _reject_unknown(obj, {"corpus", "models", "inference", "transport",
                          "output_dir", "cache_path"}, "config")
    models_obj = _expect(obj, "models", list, "config", default=[])
    models = tuple(_parse_model(m, i) for i, m in enumerate(models_obj))
    seen: set[str] = set()
    for m in models:
        if m.model_id in seen:
            raise ConfigError(f"duplicate model_id '{m.model_id}'")
        seen.add(m.model_id)
    return RunConfig(
        corpus=_parse_corpus(_expect(obj, "corpus", dict, "config", default={})),
        models=models,
        inference=_parse_inference(_expect(obj, "inference", dict, "config", default={})),
        transport=_parse_transport(_expect(obj, "transport", dict, "config", default={})),
        output_dir=_expect(obj, "output_dir", str, "config", default="out"),
        cache_path=_expect(obj, "cache_path", str, "config", default=None),
    )


def load_config(path: str | Path) -> RunConfig:
    """Read a config file. JSON always works; .toml needs tomllib (3.11+)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            raise ConfigError(
                f"{path}: TOML configs need Python 3.11+ (tomllib); "
                "use JSON on this interpreter"
            ) from None
        with open(path, "rb") as fh:
            try:
                obj = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    else:
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(obj)


def validate_config(config: RunConfig, require_references: bool = False) -> list[str]:
    """Cross-field checks; returns human-readable warnings.

    With require_references=True the reference set must be large enough to
    fit the scaling law (at least MIN_REFERENCES_FOR_FIT dense models).
    """
    warnings: list[str] = []
    refs = config.reference_entries()
    if require_references and len(refs) < MIN_REFERENCES_FOR_FIT:
        raise ConfigError(
            f"need at least {MIN_REFERENCES_FOR_FIT} dense reference models "
            f"to fit the scaling law, found {len(refs)}"
        )
    if not require_references and 0 < len(refs) < MIN_REFERENCES_FOR_FIT:
        warnings.append(
            f"only {len(refs)} reference models declared; fitting needs "
            f"{MIN_REFERENCES_FOR_FIT}"
        )
    if not config.models:
        warnings.append("no models declared")
    live = [m.model_id for m in config.models if m.simulator is None]
    if live and config.cache_path is None:
        warnings.append(
            f"live models {live} without cache_path: interrupted runs cannot resume"
        )
    return warnings
