"""Run configuration: one JSON document per reproducible run.

A :class:`RunConfig` bundles the data paths, global seed, and the three
component configs (model, training, augmentation) plus evaluator options.
The CLI loads it from a JSON file, applies dotted-path overrides from
flags (``model.embed_dim=64``), and stamps the resulting document's hash
into every run manifest.  Serialization is canonical: serialize → parse →
serialize is the identity on the emitted text.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .metrics import GROUPINGS
from .model import ModelConfig
from .train import TrainConfig
from .util import canonical_json

__all__ = [
    "RunConfig",
    "run_config_to_dict",
    "run_config_from_dict",
    "load_run_config",
    "save_run_config",
    "apply_overrides",
    "apply_tiny_preset",
    "config_hash",
]

_REFERENCE_KEYS = ("a0", "a_age", "a_height", "a_sex")
_AUGMENT_TUPLE_KEYS = (
    "value_shift_range", "contrast_range", "scale_xy_range",
    "rotate_deg_range", "shear_deg_range", "noise_std_range", "blur_kinds",
)


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs, in a single serializable document."""

    manifest: str | None = None
    volume_dir: str | None = None
    out_dir: str = "run-output"
    seed: int = 0
    deterministic: bool = False
    augment_enabled: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    reference_coeffs: dict[str, float] | None = None
    groupings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        problems = []
        if not isinstance(self.seed, int):
            problems.append(f"seed must be an integer, got {self.seed!r}")
        if not self.out_dir:
            problems.append("out_dir must be non-empty")
        for name in ("deterministic", "augment_enabled"):
            if not isinstance(getattr(self, name), bool):
                problems.append(f"{name} must be true or false")
        if self.reference_coeffs is not None:
            if not isinstance(self.reference_coeffs, dict):
                problems.append("reference_coeffs must be a mapping or null")
            else:
                unknown = sorted(set(self.reference_coeffs) - set(_REFERENCE_KEYS))
                if unknown:
                    problems.append(
                        f"unknown reference coefficient(s) {unknown}; "
                        f"expected keys from {_REFERENCE_KEYS}"
                    )
        bad_groups = [g for g in self.groupings if g not in GROUPINGS]
        if bad_groups:
            problems.append(
                f"unknown grouping(s) {bad_groups}; expected from {GROUPINGS}"
            )
        if problems:
            raise ConfigError("invalid run config: " + "; ".join(problems))


def run_config_to_dict(cfg: RunConfig) -> dict:
    """Plain-JSON-types dict form (tuples become lists)."""
    doc = dataclasses.asdict(cfg)
    doc["model"]["stem_channels"] = list(doc["model"]["stem_channels"])
    doc["model"]["head_hidden"] = list(doc["model"]["head_hidden"])
    doc["train"]["split_fractions"] = list(doc["train"]["split_fractions"])
    doc["groupings"] = list(doc["groupings"])
    for key in _AUGMENT_TUPLE_KEYS:
        doc["augment"][key] = list(doc["augment"][key])
    return doc


def _build_section(cls, section: dict, name: str, problems: list[str]):
    try:
        return cls(**section)
    except TypeError as exc:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(section) - known)
        if unknown:
            problems.append(f"{name}: unknown key(s) {unknown}")
        else:
            problems.append(f"{name}: {exc}")
    except ConfigError as exc:
        problems.append(f"{name}: {exc}")
    return None


def run_config_from_dict(doc: dict) -> RunConfig:
    """Parse and validate, reporting every violation in one error."""
    if not isinstance(doc, dict):
        raise ConfigError(f"run config must be a JSON object, got {type(doc).__name__}")
    doc = {key: value for key, value in doc.items()}
    defaults = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - defaults)
    problems: list[str] = []
    if unknown:
        problems.append(f"unknown top-level key(s) {unknown}")
        for key in unknown:
            doc.pop(key)

    model_doc = dict(doc.get("model") or {})
    for key in ("stem_channels", "head_hidden"):
        if key in model_doc and isinstance(model_doc[key], list):
            model_doc[key] = tuple(model_doc[key])
    train_doc = dict(doc.get("train") or {})
    if "split_fractions" in train_doc and isinstance(train_doc["split_fractions"], list):
        train_doc["split_fractions"] = tuple(train_doc["split_fractions"])
    # the top-level seed is the run's seed of record: it flows into training
    # unless the train section pins its own explicitly
    if "seed" in doc and "seed" not in train_doc:
        train_doc["seed"] = doc["seed"]
    augment_doc = dict(doc.get("augment") or {})
    for key in _AUGMENT_TUPLE_KEYS:
        if key in augment_doc and isinstance(augment_doc[key], list):
            augment_doc[key] = tuple(augment_doc[key])

    model = _build_section(ModelConfig, model_doc, "model", problems)
    train = _build_section(TrainConfig, train_doc, "train", problems)
    augment = _build_section(AugmentConfig, augment_doc, "augment", problems)

    top = {
        key: doc[key]
        for key in doc
        if key not in ("model", "train", "augment")
    }
    if "groupings" in top and isinstance(top["groupings"], list):
        top["groupings"] = tuple(top["groupings"])
    if problems:
        raise ConfigError("invalid run config: " + "; ".join(problems))
    try:
        return RunConfig(model=model, train=train, augment=augment, **top)
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(doc)


def save_run_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(canonical_json(run_config_to_dict(cfg)) + "\n", encoding="utf-8")
    return path


def apply_overrides(doc: dict, assignments: list[str]) -> dict:
    """Apply ``dotted.path=json_value`` assignments to a config document.

    The right-hand side is parsed as JSON when possible, else taken as a
    bare string.  Paths must address keys that already exist in the
    document (so typos fail loudly); the one exception is
    ``reference_coeffs``, whose mapping may be created and extended.
    """
    doc = json.loads(json.dumps(doc))  # deep copy, JSON types only
    problems = []
    for item in assignments:
        path, sep, raw = item.partition("=")
        path = path.strip()
        if not sep or not path:
            problems.append(f"override {item!r} is not of the form path=value")
            continue
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = path.split(".")
        node = doc
        failed = False
        for i, key in enumerate(keys[:-1]):
            if key == "reference_coeffs" and node.get(key) is None:
                node[key] = {}
            if not isinstance(node.get(key), dict):
                problems.append(f"override {path!r}: no section named {key!r}")
                failed = True
                break
            node = node[key]
        if failed:
            continue
        leaf = keys[-1]
        creating_allowed = keys and keys[0] == "reference_coeffs"
        if leaf not in node and not creating_allowed:
            problems.append(f"override {path!r}: no config key named {leaf!r}")
            continue
        node[leaf] = value
    if problems:
        raise ConfigError("bad override(s): " + "; ".join(problems))
    return doc


def apply_tiny_preset(doc: dict) -> dict:
    """Rewrite the model section to the shared small-model preset.

    Keeps the run's target, architecture, and demographics switch; replaces
    the structural fields with the preset values (64-cube input, 64-d
    embedding, 2 blocks, 4 heads, patch 4).
    """
    doc = json.loads(json.dumps(doc))
    model_doc = dict(doc.get("model") or {})
    kept = {
        key: model_doc[key]
        for key in ("target", "arch", "use_demographics", "input_scale")
        if key in model_doc
    }
    tiny = ModelConfig.tiny(**kept)
    as_dict = dataclasses.asdict(tiny)
    as_dict["stem_channels"] = list(as_dict["stem_channels"])
    as_dict["head_hidden"] = list(as_dict["head_hidden"])
    doc["model"] = as_dict
    return doc


def config_hash(cfg: RunConfig) -> str:
    """Stable content hash of the canonical serialized document."""
    return hashlib.sha256(
        canonical_json(run_config_to_dict(cfg)).encode("utf-8")
    ).hexdigest()
