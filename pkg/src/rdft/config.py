"""Experiment configuration: YAML schema, validation and resolved dumps.

Example::

    seed: 3
    output_dir: runs/demo
    dataset:
      synthetic: {num_classes: 15, per_class: 20, noise_level: 0.1}
    mel: {profile: synthetic}
    split: {seed: 0, fractions: [0.6, 0.2, 0.2]}
    meta: {algorithm: mc_proto, alpha: 0.2, beta: 0.001, n: 8}
    episodes: {train: 2000, eval: 200}
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .audio import PROFILES, MelConfig
from .errors import ConfigError
from .meta import MetaConfig

OUTPUT_DIR_ENV = "RDFT_OUTPUT_DIR"

PROFILES = {**PROFILES, "synthetic": MelConfig(16000, 512, 256, 16, 0.0, None, 16)}

_NUM = (int, float)

SCHEMA = {
    "seed": int,
    "output_dir": str,
    "standardize": bool,
    "dataset": {
        "manifest": str,
        "cache": str,
        "synthetic": {"num_classes": int, "per_class": int, "noise_level": _NUM,
                      "amplitude": _NUM, "seed": int},
    },
    "mel": {"profile": str, "sample_rate": int, "n_fft": int, "hop": int, "n_mels": int,
            "fmin": _NUM, "fmax": _NUM, "target_frames": int},
    "split": {"file": str, "seed": int, "fractions": list},
    "meta": {"alpha": _NUM, "beta": _NUM, "n": int, "C": int, "K": int, "Q": int,
             "meta_batch": int, "order": str, "algorithm": str, "distance": str,
             "meta_optimizer": str, "finetune": bool, "learn_curvature": bool,
             "test_curvature": bool},
    "episodes": {"train": int, "eval": int},
}

# (key path, predicate, description)
RANGES = [
    (("meta", "alpha"), lambda v: v > 0, "> 0"),
    (("meta", "beta"), lambda v: v > 0, "> 0"),
    (("meta", "n"), lambda v: v >= 1, ">= 1"),
    (("meta", "C"), lambda v: v >= 2, ">= 2"),
    (("meta", "K"), lambda v: v >= 1, ">= 1"),
    (("meta", "Q"), lambda v: v >= 1, ">= 1"),
    (("meta", "meta_batch"), lambda v: v >= 1, ">= 1"),
    (("episodes", "train"), lambda v: v >= 0, ">= 0"),
    (("episodes", "eval"), lambda v: v >= 2, ">= 2"),
    (("dataset", "synthetic", "num_classes"), lambda v: v >= 2, ">= 2"),
    (("dataset", "synthetic", "per_class"), lambda v: v >= 1, ">= 1"),
    (("dataset", "synthetic", "noise_level"), lambda v: v >= 0, ">= 0"),
    (("dataset", "synthetic", "amplitude"), lambda v: 0 < v <= 1, "in (0, 1]"),
]


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 15
    per_class: int = 20
    noise_level: float = 0.1
    amplitude: float = 0.025
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    mel: MelConfig
    meta: MetaConfig
    seed: int = 0
    output_dir: Path = Path("runs/default")
    manifest: Path | None = None
    synthetic: SyntheticSpec | None = None
    cache: Path | None = None
    standardize: bool = True
    split_file: Path | None = None
    split_seed: int = 0
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    train_episodes: int = 2000
    eval_episodes: int = 200
    mel_profile: str = field(default="custom", compare=False)

    @property
    def input_shape(self):
        return (1, self.mel.n_mels, self.mel.target_frames)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _line_map(node, path=(), out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key_path = path + (k.value,)
            out[key_path] = k.start_mark.line + 1
            _line_map(v, key_path, out)
    return out


def _type_ok(value, expected):
    if expected is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    return isinstance(value, expected)


def _check(data, schema, lines, path=()):
    if not isinstance(data, dict):
        where = ".".join(path) or "document"
        raise ConfigError(f"{where} must be a mapping (line {lines.get(path, 1)})")
    for key, value in data.items():
        kp = path + (str(key),)
        name = ".".join(kp)
        if key not in schema:
            raise ConfigError(f"unknown key {name!r} (line {lines.get(kp, '?')})")
        expected = schema[key]
        if isinstance(expected, dict):
            _check(value, expected, lines, kp)
        elif value is not None and not _type_ok(value, expected):
            tname = expected.__name__ if isinstance(expected, type) else "number"
            raise ConfigError(f"key {name!r} must be {tname}, got {value!r} "
                              f"(line {lines.get(kp, '?')})")


def _get(data, path, default=None):
    for p in path:
        if not isinstance(data, dict) or p not in data:
            return default
        data = data[p]
    return data


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    """Validate a YAML experiment document and fill defaults.

    Relative paths resolve against ``base_dir``; ``$RDFT_OUTPUT_DIR``
    overrides ``output_dir``.
    """
    try:
        data = yaml.safe_load(text) or {}
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    lines = _line_map(root) if root is not None else {}
    _check(data, SCHEMA, lines)
    for path, ok, desc in RANGES:
        v = _get(data, path)
        if v is not None and not ok(v):
            raise ConfigError(f"key {path[-1]!r} out of range: {v!r} (must be {desc}) "
                              f"(line {lines.get(path, '?')})")
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def resolve(p, must_exist):
        if p is None:
            return None
        q = Path(p)
        q = q if q.is_absolute() else base / q
        if must_exist and not q.exists():
            raise ConfigError(f"path {p!r} does not exist")
        return q

    ds = data.get("dataset") or {}
    manifest = resolve(ds.get("manifest"), True)
    synthetic = None
    if manifest is None:
        synthetic = SyntheticSpec(**{k: v for k, v in (ds.get("synthetic") or {}).items()
                                     if v is not None})
    elif ds.get("synthetic") is not None:
        raise ConfigError("dataset: give either 'manifest' or 'synthetic', not both "
                          f"(line {lines.get(('dataset', 'synthetic'), '?')})")

    mel_data = dict(data.get("mel") or {})
    profile = mel_data.pop("profile", "synthetic" if synthetic is not None else "esc50")
    if profile not in PROFILES and profile != "custom":
        raise ConfigError(f"unknown mel profile {profile!r} (line {lines.get(('mel', 'profile'), '?')})")
    mel_base = dataclasses.asdict(PROFILES.get(profile, MelConfig()))
    if "sample_rate" in mel_data and "fmax" not in mel_data:
        mel_base["fmax"] = None
    mel_base.update({k: v for k, v in mel_data.items() if v is not None})
    try:
        mel = MelConfig(**mel_base)
    except ConfigError as exc:
        raise ConfigError(f"mel: {exc} (line {lines.get(('mel',), '?')})") from None

    try:
        meta = MetaConfig(**{k: v for k, v in (data.get("meta") or {}).items() if v is not None})
    except ConfigError as exc:
        raise type(exc)(f"meta: {exc} (line {lines.get(('meta',), '?')})") from None

    split = data.get("split") or {}
    fractions = tuple(float(f) for f in split.get("fractions") or (0.6, 0.2, 0.2))
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-6:
        raise ConfigError("key 'fractions' must be three non-negative numbers summing to 1 "
                          f"(line {lines.get(('split', 'fractions'), '?')})")

    out_dir = os.environ.get(OUTPUT_DIR_ENV) or data.get("output_dir") or "runs/default"
    episodes = data.get("episodes") or {}
    return ExperimentConfig(
        mel=mel,
        meta=meta,
        seed=int(data.get("seed") or 0),
        output_dir=resolve(out_dir, False),
        manifest=manifest,
        synthetic=synthetic,
        cache=resolve(ds.get("cache"), False),
        standardize=data.get("standardize") is not False,
        split_file=resolve(split.get("file"), True),
        split_seed=int(split.get("seed") or 0),
        split_fractions=fractions,
        train_episodes=int(episodes.get("train", 2000)),
        eval_episodes=int(episodes.get("eval", 200)),
        mel_profile=profile,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)


def to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved, re-parseable form (absolute paths, every default spelled out)."""
    mel = dataclasses.asdict(cfg.mel)
    dataset: dict = {}
    if cfg.manifest is not None:
        dataset["manifest"] = str(cfg.manifest)
    else:
        dataset["synthetic"] = dataclasses.asdict(cfg.synthetic)
    if cfg.cache is not None:
        dataset["cache"] = str(cfg.cache)
    split: dict = {"seed": cfg.split_seed, "fractions": list(cfg.split_fractions)}
    if cfg.split_file is not None:
        split["file"] = str(cfg.split_file)
    return {
        "seed": cfg.seed,
        "output_dir": str(cfg.output_dir),
        "standardize": cfg.standardize,
        "dataset": dataset,
        "mel": {"profile": "custom", **mel},
        "split": split,
        "meta": dataclasses.asdict(cfg.meta),
        "episodes": {"train": cfg.train_episodes, "eval": cfg.eval_episodes},
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
