"""Run configuration: defaults, flat key-value config files, and manifests.

Precedence is CLI flag > config file > built-in default. The hyperparameter
defaults are the published operating point of the pipeline (margin 0.5,
theta_p 0.3, dropout 0.5, lr 1e-4, 200 paths of length <= 3, 1000-node schema
graphs with a 500-node one-hop cap, prune target 100, 40 prune + 30 joint
epochs). Every command echoes the resolved configuration into a manifest next
to its outputs, together with a config hash and digests of its input files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # inputs
    kg_edges: Optional[Path] = None
    relations: Optional[Path] = None
    kg_index: Optional[Path] = None
    entity_embeddings: Optional[Path] = None
    contexts: Optional[Path] = None
    text_features: Optional[Path] = None
    queries: Optional[Path] = None
    synonyms: Optional[Path] = None
    checkpoint: Optional[Path] = None
    out_dir: Path = Path("runs")
    # dimensions
    d: int = 128
    D: int = 300
    k: int = 3
    # retrieval
    schema_budget: int = 1000
    one_hop_cap: int = 500
    closed_budget: int = 500
    curve_budgets: tuple[int, ...] = (50, 100, 250, 500, 1000)
    # pruning / ranking
    prune_target: int = 100
    theta_p: float = 0.3
    n_paths: int = 200
    # training
    margin: float = 0.5
    dropout: float = 0.5
    lr: float = 1e-4
    optimizer: str = "adam"
    epochs_prune: int = 40
    epochs_joint: int = 30
    batch_size: int = 8
    semi_hard: bool = True
    ptm_mode: str = "hash"
    # run control
    seed: int = 0
    mode: str = "open"
    workers: int = 1

    def validate(self) -> None:
        if self.mode not in ("open", "closed"):
            raise ConfigError(f"mode must be open or closed, got {self.mode!r}")
        if not 0.0 <= self.theta_p <= 1.0:
            raise ConfigError("theta_p must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.ptm_mode not in ("file", "hash", "zero"):
            raise ConfigError(f"ptm_mode must be file, hash, or zero, got {self.ptm_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.k < 1 or self.n_paths < 1 or self.batch_size < 1:
            raise ConfigError("k, n_paths, and batch_size must be positive")
        if min(self.d, self.D, self.schema_budget, self.prune_target) < 1:
            raise ConfigError("dimensions and budgets must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if list(self.curve_budgets) != sorted(self.curve_budgets):
            raise ConfigError("curve_budgets must be sorted ascending")

    @property
    def budget(self) -> int:
        """Schema budget effective for the configured mode."""
        return self.schema_budget if self.mode == "open" else self.closed_budget

    def set_field(self, key: str, raw: str, base_dir: Optional[Path] = None) -> None:
        """Assign one field from its textual form, coercing to the field type."""
        field_map = {f.name: f for f in dataclasses.fields(self)}
        if key not in field_map:
            raise ConfigError(f"unknown configuration key {key!r}")
        default = field_map[key].default
        raw = raw.strip()
        if key == "curve_budgets":
            value = tuple(int(x) for x in raw.replace(",", " ").split())
        elif isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                value = True
            elif raw.lower() in ("0", "false", "no", "off"):
                value = False
            else:
                raise ConfigError(f"{key}: cannot parse boolean from {raw!r}")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        elif key in ("mode", "ptm_mode", "optimizer"):
            value = raw
        else:  # path-valued
            value = Path(raw)
            if base_dir is not None and not value.is_absolute():
                value = base_dir / value
        setattr(self, key, value)

    def to_json_obj(self) -> dict:
        obj = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Path):
                value = str(value)
            elif isinstance(value, tuple):
                value = list(value)
            obj[f.name] = value
        return obj

    def config_hash(self) -> str:
        payload = json.dumps(self.to_json_obj(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def load_config(path: Optional[Path | str], overrides: Optional[dict[str, str]] = None) -> RunConfig:
    """Build a config from an optional file plus textual overrides.

    File format is ``key = value`` lines with ``#`` comments; relative paths
    are resolved against the config file's directory.
    """
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        base_dir = path.parent
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            try:
                cfg.set_field(key.strip(), raw, base_dir)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    for key, raw in (overrides or {}).items():
        cfg.set_field(key, raw)
    cfg.validate()
    return cfg


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    out_dir: Path | str,
    command: str,
    cfg: RunConfig,
    inputs: Optional[dict[str, Path]] = None,
) -> Path:
    """Record provenance (config hash, seed, input digests) beside outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "mode": cfg.mode,
        "config": cfg.to_json_obj(),
        "config_hash": cfg.config_hash(),
        "inputs": {
            name: sha256_file(p)
            for name, p in sorted((inputs or {}).items())
            if p is not None and Path(p).exists()
        },
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
