"""Run configuration: packaged defaults overlaid by a user TOML/JSON file.

Unknown keys are rejected (catching typos like ``dx`` for ``dx_um``); every
physical quantity carries its unit in the key name.
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .imaging import ImperfectionModel
from .neural import TrainConfig
from .synthesis import OpticalConfig


def _packaged_defaults() -> Dict[str, Any]:
    from importlib.resources import files
    text = files("metaconv").joinpath("defaults.toml").read_text()
    return tomllib.loads(text)


def _merge(base: Dict[str, Any], override: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> dict:
    """Packaged defaults, then the user file, then explicit overrides."""
    cfg = _packaged_defaults()
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith(".json"):
            user = json.loads(text)
        else:
            try:
                user = tomllib.loads(text)
            except tomllib.TOMLDecodeError:
                try:
                    user = json.loads(text)   # JSON fallback
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}: neither TOML nor JSON: {exc}") from exc
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


@dataclass
class RunConfig:
    """Typed view over the merged configuration dictionary."""

    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def optical(self) -> OpticalConfig:
        o = self.raw["optical"]
        return OpticalConfig(
            wavelength_um=o["wavelength_um"], f1_um=o["f1_um"], f2_um=o["f2_um"],
            c=o["c"], pixel_um=o["pixel_um"], aperture_d1_um=o["aperture_d1_um"],
            ms_separation_um=o["ms_separation_um"],
            second_aperture_factor=o["second_aperture_factor"])

    def lens_optical(self) -> OpticalConfig:
        o, l = self.raw["optical"], self.raw["lens"]
        return OpticalConfig(
            wavelength_um=o["wavelength_um"], f1_um=l["f1_um"], f2_um=o["f2_um"],
            c=o["c"], pixel_um=o["pixel_um"], aperture_d1_um=l["aperture_d1_um"],
            ms_separation_um=l["ms_separation_um"],
            second_aperture_factor=l["second_aperture_factor"])

    def imperfection(self) -> ImperfectionModel:
        i = self.raw["imperfection"]
        return ImperfectionModel(
            zeroth_order_fraction=i["epsilon"], dx_um=i["dx_um"], dy_um=i["dy_um"],
            dz_um=i["dz_um"], noise_sigma=i["noise_sigma"], seed=i["seed"])

    def training(self, epochs: Optional[int] = None) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            learning_rate=t["learning_rate"],
            epochs=epochs if epochs is not None else t["epochs"],
            batch_size=t["batch_size"], balance_weight=t["balance_weight"],
            beta1=t["beta1"], beta2=t["beta2"], eps_adam=t["eps_adam"],
            seed=self.seed)
