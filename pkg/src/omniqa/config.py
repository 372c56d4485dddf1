"""Flat key=value config files.

One namespace covers the detector, the model sizes, and the training
schedule; unknown keys are hard errors so typos cannot silently fall back
to defaults.  Lines starting with '#' and blank lines are ignored.
"""
from __future__ import annotations

from dataclasses import fields, replace

from .datasets import DataError
from .model import ModelConfig
from .training import TrainConfig
from .viewpoint import DetectorConfig


def _parse_scales(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


# key -> (section, field name, converter)
_SCHEMA: dict[str, tuple[str, str, object]] = {}
for f in fields(DetectorConfig):
    conv = _parse_scales if f.name == "det_scales" else type(getattr(DetectorConfig(), f.name))
    _SCHEMA[f.name] = ("detector", f.name, conv)
for f in fields(TrainConfig):
    _SCHEMA[f.name] = ("train", f.name, type(getattr(TrainConfig(), f.name)))
_MODEL_KEYS = {
    "erp_height": int, "erp_width": int,
    "viewport_size": int, "viewport_fov": float,
    "desc_width_scale": int, "desc_blocks": int,
    "global_height": int, "global_width": int,
    "global_width_scale": int,
}
for key, conv in _MODEL_KEYS.items():
    _SCHEMA[key] = ("model", key, conv)


def parse_config(path) -> dict[str, dict[str, object]]:
    """Read key=value lines into {'detector': {...}, 'train': {...}, 'model': {...}}."""
    sections: dict[str, dict[str, object]] = {"detector": {}, "train": {}, "model": {}}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{line_no}: expected key=value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _SCHEMA:
                raise DataError(f"{path}:{line_no}: unknown config key {key!r}")
            section, fname, conv = _SCHEMA[key]
            try:
                sections[section][fname] = conv(value)
            except ValueError:
                raise DataError(
                    f"{path}:{line_no}: bad value {value!r} for {key}") from None
    return sections


def build_configs(path=None, seed: int | None = None
                  ) -> tuple[ModelConfig, TrainConfig]:
    """Construct model/train configs from an optional file plus a seed override."""
    sections = parse_config(path) if path else {"detector": {}, "train": {}, "model": {}}
    detector = DetectorConfig(**sections["detector"])
    mk = sections["model"]
    model_kwargs = {}
    if "erp_height" in mk or "erp_width" in mk:
        base = ModelConfig()
        model_kwargs["erp_size"] = (mk.get("erp_height", base.erp_size[0]),
                                    mk.get("erp_width", base.erp_size[1]))
    if "global_height" in mk or "global_width" in mk:
        base = ModelConfig()
        model_kwargs["global_size"] = (mk.get("global_height", base.global_size[0]),
                                       mk.get("global_width", base.global_size[1]))
    for key in ("viewport_size", "viewport_fov", "desc_width_scale",
                "desc_blocks", "global_width_scale"):
        if key in mk:
            model_kwargs[key] = mk[key]
    model_cfg = ModelConfig(detector=detector, **model_kwargs)
    train_cfg = TrainConfig(**sections["train"])
    if seed is not None:
        train_cfg = replace(train_cfg, seed=seed)
    return model_cfg, train_cfg
