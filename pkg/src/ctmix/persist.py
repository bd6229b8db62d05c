"""JSON model files.

A model file is a single JSON object with a top-level ``schema_version``,
the estimator id, the model block and fit metadata. Keys are sorted and
floats are written with ``repr`` precision, so saving a loaded model
reproduces the original bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .copula import CopulaTypeModel, ParametricCopulaModel
from .errors import ModelFormatError
from .io import atomic_write_text
from .vb.model import MixtureModel

SCHEMA_VERSION = 1

AnyModel = Union[MixtureModel, CopulaTypeModel, ParametricCopulaModel]


def estimator_id(model: AnyModel) -> str:
    if isinstance(model, MixtureModel):
        return model.family
    if isinstance(model, CopulaTypeModel):
        return model.family
    if isinstance(model, ParametricCopulaModel):
        return model.estimator_id
    raise TypeError(f"cannot serialize {type(model).__name__}")


@dataclass
class ModelFile:
    model: AnyModel
    metadata: dict = field(default_factory=dict)

    @property
    def estimator(self) -> str:
        return estimator_id(self.model)

    def to_dict(self) -> dict:
        if isinstance(self.model, MixtureModel):
            kind = "mixture"
        elif isinstance(self.model, CopulaTypeModel):
            kind = "copula_type"
        else:
            kind = "parametric_copula"
        return {"schema_version": SCHEMA_VERSION, "estimator": self.estimator,
                "kind": kind, "model": self.model.to_dict(), "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelFile":
        if not isinstance(data, dict) or "schema_version" not in data:
            raise ModelFormatError("not a model file: missing schema_version")
        if data["schema_version"] != SCHEMA_VERSION:
            raise ModelFormatError(f"unsupported schema_version {data['schema_version']!r} "
                                   f"(expected {SCHEMA_VERSION})")
        try:
            kind, block = data["kind"], data["model"]
        except KeyError as exc:
            raise ModelFormatError(f"model file lacks {exc}") from None
        loaders = {"mixture": MixtureModel.from_dict, "copula_type": CopulaTypeModel.from_dict,
                   "parametric_copula": ParametricCopulaModel.from_dict}
        if kind not in loaders:
            raise ModelFormatError(f"unknown model kind {kind!r}")
        return cls(loaders[kind](block), dict(data.get("metadata", {})))


def dumps(mf: ModelFile) -> str:
    return json.dumps(mf.to_dict(), sort_keys=True, indent=1, allow_nan=True) + "\n"


def save_model(path, model: Union[AnyModel, ModelFile], metadata: dict = None) -> None:
    mf = model if isinstance(model, ModelFile) else ModelFile(model, dict(metadata or {}))
    atomic_write_text(path, dumps(mf))


def load_model(path) -> ModelFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelFormatError(f"cannot read {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid JSON ({exc})") from None
    return ModelFile.from_dict(data)
