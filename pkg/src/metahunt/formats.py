"""JSON study bundles, JSON pipeline artifacts and CSV tables.

Floats are written with Python's shortest round-trip repr and keys are
sorted, so read -> write reproduces a file byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math

import numpy as np

from .basis_hunting import BasisSet, DenoiseParams
from .function_space import EvalGrid, FuncSample
from .pipeline import PipelineConfig, StudyRecord, TrainedPipeline
from .weight_model import params_from_dict

BUNDLE_VERSION = "1"
ARTIFACT_VERSION = "1"

_STUDY_KEYS = {"id", "W", "f_hat", "f_true", "pi_true"}
_BUNDLE_KEYS = {"grid", "studies", "meta"}


class FormatError(ValueError):
    """Malformed bundle or artifact."""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def _grid_points(grid: EvalGrid):
    return grid.points[:, 0].tolist() if grid.points.shape[1] == 1 else grid.points.tolist()


def grid_to_dict(grid: EvalGrid) -> dict:
    return {"points": _grid_points(grid), "weights": grid.weights.tolist()}


def grid_from_dict(d: dict) -> EvalGrid:
    try:
        return EvalGrid(np.asarray(d["points"], dtype=float), np.asarray(d["weights"], dtype=float))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad grid: {exc}") from exc


# ---------------------------------------------------------------- bundles

class StudyBundle:
    def __init__(self, grid: EvalGrid, studies: list, meta: dict | None = None,
                 extra: dict | None = None):
        self.grid = grid
        self.studies = studies
        self.meta = dict(meta or {})
        self.meta.setdefault("format_version", BUNDLE_VERSION)
        self.extra = dict(extra or {})

    def arrays(self):
        W = np.vstack([np.atleast_1d(s.W) for s in self.studies])
        F = np.vstack([s.f_hat.values for s in self.studies])
        return W, F

    def to_dict(self) -> dict:
        studies = []
        for s in self.studies:
            d = dict(s.extra)
            d.update({"id": s.id, "W": np.atleast_1d(s.W).tolist(), "f_hat": s.f_hat.values.tolist()})
            if s.f_true is not None:
                d["f_true"] = s.f_true.values.tolist()
            if s.pi_true is not None:
                d["pi_true"] = np.asarray(s.pi_true).tolist()
            studies.append(d)
        out = dict(self.extra)
        out.update({"grid": grid_to_dict(self.grid), "studies": studies, "meta": self.meta})
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StudyBundle":
        if not isinstance(d, dict) or not _BUNDLE_KEYS <= set(d):
            raise FormatError("bundle needs 'grid', 'studies' and 'meta'")
        meta = d["meta"]
        if "format_version" not in meta:
            raise FormatError("bundle meta lacks format_version")
        grid = grid_from_dict(d["grid"])
        studies = []
        for j, s in enumerate(d["studies"]):
            try:
                rec = StudyRecord(
                    W=np.asarray(s["W"], dtype=float),
                    f_hat=FuncSample(s["f_hat"], grid),
                    id=str(s.get("id", j)),
                    f_true=FuncSample(s["f_true"], grid) if s.get("f_true") is not None else None,
                    pi_true=np.asarray(s["pi_true"], dtype=float) if s.get("pi_true") is not None else None,
                    extra={k: v for k, v in s.items() if k not in _STUDY_KEYS},
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"study {j}: {exc}") from exc
            studies.append(rec)
        dims = {np.atleast_1d(s.W).shape for s in studies}
        if len(dims) > 1:
            raise FormatError(f"studies disagree on covariate dimension: {sorted(dims)}")
        extra = {k: v for k, v in d.items() if k not in _BUNDLE_KEYS}
        return cls(grid, studies, meta, extra)

    def dumps(self) -> str:
        return dumps(self.to_dict())

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def read(cls, path) -> "StudyBundle":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


def bundle_from_simulation(data, meta_extra: dict | None = None) -> StudyBundle:
    meta = {"seed": data.config.seed, "config": data.config.to_dict(),
            "format_version": BUNDLE_VERSION}
    meta.update(meta_extra or {})
    return StudyBundle(data.grid, data.records(), meta)


# -------------------------------------------------------------- artifacts

def _content_hash(d: dict) -> str:
    body = {k: v for k, v in d.items() if k != "content_hash"}
    return hashlib.sha256(dumps(body).encode()).hexdigest()


def pipeline_to_dict(pipe: TrainedPipeline, extra: dict | None = None) -> dict:
    d = {
        "format_version": ARTIFACT_VERSION,
        "grid": grid_to_dict(pipe.grid),
        "basis": {"values": pipe.basis.values.tolist(),
                  "source_indices": list(pipe.basis.source_indices),
                  "residual_norms": list(pipe.basis.residual_norms)},
        "weight_model": pipe.weight_params.to_dict(),
        "config": pipe.config.to_dict(),
        "denoise": None if pipe.denoise_params is None else
        {"N": pipe.denoise_params.N, "delta": pipe.denoise_params.delta},
        "recon_error": pipe.recon_error,
    }
    d.update(_jsonable(extra or {}))
    d = _jsonable(d)
    d["content_hash"] = _content_hash(d)
    return d


def pipeline_from_dict(d: dict, verify: bool = True) -> TrainedPipeline:
    try:
        if verify and d.get("content_hash") != _content_hash(d):
            raise FormatError("artifact content hash does not match its contents")
        grid = grid_from_dict(d["grid"])
        b = d["basis"]
        basis = BasisSet(np.asarray(b["values"], dtype=float), tuple(b["source_indices"]), grid,
                         tuple(b.get("residual_norms", ())))
        params = params_from_dict(d["weight_model"])
        cfg = PipelineConfig(**d["config"])
        dn = d.get("denoise")
        dparams = DenoiseParams(dn["N"], dn["delta"]) if dn else None
        rec = d.get("recon_error")
        return TrainedPipeline(basis, params, grid, cfg, dparams, None,
                               float("nan") if rec is None else rec)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad pipeline artifact: {exc}") from exc


def write_pipeline(pipe: TrainedPipeline, path, extra: dict | None = None):
    with open(path, "w") as fh:
        fh.write(dumps(pipeline_to_dict(pipe, extra)))


def read_pipeline(path) -> tuple:
    """Return ``(pipeline, raw_dict)``."""
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return pipeline_from_dict(d), d


# ------------------------------------------------------------------- CSV

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def rows_to_csv(rows, fieldnames=None) -> str:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(r.get(k)) for k in fieldnames})
    return buf.getvalue()


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
