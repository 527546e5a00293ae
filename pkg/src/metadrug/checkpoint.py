"""Versioned checkpoint archives.

A checkpoint is one ``.npz`` file: named float64 arrays for the encoder
(``theta/...``), the head (``phi/...``) and the uncertainty predictor
(``uq/...``), plus a JSON metadata blob under ``__meta__``. Loading checks
the format version and refuses anything else.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .encoder import DTYPE
from .errors import SchemaError
from .meta import ModelParams
from .uncertainty import FilterThreshold, UncertaintyFilter, UQPredictor

FORMAT_VERSION = 1
_META_KEY = "__meta__"


@dataclass
class Checkpoint:
    params: ModelParams
    uq_filter: UncertaintyFilter | None
    config_ini: str
    fingerprint: str
    extra: dict


def data_fingerprint(cohort_path, seed: int, train_frac: float) -> str:
    """Hash of the cohort bytes, its DDI sidecar (if any) and the split."""
    from .ehr import ddi_sidecar_path

    h = hashlib.sha256()
    for p in (cohort_path, ddi_sidecar_path(cohort_path)):
        if os.path.exists(p):
            with open(p, "rb") as fh:
                h.update(fh.read())
        h.update(b"\0")
    h.update(f"{int(seed)}:{float(train_frac)!r}".encode())
    return h.hexdigest()[:16]


def _arrays(prefix, tensors):
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in tensors.items()}


def save_checkpoint(path, params: ModelParams, uq_filter=None, config_ini="", fingerprint="",
                    extra=None):
    arrays = {**_arrays("theta", params.theta), **_arrays("phi", params.phi)}
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config_ini,
        "fingerprint": fingerprint,
        "extra": extra or {},
        "uq": None,
    }
    if uq_filter is not None:
        arrays.update(_arrays("uq", uq_filter.predictor.params))
        meta["uq"] = {"gamma": uq_filter.threshold.gamma, "beta": uq_filter.threshold.beta}
    blob = json.dumps(meta, sort_keys=True).encode()
    arrays[_META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **dict(sorted(arrays.items())))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise SchemaError(f"cannot read checkpoint {path}: {exc}") from None
    with archive:
        if _META_KEY not in archive.files:
            raise SchemaError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(archive[_META_KEY].tobytes().decode())
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise SchemaError(
                f"{path}: checkpoint format {version} is not supported (expected {FORMAT_VERSION})")
        groups = {"theta": {}, "phi": {}, "uq": {}}
        for name in archive.files:
            if name == _META_KEY:
                continue
            prefix, key = name.split("/", 1)
            arr = archive[name]
            groups[prefix][key] = torch.from_numpy(arr.copy()).to(DTYPE)
    params = ModelParams(groups["theta"], groups["phi"])
    uq_filter = None
    if meta["uq"] is not None:
        threshold = FilterThreshold(float(meta["uq"]["gamma"]), float(meta["uq"]["beta"]))
        uq_filter = UncertaintyFilter(UQPredictor(params.d, params=groups["uq"]), threshold)
    return Checkpoint(params, uq_filter, meta["config"], meta["fingerprint"], meta["extra"])
