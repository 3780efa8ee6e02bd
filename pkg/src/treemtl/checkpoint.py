"""Binary checkpoint persistence.

Layout: 4-byte magic ``TMTL``, little-endian u32 header length, UTF-8 JSON
header, then concatenated raw little-endian IEEE-754 parameter payloads.
The header carries the format version, the architecture config and its
fingerprint, a record table (group, name, shape, dtype, offset, nbytes),
optimizer scalars, epoch/step counters and the RNG state. Loading is
all-or-nothing: any structural defect raises before a model is built, and
a round trip reproduces forward outputs bit-exactly.
"""

import base64
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    CheckpointError,
    CheckpointFingerprintError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .losses import SubcenterClassifier
from .model import TreeModel, architecture_fingerprint

MAGIC = b"TMTL"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}
_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class CheckpointBundle:
    """Everything a resumed or evaluated run needs."""

    model: TreeModel
    classifier: SubcenterClassifier = None
    optimizer: dict = None  # {"hyper": {...}, "steps": {...}, "moments": {name: {m, v}}}
    epoch: int = 0
    step: int = 0
    rng_state: bytes = None
    extra: dict = field(default_factory=dict)


def _dtype_name(tensor):
    name = str(tensor.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported parameter dtype {name}")
    return name


def _tensor_bytes(tensor):
    arr = tensor.detach().cpu().numpy()
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


def save_checkpoint(
    path,
    model,
    classifier=None,
    optimizer=None,
    epoch=0,
    step=0,
    rng_state=None,
    extra=None,
):
    """Write the model (and optionally classifier/optimizer state) to ``path``.

    The write is atomic: a temp file is renamed into place, so a crashed
    save never leaves a half-written checkpoint behind.
    """
    records = []
    payload = bytearray()

    def add_record(group, name, tensor):
        blob = _tensor_bytes(tensor)
        records.append(
            {
                "group": group,
                "name": name,
                "shape": list(tensor.shape),
                "dtype": _dtype_name(tensor),
                "offset": len(payload),
                "nbytes": len(blob),
            }
        )
        payload.extend(blob)

    for group, named in model.parameter_groups().items():
        for name, param in named:
            add_record(group, name, param)
    if classifier is not None:
        add_record("face_loss", "classifier.W", classifier.W)

    optimizer_header = None
    if optimizer is not None:
        optimizer_header = {"hyper": optimizer["hyper"], "steps": optimizer["steps"]}
        for name in sorted(optimizer["moments"]):
            moments = optimizer["moments"][name]
            add_record("optim", f"m:{name}", moments["m"])
            add_record("optim", f"v:{name}", moments["v"])

    config = model.config()
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "fingerprint": architecture_fingerprint(config),
        "classifier": classifier.config() if classifier is not None else None,
        "optimizer": optimizer_header,
        "epoch": epoch,
        "step": step,
        "rng_state": base64.b64encode(rng_state).decode("ascii") if rng_state else None,
        "extra": extra or {},
        "records": records,
    }
    header_blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_blob)))
        fh.write(header_blob)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def _read_header(raw, path):
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointTruncatedError(f"{path}: shorter than the fixed prologue")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if len(raw) < start + header_len:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    return header, raw[start + header_len :]


def _extract(record, payload, path):
    lo, hi = record["offset"], record["offset"] + record["nbytes"]
    if hi > len(payload):
        raise CheckpointTruncatedError(
            f"{path}: record {record['name']!r} ends at byte {hi}, "
            f"payload has {len(payload)}"
        )
    arr = np.frombuffer(payload[lo:hi], dtype=_DTYPES[record["dtype"]])
    return torch.from_numpy(arr.copy()).reshape(record["shape"])


def load_checkpoint(path):
    """Rebuild the model (and classifier/optimizer state) stored at ``path``.

    Raises:
        CheckpointVersionError: unsupported format version.
        CheckpointFingerprintError: stored fingerprint does not match the
            stored architecture config.
        CheckpointTruncatedError: file ends before all records are present.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None

    header, payload = _read_header(raw, path)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('format_version')!r}, "
            f"this build reads version {FORMAT_VERSION}"
        )
    if architecture_fingerprint(header["config"]) != header["fingerprint"]:
        raise CheckpointFingerprintError(
            f"{path}: architecture fingerprint does not match the stored config"
        )

    records = header["records"]
    for record in records:  # validate the whole payload before touching a model
        if record["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: unknown record dtype {record['dtype']!r}")
        _extract(record, payload, path)

    model_records = {r["name"]: r for r in records if r["group"] in ("root", "fatigue", "face")}
    dtype_names = {r["dtype"] for r in model_records.values()}
    dtype = _TORCH_DTYPES[dtype_names.pop()] if len(dtype_names) == 1 else torch.float32

    model = TreeModel.from_config(header["config"], dtype=dtype)
    expected = {name for name, _ in model.named_parameters()}
    if set(model_records) != expected:
        raise CheckpointError(f"{path}: parameter records do not cover the architecture")
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(_extract(model_records[name], payload, path))

    classifier = None
    if header.get("classifier") is not None:
        classifier = SubcenterClassifier.from_config(header["classifier"], dtype=dtype)
        record = next(r for r in records if r["name"] == "classifier.W")
        with torch.no_grad():
            classifier.W.copy_(_extract(record, payload, path))

    optimizer = None
    if header.get("optimizer") is not None:
        moments = {}
        for record in records:
            if record["group"] != "optim":
                continue
            kind, name = record["name"].split(":", 1)
            moments.setdefault(name, {})[kind] = _extract(record, payload, path)
        optimizer = {
            "hyper": header["optimizer"]["hyper"],
            "steps": header["optimizer"]["steps"],
            "moments": moments,
        }

    rng_state = header.get("rng_state")
    return CheckpointBundle(
        model=model,
        classifier=classifier,
        optimizer=optimizer,
        epoch=header.get("epoch", 0),
        step=header.get("step", 0),
        rng_state=base64.b64decode(rng_state) if rng_state else None,
        extra=header.get("extra", {}),
    )
