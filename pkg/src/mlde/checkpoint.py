"""Versioned checkpoint container with bit-exact parameter round trips.

A checkpoint is a ZIP archive holding one ``.npy`` blob per model tensor plus
``meta.json`` with: format version, target class, the full training config and
its hash, training history, the raw fusion alphas together with the derived
normalized weights (for human inspection), a shape manifest, and a sha256
digest per blob. Archive entries carry a fixed timestamp and no compression,
so identical models produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .dataset import class_by_code
from .errors import CheckpointError, ConfigMismatchError
from .fusion import FusionParameters
from .training import MldeModel, TrainConfig, TrainedModel, build_model, config_hash

FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

# Fields that define the model itself; a mismatch on load means the caller's
# configuration cannot reuse these parameters.
MODEL_FIELDS = ("backbone", "scales", "norm_mean", "norm_std")


def _blob_name(tensor_name: str) -> str:
    return f"params/{tensor_name}.npy"


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array)
    return buf.getvalue()


def save_checkpoint(trained: TrainedModel, path: str | Path) -> Path:
    """Write the checkpoint; parameters survive a round trip bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    state = {name: tensor.detach().cpu().numpy() for name, tensor
             in trained.model.state_dict().items()}
    digests = {}
    manifest = {}
    blobs = {}
    for name, arr in state.items():
        data = _npy_bytes(arr)
        blobs[_blob_name(name)] = data
        digests[name] = hashlib.sha256(data).hexdigest()
        manifest[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype)}

    alpha = FusionParameters(state["fusion.alpha"].astype(np.float64))
    meta = {
        "format_version": FORMAT_VERSION,
        "target_code": trained.target.code,
        "config": trained.config.to_dict(),
        "config_hash": config_hash(trained.config),
        "history": trained.history,
        "alpha": alpha.alpha.tolist(),
        "normalized_weights": alpha.normalized_weights().tolist(),
        "param_manifest": manifest,
        "param_sha256": digests,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=_ZIP_EPOCH),
                    json.dumps(meta, sort_keys=True, indent=1))
        for blob_name in sorted(blobs):
            zf.writestr(zipfile.ZipInfo(blob_name, date_time=_ZIP_EPOCH),
                        blobs[blob_name])
    return path


def _read_meta(zf: zipfile.ZipFile, path: Path) -> dict:
    try:
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
    except KeyError:
        raise CheckpointError(f"{path}: missing meta.json")
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable meta.json: {exc}")
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {version!r} "
            f"(expected {FORMAT_VERSION})")
    return meta


def load_checkpoint(path: str | Path,
                    expected_config: TrainConfig | None = None) -> TrainedModel:
    """Rebuild a TrainedModel from a checkpoint file.

    Verifies per-blob checksums and the stored config hash before any tensor
    is used; truncated or tampered files never yield a partial model. With
    ``expected_config``, the model-defining fields must match the stored
    config or a ConfigMismatchError is raised.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint: {exc}")

    with zf:
        meta = _read_meta(zf, path)
        config = TrainConfig.from_dict(meta["config"])
        if meta.get("config_hash") != config_hash(config):
            raise CheckpointError(f"{path}: config hash mismatch (file tampered?)")
        if expected_config is not None:
            mismatched = [
                f for f in MODEL_FIELDS
                if getattr(expected_config, f) != getattr(config, f)
            ]
            if mismatched:
                detail = ", ".join(
                    f"{f}: checkpoint={getattr(config, f)!r} "
                    f"requested={getattr(expected_config, f)!r}"
                    for f in mismatched)
                raise ConfigMismatchError(f"{path}: config mismatch ({detail})")

        arrays = {}
        for name, digest in meta["param_sha256"].items():
            try:
                data = zf.read(_blob_name(name))
            except (KeyError, zipfile.BadZipFile) as exc:
                raise CheckpointError(f"{path}: missing or unreadable blob for "
                                      f"{name!r}: {exc}")
            if hashlib.sha256(data).hexdigest() != digest:
                raise CheckpointError(f"{path}: checksum failure on blob {name!r}")
            arrays[name] = np.load(io.BytesIO(data))

    target = class_by_code(meta["target_code"])
    model = build_model(target, config, initialize=False)
    expected_names = set(model.state_dict().keys())
    if expected_names != set(arrays.keys()):
        raise CheckpointError(
            f"{path}: parameter set does not match the model "
            f"(missing {sorted(expected_names - set(arrays))[:3]}, "
            f"unexpected {sorted(set(arrays) - expected_names)[:3]})")
    model.load_state_dict({name: torch.from_numpy(arr)
                           for name, arr in arrays.items()})
    return TrainedModel(model=model, target=target, config=config,
                        history=meta["history"])


def load_model_bank(checkpoint_dir: str | Path,
                    expected_config: TrainConfig | None = None
                    ) -> dict[str, TrainedModel]:
    """Load the seven per-class checkpoints from a directory.

    Raises CheckpointError naming every class whose checkpoint is missing.
    """
    from .dataset import CLASS_CODES

    checkpoint_dir = Path(checkpoint_dir)
    missing = [code for code in CLASS_CODES
               if not (checkpoint_dir / f"{code}.ckpt").is_file()]
    if missing:
        raise CheckpointError(
            f"missing checkpoint for class(es) {', '.join(missing)} "
            f"under {checkpoint_dir}")
    return {code: load_checkpoint(checkpoint_dir / f"{code}.ckpt", expected_config)
            for code in CLASS_CODES}
