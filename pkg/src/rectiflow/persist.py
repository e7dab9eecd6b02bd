"""On-disk formats: PGM images, run-length masks, checkpoints and phantom datasets.

A checkpoint is a directory holding ``manifest.json`` and ``tensors.bin``. The
blob is the concatenation of named float32 little-endian arrays; the manifest
records each tensor's offset and shape, the blob's sha256 and a format version.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .codec import Codec, LatentStats
from .flow import FlowModel
from .nets import build_model
from .phantom import LesionCase, Phantom

FORMAT_VERSION = 1
DATASET_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


# -- PGM -----------------------------------------------------------------------------


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary P5, 8-bit. Float input is read as [0, 1] and rounded; uint8 is written as is."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary P5 PGM with maxval <= 255 as a uint8 (H, W) array."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if not m:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    if not 0 < maxval <= 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    data = raw[pos + 1 : pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# -- run-length masks ----------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> str:
    """``"HxW:r0 r1 ..."`` with alternating run lengths over the row-major mask, starting with False."""
    m = np.asarray(mask, dtype=bool)
    flat = m.ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return f"{m.shape[0]}x{m.shape[1]}:" + " ".join(str(r) for r in runs)


def rle_decode(text: str) -> np.ndarray:
    shape_s, _, runs_s = text.partition(":")
    h, w = (int(v) for v in shape_s.split("x"))
    runs = [int(v) for v in runs_s.split()]
    if sum(runs) != h * w:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {h * w}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(h, w)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """Write named tensors plus JSON metadata; returns the checkpoint directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        chunks.append(arr.tobytes())
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.nbytes
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_bytes": len(blob),
        "tensors": index,
        "meta": meta,
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Inverse of :func:`save_checkpoint`; returns ``(tensors, meta)``.

    Raises :class:`CheckpointVersionError` on an unknown format version and
    :class:`CheckpointIntegrityError` when the blob does not match its hash.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version!r}, this build reads {FORMAT_VERSION}")
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CheckpointIntegrityError(f"tensor blob at {path / BLOB} does not match its manifest hash")
    tensors = {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=entry["count"], offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return tensors, manifest["meta"]


def _codec_payload(codec: Codec) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    tensors = {"codec.stats.mean": codec.stats.mean, "codec.stats.std": codec.stats.std}
    meta: dict[str, Any] = {"variant": codec.variant, "fit_mse": codec.fit_mse}
    if codec.model is not None:
        tensors.update({f"codec.model.{k}": v for k, v in codec.model.state_dict().items()})
        meta["model"] = codec.model.config()
    return tensors, meta


def _codec_from_payload(tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> Codec:
    stats = LatentStats(tensors["codec.stats.mean"], tensors["codec.stats.std"])
    if meta["variant"] == "identity":
        codec = Codec("identity")
    else:
        model = build_model(meta["model"])
        pre = "codec.model."
        model.load_state_dict({k[len(pre) :]: v for k, v in tensors.items() if k.startswith(pre)})
        codec = Codec(meta["variant"], model)
    codec.stats = stats
    codec.fit_mse = meta.get("fit_mse")
    return codec


def save_codec(path: str | Path, codec: Codec) -> Path:
    tensors, meta = _codec_payload(codec)
    return save_checkpoint(path, tensors, {"kind": "codec", "codec": meta})


def load_codec(path: str | Path) -> Codec:
    tensors, meta = load_checkpoint(path)
    if "codec" not in meta:
        raise CheckpointError(f"checkpoint at {path} holds no codec")
    return _codec_from_payload(tensors, meta["codec"])


def save_flow(path: str | Path, flow: FlowModel, codec: Codec | None = None, extra: dict | None = None) -> Path:
    """Velocity parameters, flow metadata and (optionally) the codec in one checkpoint."""
    tensors = {f"velocity.{k}": v for k, v in flow.velocity.state_dict().items()}
    meta: dict[str, Any] = {
        "kind": "flow",
        "velocity": flow.velocity.config(),
        "flow": flow.metadata(),
        "checkpoint_id": flow.checkpoint_id(),
        "extra": extra or {},
    }
    if codec is not None:
        ct, cm = _codec_payload(codec)
        tensors.update(ct)
        meta["codec"] = cm
    return save_checkpoint(path, tensors, meta)


def load_flow(path: str | Path) -> tuple[FlowModel, Codec | None]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise CheckpointError(f"checkpoint at {path} is not a flow checkpoint")
    model = build_model(meta["velocity"])
    pre = "velocity."
    model.load_state_dict({k[len(pre) :]: v for k, v in tensors.items() if k.startswith(pre)})
    fm = meta["flow"]
    flow = FlowModel(
        model,
        fm["generation"],
        loss_curve=list(fm["loss_curve"]),
        epochs=fm["epochs"],
        seed=fm["seed"],
        status=fm["status"],
        teacher_id=fm["teacher_id"],
    )
    codec = _codec_from_payload(tensors, meta["codec"]) if "codec" in meta else None
    return flow, codec


# -- phantom datasets ----------------------------------------------------------------


def export_dataset(out_dir: str | Path, items: Sequence[Phantom | LesionCase], meta: dict | None = None) -> Path:
    """Write each image as PGM plus a manifest with seeds and RLE masks."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, item in enumerate(items):
        name = f"images/{i:05d}.pgm"
        write_pgm(out_dir / name, item.image)
        if isinstance(item, LesionCase):
            entry = {
                "file": name,
                "phantom_seed": item.phantom.seed,
                "lesion_seed": item.seed,
                "kind": item.kind,
                "severity": item.severity,
                "gt_mask": rle_encode(item.gt_mask),
                "foreground": rle_encode(item.phantom.foreground),
            }
        else:
            entry = {"file": name, "phantom_seed": item.seed, "foreground": rle_encode(item.foreground)}
        entries.append(entry)
    manifest = {"format_version": DATASET_VERSION, "meta": meta or {}, "items": entries}
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


def import_dataset(path: str | Path) -> tuple[list[dict], dict]:
    """Load a dataset directory: one dict per item with ``image`` in [0, 1] and decoded masks."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format_version") != DATASET_VERSION:
        raise ValueError(f"dataset format version {manifest.get('format_version')!r} not supported")
    items = []
    for e in manifest["items"]:
        item = dict(e)
        item["image"] = read_pgm(path / e["file"]).astype(np.float32) / 255.0
        item["foreground"] = rle_decode(e["foreground"])
        if "gt_mask" in e:
            item["gt_mask"] = rle_decode(e["gt_mask"])
        items.append(item)
    return items, manifest["meta"]
