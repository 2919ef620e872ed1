"""Binary formats: IDX datasets, the logits store, and network checkpoints.

IDX is big-endian as the format mandates; our own formats are little-endian.
All writers go through a temp file and an atomic rename.
"""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import nn


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ArchitectureMismatchError(FormatError):
    pass


class ChecksumMismatchError(FormatError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_maybe_gz(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


# --------------------------------------------------------------------------- IDX

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def parse_idx(raw: bytes, magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedError("IDX file shorter than its magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) < head + n:
        raise TruncatedError(f"IDX body has {len(raw) - head} bytes, header promises {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def load_idx_dataset(images_path, labels_path):
    """Read an IDX image/label pair (optionally gzipped).

    Returns (images float32 in [0, 1] with shape (N, H, W, 1), labels int64).
    """
    imgs = parse_idx(_read_maybe_gz(images_path), IDX_IMAGES)
    labels = parse_idx(_read_maybe_gz(labels_path), IDX_LABELS)
    if imgs.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    x = (imgs.astype(np.float32) / np.float32(255.0))[..., None]
    return x, labels.astype(np.int64)


def resolve_dataset(prefix) -> tuple[Path, Path]:
    """Map a dataset argument to its (images, labels) IDX paths.

    Accepts an images file whose name contains "images" (labels found by
    substitution) or a prefix P with P-images.idx[.gz] / P-labels.idx[.gz].
    """
    p = Path(prefix)
    if p.is_file() and "images" in p.name:
        return p, p.with_name(p.name.replace("images", "labels"))
    for ext in (".idx", ".idx.gz"):
        img = p.parent / f"{p.name}-images{ext}"
        if img.exists():
            return img, p.parent / f"{p.name}-labels{ext}"
    raise FileNotFoundError(f"no IDX dataset found for {prefix!r}")


# --------------------------------------------------------------------------- logits store

LGT_MAGIC = b"LGT1"
LGT_VERSION = 1
FLAG_SUCCESS = 1


def encode_logits_store(records, attack: str, classifier_sha256: str = "",
                        num_classes: int | None = None) -> bytes:
    if records:
        num_classes = len(records[0].z)
    if num_classes is None:
        raise ValueError("num_classes is required for an empty store")
    for r in records:
        if r.attack != attack:
            raise ValueError(f"record attack {r.attack!r} != store attack {attack!r}")
        if r.z.shape != (num_classes,) or r.z_adv.shape != (num_classes,):
            raise ValueError("inconsistent logits length")
    digest = bytes.fromhex(classifier_sha256) if classifier_sha256 else b"\0" * 32
    if len(digest) != 32:
        raise ValueError("classifier checksum must be a sha256 hex digest")
    name = attack.encode("utf-8")
    head = LGT_MAGIC + struct.pack("<IIII", LGT_VERSION, len(records), num_classes, len(name))
    head += name + digest
    rec_dtype = np.dtype([("y", "<u4"), ("flags", "<u4"),
                          ("z", "<f4", (num_classes,)), ("z_adv", "<f4", (num_classes,))])
    body = np.zeros(len(records), dtype=rec_dtype)
    for i, r in enumerate(records):
        body[i] = (r.label, FLAG_SUCCESS if r.success else 0, r.z, r.z_adv)
    return head + body.tobytes()


def save_logits_store(path, records, attack: str, classifier_sha256: str = "",
                      num_classes: int | None = None) -> None:
    atomic_write(path, encode_logits_store(records, attack, classifier_sha256, num_classes))


def load_logits_store(path, checkpoint=None):
    """Returns (records, header dict). If ``checkpoint`` is given, its sha256
    must match the checksum recorded in the store."""
    from .defender import LogitsRecord

    raw = Path(path).read_bytes()
    if raw[:4] != LGT_MAGIC:
        raise BadMagicError(f"{path}: not a logits store")
    if len(raw) < 20:
        raise TruncatedError(f"{path}: header truncated")
    version, count, c, name_len = struct.unpack("<IIII", raw[4:20])
    if version != LGT_VERSION:
        raise VersionError(f"{path}: store version {version}, expected {LGT_VERSION}")
    off = 20 + name_len + 32
    if len(raw) < off:
        raise TruncatedError(f"{path}: header truncated")
    try:
        attack = raw[20:20 + name_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: attack id is not UTF-8") from e
    digest = raw[20 + name_len:off]
    checksum = "" if digest == b"\0" * 32 else digest.hex()
    rec_dtype = np.dtype([("y", "<u4"), ("flags", "<u4"),
                          ("z", "<f4", (c,)), ("z_adv", "<f4", (c,))])
    if len(raw) != off + count * rec_dtype.itemsize:
        raise TruncatedError(
            f"{path}: {len(raw) - off} record bytes, header declares {count} x {rec_dtype.itemsize}")
    if checkpoint is not None and sha256_file(checkpoint) != checksum:
        raise ChecksumMismatchError(f"{path}: classifier checksum does not match {checkpoint}")
    body = np.frombuffer(raw, dtype=rec_dtype, count=count, offset=off)
    if count and np.any(body["y"] >= c):
        raise FormatError(f"{path}: label out of range")
    records = [LogitsRecord(z=np.array(b["z"], dtype=np.float32),
                            z_adv=np.array(b["z_adv"], dtype=np.float32),
                            label=int(b["y"]), attack=attack,
                            source=i, success=bool(b["flags"] & FLAG_SUCCESS))
               for i, b in enumerate(body)]
    return records, {"version": version, "count": count, "num_classes": c,
                     "attack": attack, "classifier_sha256": checksum}


# --------------------------------------------------------------------------- checkpoints

CKPT_MAGIC = "LCKPT"
CKPT_VERSION = 1


def encode_checkpoint(net: nn.Network, config: dict | None = None) -> bytes:
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}",
             f"arch={net.arch}",
             f"classes={net.num_classes}",
             f"seed={net.seed}",
             "input_shape=" + ("" if net.input_shape is None else ",".join(map(str, net.input_shape)))]
    for k, v in sorted((config or {}).items()):
        s = str(v)
        if "\n" in s or "=" in k:
            raise ValueError(f"config entry {k!r} cannot be written to a text header")
        lines.append(f"config.{k}={s}")
    lines.append("end")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params())
    return ("\n".join(lines) + "\n").encode("utf-8") + blob


def save_checkpoint(path, net: nn.Network, config: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(net, config))


def load_checkpoint(path):
    """Returns (network, header dict with the training-config echo under "config")."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(CKPT_MAGIC.encode()) or end < 0:
        raise BadMagicError(f"{path}: not a checkpoint")
    text = raw[:end].decode("utf-8").split("\n")
    magic, version = text[0].split()
    if int(version) != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}")
    head, config = {}, {}
    for line in text[1:]:
        k, _, v = line.partition("=")
        if k.startswith("config."):
            config[k[len("config."):]] = v
        else:
            head[k] = v
    shape = tuple(int(s) for s in head["input_shape"].split(",")) if head.get("input_shape") else None
    try:
        template = nn.build_network(head["arch"], int(head["classes"]), int(head["seed"]), shape)
    except (KeyError, ValueError) as e:
        raise ArchitectureMismatchError(f"{path}: bad architecture header: {e}") from e
    blob = raw[end + len(b"\nend\n"):]
    need = 4 * template.n_params
    if len(blob) != need:
        raise ArchitectureMismatchError(
            f"{path}: {len(blob)} weight bytes, architecture {head['arch']!r} needs {need}")
    params, off = [], 0
    for p in template.params():
        params.append(np.frombuffer(blob, dtype="<f4", count=p.size, offset=off)
                      .reshape(p.shape).astype(np.float32))
        off += 4 * p.size
    net = template.with_params(params)
    _check_chain(net, path)
    return net, {"version": int(version), **head, "config": config}


def _check_chain(net: nn.Network, path) -> None:
    """Layer widths must chain; a hand-edited header must not load as a silent reshape."""
    if net.input_shape is None:
        return
    try:
        nn.forward(net, np.zeros((1,) + net.input_shape, dtype=np.float32))
    except nn.ShapeError as e:
        raise ArchitectureMismatchError(f"{path}: {e}") from e
