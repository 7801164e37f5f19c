"""Versioned, sectioned binary checkpoint container.

Layout (little-endian)::

    b"SPLATSDF"  u32 version  u32 section_count
    repeated:  u32 name_length  name (utf-8)  u64 payload_length  payload

Every payload is a ``torch.save`` blob of tensors, numbers, strings and containers of
those, read back with ``weights_only=True``.
"""
import io
import os
import struct
import logging

import torch

from splatsdf.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"SPLATSDF"
CHECKPOINT_VERSION = 1
KNOWN_SECTIONS = ("config", "sdf_field", "splats", "optimizer", "rng", "progress")

_HEADER = struct.Struct("<8sII")
_NAME_LENGTH = struct.Struct("<I")
_PAYLOAD_LENGTH = struct.Struct("<Q")


def _encode(payload):
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    return buffer.getvalue()


def _decode(name, blob, path):
    try:
        return torch.load(io.BytesIO(blob), weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{path}: section '{name}' could not be decoded ({e})") from e


def save_checkpoint(path, sections):
    """
    Write ``sections`` (name -> payload) atomically to ``path``.

    Args:
        path (str): Destination file.
        sections (dict): Section payloads keyed by section name.
    """
    unknown = set(sections) - set(KNOWN_SECTIONS)
    if unknown:
        raise CheckpointError(f"Unknown checkpoint sections {sorted(unknown)}; valid sections are {list(KNOWN_SECTIONS)}")
    chunks = [_HEADER.pack(MAGIC, CHECKPOINT_VERSION, len(sections))]
    for name, payload in sections.items():
        encoded_name = name.encode("utf-8")
        blob = _encode(payload)
        chunks += [_NAME_LENGTH.pack(len(encoded_name)), encoded_name, _PAYLOAD_LENGTH.pack(len(blob)), blob]

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint {path} with sections {list(sections)}")


def _read_exact(f, size, path, what):
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return data


def load_checkpoint(path, sections=None):
    """
    Read a checkpoint written by ``save_checkpoint``.

    Args:
        path (str): Checkpoint file.
        sections (iterable): Names to decode; all sections when None.

    Returns:
        dict: Decoded payloads keyed by section name.
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint {path} does not exist")
    wanted = None if sections is None else set(sections)
    result = {}
    with open(path, "rb") as f:
        magic, version, count = _HEADER.unpack(_read_exact(f, _HEADER.size, path, "header"))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        if version > CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format version {version} is newer than the supported version {CHECKPOINT_VERSION}"
            )
        for _ in range(count):
            (name_length,) = _NAME_LENGTH.unpack(_read_exact(f, _NAME_LENGTH.size, path, "section name length"))
            name = _read_exact(f, name_length, path, "section name").decode("utf-8")
            (payload_length,) = _PAYLOAD_LENGTH.unpack(_read_exact(f, _PAYLOAD_LENGTH.size, path, f"section '{name}'"))
            blob = _read_exact(f, payload_length, path, f"section '{name}'")
            if wanted is None or name in wanted:
                result[name] = _decode(name, blob, path)
    if wanted is not None and wanted - set(result):
        raise CheckpointError(f"{path}: missing sections {sorted(wanted - set(result))}")
    return result


def section_names(path):
    """Section names in file order, without decoding payloads."""
    names = []
    with open(path, "rb") as f:
        magic, version, count = _HEADER.unpack(_read_exact(f, _HEADER.size, path, "header"))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        for _ in range(count):
            (name_length,) = _NAME_LENGTH.unpack(_read_exact(f, _NAME_LENGTH.size, path, "section name length"))
            names.append(_read_exact(f, name_length, path, "section name").decode("utf-8"))
            (payload_length,) = _PAYLOAD_LENGTH.unpack(_read_exact(f, _PAYLOAD_LENGTH.size, path, "payload length"))
            f.seek(payload_length, os.SEEK_CUR)
    return names


def rng_state(generator):
    """Serializable state of ``generator`` and torch's global generator."""
    return {"generator": generator.get_state(), "global": torch.get_rng_state()}


def restore_rng(generator, state):
    generator.set_state(state["generator"])
    torch.set_rng_state(state["global"])
