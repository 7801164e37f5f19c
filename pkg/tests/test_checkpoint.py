import struct

import pytest
import torch

from splatsdf.errors import CheckpointError
from splatsdf.utils.checkpoint import (
    CHECKPOINT_VERSION,
    MAGIC,
    load_checkpoint,
    restore_rng,
    rng_state,
    save_checkpoint,
    section_names,
)


def sample_sections():
    return {
        "config": {"text": "[sdf]\nsdf_iters = 10\n"},
        "splats": {"means": torch.arange(12, dtype=torch.float64).reshape(4, 3), "count": 4},
        "progress": {"iteration": 7, "losses": [0.5, 0.25]},
    }


def test_round_trip(tmp_path):
    path = str(tmp_path / "state.ckpt")
    save_checkpoint(path, sample_sections())
    loaded = load_checkpoint(path)
    assert list(loaded) == ["config", "splats", "progress"]
    assert loaded["config"]["text"] == "[sdf]\nsdf_iters = 10\n"
    assert torch.equal(loaded["splats"]["means"], torch.arange(12, dtype=torch.float64).reshape(4, 3))
    assert loaded["progress"] == {"iteration": 7, "losses": [0.5, 0.25]}
    assert section_names(path) == ["config", "splats", "progress"]

    partial = load_checkpoint(path, sections=["progress"])
    assert list(partial) == ["progress"]


def test_rejects_unknown_and_missing_sections(tmp_path):
    path = str(tmp_path / "state.ckpt")
    with pytest.raises(CheckpointError, match="Unknown checkpoint sections"):
        save_checkpoint(path, {"weights": {}})

    save_checkpoint(path, sample_sections())
    with pytest.raises(CheckpointError, match="missing sections"):
        load_checkpoint(path, sections=["optimizer"])


def test_rejects_corrupt_files(tmp_path):
    path = tmp_path / "state.ckpt"
    save_checkpoint(str(path), sample_sections())
    data = path.read_bytes()

    tests = [
        ("bad_magic.ckpt", b"NOTACKPT" + data[8:], "bad magic"),
        ("future.ckpt", data[:8] + struct.pack("<I", CHECKPOINT_VERSION + 1) + data[12:], "newer than the supported"),
        ("truncated.ckpt", data[: len(data) - 10], "truncated"),
        ("header_only.ckpt", data[:6], "truncated while reading header"),
    ]
    for name, contents, message in tests:
        bad = tmp_path / name
        bad.write_bytes(contents)
        with pytest.raises(CheckpointError, match=message):
            load_checkpoint(str(bad))

    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(str(tmp_path / "absent.ckpt"))
    assert data.startswith(MAGIC)


def test_no_partial_file_left_behind(tmp_path):
    path = tmp_path / "state.ckpt"
    save_checkpoint(str(path), sample_sections())
    assert [p.name for p in tmp_path.iterdir()] == ["state.ckpt"]


def test_rng_state_restores_draws():
    generator = torch.Generator().manual_seed(3)
    torch.manual_seed(5)
    state = rng_state(generator)
    first = (torch.rand(4, generator=generator), torch.rand(4))
    restore_rng(generator, state)
    second = (torch.rand(4, generator=generator), torch.rand(4))
    assert torch.equal(first[0], second[0]) and torch.equal(first[1], second[1])
