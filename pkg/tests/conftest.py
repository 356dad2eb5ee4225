import json

import pytest

from adgve.config import load_config
from adgve.prompts import load_catalog


@pytest.fixture(scope="session")
def cfg():
    return load_config(None)


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


def minimal_doc(**overrides) -> dict:
    doc = {
        "video_id": "v0",
        "width": 100,
        "height": 80,
        "fps": 10,
        "num_frames": 1,
        "tracks": [{"track_id": 1, "class": "vehicle", "boxes": [{"frame": 0, "x": 10, "y": 10, "w": 20, "h": 10}]}],
        "masks": [],
        "lane_boundaries": [],
    }
    doc.update(overrides)
    return doc


def doc_bytes(doc: dict) -> bytes:
    return json.dumps(doc).encode("utf-8")


def write_batch(out_dir, specs) -> "Path":
    """Write scenes for ``specs`` plus a manifest; returns the manifest path."""
    from pathlib import Path

    from adgve.synth import gen_scenario, write_scenario

    out = Path(out_dir)
    names = [write_scenario(*gen_scenario(s), out).name for s in specs]
    manifest = out / "manifest.txt"
    manifest.write_text("".join(n + "\n" for n in names), encoding="utf-8")
    return manifest


SEPARATION_SEEDS = range(9000, 9020)


@pytest.fixture(scope="session")
def separation_batch(tmp_path_factory):
    """20 scenes, the first 8 with injected violations: (manifest, clean names)."""
    from adgve.synth import random_spec

    specs = [random_spec(s, violated=i < 8) for i, s in enumerate(SEPARATION_SEEDS)]
    manifest = write_batch(tmp_path_factory.mktemp("separation"), specs)
    names = manifest.read_text().split()
    return manifest, names[8:]


@pytest.fixture(scope="session")
def oracle_cfg(cfg):
    return cfg.with_values({"vlm.mode": "oracle_stub"})
