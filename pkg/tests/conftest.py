import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    rows = []
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = str(getattr(rep, "nodeid", ""))
            if "test_acceptance.py" not in nodeid or "::" not in nodeid:
                continue
            if status in ("passed", "failed") and getattr(rep, "when", "call") != "call":
                continue
            rows.append((nodeid.split("::")[-1], status.upper()))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(set(rows)):
            terminalreporter.write_line(f"{status:8s} {name}")

from pickrank.backbone import CachedBackbone, EmbeddingCache, HashProjectionBackbone
from pickrank.corpus import load_manifest
from pickrank.synth import SynthConfig, synth_generate

TESTS_DIR = Path(__file__).parent
DATA_DIR = TESTS_DIR / "data"


@pytest.fixture()
def stub_backbone():
    return CachedBackbone(HashProjectionBackbone())


@pytest.fixture()
def cached_stub_backbone(tmp_path):
    return CachedBackbone(HashProjectionBackbone(), EmbeddingCache(tmp_path / "cache"))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """2 train envs x 8 candidates with a mirrored test split; session-scoped
    because image generation dominates test time."""
    out = tmp_path_factory.mktemp("smallcorpus")
    result = synth_generate(
        SynthConfig(n_envs=2, candidates_per_env=8, n_c=2, mirror_test=True), seed=11, out_dir=out
    )
    return result


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    return small_corpus.dataset


def write_tiny_manifest(root: Path, n_envs: int = 2, candidates_per_env: int = 2, samples_per_env: int = 1) -> Path:
    """Hand-rolled minimal manifest with real (tiny) image files."""
    root.mkdir(parents=True, exist_ok=True)
    envs = []
    samples = []
    for e in range(n_envs):
        env_id = f"e{e}"
        candidates = []
        for c in range(candidates_per_env):
            cid = f"{env_id}c{c}"
            crop_rel = f"images/{env_id}/{cid}_crop.png"
            ctx_rel = f"images/{env_id}/{cid}_ctx0.png"
            pano_rel = f"images/{env_id}/{cid}_pano.png"
            for rel, size in ((crop_rel, 8), (ctx_rel, 16), (pano_rel, 32)):
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                arr = np.full((size, size, 3), 40 * (c + 1) % 255, dtype=np.uint8)
                Image.fromarray(arr).save(path)
            candidates.append(
                {
                    "candidate_id": cid,
                    "crop_path": crop_rel,
                    "context_paths": [ctx_rel],
                    "source_panorama": pano_rel,
                    "box": {"x": 4, "y": 4, "w": 8, "h": 8},
                }
            )
        envs.append({"env_id": env_id, "candidates": candidates})
        for s in range(samples_per_env):
            samples.append(
                {
                    "sample_id": f"{env_id}s{s}",
                    "env_id": env_id,
                    "instruction": f"Bring me the red cube number {s} please.",
                    "relevant_ids": [f"{env_id}c{s % candidates_per_env}"],
                }
            )
    env_ids = [f"e{e}" for e in range(n_envs)]
    manifest = {
        "format_version": 1,
        "environments": envs,
        "samples": samples,
        "splits": {
            "train": {"envs": env_ids[:1], "samples": [s["sample_id"] for s in samples if s["env_id"] == "e0"]},
            "val": {"envs": env_ids[1:2], "samples": [s["sample_id"] for s in samples if s["env_id"] == "e1"]},
            "test": {"envs": env_ids[2:], "samples": [s["sample_id"] for s in samples if s["env_id"] not in ("e0", "e1")]},
        },
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), "utf-8")
    return path


@pytest.fixture()
def tiny_manifest(tmp_path):
    return write_tiny_manifest(tmp_path / "tiny")


@pytest.fixture()
def tiny_dataset(tiny_manifest):
    return load_manifest(tiny_manifest)
