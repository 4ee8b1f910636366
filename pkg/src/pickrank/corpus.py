"""Dataset model: environments, candidate objects, samples, splits.

A dataset lives on disk as one JSON manifest plus image files referenced by
relative path. Loading is eager and strict: schema first, then referential
integrity (every sample's relevant ids exist in its environment, split
environments are pairwise disjoint, image files are present).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .errors import DataError, EdgeBoxError

CONTEXT_SIZE = 256  # context images are CONTEXT_SIZE x CONTEXT_SIZE RGB
FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format_version", "environments", "samples", "splits"],
    "properties": {
        "format_version": {"type": "integer"},
        "environments": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["env_id", "candidates"],
                "properties": {
                    "env_id": {"type": "string", "minLength": 1},
                    "candidates": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["candidate_id", "crop_path", "context_paths", "source_panorama", "box"],
                            "properties": {
                                "candidate_id": {"type": "string", "minLength": 1},
                                "crop_path": {"type": "string"},
                                "context_paths": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                                "source_panorama": {"type": "string"},
                                "box": {
                                    "type": "object",
                                    "required": ["x", "y", "w", "h"],
                                    "properties": {
                                        "x": {"type": "integer"},
                                        "y": {"type": "integer"},
                                        "w": {"type": "integer"},
                                        "h": {"type": "integer"},
                                    },
                                },
                            },
                        },
                    },
                },
            },
        },
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["sample_id", "env_id", "instruction", "relevant_ids"],
                "properties": {
                    "sample_id": {"type": "string", "minLength": 1},
                    "env_id": {"type": "string"},
                    "instruction": {"type": "string"},
                    "relevant_ids": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                },
            },
        },
        "splits": {
            "type": "object",
            "required": ["train", "val", "test"],
            "properties": {
                name: {
                    "type": "object",
                    "required": ["envs", "samples"],
                    "properties": {
                        "envs": {"type": "array", "items": {"type": "string"}},
                        "samples": {"type": "array", "items": {"type": "string"}},
                    },
                }
                for name in SPLIT_NAMES
            },
        },
    },
}


@dataclass(frozen=True)
class Box:
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class CandidateObject:
    candidate_id: str
    crop_path: str
    context_paths: tuple[str, ...]
    source_panorama: str
    box: Box


@dataclass(frozen=True)
class Environment:
    env_id: str
    candidates: tuple[CandidateObject, ...]
    image_root: Path

    def candidate_ids(self) -> list[str]:
        return [c.candidate_id for c in self.candidates]

    def candidate(self, candidate_id: str) -> CandidateObject:
        for c in self.candidates:
            if c.candidate_id == candidate_id:
                return c
        raise DataError(f"unknown candidate {candidate_id!r} in environment {self.env_id!r}")


@dataclass(frozen=True)
class Sample:
    sample_id: str
    env_id: str
    instruction: str
    relevant_ids: frozenset[str]


@dataclass(frozen=True)
class SplitPart:
    envs: tuple[str, ...]
    samples: tuple[str, ...]


@dataclass(frozen=True)
class SplitSet:
    train: SplitPart
    val: SplitPart
    test: SplitPart

    def part(self, name: str) -> SplitPart:
        if name not in SPLIT_NAMES:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class Dataset:
    environments: dict[str, Environment]
    samples: list[Sample]
    splits: SplitSet
    root: Path
    samples_by_id: dict[str, Sample] = field(init=False)

    def __post_init__(self):
        self.samples_by_id = {s.sample_id: s for s in self.samples}

    def split_samples(self, name: str) -> list[Sample]:
        return [self.samples_by_id[sid] for sid in self.splits.part(name).samples]


def load_image(path: Path) -> np.ndarray:
    """8-bit RGB array (H, W, 3) from any common raster format."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except FileNotFoundError:
        raise DataError(f"missing image file: {path}") from None
    except Exception as e:  # undecodable
        raise DataError(f"cannot decode image {path}: {e}") from e


def save_image(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array.astype(np.uint8))).save(path)


def load_manifest(path: str | Path, check_images: bool = True) -> Dataset:
    """Parse, validate, and fully link a dataset manifest."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {e}") from e

    validator = jsonschema.Draft7Validator(MANIFEST_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise DataError(f"manifest schema violation at {where}: {e.message}")
    if raw["format_version"] != FORMAT_VERSION:
        raise DataError(f"unsupported manifest format_version {raw['format_version']}, expected {FORMAT_VERSION}")

    root = path.parent
    environments: dict[str, Environment] = {}
    for env_raw in raw["environments"]:
        env_id = env_raw["env_id"]
        if env_id in environments:
            raise DataError(f"duplicate env_id {env_id!r}")
        candidates = []
        seen = set()
        for c in env_raw["candidates"]:
            cid = c["candidate_id"]
            if cid in seen:
                raise DataError(f"duplicate candidate_id {cid!r} in environment {env_id!r}")
            seen.add(cid)
            box = Box(**c["box"])
            if box.w < 1 or box.h < 1:
                raise DataError(f"candidate {cid!r}: degenerate box {box}")
            candidates.append(
                CandidateObject(
                    candidate_id=cid,
                    crop_path=c["crop_path"],
                    context_paths=tuple(c["context_paths"]),
                    source_panorama=c["source_panorama"],
                    box=box,
                )
            )
        environments[env_id] = Environment(env_id=env_id, candidates=tuple(candidates), image_root=root)

    if check_images:
        for env in environments.values():
            for c in env.candidates:
                for rel in (c.crop_path, *c.context_paths):
                    if not (root / rel).exists():
                        raise DataError(
                            f"candidate {c.candidate_id!r} in {env.env_id!r} references missing image file {rel!r}"
                        )

    samples: list[Sample] = []
    seen_sample_ids: set[str] = set()
    for s in raw["samples"]:
        sid = s["sample_id"]
        if sid in seen_sample_ids:
            raise DataError(f"duplicate sample_id {sid!r}")
        seen_sample_ids.add(sid)
        if not s["instruction"].strip():
            raise DataError(f"sample {sid!r}: instruction empty after trimming")
        env = environments.get(s["env_id"])
        if env is None:
            raise DataError(f"sample {sid!r} references unknown environment {s['env_id']!r}")
        pool = set(env.candidate_ids())
        dangling = [r for r in s["relevant_ids"] if r not in pool]
        if dangling:
            raise DataError(f"sample {sid!r} references unknown candidate_id(s) {dangling} in {env.env_id!r}")
        samples.append(
            Sample(
                sample_id=sid,
                env_id=s["env_id"],
                instruction=s["instruction"],
                relevant_ids=frozenset(s["relevant_ids"]),
            )
        )

    splits = _parse_splits(raw["splits"], environments, {s.sample_id: s for s in samples})
    return Dataset(environments=environments, samples=samples, splits=splits, root=root)


def _parse_splits(
    raw_splits: dict, environments: dict[str, Environment], samples_by_id: dict[str, Sample]
) -> SplitSet:
    parts = {}
    for name in SPLIT_NAMES:
        part = raw_splits[name]
        for env_id in part["envs"]:
            if env_id not in environments:
                raise DataError(f"split {name!r} references unknown environment {env_id!r}")
        for sid in part["samples"]:
            if sid not in samples_by_id:
                raise DataError(f"split {name!r} references unknown sample {sid!r}")
        parts[name] = SplitPart(envs=tuple(part["envs"]), samples=tuple(part["samples"]))

    env_sets = {name: set(parts[name].envs) for name in SPLIT_NAMES}
    for a in SPLIT_NAMES:
        for b in SPLIT_NAMES:
            if a < b and env_sets[a] & env_sets[b]:
                raise DataError(f"splits {a!r} and {b!r} share environments {sorted(env_sets[a] & env_sets[b])}")

    env_to_split = {e: name for name in SPLIT_NAMES for e in env_sets[name]}
    for name in SPLIT_NAMES:
        for sid in parts[name].samples:
            env_id = samples_by_id[sid].env_id
            if env_to_split.get(env_id) != name:
                raise DataError(
                    f"sample {sid!r} is in split {name!r} but its environment {env_id!r} is not"
                )
    for sample in samples_by_id.values():
        if sample.env_id not in env_to_split:
            raise DataError(f"environment {sample.env_id!r} of sample {sample.sample_id!r} is in no split")
    return SplitSet(**parts)


def dataset_to_manifest_dict(dataset: Dataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "environments": [
            {
                "env_id": env.env_id,
                "candidates": [
                    {
                        "candidate_id": c.candidate_id,
                        "crop_path": c.crop_path,
                        "context_paths": list(c.context_paths),
                        "source_panorama": c.source_panorama,
                        "box": {"x": c.box.x, "y": c.box.y, "w": c.box.w, "h": c.box.h},
                    }
                    for c in env.candidates
                ],
            }
            for env in sorted(dataset.environments.values(), key=lambda e: e.env_id)
        ],
        "samples": [
            {
                "sample_id": s.sample_id,
                "env_id": s.env_id,
                "instruction": s.instruction,
                "relevant_ids": sorted(s.relevant_ids),
            }
            for s in dataset.samples
        ],
        "splits": {
            name: {
                "envs": list(dataset.splits.part(name).envs),
                "samples": list(dataset.splits.part(name).samples),
            }
            for name in SPLIT_NAMES
        },
    }


def save_manifest(dataset: Dataset, path: str | Path) -> None:
    """Write the manifest deterministically (stable key order, fixed layout)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(dataset_to_manifest_dict(dataset), indent=2, sort_keys=True)
    path.write_text(payload + "\n", "utf-8")


def crop_target(panorama: np.ndarray, box: Box) -> np.ndarray:
    """Exact pixel sub-rectangle of an RGB panorama.

    Boxes touching any border are rejected so partially captured objects
    never enter the candidate pool.
    """
    if panorama.ndim != 3 or panorama.shape[2] != 3:
        raise DataError(f"panorama must be (H, W, 3), got shape {panorama.shape}")
    h, w = panorama.shape[:2]
    if box.w < 1 or box.h < 1:
        raise DataError(f"degenerate box {box}")
    if box.x < 0 or box.y < 0 or box.x + box.w > w or box.y + box.h > h:
        raise DataError(f"box {box} outside panorama of size {w}x{h}")
    if box.x == 0 or box.y == 0 or box.x + box.w == w or box.y + box.h == h:
        raise EdgeBoxError(f"box {box} touches the border of the {w}x{h} panorama")
    return panorama[box.y : box.y + box.h, box.x : box.x + box.w].copy()


@dataclass(frozen=True)
class ContextView:
    """One stored surrounding view: id, viewing angle (degrees), image path."""

    view_id: str
    angle_deg: float
    path: str = ""


def angular_distance_deg(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def attach_context(candidate_angle_deg: float, views: list[ContextView], n_c: int) -> list[ContextView]:
    """Pick the ``n_c`` views angularly nearest to the candidate's viewpoint.

    Nearest first, ties broken by view id; order does not depend on the
    enumeration order of ``views``. When fewer than ``n_c`` views exist the
    nearest view is duplicated to pad.
    """
    if n_c < 1:
        raise DataError(f"attach_context: n_c must be >= 1, got {n_c}")
    if not views:
        raise DataError("attach_context: empty image store")
    ordered = sorted(views, key=lambda v: (angular_distance_deg(v.angle_deg, candidate_angle_deg), v.view_id))
    picked = ordered[:n_c]
    while len(picked) < n_c:
        picked.append(ordered[0])
    return picked


def resize_rgb(image: np.ndarray, size: int = CONTEXT_SIZE) -> np.ndarray:
    """Bilinear resize to size x size, 8-bit RGB."""
    img = Image.fromarray(np.ascontiguousarray(image.astype(np.uint8)))
    return np.asarray(img.resize((size, size), Image.BILINEAR))


def hconcat_resize(images: list[np.ndarray], size: int = CONTEXT_SIZE) -> np.ndarray:
    """Concatenate images horizontally (height-aligned) and resize to size x size."""
    if not images:
        raise DataError("hconcat_resize: no images")
    target_h = max(im.shape[0] for im in images)
    aligned = []
    for im in images:
        if im.shape[0] != target_h:
            w = max(1, round(im.shape[1] * target_h / im.shape[0]))
            img = Image.fromarray(np.ascontiguousarray(im.astype(np.uint8)))
            im = np.asarray(img.resize((w, target_h), Image.BILINEAR))
        aligned.append(im)
    strip = np.concatenate(aligned, axis=1)
    return resize_rgb(strip, size)


def build_splits(dataset: Dataset, env_partition: dict[str, list[str]]) -> SplitSet:
    """Assign every sample to the split owning its environment."""
    for name in SPLIT_NAMES:
        if name not in env_partition:
            raise DataError(f"env partition is missing split {name!r}")
    assigned: dict[str, str] = {}
    for name in SPLIT_NAMES:
        for env_id in env_partition[name]:
            if env_id not in dataset.environments:
                raise DataError(f"partition references unknown environment {env_id!r}")
            if env_id in assigned:
                raise DataError(f"environment {env_id!r} appears in splits {assigned[env_id]!r} and {name!r}")
            assigned[env_id] = name
    uncovered = sorted(set(dataset.environments) - set(assigned))
    if uncovered:
        raise DataError(f"partition does not cover environments {uncovered}")

    split_samples: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    for sample in dataset.samples:
        split_samples[assigned[sample.env_id]].append(sample.sample_id)
    return SplitSet(
        **{
            name: SplitPart(envs=tuple(env_partition[name]), samples=tuple(split_samples[name]))
            for name in SPLIT_NAMES
        }
    )


_WORD_RE = re.compile(r"[a-z0-9'\-]+")


def stats_tokens(text: str) -> list[str]:
    """Lowercased, punctuation-stripped whitespace words used for statistics."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Stats:
    n_environments: int
    n_samples: int
    n_candidates: int
    total_words: int
    vocabulary_size: int
    mean_instruction_words: float

    def as_dict(self) -> dict:
        return {
            "n_environments": self.n_environments,
            "n_samples": self.n_samples,
            "n_candidates": self.n_candidates,
            "total_words": self.total_words,
            "vocabulary_size": self.vocabulary_size,
            "mean_instruction_words": self.mean_instruction_words,
        }


def dataset_stats(dataset: Dataset) -> Stats:
    vocab: set[str] = set()
    total = 0
    for s in dataset.samples:
        tokens = stats_tokens(s.instruction)
        total += len(tokens)
        vocab.update(tokens)
    n_samples = len(dataset.samples)
    return Stats(
        n_environments=len(dataset.environments),
        n_samples=n_samples,
        n_candidates=sum(len(e.candidates) for e in dataset.environments.values()),
        total_words=total,
        vocabulary_size=len(vocab),
        mean_instruction_words=(total / n_samples) if n_samples else 0.0,
    )
