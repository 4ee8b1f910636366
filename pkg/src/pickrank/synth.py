"""Synthetic desk-scale corpus generator.

Each environment holds candidates rendered as solid-color shapes on textured
backgrounds. Candidates come in lookalike pairs (same color and shape) that
are distinguished only by the landmark shown in their context images, so
instructions must reference the landmark and context carries real signal.
Everything is driven by a seeded generator: same seed, same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .corpus import (
    Box,
    CandidateObject,
    Dataset,
    Environment,
    Sample,
    SplitPart,
    SplitSet,
    crop_target,
    save_manifest,
)
from .errors import DataError

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (200, 40, 40),
    "blue": (40, 70, 200),
    "green": (40, 160, 60),
    "yellow": (220, 200, 40),
    "purple": (140, 50, 170),
    "orange": (230, 130, 30),
    "cyan": (40, 190, 190),
    "brown": (130, 80, 40),
}

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")

TEMPLATES = (
    "Go to the spot with the {lc} {ls}. Pick up the {c} {s} near it.",
    "Find the {c} {s} next to the {lc} {ls} and bring it to me.",
    "Please move to the area that has a {lc} {ls}. Grab the {c} {s} beside it.",
    "Bring me the {c} {s} by the {lc} {ls}.",
    "Head to the corner where the {lc} {ls} is and take the {c} {s} close to it.",
)

PANO_W, PANO_H = 640, 192
CTX_SIZE = 256


@dataclass(frozen=True)
class SynthConfig:
    n_envs: int = 2
    candidates_per_env: int = 16
    n_c: int = 4
    samples_per_candidate: int = 1
    val_envs: int = 0
    test_envs: int = 0
    mirror_test: bool = False  # append byte-identical copies of train envs as the test split
    max_attempts: int = 20

    def __post_init__(self):
        if self.n_envs < 1 or self.candidates_per_env < 1 or self.n_c < 1:
            raise DataError("synth config: counts must be >= 1")
        if self.val_envs + self.test_envs >= self.n_envs and not self.mirror_test:
            if self.val_envs + self.test_envs > self.n_envs:
                raise DataError("synth config: val_envs + test_envs exceeds n_envs")


@dataclass(frozen=True)
class CandidateAttrs:
    color: str
    shape: str
    lm_color: str
    lm_shape: str


@dataclass
class SynthResult:
    dataset: Dataset
    attrs: dict[str, CandidateAttrs] = field(default_factory=dict)  # candidate_id -> attrs


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, color: tuple[int, int, int], cx: int, cy: int, r: int):
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    elif shape == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=color)
    elif shape == "cross":
        t = max(2, r // 3)
        draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=color)
        draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=color)
    elif shape == "ring":
        width = max(3, r // 3)
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=color, width=width)
    else:
        raise DataError(f"unknown shape {shape!r}")


def _textured_background(rng: np.random.Generator, w: int, h: int) -> Image.Image:
    base = rng.integers(150, 210, size=3)
    img = Image.new("RGB", (w, h), tuple(int(v) for v in base))
    draw = ImageDraw.Draw(img)
    for _ in range(24):
        x0 = int(rng.integers(0, w))
        y0 = int(rng.integers(0, h))
        bw = int(rng.integers(8, max(10, w // 6)))
        bh = int(rng.integers(8, max(10, h // 6)))
        shade = base + rng.integers(-25, 25, size=3)
        shade = np.clip(shade, 0, 255)
        draw.rectangle([x0, y0, x0 + bw, y0 + bh], fill=tuple(int(v) for v in shade))
    return img


def _render_panorama(rng: np.random.Generator, attrs: CandidateAttrs) -> tuple[np.ndarray, Box]:
    img = _textured_background(rng, PANO_W, PANO_H)
    draw = ImageDraw.Draw(img)
    r = int(rng.integers(24, 40))
    margin = 12  # strictly larger than the maximum box pad: edge boxes are rejected downstream
    cx = int(rng.integers(r + margin, PANO_W - r - margin))
    cy = int(rng.integers(r + margin, PANO_H - r - margin))
    _draw_shape(draw, attrs.shape, COLORS[attrs.color], cx, cy, r)
    pad = int(rng.integers(4, 11))
    box = Box(x=cx - r - pad, y=cy - r - pad, w=2 * (r + pad), h=2 * (r + pad))
    return np.asarray(img), box


def _render_context(rng: np.random.Generator, attrs: CandidateAttrs) -> np.ndarray:
    img = _textured_background(rng, CTX_SIZE, CTX_SIZE)
    draw = ImageDraw.Draw(img)
    r_obj = int(rng.integers(34, 46))
    r_lm = int(rng.integers(34, 46))
    ox = int(rng.integers(r_obj + 4, CTX_SIZE // 2 - 8))
    oy = int(rng.integers(r_obj + 4, CTX_SIZE - r_obj - 4))
    lx = int(rng.integers(CTX_SIZE // 2 + 8, CTX_SIZE - r_lm - 4))
    ly = int(rng.integers(r_lm + 4, CTX_SIZE - r_lm - 4))
    _draw_shape(draw, attrs.shape, COLORS[attrs.color], ox, oy, r_obj)
    _draw_shape(draw, attrs.lm_shape, COLORS[attrs.lm_color], lx, ly, r_lm)
    return np.asarray(img)


def _env_attrs(rng: np.random.Generator, n_candidates: int) -> list[CandidateAttrs]:
    """Lookalike pairs: same (color, shape), different landmarks."""
    combos = [(c, s) for c in COLORS for s in SHAPES]
    n_pairs = (n_candidates + 1) // 2
    if n_pairs > len(combos):
        raise DataError(
            f"cannot generate {n_candidates} candidates: vocabulary supports at most {2 * len(combos)}"
        )
    pair_idx = rng.choice(len(combos), size=n_pairs, replace=False)
    attrs: list[CandidateAttrs] = []
    for k in pair_idx:
        color, shape = combos[int(k)]
        lm_pool = [cb for cb in combos if cb != (color, shape)]
        lm_a, lm_b = (lm_pool[int(i)] for i in rng.choice(len(lm_pool), size=2, replace=False))
        attrs.append(CandidateAttrs(color, shape, lm_a[0], lm_a[1]))
        attrs.append(CandidateAttrs(color, shape, lm_b[0], lm_b[1]))
    return attrs[:n_candidates]


def _matches(instruction_attrs: CandidateAttrs, candidate: CandidateAttrs) -> bool:
    return instruction_attrs == candidate


def _check_unique(attrs: list[CandidateAttrs]) -> bool:
    """Exhaustive satisfiability check: each description matches exactly one candidate."""
    for i, a in enumerate(attrs):
        hits = sum(1 for b in attrs if _matches(a, b))
        if hits != 1:
            return False
    return True


def synth_generate(config: SynthConfig, seed: int, out_dir: str | Path) -> SynthResult:
    """Generate images + manifest under ``out_dir``; deterministic per seed."""
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    environments: dict[str, Environment] = {}
    samples: list[Sample] = []
    attrs_by_cid: dict[str, CandidateAttrs] = {}

    for env_idx in range(config.n_envs):
        env_id = f"env{env_idx:02d}"
        attrs = None
        for _ in range(config.max_attempts):
            candidate = _env_attrs(rng, config.candidates_per_env)
            if _check_unique(candidate):
                attrs = candidate
                break
        if attrs is None:
            raise DataError("could not generate an unambiguous candidate pool; template configuration rejected")

        candidates = []
        env_dir = out_dir / "images" / env_id
        env_dir.mkdir(parents=True, exist_ok=True)
        for c_idx, a in enumerate(attrs):
            cid = f"{env_id}-c{c_idx:02d}"
            attrs_by_cid[cid] = a
            pano, box = _render_panorama(rng, a)
            crop = crop_target(pano, box)
            pano_rel = f"images/{env_id}/{cid}_pano.png"
            crop_rel = f"images/{env_id}/{cid}_crop.png"
            Image.fromarray(pano).save(out_dir / pano_rel)
            Image.fromarray(crop).save(out_dir / crop_rel)
            ctx_rels = []
            for j in range(config.n_c):
                ctx = _render_context(rng, a)
                rel = f"images/{env_id}/{cid}_ctx{j}.png"
                Image.fromarray(ctx).save(out_dir / rel)
                ctx_rels.append(rel)
            candidates.append(
                CandidateObject(
                    candidate_id=cid,
                    crop_path=crop_rel,
                    context_paths=tuple(ctx_rels),
                    source_panorama=pano_rel,
                    box=box,
                )
            )
        environments[env_id] = Environment(env_id=env_id, candidates=tuple(candidates), image_root=out_dir)

        for c_idx, a in enumerate(attrs):
            cid = f"{env_id}-c{c_idx:02d}"
            for k in range(config.samples_per_candidate):
                template = TEMPLATES[int(rng.integers(0, len(TEMPLATES)))]
                instruction = template.format(c=a.color, s=a.shape, lc=a.lm_color, ls=a.lm_shape)
                samples.append(
                    Sample(
                        sample_id=f"{env_id}-s{c_idx:02d}{k:02d}",
                        env_id=env_id,
                        instruction=instruction,
                        relevant_ids=frozenset({cid}),
                    )
                )

    env_ids = sorted(environments)
    n_val, n_test = config.val_envs, config.test_envs
    test_ids = env_ids[len(env_ids) - n_test :] if n_test else []
    val_ids = env_ids[len(env_ids) - n_test - n_val : len(env_ids) - n_test] if n_val else []
    train_ids = [e for e in env_ids if e not in set(val_ids) | set(test_ids)]

    if config.mirror_test:
        # Byte-identical copies of the train environments under new ids; the
        # resulting test split has known metrics for any memorizing model.
        mirrored_samples = []
        for env_id in train_ids:
            src = environments[env_id]
            mirror_id = f"{env_id}m"
            mirrored = []
            for c in src.candidates:
                mid = c.candidate_id.replace(env_id, mirror_id, 1)
                mirrored.append(replace(c, candidate_id=mid))
                attrs_by_cid[mid] = attrs_by_cid[c.candidate_id]
            environments[mirror_id] = Environment(env_id=mirror_id, candidates=tuple(mirrored), image_root=out_dir)
            test_ids.append(mirror_id)
            for s in samples:
                if s.env_id == env_id:
                    mirrored_samples.append(
                        Sample(
                            sample_id=s.sample_id.replace(env_id, mirror_id, 1),
                            env_id=mirror_id,
                            instruction=s.instruction,
                            relevant_ids=frozenset(r.replace(env_id, mirror_id, 1) for r in s.relevant_ids),
                        )
                    )
        samples.extend(mirrored_samples)

    def part(ids: list[str]) -> SplitPart:
        id_set = set(ids)
        return SplitPart(envs=tuple(ids), samples=tuple(s.sample_id for s in samples if s.env_id in id_set))

    splits = SplitSet(train=part(train_ids), val=part(val_ids), test=part(test_ids))
    dataset = Dataset(environments=environments, samples=samples, splits=splits, root=out_dir)
    save_manifest(dataset, out_dir / "manifest.json")
    sidecar = {cid: vars(a) for cid, a in sorted(attrs_by_cid.items())}
    (out_dir / "synth_attrs.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", "utf-8")
    return SynthResult(dataset=dataset, attrs=attrs_by_cid)
