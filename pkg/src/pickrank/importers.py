"""Adapter from the REVERIE/Matterport annotation layout to our manifest.

The source data is licensed and never redistributed, so this module only
transforms a locally provided tree. Expected layout under ``src_dir``:

    annotations/train.json        [{"id", "scan", "objId", "instructions": [...]}, ...]
    annotations/val_unseen.json   same shape; divided into val/test by scan
    bboxes/<scan>.json            {"<objId>": {"panorama": <rel image path>,
                                               "bbox": [x, y, w, h],
                                               "context": [<rel image paths>...]}}
    images/...                    files referenced above

Bounding boxes touching a panorama border are dropped, together with samples
that end up with no surviving target.
"""

from __future__ import annotations

import json
from pathlib import Path

from PIL import Image

from .corpus import (
    Box,
    CandidateObject,
    Dataset,
    Environment,
    Sample,
    SplitPart,
    SplitSet,
    crop_target,
    load_image,
    resize_rgb,
    save_image,
    save_manifest,
)
from .errors import DataError, EdgeBoxError


def _read_json(path: Path):
    if not path.exists():
        raise DataError(f"missing source file: {path}")
    return json.loads(path.read_text("utf-8"))


def import_reverie(
    src_dir: str | Path,
    out_dir: str | Path,
    accept_license: bool = False,
    val_scans: list[str] | None = None,
    test_scans: list[str] | None = None,
    n_c: int = 4,
) -> Dataset:
    """Build a manifest tree under ``out_dir`` from a local REVERIE-style tree."""
    if not accept_license:
        raise DataError(
            "refusing to import: the source dataset is licensed; pass accept_license=True "
            "(--accept-source-license on the command line) to confirm you hold it"
        )
    src = Path(src_dir)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    train_entries = _read_json(src / "annotations" / "train.json")
    unseen_entries = _read_json(src / "annotations" / "val_unseen.json")

    scans_by_split: dict[str, set[str]] = {"train": {e["scan"] for e in train_entries}}
    unseen_scans = sorted({e["scan"] for e in unseen_entries})
    if val_scans is None and test_scans is None:
        half = len(unseen_scans) // 2
        val_scans, test_scans = unseen_scans[:half], unseen_scans[half:]
    val_scans = list(val_scans or [])
    test_scans = list(test_scans or [])
    scans_by_split["val"] = set(val_scans)
    scans_by_split["test"] = set(test_scans)
    overlap = scans_by_split["train"] & (scans_by_split["val"] | scans_by_split["test"])
    if overlap:
        raise DataError(f"train scans overlap val/test scans: {sorted(overlap)}")

    environments: dict[str, Environment] = {}
    samples: list[Sample] = []
    split_samples: dict[str, list[str]] = {"train": [], "val": [], "test": []}

    def split_of(scan: str) -> str | None:
        for name, scans in scans_by_split.items():
            if scan in scans:
                return name
        return None

    def build_environment(scan: str) -> Environment | None:
        bbox_path = src / "bboxes" / f"{scan}.json"
        records = _read_json(bbox_path)
        candidates = []
        for obj_id in sorted(records, key=str):
            rec = records[obj_id]
            pano_rel = rec["panorama"]
            panorama = load_image(src / pano_rel)
            x, y, w, h = (int(v) for v in rec["bbox"])
            box = Box(x=x, y=y, w=w, h=h)
            try:
                crop = crop_target(panorama, box)
            except EdgeBoxError:
                continue  # boxes at panorama edges may cut the object; drop them
            cid = f"{scan}-obj{obj_id}"
            env_dir = out / "images" / scan
            crop_rel = f"images/{scan}/{cid}_crop.png"
            save_image(crop, out / crop_rel)
            ctx_rels = []
            context_srcs = list(rec.get("context") or [pano_rel])
            context_srcs = (context_srcs + [context_srcs[0]] * n_c)[:n_c]
            for j, ctx_src in enumerate(context_srcs):
                ctx = resize_rgb(load_image(src / ctx_src))
                rel = f"images/{scan}/{cid}_ctx{j}.png"
                save_image(ctx, out / rel)
                ctx_rels.append(rel)
            pano_rel_out = f"images/{scan}/{Path(pano_rel).stem}_pano.png"
            if not (out / pano_rel_out).exists():
                env_dir.mkdir(parents=True, exist_ok=True)
                Image.fromarray(panorama).save(out / pano_rel_out)
            candidates.append(
                CandidateObject(
                    candidate_id=cid,
                    crop_path=crop_rel,
                    context_paths=tuple(ctx_rels),
                    source_panorama=pano_rel_out,
                    box=box,
                )
            )
        if not candidates:
            return None
        return Environment(env_id=scan, candidates=tuple(candidates), image_root=out)

    for entries in (train_entries, unseen_entries):
        for entry in entries:
            scan = entry["scan"]
            split = split_of(scan)
            if split is None:
                continue
            if scan not in environments:
                env = build_environment(scan)
                if env is None:
                    continue
                environments[scan] = env
            env = environments[scan]
            cid = f"{scan}-obj{entry['objId']}"
            if cid not in set(env.candidate_ids()):
                continue  # target was edge-filtered out
            for k, instruction in enumerate(entry["instructions"]):
                if not str(instruction).strip():
                    continue
                sid = f"{entry['id']}-{k}"
                samples.append(
                    Sample(sample_id=sid, env_id=scan, instruction=str(instruction), relevant_ids=frozenset({cid}))
                )
                split_samples[split].append(sid)

    if not environments:
        raise DataError("no environments survived the import")

    splits = SplitSet(
        train=SplitPart(envs=tuple(sorted(e for e in environments if split_of(e) == "train")),
                        samples=tuple(split_samples["train"])),
        val=SplitPart(envs=tuple(sorted(e for e in environments if split_of(e) == "val")),
                      samples=tuple(split_samples["val"])),
        test=SplitPart(envs=tuple(sorted(e for e in environments if split_of(e) == "test")),
                       samples=tuple(split_samples["test"])),
    )
    dataset = Dataset(environments=environments, samples=samples, splits=splits, root=out)
    save_manifest(dataset, out / "manifest.json")
    return dataset
