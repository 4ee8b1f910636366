"""Build a synthetic desk-scale corpus and look inside it.

Every candidate object is a colored shape cropped from a textured panorama;
its context images show the shape next to a landmark. Candidates come in
lookalike pairs that only the landmark disambiguates, which is what makes
the instructions genuinely context-dependent.
"""

import json
import tempfile
from pathlib import Path

from pickrank.corpus import dataset_stats, load_manifest
from pickrank.synth import SynthConfig, synth_generate

out_dir = Path(tempfile.mkdtemp(prefix="pickrank-demo-")) / "corpus"
print(f"generating corpus under {out_dir} ...")

result = synth_generate(
    SynthConfig(n_envs=3, candidates_per_env=8, n_c=4, samples_per_candidate=1, val_envs=1),
    seed=42,
    out_dir=out_dir,
)
dataset = result.dataset

stats = dataset_stats(dataset)
print("\ncorpus statistics:")
print(json.dumps(stats.as_dict(), indent=2))

env = dataset.environments["env00"]
print(f"\nenvironment env00 has {len(env.candidates)} candidates; the first two are a lookalike pair:")
for cand in env.candidates[:2]:
    attrs = result.attrs[cand.candidate_id]
    print(f"  {cand.candidate_id}: {attrs.color} {attrs.shape}, landmark = {attrs.lm_color} {attrs.lm_shape}")
    print(f"    crop: {cand.crop_path}")
    print(f"    context: {list(cand.context_paths)}")

print("\nsample instructions:")
for sample in dataset.samples[:4]:
    print(f"  [{sample.sample_id}] {sample.instruction!r} -> {sorted(sample.relevant_ids)}")

print("\nsplits are environment-disjoint:")
for name in ("train", "val", "test"):
    part = dataset.splits.part(name)
    print(f"  {name}: envs={list(part.envs)} samples={len(part.samples)}")

# the manifest on disk round-trips losslessly
reloaded = load_manifest(out_dir / "manifest.json")
assert sorted(reloaded.environments) == sorted(dataset.environments)
print("\nmanifest round-trip OK:", out_dir / "manifest.json")
