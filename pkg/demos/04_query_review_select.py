"""Serve an indexed environment, query it, and play the operator's role.

The service precomputes per-candidate embeddings; each query only embeds the
instruction text, scores the pool through the fused head, and returns a
ranked payload. The operator's selection is validated against the shown
list, logged to the session, and dispatched as a pick command.
"""

import json
import tempfile
import time
from pathlib import Path

import torch

from pickrank.backbone import CachedBackbone, EmbeddingCache, HashProjectionBackbone
from pickrank.model import ModelConfig, build_model
from pickrank.pipeline import query_features
from pickrank.service import LoopbackSink, RankingService
from pickrank.synth import SynthConfig, synth_generate

tmp = Path(tempfile.mkdtemp(prefix="pickrank-demo-serve-"))
result = synth_generate(SynthConfig(n_envs=1, candidates_per_env=8, n_c=2), seed=5, out_dir=tmp / "corpus")
dataset = result.dataset
backbone = CachedBackbone(HashProjectionBackbone(), EmbeddingCache(tmp / "cache"))

torch.manual_seed(0)
model = build_model(ModelConfig(hidden=64, heads=4, layers_inst=1, layers_img=1, ffn_dim=128, n_p_max=8, n_c=2))
sink = LoopbackSink()
service = RankingService(dataset, model, backbone, index_dir=tmp / "index", sink=sink)
service.ensure_index("env00")
print(f"index built under {tmp / 'index'}")

# pick a real sample so the instruction matches the scene
sample = dataset.samples[0]
print(f"\noperator types: {sample.instruction!r}")
payload = service.query(sample.instruction, "env00", top_k=5, session_id="demo")
for row in payload["results"]:
    print(f"  #{row['rank']}  {row['score']:+.4f}  {row['candidate_id']}  crop={row['crop_url']}")

# warm-path latency, text embedding excluded
qf = query_features(backbone, sample.instruction, model.config.n_p_max)
started = time.perf_counter()
service.score_environment("env00", qf)
print(f"\npost-text-embedding scoring took {(time.perf_counter() - started) * 1e3:.1f} ms")

chosen = payload["results"][0]["candidate_id"]
event = service.record_selection("demo", payload["query_id"], chosen)
print(f"\noperator selects rank {event.rank}: {event.chosen} -> dispatch {event.dispatch_status!r}")
print("pick command received by the sink:", json.dumps(sink.picks[-1]))
print("\nsession log:")
for entry in service.session_log("demo"):
    print(f"  {entry['query_id']}  chose {entry['chosen']} (rank {entry['rank']})")
