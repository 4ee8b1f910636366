"""Context-ablation ordering on separable synthetic data.

The corpus pairs lookalike candidates (same crop color/shape) that differ
only in the landmark visible in their context images, so a model without
context input is structurally capped on the validation environments. This
desk-scale run uses the deterministic stub backbone; the acceptance suite
carries the same experiment against the pretrained backbone, gated on
weight availability.
"""

import pytest

from pickrank.backbone import CachedBackbone, EmbeddingCache, HashProjectionBackbone
from pickrank.model import ModelConfig
from pickrank.pipeline import evaluate_split
from pickrank.synth import SynthConfig, synth_generate
from pickrank.training import TrainConfig, train


@pytest.fixture(scope="module")
def ablation_scores(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ablation")
    dataset = synth_generate(
        SynthConfig(n_envs=10, candidates_per_env=8, n_c=2, samples_per_candidate=2, val_envs=2),
        seed=7,
        out_dir=tmp / "corpus",
    ).dataset
    backbone = CachedBackbone(HashProjectionBackbone(), EmbeddingCache(tmp / "cache"))
    scores = {}
    for variant in ("full", "no_context"):
        model_config = ModelConfig(
            hidden=64, heads=4, layers_inst=1, layers_img=1, ffn_dim=128,
            n_p_max=8, n_c=2, temperature=0.1, variant=variant,
        )
        config = TrainConfig(learning_rate=1e-4, batch_size=8, max_epochs=40, seed=1, eval_every_epoch=False)
        result = train(config, model_config, dataset, backbone)
        scores[variant] = evaluate_split(result.model, dataset, "val", backbone)
    return scores


def test_full_variant_at_least_matches_no_context(ablation_scores):
    assert ablation_scores["full"].mrr >= ablation_scores["no_context"].mrr


def test_both_variants_beat_chance(ablation_scores):
    # 8-candidate pools: chance MRR is about 0.34
    assert ablation_scores["no_context"].mrr > 0.40
    assert ablation_scores["full"].mrr > 0.40
