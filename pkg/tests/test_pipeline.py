import numpy as np
import pytest
import torch

from pickrank.corpus import Sample
from pickrank.errors import DataError
from pickrank.model import ModelConfig, build_model
from pickrank.pipeline import (
    build_features,
    environment_features,
    evaluate_split,
    query_features,
    rank_sample,
)

PIPE_MODEL = ModelConfig(hidden=32, heads=2, layers_inst=1, layers_img=1, ffn_dim=64, n_p_max=8, n_c=2)


@pytest.fixture(scope="module")
def pipe_model():
    torch.manual_seed(77)
    model = build_model(PIPE_MODEL)
    model.eval()
    return model


class TestQueryFeatures:
    def test_masked_rows_are_zero(self, stub_backbone):
        qf = query_features(stub_backbone, "Bring me the white plant", n_p_max=8)
        assert qf.phrases.shape == (8, 768)
        assert qf.mask.tolist() == [True] + [False] * 7
        assert np.all(qf.phrases[1:] == 0)
        assert np.any(qf.phrases[0] != 0)

    def test_zero_phrase_fallback_flows_through_forward(self, stub_backbone, pipe_model):
        # "Go." has no NP/PP; the whole instruction becomes the single phrase
        qf = query_features(stub_backbone, "Go.", n_p_max=8)
        assert qf.mask.tolist() == [True] + [False] * 7
        pooled = pipe_model.encode_phrases(
            torch.from_numpy(qf.phrases).unsqueeze(0), torch.from_numpy(qf.mask).unsqueeze(0)
        )
        assert pooled.shape == (1, PIPE_MODEL.hidden)
        assert torch.isfinite(pooled).all()


class TestEnvironmentFeatures:
    def test_shapes(self, small_dataset, stub_backbone):
        env = small_dataset.environments["env00"]
        ef = environment_features(stub_backbone, env, n_c=2)
        n = len(env.candidates)
        assert ef.h_t.shape == (n, 768)
        assert ef.h_c.shape == (n, 2, 768)
        assert ef.h_strip is None

    def test_context_padded_by_duplicating_nearest(self, small_dataset, stub_backbone):
        env = small_dataset.environments["env00"]
        # ask for more context slots than stored: nearest view repeats
        ef = environment_features(stub_backbone, env, n_c=3)
        assert ef.h_c.shape[1] == 3
        assert np.array_equal(ef.h_c[0, 0], ef.h_c[0, 2])

    def test_strip_for_baseline(self, small_dataset, stub_backbone):
        env = small_dataset.environments["env00"]
        ef = environment_features(stub_backbone, env, n_c=2, include_strip=True)
        assert ef.h_strip.shape == (len(env.candidates), 768)


class TestRankSample:
    def test_covers_pool_exactly_once(self, small_dataset, stub_backbone, pipe_model):
        sample = small_dataset.samples[0]
        ranked = rank_sample(pipe_model, stub_backbone, small_dataset, sample)
        env_ids = small_dataset.environments[sample.env_id].candidate_ids()
        assert sorted(ranked.candidate_ids()) == sorted(env_ids)

    def test_deterministic(self, small_dataset, stub_backbone, pipe_model):
        sample = small_dataset.samples[1]
        r1 = rank_sample(pipe_model, stub_backbone, small_dataset, sample)
        r2 = rank_sample(pipe_model, stub_backbone, small_dataset, sample)
        assert r1.entries == r2.entries

    def test_unknown_env_rejected(self, small_dataset, stub_backbone, pipe_model):
        bad = Sample(sample_id="x", env_id="nope", instruction="go", relevant_ids=frozenset({"c"}))
        with pytest.raises(DataError):
            rank_sample(pipe_model, stub_backbone, small_dataset, bad)


class TestEvaluate:
    def test_report_over_split(self, small_dataset, stub_backbone, pipe_model):
        report = evaluate_split(pipe_model, small_dataset, "train", stub_backbone)
        assert report.n_inst == len(small_dataset.splits.train.samples)
        assert 0.0 <= report.mrr <= 1.0
        assert report.mrr_at_10 <= report.mrr + 1e-12

    def test_empty_split_rejected(self, small_dataset, stub_backbone, pipe_model):
        with pytest.raises(DataError, match="no samples"):
            evaluate_split(pipe_model, small_dataset, "val", stub_backbone)

    def test_perfect_and_inverted_oracle_scores(self, small_dataset):
        # a stub "model" that scores the true target 1.0 and others -1.0
        from pickrank.metrics import QueryResult, build_report
        from pickrank.model import rank_candidates

        samples = [small_dataset.samples_by_id[s] for s in small_dataset.splits.train.samples]
        perfect, inverted = [], []
        for s in samples:
            ids = small_dataset.environments[s.env_id].candidate_ids()
            hit = next(iter(s.relevant_ids))
            up = np.array([1.0 if c == hit else -1.0 for c in ids])
            perfect.append(
                QueryResult(s.sample_id, rank_candidates(s.sample_id, ids, up).candidate_ids(), s.relevant_ids)
            )
            inverted.append(
                QueryResult(s.sample_id, rank_candidates(s.sample_id, ids, -up).candidate_ids(), s.relevant_ids)
            )
        rp = build_report(perfect)
        assert rp.mrr == 1.0
        assert all(v == 1.0 for v in rp.recall_at.values())
        ri = build_report(inverted)
        pool = len(ids)
        assert ri.mrr == pytest.approx(1.0 / pool)

    def test_build_features_covers_requested_samples(self, small_dataset, stub_backbone):
        samples = [small_dataset.samples_by_id[s] for s in small_dataset.splits.train.samples[:4]]
        bundle = build_features(stub_backbone, small_dataset, samples, PIPE_MODEL)
        assert set(bundle.queries) == {s.sample_id for s in samples}
        assert set(bundle.envs) == {s.env_id for s in samples}
