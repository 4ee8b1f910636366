"""Feature assembly and the end-to-end ranking/evaluation paths.

Raw backbone features for a query (phrase vectors, instruction vector) and
for an environment's candidates (crop vector, context vectors) are computed
once and reused; ranking and evaluation run on these bundles, so training
loops, offline evaluation, and the serving index all share one scoring path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import Backbone
from .corpus import Dataset, Environment, Sample, hconcat_resize, load_image
from .errors import DataError
from .metrics import QueryResult, Report, build_report
from .model import BaselineModel, ModelConfig, RankedList, RankingModel, rank_candidates
from .phrases import ChunkerBackend, extract_phrase_set


@dataclass
class QueryFeatures:
    phrases: np.ndarray       # [n_p_max, D] float32, zero rows where masked
    mask: np.ndarray          # [n_p_max] bool
    h_instruction: np.ndarray  # [D] float32


@dataclass
class EnvFeatures:
    env_id: str
    candidate_ids: list[str]
    h_t: np.ndarray            # [N, D]
    h_c: np.ndarray            # [N, n_c, D]
    h_strip: np.ndarray | None = None  # [N, D], baseline context strip


@dataclass
class FeatureBundle:
    envs: dict[str, EnvFeatures]
    queries: dict[str, QueryFeatures] = field(default_factory=dict)  # sample_id -> features


def query_features(
    backbone: Backbone,
    instruction: str,
    n_p_max: int,
    chunker: ChunkerBackend | None = None,
    sample_id: str = "",
) -> QueryFeatures:
    phrase_set = extract_phrase_set(instruction, n_p_max=n_p_max, backend=chunker, sample_id=sample_id)
    dim = backbone.dim
    vectors = np.zeros((n_p_max, dim), dtype=np.float32)
    for i, (span, real) in enumerate(zip(phrase_set.phrases, phrase_set.mask)):
        if real:
            vectors[i] = backbone.embed_text(span.text)
    return QueryFeatures(
        phrases=vectors,
        mask=np.asarray(phrase_set.mask, dtype=bool),
        h_instruction=backbone.embed_text(instruction),
    )


def _context_images(env: Environment, paths: tuple[str, ...], n_c: int) -> list[np.ndarray]:
    if not paths:
        raise DataError("candidate has no context images")
    images = [load_image(env.image_root / p) for p in paths[:n_c]]
    while len(images) < n_c:  # nearest view duplicated, mirroring corpus padding
        images.append(images[0])
    return images


def environment_features(
    backbone: Backbone, env: Environment, n_c: int, include_strip: bool = False
) -> EnvFeatures:
    h_t, h_c, strips = [], [], []
    for cand in env.candidates:
        crop = load_image(env.image_root / cand.crop_path)
        h_t.append(backbone.embed_image(crop))
        ctx = _context_images(env, cand.context_paths, n_c)
        h_c.append(np.stack([backbone.embed_image(im) for im in ctx]))
        if include_strip:
            strips.append(backbone.embed_image(hconcat_resize(ctx)))
    return EnvFeatures(
        env_id=env.env_id,
        candidate_ids=env.candidate_ids(),
        h_t=np.stack(h_t).astype(np.float32),
        h_c=np.stack(h_c).astype(np.float32),
        h_strip=np.stack(strips).astype(np.float32) if include_strip else None,
    )


def build_features(
    backbone: Backbone,
    dataset: Dataset,
    samples: list[Sample],
    config: ModelConfig,
    chunker: ChunkerBackend | None = None,
) -> FeatureBundle:
    include_strip = config.variant == "baseline"
    env_ids = sorted({s.env_id for s in samples})
    envs = {
        env_id: environment_features(backbone, dataset.environments[env_id], config.n_c, include_strip)
        for env_id in env_ids
    }
    queries = {
        s.sample_id: query_features(backbone, s.instruction, config.n_p_max, chunker, s.sample_id)
        for s in samples
    }
    return FeatureBundle(envs=envs, queries=queries)


def score_candidates(model, qf: QueryFeatures, ef: EnvFeatures) -> np.ndarray:
    """Scores of every candidate in the environment for one query."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if isinstance(model, BaselineModel):
                h_i = torch.from_numpy(qf.h_instruction).unsqueeze(0)
                scores = model(h_i, torch.from_numpy(ef.h_t), torch.from_numpy(ef.h_strip))[0]
            else:
                phrases = torch.from_numpy(qf.phrases).unsqueeze(0)
                mask = torch.from_numpy(qf.mask).unsqueeze(0)
                pooled = model.encode_phrases(phrases, mask)
                h_t = torch.from_numpy(ef.h_t)
                h_targ = model.encode_target(h_t, torch.from_numpy(ef.h_c))
                cand_part = model.candidate_partial(h_t)
                h_i = torch.from_numpy(qf.h_instruction).unsqueeze(0)
                scores = model.score_pairs(pooled, h_i, h_targ, cand_part)[0]
            return scores.cpu().numpy().astype(np.float64)
    finally:
        if was_training:
            model.train()


def rank_from_features(model, sample_id: str, qf: QueryFeatures, ef: EnvFeatures) -> RankedList:
    return rank_candidates(sample_id, ef.candidate_ids, score_candidates(model, qf, ef))


def rank_sample(
    model,
    backbone: Backbone,
    dataset: Dataset,
    sample: Sample,
    chunker: ChunkerBackend | None = None,
    env_features_cache: dict[str, EnvFeatures] | None = None,
) -> RankedList:
    """Rank the sample's whole environment pool for its instruction."""
    env = dataset.environments.get(sample.env_id)
    if env is None:
        raise DataError(f"sample {sample.sample_id!r} references unknown environment {sample.env_id!r}")
    config: ModelConfig = model.config
    if env_features_cache is not None and sample.env_id in env_features_cache:
        ef = env_features_cache[sample.env_id]
    else:
        ef = environment_features(backbone, env, config.n_c, include_strip=config.variant == "baseline")
        if env_features_cache is not None:
            env_features_cache[sample.env_id] = ef
    qf = query_features(backbone, sample.instruction, config.n_p_max, chunker, sample.sample_id)
    return rank_from_features(model, sample.sample_id, qf, ef)


def evaluate_features(model, bundle: FeatureBundle, samples: list[Sample]) -> Report:
    if not samples:
        raise DataError("evaluate: empty sample list")
    results = []
    for s in samples:
        ranked = rank_from_features(model, s.sample_id, bundle.queries[s.sample_id], bundle.envs[s.env_id])
        results.append(QueryResult(sample_id=s.sample_id, ranking=ranked.candidate_ids(), relevant=s.relevant_ids))
    return build_report(results)


def evaluate_split(
    model,
    dataset: Dataset,
    split: str,
    backbone: Backbone,
    chunker: ChunkerBackend | None = None,
) -> Report:
    """Rank every sample of the split and aggregate the full metric set."""
    samples = dataset.split_samples(split)
    if not samples:
        raise DataError(f"split {split!r} has no samples")
    bundle = build_features(backbone, dataset, samples, model.config, chunker)
    return evaluate_features(model, bundle, samples)
