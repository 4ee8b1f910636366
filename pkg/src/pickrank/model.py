"""Ranking model: phrase encoder, target/context encoder, fused scoring head.

The query side pools extracted phrase embeddings with a transformer, fuses
them with the whole-instruction embedding and the candidate crop embedding
through a feedforward head; the candidate side encodes [crop; context...]
with a second transformer and mean-pools. Scores are cosine similarities,
trained with an in-batch contrastive loss over the score matrix.

The fused head is evaluated through per-slice partial products (query part
plus candidate part) so precomputed candidate partials from an index are
bit-identical to direct evaluation; ranking never depends on which path
produced the score.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, ModelError, NumericError

CHECKPOINT_KIND = "pickrank-checkpoint"
CHECKPOINT_FORMAT_VERSION = 1

VARIANT_FULL = "full"
VARIANT_NO_CNPE = "no_cnpe"
VARIANT_NO_CONTEXT = "no_context"
VARIANT_BASELINE = "baseline"
VARIANTS = (VARIANT_FULL, VARIANT_NO_CNPE, VARIANT_NO_CONTEXT, VARIANT_BASELINE)


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 768          # transformer width (#H)
    heads: int = 4             # attention heads (#A)
    layers_inst: int = 4       # phrase-encoder depth
    layers_img: int = 4        # target/context-encoder depth
    ffn_dim: int = 2048
    n_p_max: int = 8
    n_c: int = 4
    temperature: float = 1.0
    variant: str = VARIANT_FULL
    input_dim: int = 768       # backbone feature width; projected when != hidden

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ModelError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.temperature <= 0:
            raise ModelError(f"temperature must be positive, got {self.temperature}")
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.n_p_max < 1 or self.n_c < 1:
            raise ModelError("n_p_max and n_c must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _encoder(config: ModelConfig, num_layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=config.hidden,
        nhead=config.heads,
        dim_feedforward=config.ffn_dim,
        dropout=0.0,
        activation="gelu",
        batch_first=True,
    )
    return nn.TransformerEncoder(layer, num_layers=num_layers, enable_nested_tensor=False)


class RankingModel(nn.Module):
    """Trainable ranking head over frozen backbone features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.variant == VARIANT_BASELINE:
            raise ModelError("use BaselineModel for the baseline variant")
        self.config = config
        h = config.hidden
        self.in_proj = nn.Linear(config.input_dim, h) if config.input_dim != h else None
        self.pos_phrase = nn.Parameter(torch.zeros(config.n_p_max, h))
        self.pos_ctx = nn.Parameter(torch.zeros(config.n_c + 1, h))
        nn.init.normal_(self.pos_phrase, std=0.02)
        nn.init.normal_(self.pos_ctx, std=0.02)
        self.phrase_encoder = _encoder(config, config.layers_inst)
        self.target_encoder = _encoder(config, config.layers_img)
        self.fuse = nn.Linear(3 * h, h)
        self.fuse_norm = nn.LayerNorm(h)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        return self.in_proj(x) if self.in_proj is not None else x

    def encode_phrases(self, phrases: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Masked transformer pass over phrase embeddings, mean-pooled.

        phrases: [B, n_p_max, input_dim]; mask: [B, n_p_max] bool, True = real.
        For the no_cnpe variant the pooled output is zeros by contract.
        """
        if phrases.ndim != 3 or phrases.shape[1] != self.config.n_p_max:
            raise DataError(f"phrases must be [B, {self.config.n_p_max}, D], got {tuple(phrases.shape)}")
        if mask.shape != phrases.shape[:2]:
            raise DataError(f"mask shape {tuple(mask.shape)} does not match phrases {tuple(phrases.shape[:2])}")
        mask = mask.bool()
        if not bool(mask.any(dim=1).all()):
            raise DataError("encode_phrases: some row has no unmasked phrase")
        if self.config.variant == VARIANT_NO_CNPE:
            return phrases.new_zeros(phrases.shape[0], self.config.hidden)
        x = self.project(phrases) + self.pos_phrase
        out = self.phrase_encoder(x, src_key_padding_mask=~mask)
        w = mask.unsqueeze(-1).to(out.dtype)
        return (out * w).sum(dim=1) / w.sum(dim=1)

    def encode_target(self, h_t: torch.Tensor, h_c: torch.Tensor | None) -> torch.Tensor:
        """Transformer pass over [crop; context...] tokens, mean-pooled.

        h_t: [B, input_dim]; h_c: [B, n_c, input_dim] (ignored and may be None
        for the no_context variant).
        """
        if h_t.ndim != 2:
            raise DataError(f"h_t must be [B, D], got {tuple(h_t.shape)}")
        t = self.project(h_t).unsqueeze(1)
        if self.config.variant == VARIANT_NO_CONTEXT:
            tokens = t + self.pos_ctx[:1]
        else:
            if h_c is None or h_c.ndim != 3 or h_c.shape[1] != self.config.n_c:
                got = None if h_c is None else tuple(h_c.shape)
                raise DataError(f"h_c must be [B, {self.config.n_c}, D], got {got}")
            tokens = torch.cat([t, self.project(h_c)], dim=1) + self.pos_ctx
        out = self.target_encoder(tokens)
        return out.mean(dim=1)

    # Fused head, evaluated as W1@pooled + W2@h_I + b (query part) plus
    # W3@h_t (candidate part). The candidate part is what an index caches.
    def query_partial(self, pooled: torch.Tensor, h_instruction: torch.Tensor) -> torch.Tensor:
        h = self.config.hidden
        w = self.fuse.weight
        return pooled @ w[:, :h].T + self.project(h_instruction) @ w[:, h : 2 * h].T + self.fuse.bias

    def candidate_partial(self, h_t: torch.Tensor) -> torch.Tensor:
        h = self.config.hidden
        return self.project(h_t) @ self.fuse.weight[:, 2 * h :].T

    def fuse_partials(self, query_part: torch.Tensor, candidate_part: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.fuse_norm(query_part + candidate_part))

    def encode_instruction(self, pooled: torch.Tensor, h_instruction: torch.Tensor, h_t: torch.Tensor) -> torch.Tensor:
        """Candidate-conditioned query embedding (row-aligned inputs)."""
        if not (pooled.shape[-1] == self.config.hidden):
            raise DataError(f"pooled must have width {self.config.hidden}, got {pooled.shape[-1]}")
        if h_instruction.shape[-1] != self.config.input_dim or h_t.shape[-1] != self.config.input_dim:
            raise DataError(
                f"h_instruction/h_t must have width {self.config.input_dim}, "
                f"got {h_instruction.shape[-1]} and {h_t.shape[-1]}"
            )
        return self.fuse_partials(self.query_partial(pooled, h_instruction), self.candidate_partial(h_t))

    def score_pairs(
        self,
        pooled: torch.Tensor,
        h_instruction: torch.Tensor,
        h_targ: torch.Tensor,
        candidate_part: torch.Tensor,
    ) -> torch.Tensor:
        """Cosine score matrix [n_queries, n_candidates]."""
        q = self.query_partial(pooled, h_instruction)                 # [Q, H]
        h_inst = self.fuse_partials(q.unsqueeze(1), candidate_part.unsqueeze(0))  # [Q, N, H]
        scores = F.cosine_similarity(h_inst, h_targ.unsqueeze(0), dim=-1)
        return scores.clamp(-1.0, 1.0)

    def forward(
        self,
        phrases: torch.Tensor,
        mask: torch.Tensor,
        h_instruction: torch.Tensor,
        h_t: torch.Tensor,
        h_c: torch.Tensor | None,
    ) -> torch.Tensor:
        """In-batch score matrix: row i = query i, column j = candidate j."""
        pooled = self.encode_phrases(phrases, mask)
        h_targ = self.encode_target(h_t, h_c)
        return self.score_pairs(pooled, h_instruction, h_targ, self.candidate_partial(h_t))


class BaselineModel(nn.Module):
    """Cosine ranker over backbone features with a 2-layer MLP image head.

    The candidate is represented by its crop embedding concatenated with the
    embedding of the horizontally concatenated context strip.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.variant != VARIANT_BASELINE:
            raise ModelError(f"BaselineModel requires the baseline variant, got {config.variant!r}")
        self.config = config
        d, h = config.input_dim, config.hidden
        self.mlp = nn.Sequential(nn.Linear(2 * d, h), nn.GELU(), nn.Linear(h, h))
        self.text_proj = nn.Linear(d, h) if d != h else None

    def image_feature(self, h_t: torch.Tensor, h_strip: torch.Tensor) -> torch.Tensor:
        if h_t.shape != h_strip.shape:
            raise DataError(f"crop/strip embedding shapes differ: {tuple(h_t.shape)} vs {tuple(h_strip.shape)}")
        return self.mlp(torch.cat([h_t, h_strip], dim=-1))

    def forward(self, h_instruction: torch.Tensor, h_t: torch.Tensor, h_strip: torch.Tensor) -> torch.Tensor:
        text = self.text_proj(h_instruction) if self.text_proj is not None else h_instruction
        image = self.image_feature(h_t, h_strip)
        text = F.normalize(text, dim=-1)
        image = F.normalize(image, dim=-1)
        return (text @ image.T).clamp(-1.0, 1.0)


def build_model(config: ModelConfig) -> nn.Module:
    if config.variant == VARIANT_BASELINE:
        return BaselineModel(config)
    return RankingModel(config)


def similarity(a, b) -> float:
    """Cosine similarity of two vectors; rejects zero-norm inputs."""
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise DataError(f"similarity: shape mismatch {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise DataError("similarity: zero-norm vector")
    return float(np.clip(np.dot(av, bv) / (na * nb), -1.0, 1.0))


def batch_loss(scores, temperature: float = 1.0) -> torch.Tensor:
    """In-batch contrastive loss: mean negative log-softmax of the diagonal,
    row-wise (query -> candidate direction only)."""
    if temperature <= 0:
        raise ModelError(f"temperature must be positive, got {temperature}")
    s = scores if isinstance(scores, torch.Tensor) else torch.as_tensor(np.asarray(scores, dtype=np.float64))
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DataError(f"batch_loss: score matrix must be square, got {tuple(s.shape)}")
    if not bool(torch.isfinite(s).all()):
        raise NumericError("batch_loss: non-finite score matrix entries")
    logits = s / temperature
    return -torch.diagonal(F.log_softmax(logits, dim=1)).mean()


@dataclass(frozen=True)
class RankedList:
    """Candidates of one environment ordered by score, best first."""

    sample_id: str
    entries: tuple[tuple[str, float], ...]  # (candidate_id, score), descending

    def __post_init__(self):
        ids = [cid for cid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("ranked list contains duplicate candidates")
        for (id_a, s_a), (id_b, s_b) in zip(self.entries, self.entries[1:]):
            if s_b > s_a:
                raise DataError("ranked list scores must be non-increasing")
            if s_b == s_a and id_b < id_a:
                raise DataError("tied scores must be ordered by ascending candidate id")

    def candidate_ids(self) -> tuple[str, ...]:
        return tuple(cid for cid, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def rank_candidates(sample_id: str, candidate_ids: list[str], scores: np.ndarray) -> RankedList:
    """Deterministic ranking: descending score, ties by ascending id."""
    if len(candidate_ids) == 0:
        raise DataError("rank: empty candidate pool")
    if len(candidate_ids) != len(scores):
        raise DataError(f"rank: {len(candidate_ids)} candidates but {len(scores)} scores")
    order = sorted(range(len(candidate_ids)), key=lambda i: (-float(scores[i]), candidate_ids[i]))
    return RankedList(
        sample_id=sample_id,
        entries=tuple((candidate_ids[i], float(scores[i])) for i in order),
    )


def parameter_report(model: nn.Module) -> dict:
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return {"trainable": trainable, "total": total, "frozen": total - trainable}


def model_fingerprint(model: nn.Module) -> str:
    h = hashlib.sha256()
    state = model.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    epoch: int = 0,
    val_metrics: dict | None = None,
    rng_state: dict | None = None,
) -> None:
    payload = {
        "kind": CHECKPOINT_KIND,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.as_dict(),
        "state_dict": model.state_dict(),
        "epoch": epoch,
        "val_metrics": val_metrics,
        "rng_state": rng_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None):
    """Load a checkpoint; returns (model, payload). Refuses foreign files and
    config mismatches."""
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise ModelError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("kind") != CHECKPOINT_KIND:
        raise ModelError(f"{path} is not a ranking checkpoint")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ModelError(
            f"checkpoint format_version {payload.get('format_version')} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    config = ModelConfig.from_dict(payload["config"])
    if expected_config is not None and config != expected_config:
        raise ModelError(f"checkpoint config {config} does not match expected {expected_config}")
    model = build_model(config)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return model, payload
