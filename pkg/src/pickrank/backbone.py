"""Frozen text/image embedding backbones and the persistent embedding cache.

Two implementations ship: a pretrained joint vision-language model (CLIP
ViT-L/14 via ``transformers``) and a deterministic hash-seeded projection
stub for CI and desk-scale runs. Both emit raw (unnormalized) 768-dim
vectors; normalization happens only inside the cosine similarity, never
here. The cache is content-addressed and keyed by backbone version, so
swapping backbones can never serve stale vectors.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BackboneUnavailableError, DataError

logger = logging.getLogger(__name__)

EMBED_DIM = 768
ENV_CACHE_DIR = "PICKRANK_CACHE_DIR"
ENV_CLIP_MODEL = "PICKRANK_CLIP_MODEL"
DEFAULT_CLIP_REF = "openai/clip-vit-large-patch14"


class Backbone:
    """Frozen embedding model: text/images in, 768-dim float32 vectors out."""

    name: str = "backbone"
    dim: int = EMBED_DIM
    text_token_limit: int = 0
    vocab_size: int = 0

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _check_text(text: str) -> None:
    if not text or not text.strip():
        raise DataError("embed_text: empty text")


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"embed_image: expected (H, W, 3) RGB array, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise DataError("embed_image: empty image")
    return image.astype(np.uint8, copy=False)


def _seeded_vector(seed_material: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(seed_material.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    return rng.standard_normal(dim).astype(np.float32)


class HashProjectionBackbone(Backbone):
    """Deterministic stub: hash-seeded token vectors and a fixed random
    projection of downsampled pixel statistics.

    Visually similar images land near each other (the projection is linear in
    a coarse pixel grid), which is all a trainable ranking head needs; there
    is no pretrained text-image alignment.
    """

    text_token_limit = 256
    vocab_size = 2**32  # hashed vocabulary, effectively open
    _token_re = re.compile(r"[a-z0-9']+")

    def __init__(self, version: str = "hash-proj-1", grid: int = 24):
        self.name = f"stub:{version}"
        self.grid = grid
        self._projection: np.ndarray | None = None

    def _image_projection(self) -> np.ndarray:
        if self._projection is None:
            digest = hashlib.blake2b(f"img-proj|{self.name}|{self.grid}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "big"))
            n_in = self.grid * self.grid * 3
            self._projection = rng.standard_normal((self.dim, n_in)).astype(np.float32) / np.sqrt(n_in)
        return self._projection

    def embed_text(self, text: str) -> np.ndarray:
        _check_text(text)
        tokens = self._token_re.findall(text.lower())
        if not tokens:
            tokens = [text.strip().lower()]
        if len(tokens) > self.text_token_limit:
            logger.warning(
                "text of %d tokens exceeds backbone limit %d; truncating", len(tokens), self.text_token_limit
            )
            tokens = tokens[: self.text_token_limit]
        vecs = [_seeded_vector(f"tok|{self.name}|{t}", self.dim) for t in tokens]
        out = np.mean(vecs, axis=0) + 0.25 * _seeded_vector(f"txt|{self.name}|{' '.join(tokens)}", self.dim)
        return out.astype(np.float32)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = _check_image(image)
        img = Image.fromarray(image).resize((self.grid, self.grid), Image.BILINEAR)
        feat = np.asarray(img, dtype=np.float32).reshape(-1) / 255.0 - 0.5
        return (self._image_projection() @ feat).astype(np.float32)


class ClipBackbone(Backbone):
    """Pretrained CLIP ViT-L/14 wrapper (frozen). Needs downloadable or
    locally cached weights; raises :class:`BackboneUnavailableError` otherwise."""

    def __init__(self, model_ref: str | None = None, device: str = "cpu"):
        ref = model_ref or os.environ.get(ENV_CLIP_MODEL) or DEFAULT_CLIP_REF
        self.name = f"clip:{ref}"
        self.device = device
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor

            self._torch = torch
            self._model = CLIPModel.from_pretrained(ref).to(device)
            self._processor = CLIPProcessor.from_pretrained(ref)
        except Exception as e:
            raise BackboneUnavailableError(f"cannot load CLIP backbone {ref!r}: {e}") from e
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.text_token_limit = int(self._model.config.text_config.max_position_embeddings)
        self.vocab_size = int(self._model.config.text_config.vocab_size)
        if int(self._model.config.projection_dim) != self.dim:
            raise BackboneUnavailableError(
                f"backbone {ref!r} has projection dim {self._model.config.projection_dim}, need {self.dim}"
            )

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self._model.state_dict()):
            h.update(key.encode())
            h.update(self._model.state_dict()[key].cpu().numpy().tobytes())
        return h.hexdigest()

    def embed_text(self, text: str) -> np.ndarray:
        _check_text(text)
        tok = self._processor(text=[text], return_tensors="pt", padding=True)
        if tok["input_ids"].shape[1] > self.text_token_limit:
            logger.warning("text exceeds %d tokens; truncating", self.text_token_limit)
            tok = self._processor(
                text=[text], return_tensors="pt", padding=True, truncation=True, max_length=self.text_token_limit
            )
        with self._torch.no_grad():
            feats = self._model.get_text_features(**{k: v.to(self.device) for k, v in tok.items()})
        return feats[0].cpu().numpy().astype(np.float32)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = _check_image(image)
        inputs = self._processor(images=Image.fromarray(image), return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_image_features(**{k: v.to(self.device) for k, v in inputs.items()})
        return feats[0].cpu().numpy().astype(np.float32)


def clip_available(model_ref: str | None = None) -> bool:
    try:
        ClipBackbone(model_ref)
        return True
    except BackboneUnavailableError:
        return False


class EmbeddingCache:
    """Content-addressed vector store: one .npy file per (input, kind, backbone).

    Writes are atomic (temp file + rename), so concurrent writers of the same
    key converge on identical bytes. Corrupt entries are recomputed in place.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @staticmethod
    def key(kind: str, backbone_name: str, payload: bytes) -> str:
        h = hashlib.blake2b(digest_size=20)
        h.update(kind.encode())
        h.update(b"\x00")
        h.update(backbone_name.encode())
        h.update(b"\x00")
        h.update(payload)
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.npy"

    def get(self, key: str) -> np.ndarray | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            vec = np.load(path)
            if vec.shape != (EMBED_DIM,) or not np.all(np.isfinite(vec)):
                raise ValueError(f"bad cached vector shape={vec.shape}")
            return vec
        except Exception as e:
            logger.warning("corrupt cache entry %s (%s); recomputing", path, e)
            path.unlink(missing_ok=True)
            return None

    def put(self, key: str, vector: np.ndarray) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                np.save(f, vector.astype(np.float32))
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


def image_payload(image: np.ndarray) -> bytes:
    image = _check_image(image)
    header = f"{image.shape[0]}x{image.shape[1]}|".encode()
    return header + np.ascontiguousarray(image).tobytes()


class CachedBackbone(Backbone):
    """Backbone wrapper that reads through an :class:`EmbeddingCache`.

    ``text_calls`` / ``image_calls`` count invocations of the underlying
    backbone only, so cache hits are observable.
    """

    def __init__(self, backbone: Backbone, cache: EmbeddingCache | None = None):
        self.backbone = backbone
        self.cache = cache
        self.text_calls = 0
        self.image_calls = 0

    @property
    def name(self) -> str:  # type: ignore[override]
        return self.backbone.name

    @property
    def text_token_limit(self) -> int:  # type: ignore[override]
        return self.backbone.text_token_limit

    @property
    def vocab_size(self) -> int:  # type: ignore[override]
        return self.backbone.vocab_size

    def embed_text(self, text: str) -> np.ndarray:
        _check_text(text)
        if self.cache is None:
            self.text_calls += 1
            return self.backbone.embed_text(text)
        key = EmbeddingCache.key("text", self.backbone.name, text.encode("utf-8"))
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        self.text_calls += 1
        vec = self.backbone.embed_text(text)
        self.cache.put(key, vec)
        return vec

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        if self.cache is None:
            self.image_calls += 1
            return self.backbone.embed_image(image)
        key = EmbeddingCache.key("image", self.backbone.name, image_payload(image))
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        self.image_calls += 1
        vec = self.backbone.embed_image(image)
        self.cache.put(key, vec)
        return vec


def get_backbone(spec: str, cache_dir: str | Path | None = None) -> CachedBackbone:
    """Build a backbone from a CLI-style spec: ``stub``, ``clip`` or ``clip:<ref>``."""
    if spec == "stub":
        backbone: Backbone = HashProjectionBackbone()
    elif spec == "clip":
        backbone = ClipBackbone()
    elif spec.startswith("clip:"):
        backbone = ClipBackbone(spec.split(":", 1)[1])
    else:
        raise DataError(f"unknown backbone spec {spec!r} (expected 'stub', 'clip' or 'clip:<model>')")
    if cache_dir is None:
        cache_dir = os.environ.get(ENV_CACHE_DIR)
    cache = EmbeddingCache(cache_dir) if cache_dir else None
    return CachedBackbone(backbone, cache)
