"""Ranking service: precomputed per-environment index, query API, selection log.

The index persists each environment's crop and fused candidate embeddings,
stamped with the backbone name and model fingerprint; serving refuses stale
stamps. Query-time work after text embedding is a single fused-head pass
over cached candidate partials, so large pools stay in the low-millisecond
range. Operator selections append to a session log and go to a pluggable
dispatch sink.
"""

from __future__ import annotations

import hashlib
import json
import time
import uuid
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
from pydantic import BaseModel

from .backbone import Backbone
from .corpus import Dataset
from .errors import DataError, StaleIndexError
from .grasp import grasp_point  # re-exported for dispatch payload builders  # noqa: F401
from .model import ModelConfig, model_fingerprint, rank_candidates
from .phrases import ChunkerBackend
from .pipeline import environment_features, query_features

INDEX_FORMAT_VERSION = 1


@dataclass
class EnvIndex:
    """Persisted per-environment embeddings plus version stamps."""

    env_id: str
    candidate_ids: list[str]
    h_t: np.ndarray     # [N, D] crop embeddings (fused-head input)
    h_targ: np.ndarray  # [N, H] encoded candidate embeddings (cosine side)
    backbone_name: str
    fingerprint: str

    def meta(self) -> dict:
        return {
            "format_version": INDEX_FORMAT_VERSION,
            "env_id": self.env_id,
            "candidate_ids": self.candidate_ids,
            "backbone_name": self.backbone_name,
            "model_fingerprint": self.fingerprint,
        }


def build_env_index(dataset: Dataset, env_id: str, model, backbone: Backbone) -> EnvIndex:
    env = dataset.environments.get(env_id)
    if env is None:
        raise DataError(f"unknown environment {env_id!r}")
    config: ModelConfig = model.config
    ef = environment_features(backbone, env, config.n_c)
    model.eval()
    with torch.no_grad():
        h_targ = model.encode_target(torch.from_numpy(ef.h_t), torch.from_numpy(ef.h_c)).cpu().numpy()
    return EnvIndex(
        env_id=env_id,
        candidate_ids=ef.candidate_ids,
        h_t=ef.h_t.astype(np.float32),
        h_targ=h_targ.astype(np.float32),
        backbone_name=backbone.name,
        fingerprint=model_fingerprint(model),
    )


def save_env_index(index: EnvIndex, index_dir: str | Path) -> Path:
    """Write (or confirm) the index on disk; identical stamps are left as is,
    so re-indexing an unchanged environment is byte-stable."""
    env_dir = Path(index_dir) / index.env_id
    meta_path = env_dir / "meta.json"
    if meta_path.exists():
        try:
            if json.loads(meta_path.read_text("utf-8")) == index.meta():
                return env_dir
        except (OSError, json.JSONDecodeError):
            pass
    env_dir.mkdir(parents=True, exist_ok=True)
    np.save(env_dir / "h_t.npy", index.h_t)
    np.save(env_dir / "h_targ.npy", index.h_targ)
    meta_path.write_text(json.dumps(index.meta(), indent=2, sort_keys=True) + "\n", "utf-8")
    return env_dir


def load_env_index(index_dir: str | Path, env_id: str, model, backbone: Backbone) -> EnvIndex:
    env_dir = Path(index_dir) / env_id
    meta_path = env_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no index for environment {env_id!r} under {index_dir}")
    meta = json.loads(meta_path.read_text("utf-8"))
    if meta.get("format_version") != INDEX_FORMAT_VERSION:
        raise StaleIndexError(f"index format_version {meta.get('format_version')} unsupported")
    if meta.get("backbone_name") != backbone.name:
        raise StaleIndexError(
            f"index for {env_id!r} was built with backbone {meta.get('backbone_name')!r}, "
            f"serving uses {backbone.name!r}"
        )
    current = model_fingerprint(model)
    if meta.get("model_fingerprint") != current:
        raise StaleIndexError(f"index for {env_id!r} does not match the serving checkpoint")
    return EnvIndex(
        env_id=env_id,
        candidate_ids=list(meta["candidate_ids"]),
        h_t=np.load(env_dir / "h_t.npy"),
        h_targ=np.load(env_dir / "h_targ.npy"),
        backbone_name=meta["backbone_name"],
        fingerprint=meta["model_fingerprint"],
    )


@dataclass(frozen=True)
class SelectionEvent:
    session_id: str
    query_id: str
    env_id: str
    instruction: str
    shown: tuple[str, ...]
    chosen: str
    rank: int  # 1-based position in the shown list
    timestamp: float
    dispatch_status: str

    def as_dict(self) -> dict:
        d = asdict(self)
        d["shown"] = list(self.shown)
        return d


class DispatchSink(Protocol):
    """Receives the operator's pick command; execution is out of scope."""

    def dispatch(self, event: SelectionEvent, grasp: np.ndarray | None = None) -> str: ...


class LoopbackSink:
    """In-process simulator: records the pick and acknowledges it."""

    def __init__(self):
        self.picks: list[dict] = []

    def dispatch(self, event: SelectionEvent, grasp: np.ndarray | None = None) -> str:
        self.picks.append(
            {
                "candidate_id": event.chosen,
                "env_id": event.env_id,
                "grasp_point": None if grasp is None else [float(v) for v in grasp],
            }
        )
        return "acknowledged"


class LogFileSink:
    """Appends each pick command as one JSON line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def dispatch(self, event: SelectionEvent, grasp: np.ndarray | None = None) -> str:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        record = event.as_dict()
        record["grasp_point"] = None if grasp is None else [float(v) for v in grasp]
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        return "logged"


@dataclass
class _Session:
    session_id: str
    queries: dict[str, dict] = field(default_factory=dict)  # query_id -> payload
    events: list[SelectionEvent] = field(default_factory=list)


def _warm(index: EnvIndex, model) -> dict:
    h_t = torch.from_numpy(index.h_t)
    with torch.no_grad():
        cand_part = model.candidate_partial(h_t)
    return {
        "h_t": h_t,
        "h_targ": torch.from_numpy(index.h_targ),
        "cand_part": cand_part,
        "candidate_ids": index.candidate_ids,
    }


class RankingService:
    """Query/select façade over a trained model and a prebuilt index."""

    def __init__(
        self,
        dataset: Dataset,
        model,
        backbone: Backbone,
        chunker: ChunkerBackend | None = None,
        index_dir: str | Path | None = None,
        sink: DispatchSink | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.dataset = dataset
        self.model = model
        self.model.eval()
        self.backbone = backbone
        self.chunker = chunker
        self.index_dir = Path(index_dir) if index_dir else None
        self.sink = sink or LoopbackSink()
        self.clock = clock
        self._warm_indexes: dict[str, dict] = {}
        self._sessions: dict[str, _Session] = {}

    # ---- index management ----

    def ensure_index(self, env_id: str) -> dict:
        if env_id in self._warm_indexes:
            return self._warm_indexes[env_id]
        index: EnvIndex | None = None
        if self.index_dir is not None:
            try:
                index = load_env_index(self.index_dir, env_id, self.model, self.backbone)
            except DataError:
                index = None  # not built yet; fall through and build
        if index is None:
            index = build_env_index(self.dataset, env_id, self.model, self.backbone)
            if self.index_dir is not None:
                save_env_index(index, self.index_dir)
        warm = _warm(index, self.model)
        self._warm_indexes[env_id] = warm
        return warm

    # ---- wire operations ----

    def environments(self) -> list[dict]:
        return [
            {"env_id": env.env_id, "candidate_count": len(env.candidates)}
            for env in sorted(self.dataset.environments.values(), key=lambda e: e.env_id)
        ]

    def score_environment(self, env_id: str, qf) -> tuple[list[str], np.ndarray]:
        """Scores for every candidate of the environment, given query features.

        This is the post-text-embedding hot path: one fused-head pass over
        cached candidate partials plus a cosine against cached embeddings.
        """
        warm = self.ensure_index(env_id)
        with torch.no_grad():
            pooled = self.model.encode_phrases(
                torch.from_numpy(qf.phrases).unsqueeze(0), torch.from_numpy(qf.mask).unsqueeze(0)
            )
            scores = self.model.score_pairs(
                pooled,
                torch.from_numpy(qf.h_instruction).unsqueeze(0),
                warm["h_targ"],
                warm["cand_part"],
            )[0]
        return warm["candidate_ids"], scores.cpu().numpy().astype(np.float64)

    def query(self, instruction: str, env_id: str, top_k: int, session_id: str = "default") -> dict:
        if not instruction or not instruction.strip():
            raise DataError("query: empty instruction")
        env = self.dataset.environments.get(env_id)
        if env is None:
            raise DataError(f"unknown environment {env_id!r}")
        pool = len(env.candidates)
        if not (1 <= top_k <= pool):
            raise DataError(f"top_k must be in [1, {pool}] for environment {env_id!r}, got {top_k}")

        qf = query_features(self.backbone, instruction, self.model.config.n_p_max, self.chunker)
        ids, scores = self.score_environment(env_id, qf)
        ranked = rank_candidates(self._query_id(instruction, env_id, top_k), ids, scores)

        by_id = {c.candidate_id: c for c in env.candidates}
        results = []
        for rank_pos, (cid, score) in enumerate(ranked.entries[:top_k], start=1):
            cand = by_id[cid]
            results.append(
                {
                    "candidate_id": cid,
                    "score": float(score),
                    "rank": rank_pos,
                    "crop_url": f"/images/{cand.crop_path}",
                    "context_urls": [f"/images/{p}" for p in cand.context_paths],
                }
            )
        payload = {
            "query_id": ranked.sample_id,
            "env_id": env_id,
            "instruction": instruction,
            "top_k": top_k,
            "results": results,
        }
        session = self._sessions.setdefault(session_id, _Session(session_id))
        session.queries[payload["query_id"]] = payload
        return payload

    @staticmethod
    def _query_id(instruction: str, env_id: str, top_k: int) -> str:
        h = hashlib.blake2b(f"{env_id}\x00{top_k}\x00{instruction}".encode(), digest_size=8)
        return h.hexdigest()

    def record_selection(self, session_id: str, query_id: str, candidate_id: str) -> SelectionEvent:
        session = self._sessions.get(session_id)
        if session is None:
            raise DataError(f"unknown or expired session {session_id!r}")
        payload = session.queries.get(query_id)
        if payload is None:
            raise DataError(f"session {session_id!r} has no outstanding query {query_id!r}")
        shown = tuple(r["candidate_id"] for r in payload["results"])
        if candidate_id not in shown:
            raise DataError(f"candidate {candidate_id!r} was not in the shown list for query {query_id!r}")
        event = SelectionEvent(
            session_id=session_id,
            query_id=query_id,
            env_id=payload["env_id"],
            instruction=payload["instruction"],
            shown=shown,
            chosen=candidate_id,
            rank=shown.index(candidate_id) + 1,
            timestamp=self.clock(),
            dispatch_status="pending",
        )
        status = self.sink.dispatch(event)
        event = replace(event, dispatch_status=status)
        session.events.append(event)
        return event

    def session_log(self, session_id: str) -> list[dict]:
        session = self._sessions.get(session_id)
        if session is None:
            raise DataError(f"unknown session {session_id!r}")
        return [e.as_dict() for e in session.events]

    def new_session(self) -> str:
        sid = uuid.uuid4().hex
        self._sessions[sid] = _Session(sid)
        return sid


class QueryRequest(BaseModel):
    instruction: str
    env_id: str
    top_k: int = 10
    session_id: str = "default"


class SelectRequest(BaseModel):
    session_id: str = "default"
    query_id: str
    candidate_id: str


def create_app(service: RankingService):
    """FastAPI wrapper exposing the wire API plus static image serving."""
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import FileResponse

    app = FastAPI(title="pickrank ranking service")

    def _wrap(fn, *args):
        try:
            return fn(*args)
        except StaleIndexError as e:
            raise HTTPException(status_code=409, detail=str(e)) from e
        except DataError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e

    @app.get("/environments")
    def environments():
        return service.environments()

    @app.post("/query")
    def query(req: QueryRequest):
        payload = _wrap(service.query, req.instruction, req.env_id, req.top_k, req.session_id)
        return {**payload, "session_id": req.session_id}

    @app.post("/select")
    def select(req: SelectRequest):
        event = _wrap(service.record_selection, req.session_id, req.query_id, req.candidate_id)
        return event.as_dict()

    @app.get("/session/{session_id}/log")
    def session_log(session_id: str):
        return _wrap(service.session_log, session_id)

    @app.get("/images/{path:path}")
    def images(path: str):
        root = service.dataset.root.resolve()
        target = (root / path).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            raise HTTPException(status_code=404, detail="image not found")
        return FileResponse(target)

    return app
