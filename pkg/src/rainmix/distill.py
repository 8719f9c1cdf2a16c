"""Retrieval-guided dataset distillation.

Every candidate (labeled query) is matched against a database of real
references through three progressively finer filters:

1. caption-embedding L2 distance, smallest ``k1`` kept;
2. visual-embedding cosine similarity within those, largest ``k2`` kept;
3. SSIM between the query image and each remaining reference image, largest ``k3`` kept.

The surviving references and the query go to three independent judges; a
majority (at least 2 of 3) accepts the query. Output is a three-tier pyramid:
references on top, accepted candidates in the middle, rejected ones at the bottom.
"""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rainmix.imaging import (
    RAIN_TYPES,
    DegradationSpec,
    ImageBuffer,
    degrade,
    resize_bilinear,
    ssim,
    synth_clean,
)
from rainmix.vlm import (
    DEFAULT_PROMPT,
    AssessmentRequest,
    EndpointFailure,
    ProtocolError,
)

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"EMB1"
TIERS = ("top", "middle", "bottom")


def write_embedding(path, vector) -> None:
    v = np.asarray(vector, dtype="<f4").ravel()
    Path(path).write_bytes(EMBEDDING_MAGIC + struct.pack("<I", v.size) + v.tobytes())


def read_embedding(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: not an embedding file (bad magic {data[:4]!r})")
    if len(data) < 8:
        raise ValueError(f"{path}: truncated embedding header")
    (dim,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 4 * dim:
        raise ValueError(f"{path}: expected {dim} float32 values, file holds {(len(data) - 8) / 4:g}")
    return np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)


@dataclass(frozen=True)
class Record:
    id: str
    caption_embedding: np.ndarray
    visual_embedding: np.ndarray
    image_path: str
    tier: str = "candidate"
    caption: str = ""

    def load_image(self) -> ImageBuffer:
        return ImageBuffer.load(self.image_path)


def read_manifest(path, tier: str | None = None) -> list[Record]:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid = str(obj["id"])
                cap = read_embedding(root / obj["caption_embedding_path"])
                vis = read_embedding(root / obj["visual_embedding_path"])
                image = str(root / obj["image_path"])
            except (KeyError, ValueError, OSError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            records.append(Record(rid, cap, vis, image, tier or obj.get("tier", "candidate"), obj.get("caption", "")))
    return records


class Database:
    """Immutable in-memory index over reference records."""

    def __init__(self, records: Sequence[Record]):
        records = tuple(records)
        seen = set()
        for r in records:
            if r.id in seen:
                raise ValueError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
        if records:
            dt, dv = records[0].caption_embedding.size, records[0].visual_embedding.size
            for r in records:
                if r.caption_embedding.size != dt or r.visual_embedding.size != dv:
                    raise ValueError(
                        f"record {r.id!r} has embedding dims ({r.caption_embedding.size}, {r.visual_embedding.size}),"
                        f" expected ({dt}, {dv})"
                    )
                if not np.linalg.norm(r.visual_embedding) > 0:
                    raise ValueError(f"record {r.id!r} has a zero-norm visual embedding")
            self.captions = np.stack([r.caption_embedding for r in records])
            self.visuals = np.stack([r.visual_embedding for r in records])
        else:
            dt = dv = 0
            self.captions = np.zeros((0, 0))
            self.visuals = np.zeros((0, 0))
        self.records = records
        self.dims = (dt, dv)
        self._index = {r.id: i for i, r in enumerate(records)}
        self.visual_norms = np.linalg.norm(self.visuals, axis=1) if records else np.zeros(0)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, record_id: str) -> Record:
        return self.records[self._index[record_id]]

    def index_of(self, record_id: str) -> int:
        return self._index[record_id]


def build_database(reference_manifest) -> Database:
    """Build from a manifest path or an iterable of records."""
    if isinstance(reference_manifest, (str, Path)):
        records = read_manifest(reference_manifest, tier="real_reference")
    else:
        records = list(reference_manifest)
    db = Database(records)
    log.info("database built: %d records, dims %s", len(db), db.dims)
    return db


@dataclass(frozen=True)
class CandidateSet:
    stage: int
    entries: tuple[tuple[str, float], ...]
    # (record id, reason) for records that could not be scored
    skipped: tuple[tuple[str, str], ...] = ()

    @property
    def ids(self) -> list[str]:
        return [rid for rid, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def _require(db: Database, k: int, name: str) -> None:
    if len(db) == 0:
        raise ValueError("database is empty")
    if k < 1:
        raise ValueError(f"{name} must be >= 1, got {k}")


def stage1_semantic(query: Record, db: Database, k1: int) -> CandidateSet:
    """The ``k1`` references with the smallest caption-embedding L2 distance."""
    _require(db, k1, "k1")
    if query.caption_embedding.size != db.dims[0]:
        raise ValueError(f"query {query.id!r} caption dim {query.caption_embedding.size} != database {db.dims[0]}")
    dist = np.sqrt(((db.captions - query.caption_embedding) ** 2).sum(axis=1))
    ranked = sorted(zip(dist.tolist(), (r.id for r in db.records)))
    return CandidateSet(1, tuple((rid, d) for d, rid in ranked[:k1]))


def _cosine(query: Record, db: Database, ids: Sequence[str]) -> list[float]:
    qn = np.linalg.norm(query.visual_embedding)
    if not qn > 0:
        raise ValueError(f"query {query.id!r} has a zero-norm visual embedding")
    rows = [db.index_of(i) for i in ids]
    sims = db.visuals[rows] @ query.visual_embedding / (db.visual_norms[rows] * qn)
    return sims.tolist()


def stage2_visual(query: Record, c1: CandidateSet, db: Database, k2: int) -> CandidateSet:
    """The ``k2`` stage-1 survivors with the highest visual cosine similarity."""
    _require(db, k2, "k2")
    if query.visual_embedding.size != db.dims[1]:
        raise ValueError(f"query {query.id!r} visual dim {query.visual_embedding.size} != database {db.dims[1]}")
    sims = _cosine(query, db, c1.ids)
    ranked = sorted(zip(c1.ids, sims), key=lambda e: (-e[1], e[0]))
    return CandidateSet(2, tuple(ranked[:k2]))


def stage3_structural(query_image: ImageBuffer, c2: CandidateSet, db: Database, k3: int) -> CandidateSet:
    """The ``k3`` stage-2 survivors most structurally similar to the query image.

    References are resized to the query's dimensions. Unreadable images are
    listed in ``skipped`` rather than silently dropped.
    """
    _require(db, k3, "k3")
    scored, skipped = [], []
    for rid in c2.ids:
        try:
            ref = db[rid].load_image()
        except (OSError, ValueError) as exc:
            log.warning("stage 3: skipping %s: %s", rid, exc)
            skipped.append((rid, str(exc)))
            continue
        ref = resize_bilinear(ref, query_image.height, query_image.width)
        if ref.channels != query_image.channels:
            skipped.append((rid, f"channel count {ref.channels} != query {query_image.channels}"))
            continue
        scored.append((rid, ssim(query_image, ref)))
    scored.sort(key=lambda e: (-e[1], e[0]))
    return CandidateSet(3, tuple(scored[:k3]), tuple(skipped))


@dataclass(frozen=True)
class Retrieval:
    c1: CandidateSet
    c2: CandidateSet
    c3: CandidateSet


def retrieve_stages(query: Record, db: Database, k1: int, k2: int, k3: int, query_image: ImageBuffer | None = None):
    c1 = stage1_semantic(query, db, k1)
    c2 = stage2_visual(query, c1, db, k2)
    image = query_image if query_image is not None else query.load_image()
    return Retrieval(c1, c2, stage3_structural(image, c2, db, k3))


def retrieve(query: Record, db: Database, k1: int, k2: int, k3: int, query_image: ImageBuffer | None = None):
    """The final reference set for ``query`` after all three filters."""
    return retrieve_stages(query, db, k1, k2, k3, query_image).c3


@dataclass(frozen=True)
class EnsembleVote:
    verdicts: tuple[int, int, int]
    decision: int
    errors: tuple[bool, bool, bool] = (False, False, False)


def majority_vote(verdicts: Sequence[int | bool]) -> EnsembleVote:
    v = tuple(int(bool(x)) for x in verdicts)
    if len(v) != 3:
        raise ValueError(f"majority vote needs exactly 3 verdicts, got {len(v)}")
    return EnsembleVote(v, int(sum(v) >= 2))


def assess(query_image: ImageBuffer, references: CandidateSet, db: Database, endpoints, prompt: str = DEFAULT_PROMPT,
           request_id: str = "") -> tuple[EnsembleVote, list[dict]]:
    """Ask three judges about the query given its references.

    A judge that fails (transport or protocol) contributes a 0 verdict and is
    flagged in the returned audit entries.
    """
    if len(endpoints) != 3:
        raise ValueError(f"assessment needs exactly 3 endpoints, got {len(endpoints)}")
    refs = [db[rid].load_image() for rid in references.ids]
    request = AssessmentRequest.from_images(query_image, refs, prompt, request_id)
    digest = request.digest()
    verdicts, errors, audit = [], [], []
    for ep in endpoints:
        entry = {"query_id": request_id, "endpoint": ep.name, "request_digest": digest}
        try:
            res = ep.assess(request)
        except (ProtocolError, EndpointFailure) as exc:
            verdicts.append(0)
            errors.append(True)
            kind = "protocol_error" if isinstance(exc, ProtocolError) else "endpoint_failure"
            entry.update(outcome=kind, attempts=exc.attempts, latency_ms=None, error=str(exc))
        else:
            verdicts.append(int(res.verdict))
            errors.append(False)
            entry.update(outcome="accept" if res.verdict else "reject", attempts=res.attempts,
                         latency_ms=round(res.latency_ms, 3), model=res.model)
            if res.rationale is not None:
                entry["rationale"] = res.rationale
        audit.append(entry)
    vote = majority_vote(verdicts)
    return EnsembleVote(vote.verdicts, vote.decision, tuple(errors)), audit


@dataclass(frozen=True)
class DistillConfig:
    k1: int = 50
    k2: int = 20
    k3: int = 5
    prompt: str = DEFAULT_PROMPT
    max_in_flight: int = 8

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "max_in_flight"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class PyramidManifest:
    entries: list[dict]
    audit: list[dict] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    def tier(self, name: str) -> list[str]:
        return [e["id"] for e in self.entries if e["tier"] == name]

    @property
    def counts(self) -> dict[str, int]:
        return {t: len(self.tier(t)) for t in TIERS}

    @property
    def retention(self) -> float:
        """Fraction of candidates accepted into the middle tier."""
        c = self.counts
        processed = c["middle"] + c["bottom"]
        return c["middle"] / processed if processed else 0.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.entries)

    def audit_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.audit)


def _process(query: Record, db: Database, config: DistillConfig, endpoints):
    try:
        image = query.load_image()
        stages = retrieve_stages(query, db, config.k1, config.k2, config.k3, image)
        vote, audit = assess(image, stages.c3, db, endpoints, config.prompt, query.id)
    except (OSError, ValueError) as exc:
        entry = {"id": query.id, "tier": "bottom", "stage_scores": [], "verdicts": [], "decision": 0,
                 "error": str(exc)}
        return entry, [{"query_id": query.id, "outcome": "unprocessable", "error": str(exc)}], False
    entry = {
        "id": query.id,
        "tier": "middle" if vote.decision else "bottom",
        "stage_scores": [stages.c1.scores, stages.c2.scores, stages.c3.scores],
        "verdicts": list(vote.verdicts),
        "decision": vote.decision,
    }
    skipped = [{"query_id": query.id, "outcome": "skipped_reference", "reference_id": rid, "error": why}
               for rid, why in stages.c3.skipped]
    return entry, skipped + audit, True


def distill_corpus(queries: Sequence[Record], db: Database, endpoints, config: DistillConfig = DistillConfig()):
    """Run every query through retrieval and assessment and build the pyramid.

    Queries are processed concurrently (at most ``config.max_in_flight`` at
    once, one judge call each at a time) and written in input order.
    Failures never stop the run; their ids are listed in ``failed``.
    """
    ids = [q.id for q in queries]
    clash = set(ids) & {r.id for r in db.records}
    if len(set(ids)) != len(ids) or clash:
        raise ValueError(f"query ids must be unique and distinct from reference ids (clash: {sorted(clash)[:5]})")
    entries = [{"id": r.id, "tier": "top", "stage_scores": [], "verdicts": [], "decision": None} for r in db.records]
    audit, failed = [], []
    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        for entry, calls, ok in pool.map(lambda q: _process(q, db, config, endpoints), queries):
            entries.append(entry)
            audit.extend(calls)
            if not ok:
                failed.append(entry["id"])
    return PyramidManifest(entries, audit, failed)


def visual_embedding(img: ImageBuffer, grid: int = 4) -> np.ndarray:
    """Block-averaged colour thumbnail, offset so its norm is never zero."""
    h, w = img.height // grid * grid, img.width // grid * grid
    p = img.pixels[:h, :w].reshape(grid, h // grid, grid, w // grid, img.channels).mean(axis=(1, 3))
    return p.ravel() + 1e-3


def make_distill_corpus(out_dir, n_references: int = 24, n_queries: int = 12, seed: int = 0, size: int = 32,
                        caption_dim: int = 16) -> tuple[Path, Path]:
    """Write a small synthetic reference set and query set with embeddings.

    Caption embeddings cluster by rain type; visual embeddings are image
    thumbnails. Returns the paths of ``references.jsonl`` and ``queries.jsonl``.
    """
    out = Path(out_dir)
    for sub in ("images", "embeddings"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, (len(RAIN_TYPES), caption_dim))
    paths = []
    for name, count, offset in (("references", n_references, 0), ("queries", n_queries, n_references)):
        lines = []
        for i in range(count):
            s = seed * 100003 + offset + i
            kind = RAIN_TYPES[i % len(RAIN_TYPES)]
            rid = f"{name[:3]}_{i:05d}"
            img = degrade(synth_clean(s, size), DegradationSpec(kind, float(rng.uniform(0.3, 1.0)), s))
            img.save_png(out / "images" / f"{rid}.png")
            write_embedding(out / "embeddings" / f"{rid}.cap", centers[i % len(RAIN_TYPES)] + rng.normal(0, 0.3, caption_dim))
            write_embedding(out / "embeddings" / f"{rid}.vis", visual_embedding(img))
            lines.append({
                "id": rid, "caption": f"{kind} scene {i}",
                "caption_embedding_path": f"embeddings/{rid}.cap", "visual_embedding_path": f"embeddings/{rid}.vis",
                "image_path": f"images/{rid}.png",
                "tier": "real_reference" if name == "references" else "candidate",
            })
        path = out / f"{name}.jsonl"
        path.write_text("".join(json.dumps(line) + "\n" for line in lines))
        paths.append(path)
    return paths[0], paths[1]
