"""HTTP query service: index building, whole-image retrieval, and
box-driven local retrieval over the trained model.

The index lifecycle is single-writer many-reader: a rebuild prepares the
packed codes and the on-disk feature-map cache completely, then swaps them
in with one assignment, so concurrent queries never observe a half-built
index. Local feature maps are cached to disk at index time; a query then
costs pooling + spline head + popcount per window instead of a full
backbone pass per candidate.
"""

from __future__ import annotations

import base64
import binascii
import io
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, Response
from pydantic import BaseModel

from .dataset import Entry, load_image, load_manifest
from .model import Model, load_checkpoint
from .retrieval import (
    BoundingBox,
    PackedCodeSet,
    RetrievalResult,
    load_codes,
    local_rerank,
    map_box_to_feature,
    pack_code_set,
    pack_signs,
    save_codes,
    top_k_global,
)


@dataclass
class ServiceConfig:
    checkpoint: str
    code_db: str
    manifest: str | None = None
    data_root: str | None = None
    host: str = "127.0.0.1"
    port: int = 8000
    top_k_global: int = 50
    top_n_local: int = 10
    alpha: float = 0.0
    static_dir: str | None = None

    def __post_init__(self):
        if self.top_n_local > self.top_k_global:
            raise ValueError(f"top_n_local {self.top_n_local} exceeds "
                             f"top_k_global {self.top_k_global}")


@dataclass
class IndexBundle:
    """Everything a query needs, swapped in atomically."""

    codes: PackedCodeSet
    entries: dict[int, Entry]
    root: Path
    fmap_dir: Path


class IndexRequest(BaseModel):
    manifest_path: str


class GlobalQuery(BaseModel):
    image_b64: str | None = None
    image_id: int | None = None
    k: int | None = None


class LocalQuery(BaseModel):
    image_b64: str | None = None
    image_id: int | None = None
    bbox: list[int]
    k: int | None = None
    n: int | None = None


def _decode_image_b64(data: str) -> np.ndarray:
    """Base64 PNG (optionally a data URL) -> [1,H,W] float64 in [0,1]."""
    if "," in data and data.lstrip().startswith("data:"):
        data = data.split(",", 1)[1]
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(400, f"invalid base64 image: {exc}")
    try:
        return load_image(io.BytesIO(raw))
    except Exception as exc:
        raise HTTPException(400, f"undecodable image: {exc}")


def build_index(model: Model, entries: list[Entry], root: Path, code_db: Path,
                alpha: float = 0.0) -> IndexBundle:
    """Encode every manifest image, persist the code db and the per-image
    local feature maps, return the ready-to-swap bundle."""
    entries = sorted(entries, key=lambda e: e.id)
    fmap_dir = Path(str(code_db) + ".fmaps")
    fmap_dir.mkdir(parents=True, exist_ok=True)
    signs = []
    for e in entries:
        img = load_image(root / e.path)
        signs.append(model.encode_global(img[None])[0])
        np.save(fmap_dir / f"{e.id}.npy", model.compute_local_fmap(img, alpha=alpha))
    stacked = (np.stack(signs) if signs
               else np.zeros((0, model.bits), dtype=np.int8))
    pcs = pack_code_set(stacked, np.asarray([e.id for e in entries],
                                            dtype=np.uint64), model.bits)
    code_db.parent.mkdir(parents=True, exist_ok=True)
    save_codes(code_db, pcs)
    return IndexBundle(codes=pcs, entries={e.id: e for e in entries},
                       root=root, fmap_dir=fmap_dir)


def create_app(config: ServiceConfig) -> FastAPI:
    state = {"model": None, "index": None}
    write_lock = threading.Lock()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        ckpt = Path(config.checkpoint)
        if ckpt.exists():
            state["model"] = load_checkpoint(ckpt)
        code_db = Path(config.code_db)
        if (state["model"] is not None and config.manifest is not None
                and code_db.exists() and Path(config.manifest).exists()):
            entries = load_manifest(config.manifest)
            root = Path(config.data_root or Path(config.manifest).parent)
            fmap_dir = Path(str(code_db) + ".fmaps")
            state["index"] = IndexBundle(codes=load_codes(code_db),
                                         entries={e.id: e for e in entries},
                                         root=root, fmap_dir=fmap_dir)
        yield

    app = FastAPI(title="roihash query service", lifespan=lifespan)

    def model_or_503() -> Model:
        if state["model"] is None:
            raise HTTPException(503, "no model loaded")
        return state["model"]

    def index_or_503() -> IndexBundle:
        if state["index"] is None:
            raise HTTPException(503, "no index built; POST /index first")
        return state["index"]

    @app.get("/health")
    def health() -> dict:
        model = state["model"]
        index = state["index"]
        return {"status": "ok" if model is not None else "no-model",
                "bits": model.bits if model is not None else None,
                "index_size": index.codes.count if index is not None else 0}

    @app.post("/index")
    def index_endpoint(req: IndexRequest) -> dict:
        model = model_or_503()
        manifest = Path(req.manifest_path)
        if not manifest.exists():
            raise HTTPException(400, f"manifest not found: {manifest}")
        entries = load_manifest(manifest)
        root = Path(config.data_root or manifest.parent)
        with write_lock:
            bundle = build_index(model, entries, root, Path(config.code_db),
                                 alpha=config.alpha)
            state["index"] = bundle  # atomic swap
        return {"count": bundle.codes.count}

    def query_pixels(req: GlobalQuery | LocalQuery) -> np.ndarray:
        if (req.image_b64 is None) == (req.image_id is None):
            raise HTTPException(400, "provide exactly one of image_b64 / image_id")
        if req.image_b64 is not None:
            return _decode_image_b64(req.image_b64)
        bundle = index_or_503()
        entry = bundle.entries.get(req.image_id)
        if entry is None:
            raise HTTPException(400, f"unknown image_id {req.image_id}")
        return load_image(bundle.root / entry.path)

    def result_rows(result: RetrievalResult, bundle: IndexBundle) -> list[dict]:
        rows = []
        for rank, (iid, dist) in enumerate(zip(result.ids, result.distances)):
            entry = bundle.entries.get(int(iid))
            row = {"id": int(iid), "distance": int(dist),
                   "path": entry.path if entry is not None else None}
            if result.windows is not None:
                row["window"] = result.windows[rank].pixel_box
            rows.append(row)
        return rows

    @app.post("/query/global")
    def query_global(req: GlobalQuery) -> dict:
        model = model_or_503()
        bundle = index_or_503()
        if bundle.codes.count == 0:
            raise HTTPException(503, "index is empty")
        pixels = query_pixels(req)
        k = req.k if req.k is not None else config.top_k_global
        if k < 1:
            raise HTTPException(400, f"k must be >= 1, got {k}")
        signs = model.encode_global(pixels[None])[0]
        result = top_k_global(pack_signs(signs, model.bits)[0], bundle.codes, k)
        return {"results": result_rows(result, bundle)}

    @app.post("/query/local")
    def query_local(req: LocalQuery) -> dict:
        model = model_or_503()
        bundle = index_or_503()
        if bundle.codes.count == 0:
            raise HTTPException(503, "index is empty")
        pixels = query_pixels(req)
        h, w = pixels.shape[1], pixels.shape[2]
        if len(req.bbox) != 4:
            raise HTTPException(400, f"bbox must be [x1,y1,x2,y2], got {req.bbox}")
        try:
            bbox = BoundingBox(*[int(v) for v in req.bbox])
            bbox.validate_within(w, h)
        except ValueError as exc:
            raise HTTPException(400, str(exc))
        k = req.k if req.k is not None else config.top_k_global
        n = req.n if req.n is not None else config.top_n_local
        if k < 1 or n < 1:
            raise HTTPException(400, f"k and n must be >= 1, got k={k} n={n}")
        n = min(n, k)

        query_words, fbox = model.encode_local_window(pixels, bbox,
                                                      alpha=config.alpha)
        global_signs = model.encode_global(pixels[None])[0]
        candidates = top_k_global(pack_signs(global_signs, model.bits)[0],
                                  bundle.codes, k)

        def fmap_for(iid: int) -> np.ndarray:
            cached = bundle.fmap_dir / f"{iid}.npy"
            if cached.exists():
                return np.load(cached)
            entry = bundle.entries[iid]
            return model.compute_local_fmap(load_image(bundle.root / entry.path),
                                            alpha=config.alpha)

        try:
            result = local_rerank(query_words, candidates, n, fmap_for,
                                  (fbox.height, fbox.width), model.window_encoder(),
                                  pixel_box_size=(bbox.x2 - bbox.x1, bbox.y2 - bbox.y1))
        except ValueError as exc:
            raise HTTPException(400, str(exc))
        return {"results": result_rows(result, bundle)}

    @app.get("/image/{image_id}")
    def get_image(image_id: int) -> FileResponse:
        bundle = index_or_503()
        entry = bundle.entries.get(image_id)
        if entry is None:
            raise HTTPException(404, f"unknown image_id {image_id}")
        return FileResponse(bundle.root / entry.path, media_type="image/png")

    if config.static_dir is not None and Path(config.static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=config.static_dir, html=True),
                  name="static")

    return app


def run(config: ServiceConfig) -> None:
    import uvicorn
    uvicorn.run(create_app(config), host=config.host, port=config.port,
                log_level="warning")
