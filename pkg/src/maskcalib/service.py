"""HTTP service exposing the calibration pipeline to interactive clients.

Sessions are held in memory with TTL eviction. Within a session, calibrate
is single-flight; the render endpoints are read-only and safe to hit
concurrently. Poses travel on the wire as 16 comma-separated row-major
values of the 4x4 extrinsic matrix.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, File, HTTPException, Response, UploadFile
from PIL import Image
from pydantic import BaseModel

from .dataio import DataIoError, parse_pcd
from .geometry import GeometryError, Intrinsics, RigidTransform, canonical_virtual_pose
from .lip import EmptyFrustum, fill_and_enhance, render_lip
from .masks import ProviderUnavailable, RemoteMaskProvider, SyntheticMaskProvider
from .matching import CorrespondenceSet
from .pipeline import CalibrationFailed, PipelineConfig, calibrate, manual_calibrate
from .pnp import PnpError, reprojection_error

SESSION_TTL_S = 30 * 60


@dataclass
class Session:
    cloud: np.ndarray
    image: np.ndarray
    intrinsics: Intrinsics
    truth: RigidTransform | None
    created: float = field(default_factory=time.time)
    last_access: float = field(default_factory=time.time)
    calib_lock: threading.Lock = field(default_factory=threading.Lock)
    result: object = None                 # CalibrationResult
    picks: CorrespondenceSet | None = None


class SessionStore:
    def __init__(self, ttl=SESSION_TTL_S):
        self.ttl = ttl
        self._sessions = {}
        self._lock = threading.Lock()

    def create(self, session: Session) -> str:
        sid = uuid.uuid4().hex[:12]
        with self._lock:
            self._sessions[sid] = session
        return sid

    def get(self, sid: str) -> Session:
        self.evict_expired()
        with self._lock:
            session = self._sessions.get(sid)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        session.last_access = time.time()
        return session

    def evict_expired(self):
        now = time.time()
        with self._lock:
            dead = [k for k, s in self._sessions.items() if now - s.last_access > self.ttl]
            for k in dead:
                del self._sessions[k]


class CalibrateRequest(BaseModel):
    provider: str = "synthetic"
    iterations: int = 1
    seed: int = 0
    remote_url: str | None = None


class SessionCreated(BaseModel):
    session_id: str


class CalibrationResponse(BaseModel):
    extrinsic_matrix: list[float]
    euler_deg: dict
    translation: list[float]
    iterations_run: int
    terminated_by: str
    per_iteration: list[dict]
    matches: dict


class ManualPicksRequest(BaseModel):
    pixels: list[list[float]]
    lidar_points: list[list[float]]


class ManualPicksResponse(BaseModel):
    extrinsic_matrix: list[float]
    epsilon: float
    residuals: list[float]
    inliers: list[bool]
    planar_degenerate: bool


class MatchesResponse(BaseModel):
    affine: dict
    stage1: list[dict]
    stage2: list[dict]
    correspondences: list[dict]


def parse_pose_param(pose: str) -> RigidTransform:
    try:
        values = [float(v) for v in pose.split(",")]
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=f"malformed pose: {exc}") from exc
    if len(values) != 16:
        raise HTTPException(status_code=422, detail=f"pose needs 16 values, got {len(values)}")
    try:
        return RigidTransform.from_matrix(np.array(values).reshape(4, 4), "lidar", "camera")
    except GeometryError as exc:
        raise HTTPException(status_code=422, detail=f"malformed pose: {exc}") from exc


def _png_bytes(arr) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def create_app(ttl=SESSION_TTL_S, ui_dir=None) -> FastAPI:
    app = FastAPI(title="maskcalib service")
    store = SessionStore(ttl)
    app.state.store = store

    @app.post("/session", response_model=SessionCreated)
    async def create_session(
        cloud: UploadFile = File(...),
        image: UploadFile = File(...),
        intrinsics: UploadFile = File(...),
        truth: UploadFile = File(None),
    ):
        try:
            cloud_arr = parse_pcd(await cloud.read(), name=cloud.filename or "cloud")
        except DataIoError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        try:
            img = np.asarray(Image.open(io.BytesIO(await image.read())).convert("RGB"))
        except Exception as exc:
            raise HTTPException(status_code=422, detail=f"undecodable image: {exc}") from exc
        try:
            K = np.loadtxt(io.StringIO((await intrinsics.read()).decode())).reshape(3, 3)
            intr = Intrinsics.from_matrix(K, img.shape[1], img.shape[0])
        except (ValueError, GeometryError) as exc:
            raise HTTPException(status_code=422, detail=f"bad intrinsics: {exc}") from exc
        truth_pose = None
        if truth is not None:
            raw = await truth.read()
            if raw:
                try:
                    M = np.loadtxt(io.StringIO(raw.decode())).reshape(4, 4)
                    truth_pose = RigidTransform.from_matrix(M, "lidar", "camera")
                except (ValueError, GeometryError) as exc:
                    raise HTTPException(status_code=422, detail=f"bad truth: {exc}") from exc
        sid = store.create(Session(cloud_arr, img, intr, truth_pose))
        return SessionCreated(session_id=sid)

    @app.post("/session/{sid}/calibrate", response_model=CalibrationResponse)
    def run_calibration(sid: str, req: CalibrateRequest):
        session = store.get(sid)
        if req.provider == "synthetic":
            provider = SyntheticMaskProvider()
        elif req.provider == "remote":
            if not req.remote_url:
                raise HTTPException(status_code=422, detail="provider=remote needs remote_url")
            provider = RemoteMaskProvider(req.remote_url)
        else:
            raise HTTPException(status_code=422, detail=f"unknown provider {req.provider!r}")
        if not session.calib_lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="calibration already running")
        try:
            result = calibrate(
                session.cloud,
                session.image,
                session.intrinsics,
                provider,
                PipelineConfig(max_iters=req.iterations, seed=req.seed),
            )
        except (CalibrationFailed, ProviderUnavailable, EmptyFrustum) as exc:
            raise HTTPException(status_code=422, detail=f"{type(exc).__name__}: {exc}") from exc
        finally:
            session.calib_lock.release()
        session.result = result
        return CalibrationResponse(**result.to_document())

    def _pose_or_default(session: Session, pose: str | None) -> RigidTransform:
        if pose is not None:
            return parse_pose_param(pose)
        if session.result is not None:
            p = session.result.final_pose
            return RigidTransform(p.rotation, p.translation, "lidar", "camera")
        c = canonical_virtual_pose()
        return RigidTransform(c.rotation, c.translation, "lidar", "camera")

    def _render(session: Session, pose: RigidTransform):
        vp = RigidTransform(pose.rotation, pose.translation, "lidar", "virtual_camera")
        try:
            return fill_and_enhance(render_lip(session.cloud, vp, session.intrinsics))
        except EmptyFrustum as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    def _epsilon_header(session: Session, pose: RigidTransform):
        corr = session.picks
        if corr is None and session.result is not None:
            corr = session.result.final_correspondences
        if corr is None or len(corr) == 0:
            return {}
        try:
            eps = reprojection_error(pose, corr, session.intrinsics)
        except PnpError:
            return {}
        return {"X-Epsilon": f"{eps:.6f}"}

    @app.get("/session/{sid}/lip")
    def get_lip(sid: str, pose: str | None = None):
        session = store.get(sid)
        p = _pose_or_default(session, pose)
        img = _render(session, p)
        return Response(
            content=_png_bytes(img.intensity),
            media_type="image/png",
            headers=_epsilon_header(session, p),
        )

    @app.get("/session/{sid}/overlay")
    def get_overlay(sid: str, pose: str | None = None, alpha: float = 0.5):
        if not 0.0 <= alpha <= 1.0:
            raise HTTPException(status_code=422, detail="alpha must be in [0, 1]")
        session = store.get(sid)
        p = _pose_or_default(session, pose)
        img = _render(session, p)
        lip_rgb = np.repeat(img.intensity[:, :, None], 3, axis=2).astype(float)
        blend = np.rint(alpha * lip_rgb + (1.0 - alpha) * session.image.astype(float))
        blend = np.clip(blend, 0, 255).astype(np.uint8)
        return Response(
            content=_png_bytes(blend),
            media_type="image/png",
            headers=_epsilon_header(session, p),
        )

    @app.post("/session/{sid}/manual-picks", response_model=ManualPicksResponse)
    def post_manual_picks(sid: str, req: ManualPicksRequest):
        session = store.get(sid)
        try:
            picks = CorrespondenceSet(
                np.asarray(req.pixels, dtype=float), np.asarray(req.lidar_points, dtype=float)
            )
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        try:
            manual = manual_calibrate(picks, session.intrinsics)
        except PnpError as exc:
            raise HTTPException(status_code=422, detail=f"{type(exc).__name__}: {exc}") from exc
        session.picks = picks
        return ManualPicksResponse(**manual.to_document())

    @app.get("/session/{sid}/matches", response_model=MatchesResponse)
    def get_matches(sid: str):
        session = store.get(sid)
        if session.result is None:
            raise HTTPException(status_code=404, detail="session has no calibration result")
        return MatchesResponse(**session.result.final_match_doc)

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
