"""End-to-end SLAM loop: tracking, densification, joint optimization, and the
artifact/report writers behind the command line.

Single-threaded mode is bit-deterministic for a fixed seed; parallel mode
runs tracking and mapping in two threads exchanging keyframes through a
bounded queue (capacity 4; a full queue back-pressures tracking instead of
dropping frames). The sparse map has a single writer (the mapping side);
tracking reads an atomic snapshot under the shared lock.
"""

import csv
import json
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .core import GaussianMap, Keyframe, KeyframeRole, MapKind, Pose, RgbdFrame
from .datasets import load_synthetic, load_tum_rgbd
from .densify import export_masks, missing_masks, prune, spawn_gaussians
from .errors import DatasetError, InsufficientData, TrackingDivergence
from .frequency import frequency_masks
from .keyframes import KeyframeStore, select_keyframes
from .metrics import ate_rmse, psnr, trajectory_line
from .optimize import optimize_maps, ssim
from .ply import write_map_ply
from .renderer import render
from .tracking import (
    build_cloud,
    gicp_align,
    overlap_ratio,
    transform_cloud_points,
    update_sparse_map,
)

GAUSSIAN_BYTES = 113  # 3+3+4+1+3 float64 attributes + 1 class byte
QUEUE_CAPACITY = 4


@dataclass
class EvalReport:
    ate_rmse: float | None
    psnr_per_keyframe: list
    psnr_mean: float
    ssim_mean: float
    fps: float
    dense_count: int
    sparse_count: int
    peak_map_bytes: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunResult:
    trajectory: list = field(default_factory=list)  # (timestamp, Pose)
    dense: GaussianMap = field(default_factory=lambda: GaussianMap(MapKind.DENSE))
    sparse: GaussianMap = field(default_factory=lambda: GaussianMap(MapKind.SPARSE))
    loss_rows: list = field(default_factory=list)
    keyframes: list = field(default_factory=list)
    report: EvalReport | None = None
    error: str | None = None  # "tracking_divergence" on early halt


class _MappingState:
    """Maps plus the bookkeeping shared between tracking and mapping."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.dense = GaussianMap(MapKind.DENSE)
        self.sparse = GaussianMap(MapKind.SPARSE)
        self.store = KeyframeStore(overlap_dist=cfg.overlap_dist)
        self.lock = threading.Lock()
        self.loss_rows: list = []
        self.keyframes: list = []
        self.tracking_count = 0
        self.iteration_offset = 0
        self.peak_bytes = 0
        self.mask_dir = None

    def snapshot_sparse(self) -> GaussianMap:
        with self.lock:
            return self.sparse.copy()

    def process_keyframe(self, kf: Keyframe, cloud) -> None:
        """Densify, (on tracking keyframes) update the sparse map, then run
        the joint optimization round for this keyframe."""
        cfg = self.cfg
        masks = frequency_masks(kf.frame, cutoff_d0=cfg.cutoff_d0,
                                m=cfg.spacing_high, n=cfg.spacing_low)
        # The deficit that drives densification is the dense map's own:
        # sparse gaussians join renders only inside the optimization loss.
        shot = render(self.dense, kf.pose, kf.frame.intrinsics)
        missing = missing_masks(shot, kf.frame, cfg.densify_config())
        if self.mask_dir is not None:
            export_masks(missing, self.mask_dir, kf.index)
        spawned = spawn_gaussians(kf.frame, kf.pose, masks, missing,
                                  cfg.densify_config())
        with self.lock:
            self.dense.add(spawned)
            if kf.role is KeyframeRole.TRACKING:
                update_sparse_map(self.sparse, cloud, kf.pose, missing, kf.frame)
        self.store.add(kf, transform_cloud_points(cloud, kf.pose))
        self.keyframes.append(kf)

        covisible, randoms = select_keyframes(self.store, kf, cfg.seed,
                                              cfg.keyframe_strategy)
        rows = optimize_maps(self.dense, self.sparse, covisible, randoms,
                             cfg.iterations, cfg.optimize_config(),
                             lock=self.lock)
        self.loss_rows.extend(
            (self.iteration_offset + r[0],) + r[1:] for r in rows)
        self.iteration_offset += len(rows)

        if kf.role is KeyframeRole.TRACKING:
            self.tracking_count += 1
            if cfg.prune_every > 0 and self.tracking_count % cfg.prune_every == 0:
                with self.lock:
                    prune(self.dense, cfg.densify_config())
        self.peak_bytes = max(
            self.peak_bytes, (len(self.dense) + len(self.sparse)) * GAUSSIAN_BYTES)


def _keyframe_role(state, frame_index, overlap, last_tracking):
    if overlap < state.cfg.keyframe_overlap:
        return KeyframeRole.TRACKING
    gap = frame_index - last_tracking
    if gap >= state.cfg.mapping_stride and gap % state.cfg.mapping_stride == 0:
        return KeyframeRole.MAPPING_ONLY
    return None


def _track_frames(state: _MappingState, frames, emit) -> tuple[list, str | None]:
    """Per-frame tracking loop; `emit(kf, cloud)` hands keyframes to mapping.

    Returns (trajectory, error) where error is set on tracking divergence
    (the trajectory then covers the frames up to and including the failure's
    last accepted pose).
    """
    cfg = state.cfg
    track_cfg = cfg.track_config()
    trajectory = []
    pose = Pose.identity()
    last_tracking = 0
    for i, frame in enumerate(frames):
        cloud = build_cloud(frame, voxel_size=cfg.voxel_size, knn=cfg.knn)
        if i == 0:
            trajectory.append((frame.timestamp, pose))
            kf = Keyframe(frame, pose, KeyframeRole.TRACKING, 0)
            emit(kf, cloud)
            continue
        target = state.snapshot_sparse()
        try:
            result = gicp_align(cloud, target, pose, track_cfg)
        except TrackingDivergence as err:
            if err.pose is not None:
                trajectory.append((frame.timestamp, err.pose))
            return trajectory, "tracking_divergence"
        pose = result.pose
        trajectory.append((frame.timestamp, pose))
        overlap = overlap_ratio(cloud, pose, target, cfg.overlap_dist)
        role = _keyframe_role(state, i, overlap, last_tracking)
        if role is not None:
            if role is KeyframeRole.TRACKING:
                last_tracking = i
            emit(Keyframe(frame, pose, role, i), cloud)
    return trajectory, None


def run_slam(cfg: PipelineConfig, frames=None, truth=None) -> RunResult:
    """Execute the full loop over a dataset (or pre-loaded frames).

    On tracking divergence the result carries the partial trajectory and
    whatever maps were built, with result.error set.
    """
    if frames is None:
        frames, truth = load_dataset(cfg)
    if not frames:
        raise DatasetError("empty dataset")

    state = _MappingState(cfg)
    if cfg.debug_masks and cfg.out:
        state.mask_dir = Path(cfg.out) / "masks"
        state.mask_dir.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    if cfg.threads == "parallel":
        trajectory, error = _run_parallel(state, frames)
    else:
        trajectory, error = _track_frames(
            state, frames, lambda kf, cloud: state.process_keyframe(kf, cloud))
    elapsed = max(time.perf_counter() - start, 1e-9)

    result = RunResult(
        trajectory=trajectory,
        dense=state.dense,
        sparse=state.sparse,
        loss_rows=state.loss_rows,
        keyframes=state.keyframes,
        error=error,
    )
    result.report = _evaluate(state, result, truth, len(trajectory) / elapsed)
    return result


def _run_parallel(state: _MappingState, frames):
    """Two threads: this one tracks, the worker densifies/optimizes."""
    work: queue.Queue = queue.Queue(maxsize=QUEUE_CAPACITY)
    failures: list = []

    def mapper():
        while True:
            item = work.get()
            if item is None:
                return
            if failures:  # keep draining so the tracker never blocks on put
                continue
            try:
                state.process_keyframe(*item)
            except Exception as exc:  # propagated after join
                failures.append(exc)

    worker = threading.Thread(target=mapper, name="fgs-mapping")
    worker.start()
    try:
        trajectory, error = _track_frames(
            state, frames, lambda kf, cloud: work.put((kf, cloud)))
    finally:
        work.put(None)
        worker.join()
    if failures:
        raise failures[0]
    return trajectory, error


def load_dataset(cfg: PipelineConfig):
    if cfg.format == "synthetic":
        return load_synthetic(cfg.dataset)
    return load_tum_rgbd(cfg.dataset)


def _evaluate(state: _MappingState, result: RunResult, truth, fps) -> EvalReport:
    # Rendering quality is scored on the dense map alone: the sparse map
    # serves tracking and joins renders only inside the optimization loss.
    psnr_rows, ssim_rows = [], []
    for kf in result.keyframes:
        if kf.role is not KeyframeRole.TRACKING:
            continue
        shot = render(result.dense, kf.pose, kf.frame.intrinsics)
        psnr_rows.append(psnr(shot.color, kf.frame.color_image))
        ssim_rows.append(ssim(shot.color, kf.frame.color_image))

    ate = None
    if truth is not None and len(result.trajectory) >= 2:
        try:
            ate = ate_rmse(result.trajectory, truth)
        except InsufficientData:  # too few associated stamps to align
            ate = None
    return EvalReport(
        ate_rmse=ate,
        psnr_per_keyframe=psnr_rows,
        psnr_mean=float(np.mean(psnr_rows)) if psnr_rows else 0.0,
        ssim_mean=float(np.mean(ssim_rows)) if ssim_rows else 0.0,
        fps=fps,
        dense_count=len(result.dense),
        sparse_count=len(result.sparse),
        peak_map_bytes=state.peak_bytes,
    )


def write_artifacts(result: RunResult, out_dir) -> dict:
    """Write trajectory.txt, dense.ply, sparse.ply, report.json, and
    loss_trace.csv; returns the path of each."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in
             ("trajectory.txt", "dense.ply", "sparse.ply", "report.json",
              "loss_trace.csv")}

    lines = [trajectory_line(ts, pose) for ts, pose in result.trajectory]
    paths["trajectory.txt"].write_text("\n".join(lines) + "\n")
    write_map_ply(result.dense, paths["dense.ply"])
    write_map_ply(result.sparse, paths["sparse.ply"])

    payload = result.report.to_dict() if result.report else {}
    if result.error:
        payload["error"] = result.error
    paths["report.json"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    with open(paths["loss_trace.csv"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "keyframe_index", "total", "color",
                         "depth", "ssim", "reg"])
        writer.writerows(result.loss_rows)
    return paths
