"""Client side: crop dispatch, remote stage evaluation, and streaming with
the next frame's attention precomputed while the current frame finishes.
"""

from __future__ import annotations

import socket
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from ..detector import Detection, cut_tile
from ..geometry import CropSpec, Rect, to_global
from ..pipeline import (
    AttentionModel,
    Frame,
    FrameResult,
    GridPlan,
    PipelineSettings,
    StageFailure,
    TimingProfile,
    finish_detections,
    merge_temporal,
    select_active,
)
from ..postprocess import MergePolicy
from . import wire


@dataclass(frozen=True)
class ClusterConfig:
    """Which workers serve each stage, and how long to wait for them.

    No attention workers means the attention stage runs on the final
    workers, sequentially, with no precompute overlap.
    """

    final_workers: tuple[str, ...]
    attention_workers: tuple[str, ...] = ()
    request_timeout_s: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "final_workers", tuple(self.final_workers))
        object.__setattr__(self, "attention_workers", tuple(self.attention_workers))
        if not self.final_workers:
            raise ValueError("at least one final worker is required")
        if self.request_timeout_s <= 0:
            raise ValueError("request_timeout_s must be > 0")


class WorkerError(RuntimeError):
    """A request to one worker failed; names the endpoint."""

    def __init__(self, endpoint: str, message: str):
        super().__init__(f"worker {endpoint}: {message}")
        self.endpoint = endpoint


class WorkerTimeout(WorkerError):
    pass


class WorkerUnavailable(WorkerError):
    pass


class RemoteFault(WorkerError):
    """The worker answered, but with an error or an invalid message."""


class StreamAborted(RuntimeError):
    """A stage failed mid-stream; carries the resume cursor and the results
    of every frame completed before the failure."""

    def __init__(self, cursor: int, completed: Sequence[FrameResult], reason: str):
        super().__init__(f"stream aborted at frame index {cursor}: {reason}")
        self.cursor = cursor
        self.completed = tuple(completed)


def dispatch(
    items: Sequence, workers: Sequence[str]
) -> list[tuple[str, list]]:
    """Split items into contiguous chunks, one per worker, sizes within 1."""
    if not workers:
        raise ValueError("at least one worker is required")
    items = list(items)
    base, extra = divmod(len(items), len(workers))
    out = []
    start = 0
    for i, worker in enumerate(workers):
        size = base + (1 if i < extra else 0)
        out.append((worker, items[start : start + size]))
        start += size
    return out


def _crop_entries(
    frame: Frame, crops: Sequence[CropSpec]
) -> tuple[list[dict], bytes]:
    entries = []
    chunks = []
    for crop in crops:
        if frame.pixels is None:
            entries.append({"crop_id": crop.crop_id, "width": 0, "height": 0})
        else:
            tile = cut_tile(frame.pixels, crop)
            entries.append(
                {
                    "crop_id": crop.crop_id,
                    "width": tile.shape[1],
                    "height": tile.shape[0],
                }
            )
            chunks.append(tile.tobytes())
    return entries, b"".join(chunks)


def _parse_detections(rows: list[dict]) -> list[Detection]:
    return [
        Detection(
            Rect(row["x"], row["y"], row["w"], row["h"]),
            row["class"],
            row["confidence"],
        )
        for row in rows
    ]


def _request_worker(
    endpoint: str,
    frame: Frame,
    crops: Sequence[CropSpec],
    timeout_s: float,
) -> tuple[dict[int, list[Detection]], float]:
    """One EVAL_REQUEST round trip; returns detections by crop id + busy ms."""
    host, _, port = endpoint.rpartition(":")
    entries, payload = _crop_entries(frame, crops)
    header = {"type": "EVAL_REQUEST", "frame_id": frame.frame_id, "crops": entries}
    started = time.perf_counter()
    try:
        with socket.create_connection((host, int(port)), timeout=timeout_s) as sock:
            sock.settimeout(timeout_s)
            wire.send_message(sock, header, payload)
            reply, _ = wire.recv_message(sock)
    except TimeoutError as exc:
        raise WorkerTimeout(
            endpoint, f"no reply within {timeout_s}s"
        ) from exc
    except wire.ProtocolError as exc:
        raise RemoteFault(endpoint, str(exc)) from exc
    except OSError as exc:
        raise WorkerUnavailable(endpoint, str(exc)) from exc
    busy_ms = (time.perf_counter() - started) * 1000

    if reply.get("type") == "ERROR":
        raise RemoteFault(
            endpoint, f"{reply.get('code')}: {reply.get('message')}"
        )
    if reply.get("type") != "EVAL_RESPONSE" or reply.get("frame_id") != frame.frame_id:
        raise RemoteFault(endpoint, f"unexpected reply {reply.get('type')!r}")
    try:
        by_crop = {
            row["crop_id"]: _parse_detections(row["detections"])
            for row in reply["results"]
        }
    except (KeyError, TypeError) as exc:
        raise RemoteFault(endpoint, f"bad EVAL_RESPONSE: {exc!r}") from exc
    missing = {c.crop_id for c in crops} - set(by_crop)
    if missing:
        raise RemoteFault(endpoint, f"missing results for crops {sorted(missing)}")
    return by_crop, busy_ms


def evaluate_remote(
    frame: Frame,
    crops: Sequence[CropSpec],
    workers: Sequence[str],
    timeout_s: float,
) -> tuple[dict[int, list[Detection]], float, tuple[tuple[str, float], ...]]:
    """Evaluate crops across workers; one concurrent request per worker.

    Returns (crop-local detections by crop id, stage ms under the
    slowest-worker rule, per-worker (endpoint, busy_ms)). Any worker
    failure raises; partial results are never returned.
    """
    assignments = [(w, part) for w, part in dispatch(crops, workers) if part]
    if not assignments:
        return {}, 0.0, ()
    detections: dict[int, list[Detection]] = {}
    per_worker = []
    with ThreadPoolExecutor(max_workers=len(assignments)) as pool:
        futures = [
            (endpoint, pool.submit(_request_worker, endpoint, frame, part, timeout_s))
            for endpoint, part in assignments
        ]
        for endpoint, future in futures:
            by_crop, busy_ms = future.result()
            detections.update(by_crop)
            per_worker.append((endpoint, busy_ms))
    stage_ms = max(busy for _, busy in per_worker)
    return detections, stage_ms, tuple(per_worker)


def _attention_remote(
    frame: Frame,
    plan: GridPlan,
    settings: PipelineSettings,
    cluster: ClusterConfig,
) -> tuple[AttentionModel, float]:
    workers = cluster.attention_workers or cluster.final_workers
    by_crop, stage_ms, _ = evaluate_remote(
        frame, plan.attention_grid.crops, workers, cluster.request_timeout_s
    )
    boxes = []
    for crop in plan.attention_grid.crops:
        for d in by_crop.get(crop.crop_id, ()):
            if d.confidence >= settings.min_confidence:
                boxes.append(to_global(d.rect, crop, frame.width, frame.height))
    return AttentionModel(frame.frame_id, tuple(boxes), (frame.frame_id,)), stage_ms


def _final_remote(
    frame: Frame,
    plan: GridPlan,
    active_ids: Iterable[int],
    cluster: ClusterConfig,
) -> tuple[list[tuple[int, Detection]], float, tuple[tuple[str, float], ...]]:
    crops = [plan.final_grid.crop_by_id(i) for i in sorted(active_ids)]
    by_crop, stage_ms, per_worker = evaluate_remote(
        frame, crops, cluster.final_workers, cluster.request_timeout_s
    )
    tagged = []
    for crop in crops:
        for d in by_crop.get(crop.crop_id, ()):
            rect = to_global(d.rect, crop, frame.width, frame.height)
            tagged.append((crop.crop_id, Detection(rect, d.class_label, d.confidence)))
    return tagged, stage_ms, per_worker


def run_remote_frame(
    frame: Frame,
    settings: PipelineSettings,
    cluster: ClusterConfig,
    history: Sequence[AttentionModel] = (),
    policy: MergePolicy | None = None,
    *,
    plan: GridPlan | None = None,
) -> tuple[FrameResult, AttentionModel]:
    """Staged evaluation with both stages on remote workers.

    Produces the same detections as the local pipeline for the same
    detector; only the timing differs.
    """
    if plan is None:
        plan = GridPlan.build(frame.width, frame.height, settings)
    policy = policy or MergePolicy()

    att, att_ms = _attention_remote(frame, plan, settings, cluster)
    t0 = time.perf_counter()
    merged = merge_temporal([*history, att], settings.temporal_window)
    active = select_active(plan.final_grid, merged, settings.attention_margin_px)
    t1 = time.perf_counter()
    tagged, final_ms, per_worker = _final_remote(
        frame, plan, active.active_ids, cluster
    )
    t2 = time.perf_counter()
    try:
        dets = finish_detections(
            tagged, plan.final_grid, policy, settings.min_confidence
        )
    except Exception as exc:
        raise StageFailure("postprocess", frame.frame_id) from exc
    t3 = time.perf_counter()

    timing = TimingProfile(
        attention_wait_ms=att_ms,
        client_processing_ms=(t1 - t0) * 1000,
        final_eval_ms=final_ms,
        postprocess_ms=(t3 - t2) * 1000,
        per_worker=per_worker,
    )
    result = FrameResult(
        frame.frame_id,
        dets,
        len(active.active_ids),
        len(plan.final_grid.crops),
        timing,
    )
    return result, att


def run_stream(
    frames: Iterable[Frame],
    settings: PipelineSettings,
    cluster: ClusterConfig,
    policy: MergePolicy | None = None,
) -> list[FrameResult]:
    """Evaluate a frame stream against a cluster, in input order.

    With attention workers configured, frame t+1's attention pass runs on
    them while frame t's final pass runs on the final workers, and
    attention_wait_ms records only the part that was not hidden. Without
    attention workers every frame runs both stages sequentially.
    """
    frames = list(frames)
    if not frames:
        return []
    plan = GridPlan.build(frames[0].width, frames[0].height, settings)
    policy = policy or MergePolicy()
    pipelined = len(cluster.attention_workers) >= 1
    keep = settings.temporal_window - 1

    results: list[FrameResult] = []
    history: list[AttentionModel] = []
    pool = ThreadPoolExecutor(max_workers=1)
    pending = None
    try:
        for t, frame in enumerate(frames):
            try:
                if frame.width != plan.frame_w or frame.height != plan.frame_h:
                    raise ValueError(
                        f"frame {frame.frame_id} is {frame.width}x{frame.height}, "
                        f"stream is {plan.frame_w}x{plan.frame_h}"
                    )
                waited = time.perf_counter()
                if pending is not None:
                    att, _ = pending.result()
                else:
                    att, _ = _attention_remote(frame, plan, settings, cluster)
                wait_ms = (time.perf_counter() - waited) * 1000

                pending = None
                if pipelined and t + 1 < len(frames):
                    pending = pool.submit(
                        _attention_remote, frames[t + 1], plan, settings, cluster
                    )

                c0 = time.perf_counter()
                merged = merge_temporal([*history, att], settings.temporal_window)
                active = select_active(
                    plan.final_grid, merged, settings.attention_margin_px
                )
                c1 = time.perf_counter()
                tagged, final_ms, per_worker = _final_remote(
                    frame, plan, active.active_ids, cluster
                )
                p0 = time.perf_counter()
                dets = finish_detections(
                    tagged, plan.final_grid, policy, settings.min_confidence
                )
                p1 = time.perf_counter()
            except Exception as exc:
                raise StreamAborted(t, results, str(exc)) from exc

            timing = TimingProfile(
                attention_wait_ms=wait_ms,
                client_processing_ms=(c1 - c0) * 1000,
                final_eval_ms=final_ms,
                postprocess_ms=(p1 - p0) * 1000,
                per_worker=per_worker,
            )
            results.append(
                FrameResult(
                    frame.frame_id,
                    dets,
                    len(active.active_ids),
                    len(plan.final_grid.crops),
                    timing,
                )
            )
            history.append(att)
            del history[: max(0, len(history) - keep)]
        return results
    finally:
        pool.shutdown(wait=False, cancel_futures=True)


def check_health(endpoint: str, timeout_s: float = 30.0) -> dict:
    """HEALTH round trip; returns the worker's detector profile fields."""
    host, _, port = endpoint.rpartition(":")
    try:
        with socket.create_connection((host, int(port)), timeout=timeout_s) as sock:
            sock.settimeout(timeout_s)
            wire.send_message(sock, {"type": "HEALTH"})
            reply, _ = wire.recv_message(sock)
    except TimeoutError as exc:
        raise WorkerTimeout(endpoint, f"no reply within {timeout_s}s") from exc
    except wire.ProtocolError as exc:
        raise RemoteFault(endpoint, str(exc)) from exc
    except OSError as exc:
        raise WorkerUnavailable(endpoint, str(exc)) from exc
    if reply.get("type") != "HEALTH_OK":
        raise RemoteFault(endpoint, f"unexpected reply {reply.get('type')!r}")
    return reply
