"""Execution strategies for the cascade: sync, async, partitioned and patchwork.

Every mode produces the same detections as :func:`cascade.detect`; they
differ only in how stage-1 scanning and the selective unit are scheduled.

async
    The calling thread scans the pyramid level by level and streams
    candidate chunks to a pool of forked worker processes that run the
    selective unit.  Workers run at a lower scheduling priority so that,
    even on a single core, the scan proceeds at the same pace whether a
    frame yields ten candidates or ten thousand.  A semaphore bounds the
    number of chunks in flight; a completion counter acts as the barrier
    before grouping.
partitioned
    Two thread groups claim whole pyramid levels from opposite ends, one
    starting at the smallest level and one at the largest, and run scan and
    selection for each level they claim.
patchwork
    All levels are packed into one strip, CNN1 scans the strip once, and
    windows are kept only if they lie inside a single level.
"""

from __future__ import annotations

import mmap
import multiprocessing as mp
import os
import queue
import statistics
import threading
import time
import traceback
from dataclasses import astuple, dataclass, field

import numpy as np

from .cascade import (CandidateRegion, DetectorParams, RegionVerdict, RunStats, candidates_from_response,
                      detect, fill_counts, finalize, normalize_pixels, prepare_image, scan_stage1,
                      select_candidates, window_count)
from .modelspec import CascadeModel
from .nnkernel import response_map
from .pyramid import build_pyramid, pack_fcnr

__all__ = ["AsyncPool", "Detector", "FrameJob", "PipelineError", "RunStats", "bench", "run",
           "run_async", "run_partitioned", "run_patchwork", "run_sync", "split_pools", "BENCH_HEADER"]

DEFAULT_NICE = 19
CHUNK = 32


class PipelineError(RuntimeError):
    pass


def run_sync(image, model: CascadeModel, params: DetectorParams = DetectorParams()):
    return detect(image, model, params)


# ------------------------------------------------------------------ async


def _worker_main(task_q, result_q, buf, model, params, nice, selective_fn):
    if nice:
        try:
            os.nice(nice)
        except OSError:
            pass
    while True:
        msg = task_q.get()
        if msg is None:
            return
        frame_id, shape, level, scale, start, cells = msg
        try:
            image = np.frombuffer(buf, np.float32, count=shape[0] * shape[1]).reshape(shape)
            cands = [CandidateRegion(level, y, x, s) for y, x, s in cells]
            verdicts = selective_fn(image, cands, {level: scale}, model, params)
            result_q.put((frame_id, start, [astuple(v) for v in verdicts]))
        except BaseException:
            # a string payload marks a failed chunk
            result_q.put((frame_id, start, traceback.format_exc()))


@dataclass
class FrameJob:
    """Book-keeping for one frame in flight: candidates out, verdicts back."""

    frame_id: int
    candidates: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    produced: int = 0
    completed: int = 0
    chunk_sizes: dict = field(default_factory=dict)
    done_producing: bool = False
    error: str | None = None
    finished: threading.Event = field(default_factory=threading.Event)

    def fail(self, message: str) -> None:
        if self.error is None:
            self.error = message
        self.finished.set()


class AsyncPool:
    """Persistent selective-unit worker processes for one model and parameter set.

    Frames are handed to workers through an anonymous shared buffer mapped
    before the fork, so only candidate coordinates cross the queues.
    """

    def __init__(self, model: CascadeModel, params: DetectorParams, workers: int = 2,
                 nice: int = DEFAULT_NICE, queue_capacity: int = 4096, capacity: int = 1 << 22,
                 selective_fn=select_candidates):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        if queue_capacity < CHUNK:
            raise ValueError(f"queue_capacity must be >= {CHUNK}")
        self.model, self.params, self.workers = model, params.validate(), workers
        self.nice, self.selective_fn = nice, selective_fn
        # candidates in flight are bounded in whole chunks
        self.max_chunks = queue_capacity // CHUNK
        self._frame = 0
        self._procs: list = []
        self._start(capacity)

    def _start(self, capacity: int) -> None:
        ctx = mp.get_context("fork")
        self.capacity = capacity
        self._buf = mmap.mmap(-1, capacity * 4)
        self._tasks = ctx.Queue()
        self._results = ctx.Queue()
        self._procs = [ctx.Process(target=_worker_main, daemon=True,
                                   args=(self._tasks, self._results, self._buf, self.model, self.params,
                                         self.nice, self.selective_fn))
                       for _ in range(self.workers)]
        for p in self._procs:
            p.start()
        self.broken = False

    def close(self) -> None:
        for _ in self._procs:
            try:
                self._tasks.put(None)
            except (ValueError, OSError):
                pass
        for p in self._procs:
            p.join(timeout=2)
            if p.is_alive():
                p.terminate()
                p.join()
        self._procs = []
        for q in (self._tasks, self._results):
            q.close()
            q.join_thread()
        self._buf.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _restart(self, capacity: int) -> None:
        self.close()
        self._start(capacity)

    def _collect(self, job: FrameJob, sem: threading.Semaphore) -> None:
        while not job.finished.is_set():
            try:
                frame_id, start, payload = self._results.get(timeout=0.05)
            except queue.Empty:
                dead = [p for p in self._procs if not p.is_alive()]
                if dead:
                    job.fail(f"selective worker exited with code {dead[0].exitcode}")
                continue
            if frame_id != job.frame_id or start < 0:
                continue
            if isinstance(payload, str):
                job.fail(payload)
                return
            if len(payload) != job.chunk_sizes.get(start):
                job.fail(f"chunk at {start} returned {len(payload)} verdicts for {job.chunk_sizes.get(start)} candidates")
                return
            for k, v in enumerate(payload):
                job.verdicts[start + k] = RegionVerdict(*v)
            job.completed += len(payload)
            sem.release()
            if job.done_producing and job.completed == job.produced:
                job.finished.set()

    def _put(self, job: FrameJob, sem: threading.Semaphore, msg) -> None:
        while not sem.acquire(timeout=0.05):
            if job.error is not None:
                return
        self._tasks.put(msg)

    def detect(self, image):
        if self.broken:
            raise PipelineError("worker pool is unusable after an earlier failure")
        params, model = self.params, self.model
        t_start = time.perf_counter()
        plane = prepare_image(image)
        if plane.size > self.capacity:
            self._restart(plane.size)
        h, w = plane.shape
        np.frombuffer(self._buf, np.float32, count=plane.size)[:] = plane.ravel()
        self._frame += 1
        job = FrameJob(self._frame)
        sem = threading.Semaphore(self.max_chunks)
        collector = threading.Thread(target=self._collect, args=(job, sem), daemon=True)
        collector.start()

        window = model.window
        levels = build_pyramid(plane, window, params.min_size, params.scale_factor)
        for level in levels:
            found = scan_stage1(level, model.cnn1, params.t1)
            cells = [(c.y, c.x, c.score) for c in found]
            for s in range(0, len(cells), CHUNK):
                chunk = cells[s:s + CHUNK]
                # reserve result slots before the chunk can come back
                job.candidates.extend(found[s:s + CHUNK])
                job.verdicts.extend([None] * len(chunk))
                job.chunk_sizes[job.produced] = len(chunk)
                job.produced += len(chunk)
                self._put(job, sem, (job.frame_id, (h, w), level.index, level.scale, job.produced - len(chunk), chunk))
            if job.error is not None:
                break
        t_scan = time.perf_counter()
        job.done_producing = True
        if job.completed == job.produced:
            job.finished.set()
            # wake the collector instead of letting it sit out its poll timeout
            self._results.put((job.frame_id, -1, None))
        job.finished.wait()
        collector.join()
        if job.error is not None:
            self.broken = True
            raise PipelineError(f"selective worker failed:\n{job.error}")
        if job.completed != job.produced or any(v is None for v in job.verdicts):
            raise PipelineError("grouping reached with unclassified candidates")
        t_sel = time.perf_counter()
        scales = {l.index: l.scale for l in levels}
        detections = finalize(job.candidates, job.verdicts, scales, window, params)
        t_end = time.perf_counter()
        stats = RunStats(mode="async", workers=self.workers, scan_s=t_scan - t_start,
                         select_s=t_sel - t_scan, group_s=t_end - t_sel, total_s=t_end - t_start,
                         extra={"chunks": len(job.chunk_sizes)})
        fill_counts(stats, levels, window, model.cnn1.stride, job.candidates, job.verdicts, detections)
        return detections, stats


def run_async(image, model: CascadeModel, params: DetectorParams = DetectorParams(), workers: int = 2,
              **pool_kw):
    with AsyncPool(model, params, workers, **pool_kw) as pool:
        return pool.detect(image)


# ------------------------------------------------------------ partitioned


def split_pools(workers: int) -> tuple[int, int]:
    return max(1, (workers + 1) // 2), max(1, workers // 2)


def run_partitioned(image, model: CascadeModel, params: DetectorParams = DetectorParams(),
                    pools: tuple[int, int] = (1, 1)):
    """Level-partitioned thread pools.

    Pool A claims levels from the smallest image downward, pool B from the
    largest upward; ``stats.extra['level_owner']`` maps level to pool.
    """
    params.validate()
    if len(pools) != 2 or min(pools) < 1:
        raise ValueError("partitioned mode needs two pools of at least one worker each")
    t_start = time.perf_counter()
    plane = prepare_image(image)
    window = model.window
    levels = build_pyramid(plane, window, params.min_size, params.scale_factor)
    scales = {l.index: l.scale for l in levels}
    lock = threading.Lock()
    bounds = [0, len(levels) - 1]
    results: dict[int, tuple] = {}
    owner: dict[int, str] = {}
    errors: list[BaseException] = []

    def claim(from_small: bool):
        with lock:
            if bounds[0] > bounds[1]:
                return None
            if from_small:
                bounds[1] -= 1
                return bounds[1] + 1
            bounds[0] += 1
            return bounds[0] - 1

    def loop(group: str):
        try:
            while not errors:
                k = claim(group == "A")
                if k is None:
                    return
                t0 = time.perf_counter()
                found = scan_stage1(levels[k], model.cnn1, params.t1)
                t1 = time.perf_counter()
                verdicts = select_candidates(plane, found, scales, model, params)
                results[k] = (found, verdicts, t1 - t0, time.perf_counter() - t1)
                owner[k] = group
        except BaseException as exc:
            errors.append(exc)

    groups = ["A"] * pools[0] + ["B"] * pools[1]
    threads = [threading.Thread(target=loop, args=(g,)) for g in groups]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise PipelineError(f"partition worker failed: {errors[0]!r}") from errors[0]
    candidates, verdicts = [], []
    scan = select = 0.0
    for k in sorted(results):
        found, ver, ts, tsel = results[k]
        candidates.extend(found)
        verdicts.extend(ver)
        scan += ts
        select += tsel
    t0 = time.perf_counter()
    detections = finalize(candidates, verdicts, scales, window, params)
    t_end = time.perf_counter()
    stats = RunStats(mode="partitioned", workers=sum(pools), scan_s=scan, select_s=select,
                     group_s=t_end - t0, total_s=t_end - t_start,
                     extra={"level_owner": {k: owner[k] for k in sorted(owner)}})
    fill_counts(stats, levels, window, model.cnn1.stride, candidates, verdicts, detections)
    return detections, stats


# -------------------------------------------------------------- patchwork


def strip_candidates(packed, response: np.ndarray, stride: int, window, t1: float) -> list[CandidateRegion]:
    """Map strip response cells back to level coordinates, dropping windows that straddle levels."""
    ww, wh = window
    out = []
    for c in candidates_from_response(response, -1, stride, t1):
        k = int(packed.ownership[c.y, c.x])
        if k < 0:
            continue
        px, py, pw, ph = packed.placements[k]
        lx, ly = c.x - px, c.y - py
        if lx + ww <= pw and ly + wh <= ph:
            out.append(CandidateRegion(packed.levels[k].index, ly, lx, c.score))
    return out


def run_patchwork(image, model: CascadeModel, params: DetectorParams = DetectorParams(), workers: int = 1):
    params.validate()
    t_start = time.perf_counter()
    plane = prepare_image(image)
    window = model.window
    stride = model.cnn1.stride
    levels = build_pyramid(plane, window, params.min_size, params.scale_factor)
    scales = {l.index: l.scale for l in levels}
    packed = pack_fcnr(levels, align=stride)
    candidates: list[CandidateRegion] = []
    strip_windows = 0
    if levels:
        response = response_map(normalize_pixels(packed.strip), model.cnn1.spec, model.cnn1.weights)
        candidates = strip_candidates(packed, response, stride, window, params.t1)
        strip_windows = window_count(packed.width, packed.height, window, stride)
    candidates.sort()
    t_scan = time.perf_counter()
    verdicts = select_candidates(plane, candidates, scales, model, params)
    t_sel = time.perf_counter()
    detections = finalize(candidates, verdicts, scales, window, params)
    t_end = time.perf_counter()
    stats = RunStats(mode="patchwork", workers=workers, scan_s=t_scan - t_start, select_s=t_sel - t_scan,
                     group_s=t_end - t_sel, total_s=t_end - t_start,
                     extra={"strip_windows": strip_windows,
                            "strip_size": (packed.width, packed.height)})
    fill_counts(stats, levels, window, stride, candidates, verdicts, detections)
    return detections, stats


# --------------------------------------------------------------- dispatch


class Detector:
    """Mode dispatcher that keeps an async worker pool alive between frames."""

    def __init__(self, model: CascadeModel, params: DetectorParams = DetectorParams(), workers: int = 1,
                 **pool_kw):
        self.model, self.params, self.workers = model, params.validate(), workers
        self._pool_kw = pool_kw
        self._pool: AsyncPool | None = None

    def detect(self, image):
        mode = self.params.mode
        if mode == "async":
            if self._pool is None:
                self._pool = AsyncPool(self.model, self.params, self.workers, **self._pool_kw)
            return self._pool.detect(image)
        if mode == "partitioned":
            return run_partitioned(image, self.model, self.params, split_pools(self.workers))
        if mode == "patchwork":
            return run_patchwork(image, self.model, self.params, self.workers)
        return run_sync(image, self.model, self.params)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.close()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run(image, model: CascadeModel, params: DetectorParams = DetectorParams(), workers: int = 1):
    with Detector(model, params, workers) as det:
        return det.detect(image)


# ------------------------------------------------------------------ bench

BENCH_HEADER = ("frame", "mode", "workers", "scan_ms", "select_ms", "group_ms", "total_ms",
                "sliding", "stage1", "stage2", "stage3", "nms", "fps")


def bench(frames: list[tuple[str, np.ndarray]], model: CascadeModel, params: DetectorParams,
          configs: list[tuple[str, int]], repeats: int = 3) -> list[list]:
    """Median timings per (frame, mode, workers) over ``repeats`` runs."""
    rows = []
    for mode, workers in configs:
        p = DetectorParams(**{**params.__dict__, "mode": mode})
        with Detector(model, p, workers) as det:
            for name, img in frames:
                runs = [det.detect(img)[1] for _ in range(max(1, repeats))]
                med = {k: statistics.median(getattr(r, k) for r in runs)
                       for k in ("scan_s", "select_s", "group_s", "total_s")}
                s = runs[0]
                rows.append([name, mode, workers,
                             *(f"{1000 * med[k]:.3f}" for k in ("scan_s", "select_s", "group_s", "total_s")),
                             *s.counts, f"{1 / med['total_s']:.3f}" if med["total_s"] > 0 else "inf"])
    return rows
