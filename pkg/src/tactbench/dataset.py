"""Object selection, collection, balancing, splits and the TGDS container."""
from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .geometry import TriMesh, mass_properties
from .grasping import REASONS, Gripper, LiftParams, execute_attempt
from .sample import GraspPose, Sample
from .scene import SceneConfig

MAGIC = b"TGDS"
VERSION = 1
DEFAULT_SCALES = (0.6, 0.7, 0.8, 0.9)
_RECORD_HEAD = struct.Struct("<IQdddddddB")


class DatasetError(Exception):
    pass


class EmptyCorpusError(DatasetError):
    pass


class BudgetExhausted(DatasetError):
    pass


class TooSmallError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class BadMagicError(DatasetError):
    pass


class UnsupportedVersionError(DatasetError):
    pass


class ChecksumMismatchError(DatasetError):
    pass


@dataclass
class Dataset:
    samples: list
    kind: str = "raw"  # "raw" or "filtered"
    telemetry: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.kind == other.kind and self.telemetry == other.telemetry
                and self.provenance == other.provenance and self.samples == other.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def object_ids(self) -> list[str]:
        seen = {}
        for s in self.samples:
            seen.setdefault(s.object_id, None)
        return list(seen)

    @property
    def unknown_objects(self) -> list[str]:
        return list(self.provenance.get("unknown_objects", []))

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.kind, dict(self.telemetry), dict(self.provenance))


# ---------------------------------------------------------------------------
# Attempt streams and parallel execution
# ---------------------------------------------------------------------------

def attempt_rng(seed: int, object_id: str, attempt_index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (seed, object, stream, attempt); order-free by construction."""
    key = zlib.crc32(object_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, key, stream, attempt_index]))


@dataclass(frozen=True)
class SimSettings:
    """Everything an attempt needs besides the object and its RNG."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    gripper: Gripper = field(default_factory=Gripper)
    lift: LiftParams = field(default_factory=LiftParams)
    density: float = 500.0
    seed: int = 0


_WORKER_STATE: dict = {}


def _init_worker(objects, settings):
    _WORKER_STATE["objects"] = objects
    _WORKER_STATE["settings"] = settings
    _WORKER_STATE["mass"] = {}


def _run_one(job):
    obj_idx, attempt_index, stream, render = job
    oid, mesh, scale = _WORKER_STATE["objects"][obj_idx]
    st: SimSettings = _WORKER_STATE["settings"]
    mass = _WORKER_STATE["mass"].get(obj_idx)
    if mass is None:
        mass = _WORKER_STATE["mass"][obj_idx] = mass_properties(mesh, st.density)
    rng = attempt_rng(st.seed, oid, attempt_index, stream)
    res = execute_attempt(mesh, st.scene, st.gripper, st.lift, rng, object_id=oid,
                          attempt_index=attempt_index, scale=scale, density=st.density,
                          mass_props=mass, render_views=render)
    return res.reason, res.sample, bool(res.outcome is not None and res.outcome.success)


class AttemptRunner:
    """Runs attempt jobs in order, optionally on a process pool.

    Results always come back in job order, so output never depends on
    scheduling.
    """

    def __init__(self, objects, settings: SimSettings, workers: int = 1):
        self.objects = objects
        self.settings = settings
        self.workers = max(1, int(workers))
        self._pool = None

    def __enter__(self):
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(self.workers, initializer=_init_worker,
                                             initargs=(self.objects, self.settings))
        else:
            _init_worker(self.objects, self.settings)
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
        return False

    def run(self, jobs):
        if self._pool is None:
            return [_run_one(j) for j in jobs]
        chunk = max(1, len(jobs) // (4 * self.workers))
        return list(self._pool.map(_run_one, jobs, chunksize=chunk))


# ---------------------------------------------------------------------------
# Object selection
# ---------------------------------------------------------------------------

@dataclass
class SelectionRow:
    object_id: str
    successes: dict          # scale -> successes out of attempts_stage1
    attempts_stage1: int
    stage1_pass: bool
    chosen_scale: float | None
    stage2_valid: int
    attempts_stage2: int
    kept: bool
    unknown: bool


@dataclass
class SelectionResult:
    rows: list
    known: list              # [(object_id, scale)]
    unknown: list            # [(object_id, scale)]


def decide_scale(successes: dict, attempts: int, min_success: float = 0.25):
    """Pick the best scale if any scale clears the (strict) success-rate bar."""
    best = None
    for scale in sorted(successes):
        rate = successes[scale] / attempts
        if best is None or rate > best[1]:
            best = (scale, rate)
    if best is None or not best[1] > min_success:
        return None
    return best[0]


def select_objects(corpus, settings: SimSettings, *, scales=DEFAULT_SCALES,
                   attempts_stage1: int = 100, attempts_stage2: int = 150,
                   min_success: float = 0.25, unknown_min_valid: int = 500,
                   collect_attempts_per_object: int = 2500, workers: int = 1,
                   attempt_fn=None) -> SelectionResult:
    """Two-stage screening of base meshes.

    ``corpus`` is a list of (object_id, base TriMesh). ``attempt_fn`` can
    replace the simulator; it is called as ``attempt_fn(object_id, scale,
    stage, attempt_index)`` and returns (valid, success).
    """
    if not corpus:
        raise EmptyCorpusError("corpus is empty")
    scales = tuple(float(s) for s in scales)

    def run_batch(items, stage):
        """items: [(object_id, mesh, scale)] -> list of (valid, success) lists."""
        if attempt_fn is not None:
            n = attempts_stage1 if stage == 1 else attempts_stage2
            return [[attempt_fn(oid, sc, stage, i) for i in range(n)] for oid, _, sc in items]
        objs = [(oid, mesh.scaled(sc), sc) for oid, mesh, sc in items]
        n = attempts_stage1 if stage == 1 else attempts_stage2
        jobs = []
        for k, (oid, _, sc) in enumerate(objs):
            stream = 1 + scales.index(sc) if stage == 1 else 100
            jobs += [(k, i, stream, False) for i in range(n)]
        with AttemptRunner(objs, settings, workers) as runner:
            out = runner.run(jobs)
        return [[(r[0] == "ok", r[2]) for r in out[k * n:(k + 1) * n]] for k in range(len(objs))]

    stage1_items = [(oid, mesh, sc) for oid, mesh in corpus for sc in scales]
    stage1 = run_batch(stage1_items, 1)
    rows = []
    for j, (oid, mesh) in enumerate(corpus):
        succ = {sc: sum(1 for _, s in stage1[j * len(scales) + i] if s) for i, sc in enumerate(scales)}
        chosen = decide_scale(succ, attempts_stage1, min_success)
        rows.append(SelectionRow(oid, succ, attempts_stage1, chosen is not None, chosen, 0,
                                 attempts_stage2, False, False))

    passed = [(r.object_id, dict(corpus)[r.object_id], r.chosen_scale) for r in rows if r.stage1_pass]
    stage2 = run_batch(passed, 2) if passed else []
    by_id = {r.object_id: r for r in rows}
    for (oid, _, _), res in zip(passed, stage2):
        row = by_id[oid]
        row.stage2_valid = sum(1 for v, _ in res if v)
        row.kept = row.stage2_valid > 0
        projected = row.stage2_valid / attempts_stage2 * collect_attempts_per_object
        row.unknown = row.kept and projected < unknown_min_valid
    known = [(r.object_id, r.chosen_scale) for r in rows if r.kept and not r.unknown]
    unknown = [(r.object_id, r.chosen_scale) for r in rows if r.kept and r.unknown]
    return SelectionResult(rows, known, unknown)


def write_selection_csv(result: SelectionResult, path, provenance_line: str = "") -> None:
    scales = sorted({s for r in result.rows for s in r.successes})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if provenance_line:
            fh.write(f"# {provenance_line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_id"] + [f"success_{s:.1f}" for s in scales]
                   + ["attempts_stage1", "stage1_pass", "chosen_scale", "stage2_valid",
                      "attempts_stage2", "kept", "unknown"])
        for r in result.rows:
            w.writerow([r.object_id] + [r.successes.get(s, "") for s in scales]
                       + [r.attempts_stage1, int(r.stage1_pass),
                          "" if r.chosen_scale is None else f"{r.chosen_scale:.1f}",
                          r.stage2_valid, r.attempts_stage2, int(r.kept), int(r.unknown)])


def read_selection_csv(path) -> SelectionResult:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        succ = {float(k[len("success_"):]): int(v) for k, v in rec.items() if k.startswith("success_")}
        rows.append(SelectionRow(rec["object_id"], succ, int(rec["attempts_stage1"]),
                                 rec["stage1_pass"] == "1",
                                 float(rec["chosen_scale"]) if rec["chosen_scale"] else None,
                                 int(rec["stage2_valid"]), int(rec["attempts_stage2"]),
                                 rec["kept"] == "1", rec["unknown"] == "1"))
    known = [(r.object_id, r.chosen_scale) for r in rows if r.kept and not r.unknown]
    unknown = [(r.object_id, r.chosen_scale) for r in rows if r.kept and r.unknown]
    return SelectionResult(rows, known, unknown)


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------

def collect(objects, n_target: int, settings: SimSettings, *, workers: int = 1,
            budget_factor: int = 50, unknown_objects=(), batch: int | None = None) -> Dataset:
    """Round-robin attempts over ``objects`` [(object_id, mesh, scale)] until n_target samples."""
    if n_target <= 0:
        raise ValueError("n_target must be positive")
    if not objects:
        raise EmptyCorpusError("no objects to collect from")
    n_obj = len(objects)
    quota = -(-n_target // n_obj)
    budget = budget_factor * quota
    total_slots = budget * n_obj
    batch = batch or max(32, 16 * max(1, workers))

    samples = []
    reasons = Counter()
    per_obj = {oid: {"attempts": 0, "valid": 0} for oid, _, _ in objects}
    attempts = 0
    slot = 0
    with AttemptRunner(objects, settings, workers) as runner:
        while len(samples) < n_target and slot < total_slots:
            jobs = [(j % n_obj, j // n_obj, 0, True) for j in range(slot, min(total_slots, slot + batch))]
            slot += len(jobs)
            for (k, _, _, _), (reason, sample, _) in zip(jobs, runner.run(jobs)):
                if len(samples) >= n_target:
                    break
                oid = objects[k][0]
                attempts += 1
                per_obj[oid]["attempts"] += 1
                if sample is None:
                    reasons[reason] += 1
                else:
                    per_obj[oid]["valid"] += 1
                    samples.append(sample)
    if len(samples) < n_target:
        raise BudgetExhausted(f"only {len(samples)} of {n_target} samples within {attempts} attempts")
    telemetry = {
        "attempts_total": attempts,
        "discarded_by_reason": {r: reasons.get(r, 0) for r in REASONS},
        "per_object": per_obj,
        "retention": len(samples) / attempts,
    }
    provenance = {"seed": settings.seed, "unknown_objects": sorted(unknown_objects),
                  "object_scales": {oid: sc for oid, _, sc in objects}}
    return Dataset(samples, "raw", telemetry, provenance)


# ---------------------------------------------------------------------------
# Balancing, splitting, stats
# ---------------------------------------------------------------------------

def balanced_counts(successes: int, failures: int, cap: int = 500) -> tuple[int, int]:
    """(kept successes, kept failures) for one object.

    The minority class is kept first, up to half the cap; the majority class
    fills the remainder. Equal counts treat successes as the minority.
    """
    if successes <= failures:
        keep_min = min(successes, cap // 2)
        return keep_min, min(failures, cap - keep_min)
    keep_min = min(failures, cap // 2)
    return min(successes, cap - keep_min), keep_min


def filter_balance(raw: Dataset, cap: int = 500) -> Dataset:
    by_obj: dict = {}
    for i, s in enumerate(raw.samples):
        by_obj.setdefault(s.object_id, {0: [], 1: []})[s.label].append(i)
    keep = set()
    kept_counts = {}
    for oid, groups in by_obj.items():
        ks, kf = balanced_counts(len(groups[1]), len(groups[0]), cap)
        for label, k in ((1, ks), (0, kf)):
            ordered = sorted(groups[label], key=lambda i: (raw.samples[i].attempt_index, i))
            keep.update(ordered[:k])
        kept_counts[oid] = {"success": ks, "failure": kf}
    samples = [s for i, s in enumerate(raw.samples) if i in keep]
    telemetry = dict(raw.telemetry)
    telemetry["filter"] = {"cap": cap, "kept": kept_counts}
    return Dataset(samples, "filtered", telemetry, dict(raw.provenance))


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    folds: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Splits:
    test: np.ndarray
    pool: np.ndarray
    folds: list  # [(train_indices, validation_indices)]


def _largest_remainder(counts, total):
    exact = np.asarray(counts, dtype=float) * total / max(sum(counts), 1)
    base = np.floor(exact).astype(int)
    rest = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rest]] += 1
    return base


def make_splits(labels, spec: SplitSpec) -> Splits:
    """Label-stratified held-out test split plus k folds over the remaining pool."""
    labels = np.asarray(labels.labels if isinstance(labels, Dataset) else labels)
    n = len(labels)
    if n < spec.folds * 5:
        raise TooSmallError(f"{n} samples cannot form {spec.folds} folds")
    rng = np.random.default_rng(spec.seed)
    classes = np.unique(labels)
    members = [rng.permutation(np.nonzero(labels == c)[0]) for c in classes]
    n_test = _largest_remainder([len(m) for m in members], int(round(n * spec.test_fraction)))
    test, fold_of = [], np.full(n, -1)
    offset = 0
    for m, nt in zip(members, n_test):
        test.append(m[:nt])
        rest = m[nt:]
        # continue the fold rotation across classes so fold sizes stay within one
        fold_of[rest] = (np.arange(len(rest)) + offset) % spec.folds
        offset += len(rest)
    test = np.sort(np.concatenate(test))
    pool = np.sort(np.nonzero(fold_of >= 0)[0])
    folds = []
    for f in range(spec.folds):
        val = np.sort(np.nonzero(fold_of == f)[0])
        folds.append((np.setdiff1d(pool, val), val))
    return Splits(test, pool, folds)


@dataclass(frozen=True)
class DatasetStats:
    per_object: dict  # id -> {"count", "successes", "success_rate"}
    total: int
    successes: int

    @property
    def success_fraction(self) -> float:
        return self.successes / self.total


def stats(ds: Dataset) -> DatasetStats:
    if not len(ds):
        raise EmptyDatasetError("dataset is empty")
    per = {}
    for s in ds.samples:
        row = per.setdefault(s.object_id, {"count": 0, "successes": 0})
        row["count"] += 1
        row["successes"] += s.label
    for row in per.values():
        row["success_rate"] = row["successes"] / row["count"]
    return DatasetStats(dict(sorted(per.items())), len(ds), int(sum(s.label for s in ds.samples)))


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------

def _dims(ds: Dataset):
    if not ds.samples:
        return {"tactile": [0, 0], "camera": [0, 0]}
    s = ds.samples[0]
    th, tw = s.tactile_left.shape
    ch, cw = s.depth.shape
    return {"tactile": [tw, th], "camera": [cw, ch]}


def encode(ds: Dataset) -> bytes:
    dims = _dims(ds)
    objects = ds.object_ids
    index = {oid: i for i, oid in enumerate(objects)}
    header = {
        "kind": ds.kind,
        "count": len(ds),
        "dims": dims,
        "objects": objects,
        "telemetry": ds.telemetry,
        "provenance": ds.provenance,
        "config_hash": ds.provenance.get("config_hash", ""),
        "seed": ds.provenance.get("seed", 0),
        "version": __version__,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tw, th = dims["tactile"]
    cw, ch = dims["camera"]
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(hb)), hb]
    for s in ds.samples:
        if s.tactile_left.shape != (th, tw) or s.depth.shape != (ch, cw):
            raise DatasetError("all samples must share image dimensions")
        g = s.grasp
        parts.append(_RECORD_HEAD.pack(index[s.object_id], s.attempt_index, s.scale, g.x, g.y, g.z,
                                       g.yaw, s.left_force, s.right_force, s.label))
        parts.append(np.ascontiguousarray(s.tactile_left, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.tactile_right, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.rgb, dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(s.depth, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode(data: bytes) -> Dataset:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a TGDS container")
    if len(data) < 8:
        raise ChecksumMismatchError("truncated container")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} (supported: {VERSION})")
    if len(data) < 16 or struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise ChecksumMismatchError("payload checksum mismatch")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    tw, th = header["dims"]["tactile"]
    cw, ch = header["dims"]["camera"]
    objects = header["objects"]
    pos = 12 + hlen
    nt, nc = tw * th, cw * ch
    samples = []

    def take(n, dtype, shape):
        nonlocal pos
        nbytes = n * np.dtype(dtype).itemsize
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(shape)
        pos += nbytes
        return arr.astype(arr.dtype.newbyteorder("="), copy=True)

    for _ in range(header["count"]):
        oi, att, scale, x, y, z, yaw, lf, rf, label = _RECORD_HEAD.unpack_from(data, pos)
        pos += _RECORD_HEAD.size
        tl = take(nt, "<f4", (th, tw))
        tr = take(nt, "<f4", (th, tw))
        rgb = take(nc * 3, np.uint8, (ch, cw, 3))
        depth = take(nc, "<f4", (ch, cw))
        samples.append(Sample(objects[oi], scale, GraspPose(x, y, z, yaw), tl, tr, rgb, depth,
                              lf, rf, label, att))
    if pos != len(data) - 4:
        raise DatasetError("trailing bytes after the last record")
    return Dataset(samples, header["kind"], header["telemetry"], header["provenance"])


def save(ds: Dataset, path, manifest: bool = True) -> None:
    data = encode(ds)
    with open(path, "wb") as fh:
        fh.write(data)
    if manifest:
        write_manifest(ds, str(path) + ".manifest.csv")


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_manifest(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        prov = ds.provenance
        fh.write(f"# provenance: config_hash={prov.get('config_hash', '')} seed={prov.get('seed', 0)} "
                 f"version={__version__}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "object_id", "label", "left_force", "right_force"])
        for i, s in enumerate(ds.samples):
            w.writerow([i, s.object_id, s.label, repr(s.left_force), repr(s.right_force)])
