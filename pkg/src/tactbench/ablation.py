"""Modality-mask by sample-size sweeps, per-object and held-out-object tables, and report files."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import Dataset, TooSmallError
from .learn.model import ModelConfig, prepare_inputs
from .learn.train import TrainConfig, accuracy, model_from_params, train_kfold
from .sample import ABLATION_MASKS, ModalityMask


class AblationError(RuntimeError):
    pass


class ObjectOverlap(ValueError):
    pass


@dataclass(frozen=True)
class AblationPlan:
    masks: tuple = ABLATION_MASKS
    sizes: tuple = (250, 500, 1000, 2000)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    model_cfg: ModelConfig = field(default_factory=lambda: ModelConfig(ABLATION_MASKS[0]))
    gel_thickness: float = 0.002
    far: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not self.masks:
            raise ValueError("the ablation needs at least one mask")
        if not self.sizes or min(self.sizes) <= 0:
            raise ValueError("sample sizes must be positive")
        if len(set(m.name for m in self.masks)) != len(self.masks):
            raise ValueError("duplicate masks")

    def model_for(self, mask: ModalityMask) -> ModelConfig:
        return replace(self.model_cfg, mask=mask)


@dataclass
class Cell:
    mask: str
    size: int
    fold_accuracies: list
    final_test_accuracy: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies))


@dataclass
class ObjectRow:
    object_id: str
    mask: str
    n_test: int
    fold_accuracies: list     # empty when the object has no test samples

    @property
    def absent(self) -> bool:
        return self.n_test == 0

    @property
    def mean(self) -> float | None:
        return None if self.absent else float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float | None:
        return None if self.absent else float(np.std(self.fold_accuracies))


@dataclass
class UnknownTable:
    objects: list
    masks: list
    cells: dict          # mask -> {object_id: fold accuracies}

    def mean(self, mask: str, object_id: str) -> float:
        return float(np.mean(self.cells[mask][object_id]))

    def std(self, mask: str, object_id: str) -> float:
        return float(np.std(self.cells[mask][object_id]))

    def average(self, mask: str) -> float:
        return float(np.mean([self.mean(mask, o) for o in self.objects]))


@dataclass
class AblationReport:
    rows: list
    per_object: list
    unknown: UnknownTable
    provenance: dict

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows],
                "per_object": [asdict(r) for r in self.per_object],
                "unknown": asdict(self.unknown),
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationReport":
        return cls([Cell(**r) for r in d["rows"]], [ObjectRow(**r) for r in d["per_object"]],
                   UnknownTable(**d["unknown"]), d["provenance"])


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def subsample_order(n: int, seed: int) -> np.ndarray:
    """Fixed permutation; the subset of size s is its first s entries, so sizes nest."""
    return np.random.default_rng([seed, 0x5EED]).permutation(n)


_JOB_STATE: dict = {}


def _init_jobs(inputs, labels, plan):
    _JOB_STATE.update(inputs=inputs, labels=labels, plan=plan)


def _run_cell(job):
    mask_name, size, idx = job
    plan: AblationPlan = _JOB_STATE["plan"]
    inputs = {m: v[idx] for m, v in _JOB_STATE["inputs"][mask_name].items()}
    labels = _JOB_STATE["labels"][idx]
    mask = ModalityMask.parse(mask_name)
    try:
        return train_kfold(inputs, labels, plan.model_for(mask), plan.train_cfg)
    except Exception as exc:
        raise AblationError(f"mask {mask_name}, size {size}: {exc}") from exc


def _inputs_by_mask(samples, plan: AblationPlan) -> dict:
    every = ModalityMask(True, True, True, True)
    full = prepare_inputs(samples, every, plan.model_cfg.input_res, plan.gel_thickness, plan.far)
    return {m.name: {k: full[k] for k in m.active} for m in plan.masks}


def run_ablation(plan: AblationPlan, dataset: Dataset, *, unknown: Dataset | None = None,
                 workers: int = 1, provenance: dict | None = None) -> AblationReport:
    """Train every (mask, size) cell, then build the per-object and held-out tables.

    The per-object and held-out tables use the fold models of the largest size.
    """
    n = len(dataset)
    if max(plan.sizes) > n:
        raise TooSmallError(f"largest sample size {max(plan.sizes)} exceeds the dataset ({n})")
    sizes = sorted(set(plan.sizes))
    order = subsample_order(n, plan.seed)
    inputs = _inputs_by_mask(dataset.samples, plan)
    labels = dataset.labels
    jobs = [(m.name, s, order[:s]) for m in plan.masks for s in sizes]

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs)), initializer=_init_jobs,
                                 initargs=(inputs, labels, plan)) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        _init_jobs(inputs, labels, plan)
        try:
            results = [_run_cell(j) for j in jobs]
        finally:
            _JOB_STATE.clear()

    rows = [Cell(m, s, [float(a) for a in r.metrics.fold_test_accuracies], float(r.metrics.final_test_accuracy))
            for (m, s, _), r in zip(jobs, results)]

    largest = {m: (idx, r) for (m, s, idx), r in zip(jobs, results) if s == sizes[-1]}
    per_object = []
    for mask in plan.masks:
        idx, res = largest[mask.name]
        test = idx[res.splits.test]
        per_object += per_object_report(mask, plan.model_for(mask), res.fold_params,
                                        dataset.subset(test), plan)
    per_object.sort(key=lambda r: (r.object_id, [m.name for m in plan.masks].index(r.mask)))

    if unknown is not None and len(unknown):
        fold_params = {m.name: largest[m.name][1].fold_params for m in plan.masks}
        table = unknown_eval(plan, fold_params, unknown, dataset.object_ids)
    else:
        table = UnknownTable([], [m.name for m in plan.masks], {m.name: {} for m in plan.masks})

    prov = dict(provenance or {})
    prov.update(seed=plan.seed, sizes=list(sizes), masks=[m.name for m in plan.masks], dataset_size=n,
                std="population")
    return AblationReport(rows, per_object, table, prov)


def _fold_predictions(mask, model_cfg, fold_params, samples, plan):
    inputs = prepare_inputs(samples, mask, model_cfg.input_res, plan.gel_thickness, plan.far)
    return [model_from_params(model_cfg, p).predict(inputs) for p in fold_params]


def per_object_report(mask: ModalityMask, model_cfg: ModelConfig, fold_params: list,
                      test: Dataset, plan: AblationPlan, object_ids=None) -> list[ObjectRow]:
    """Accuracy of each fold model on each object's slice of the test set."""
    ids = sorted(set(object_ids or []) | set(test.object_ids))
    preds = _fold_predictions(mask, model_cfg, fold_params, test.samples, plan) if len(test) else []
    labels = test.labels
    owner = np.array([s.object_id for s in test.samples])
    rows = []
    for oid in ids:
        sel = owner == oid
        k = int(sel.sum())
        accs = [accuracy(p[sel], labels[sel]) for p in preds] if k else []
        rows.append(ObjectRow(oid, mask.name, k, accs))
    return rows


def unknown_eval(plan: AblationPlan, fold_params: dict, unknown: Dataset, training_ids) -> UnknownTable:
    """Evaluate-only pass of every fold model on every held-out object."""
    overlap = sorted(set(unknown.object_ids) & set(training_ids))
    if overlap:
        raise ObjectOverlap(f"held-out objects also appear in training: {', '.join(overlap)}")
    objects = sorted(unknown.object_ids)
    owner = np.array([s.object_id for s in unknown.samples])
    labels = unknown.labels
    cells = {}
    for mask in plan.masks:
        preds = _fold_predictions(mask, plan.model_for(mask), fold_params[mask.name], unknown.samples, plan)
        cells[mask.name] = {o: [accuracy(p[owner == o], labels[owner == o]) for p in preds] for o in objects}
    return UnknownTable(objects, [m.name for m in plan.masks], cells)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _csv_text(header, rows, provenance_line) -> str:
    buf = io.StringIO()
    if provenance_line:
        buf.write(f"# {provenance_line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def long_csv(report: AblationReport, provenance_line: str = "") -> str:
    rows = [[c.mask, c.size, f, _num(a)] for c in report.rows for f, a in enumerate(c.fold_accuracies)]
    return _csv_text(["mask", "size", "fold", "accuracy"], rows, provenance_line)


def summary_csv(report: AblationReport, provenance_line: str = "") -> str:
    rows = [[c.mask, c.size, _num(c.mean), _num(c.std)] for c in report.rows]
    return _csv_text(["mask", "size", "mean", "std"], rows, provenance_line)


def per_object_csv(report: AblationReport, provenance_line: str = "") -> str:
    rows = [[r.object_id, r.mask, r.n_test, _num(r.mean), _num(r.std), "absent" if r.absent else "ok"]
            for r in report.per_object]
    return _csv_text(["object_id", "mask", "n_test", "mean", "std", "status"], rows, provenance_line)


def unknown_csv(report: AblationReport, provenance_line: str = "") -> str:
    t = report.unknown
    rows = []
    for mask in t.masks:
        if not t.objects:
            continue
        rows.append([mask] + [f"{_num(t.mean(mask, o))}±{_num(t.std(mask, o))}" for o in t.objects]
                    + [_num(t.average(mask))])
    return _csv_text(["mask"] + list(t.objects) + ["average"], rows, provenance_line)


PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
           "#17becf")


def svg_chart(report: AblationReport) -> str:
    """Mean accuracy against sample size per mask, with a min-max band over folds."""
    W, H = 800, 600
    left, right, top, bottom = 70, 230, 40, 70
    masks = list(dict.fromkeys(c.mask for c in report.rows))
    sizes = sorted({c.size for c in report.rows})
    lo = min((min(c.fold_accuracies) for c in report.rows), default=0.0)
    y0 = max(0.0, math.floor(lo * 10) / 10 - 0.05)
    y1 = 1.0

    def px(size):
        if len(sizes) == 1:
            return left + (W - left - right) / 2
        a, b = math.log(sizes[0]), math.log(sizes[-1])
        return left + (math.log(size) - a) / (b - a) * (W - left - right)

    def py(acc):
        return top + (y1 - acc) / (y1 - y0) * (H - top - bottom)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{left}" y1="{H - bottom}" x2="{W - right}" y2="{H - bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{H - bottom}" stroke="black"/>']
    for s in sizes:
        out.append(f'<text x="{px(s):.2f}" y="{H - bottom + 20}" font-size="12" text-anchor="middle">{s}</text>')
    for k in range(6):
        acc = y0 + (y1 - y0) * k / 5
        out.append(f'<text x="{left - 8}" y="{py(acc) + 4:.2f}" font-size="12" text-anchor="end">{acc:.2f}</text>')
    out.append(f'<text x="{(left + W - right) / 2:.1f}" y="{H - 25}" font-size="14" text-anchor="middle">'
               'training samples</text>')
    out.append(f'<text x="20" y="{(top + H - bottom) / 2:.1f}" font-size="14" text-anchor="middle" '
               f'transform="rotate(-90 20 {(top + H - bottom) / 2:.1f})">test accuracy</text>')
    for i, mask in enumerate(masks):
        color = PALETTE[i % len(PALETTE)]
        cells = sorted((c for c in report.rows if c.mask == mask), key=lambda c: c.size)
        upper = [(px(c.size), py(max(c.fold_accuracies))) for c in cells]
        lower = [(px(c.size), py(min(c.fold_accuracies))) for c in reversed(cells)]
        band = " ".join(f"{x:.2f},{y:.2f}" for x, y in upper + lower)
        line = " ".join(f"{px(c.size):.2f},{py(c.mean):.2f}" for c in cells)
        out.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 18 * i
        out.append(f'<line x1="{W - right + 15}" y1="{ly}" x2="{W - right + 35}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - right + 40}" y="{ly + 4}" font-size="11">{mask}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


REPORT_FILES = ("ablation_long.csv", "ablation_summary.csv", "per_object.csv", "unknown.csv", "ablation.svg",
                "report.json")


def emit_report(report: AblationReport, out_dir, provenance_line: str = "", formats=("csv", "svg", "json")):
    """Write the report files into ``out_dir``; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    texts = {}
    if "csv" in formats:
        texts["ablation_long.csv"] = long_csv(report, provenance_line)
        texts["ablation_summary.csv"] = summary_csv(report, provenance_line)
        texts["per_object.csv"] = per_object_csv(report, provenance_line)
        texts["unknown.csv"] = unknown_csv(report, provenance_line)
    if "svg" in formats:
        svg = svg_chart(report)
        if provenance_line:
            svg = svg.replace("\n", f"\n<!-- {provenance_line} -->\n", 1)
        texts["ablation.svg"] = svg
    if "json" in formats:
        texts["report.json"] = json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    paths = []
    for name, text in texts.items():
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        paths.append(path)
    return paths


def load_report(path) -> AblationReport:
    with open(path, encoding="utf-8") as fh:
        return AblationReport.from_dict(json.load(fh))
