import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import fake_sample
from tactbench.ablation import (
    AblationPlan, ObjectOverlap, emit_report, load_report, long_csv, per_object_report,
    run_ablation, subsample_order, summary_csv, svg_chart, unknown_csv, unknown_eval,
)
from tactbench.dataset import Dataset, TooSmallError
from tactbench.learn.model import FusionModel, ModelConfig, prepare_inputs
from tactbench.learn.train import TrainConfig, accuracy
from tactbench.sample import ABLATION_MASKS, ModalityMask

TINY = ModelConfig(ABLATION_MASKS[0], input_res=8, widths=(2, 4), blocks_per_stage=1, hidden=(4,))
FAST = TrainConfig(epochs=1, batch_size=16)


def make_set(ids, n_per, offset=0):
    samples = []
    for j, oid in enumerate(ids):
        for i in range(n_per):
            samples.append(fake_sample(oid, (i + j) % 2, offset + i, seed=offset + 100 * j + i))
    return Dataset(samples, "filtered", {}, {"seed": 0})


@pytest.fixture(scope="module")
def report():
    plan = AblationPlan(sizes=(30, 60), train_cfg=FAST, model_cfg=TINY, seed=1)
    train = make_set(("a", "b", "c"), 20)
    unknown = make_set(("u1", "u2", "u3", "u4"), 5, offset=500)
    return run_ablation(plan, train, unknown=unknown, provenance={"config_hash": "00000000"})


def test_plan_validation():
    with pytest.raises(ValueError):
        AblationPlan(masks=())
    with pytest.raises(ValueError):
        AblationPlan(sizes=(0,))
    with pytest.raises(ValueError):
        AblationPlan(masks=(ABLATION_MASKS[0], ABLATION_MASKS[0]))


def test_subsample_order_nested_and_deterministic():
    a = subsample_order(100, 3)
    assert sorted(a.tolist()) == list(range(100))
    np.testing.assert_array_equal(a, subsample_order(100, 3))
    assert not np.array_equal(a, subsample_order(100, 4))


def test_nine_rows_per_size(report):
    assert len(report.rows) == 9 * 2
    assert [c.mask for c in report.rows[::2]] == [m.name for m in ABLATION_MASKS]
    assert all(len(c.fold_accuracies) == 3 for c in report.rows)
    text = summary_csv(report)
    assert len(text.strip().splitlines()) == 1 + 18
    assert len(long_csv(report).strip().splitlines()) == 1 + 18 * 3
    assert report.provenance["std"] == "population" and report.provenance["sizes"] == [30, 60]


def test_summary_matches_hand_recomputation(report):
    folds = {}
    for rec in csv.DictReader(io.StringIO(long_csv(report))):
        folds.setdefault((rec["mask"], int(rec["size"])), []).append(float(rec["accuracy"]))
    for rec in csv.DictReader(io.StringIO(summary_csv(report))):
        accs = folds[(rec["mask"], int(rec["size"]))]
        mean = sum(accs) / len(accs)
        std = math.sqrt(sum((a - mean) ** 2 for a in accs) / len(accs))
        assert abs(float(rec["mean"]) - mean) < 1e-9 and abs(float(rec["std"]) - std) < 1e-9


def test_unknown_table(report):
    t = report.unknown
    assert t.objects == ["u1", "u2", "u3", "u4"]
    lines = unknown_csv(report).strip().splitlines()
    assert lines[0] == "mask,u1,u2,u3,u4,average" and len(lines) == 10
    for mask in t.masks:
        assert abs(t.average(mask) - sum(t.mean(mask, o) for o in t.objects) / 4) < 1e-9


def test_per_object_rows_sorted(report):
    keys = [(r.object_id, r.mask) for r in report.per_object]
    assert len(keys) == 3 * 9
    assert [k[0] for k in keys] == sorted(k[0] for k in keys)


def test_svg_structure(report):
    svg = svg_chart(report)
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert 'viewBox="0 0 800 600"' in svg
    assert svg.count("<polyline") == 9


def test_emit_is_byte_stable(tmp_path, report):
    a = emit_report(report, tmp_path / "a", "config_hash=0 seed=1 version=0.1.0")
    again = load_report(tmp_path / "a" / "report.json")
    b = emit_report(again, tmp_path / "b", "config_hash=0 seed=1 version=0.1.0")
    for pa, pb in zip(a, b):
        with open(pa, "rb") as fa, open(pb, "rb") as fb:
            assert fa.read() == fb.read()
    with open(a[0], encoding="utf-8") as fh:
        assert fh.readline().startswith("# config_hash=0")


def test_workers_do_not_change_results():
    plan = AblationPlan(masks=ABLATION_MASKS[:2], sizes=(30,), train_cfg=FAST, model_cfg=TINY)
    data = make_set(("a", "b"), 15)
    one = run_ablation(plan, data, workers=1)
    two = run_ablation(plan, data, workers=2)
    assert long_csv(one) == long_csv(two)


def test_size_larger_than_dataset():
    plan = AblationPlan(masks=ABLATION_MASKS[:1], sizes=(100,), train_cfg=FAST, model_cfg=TINY)
    with pytest.raises(TooSmallError):
        run_ablation(plan, make_set(("a",), 20))


def fold_models(mask, seeds=(0, 1, 2)):
    cfg = replace(TINY, mask=mask)
    return cfg, [FusionModel(replace(cfg, seed=s)).get_params() for s in seeds]


def test_per_object_identities():
    mask = ModalityMask.parse("touch_both")
    cfg, params = fold_models(mask)
    plan = AblationPlan(model_cfg=TINY)
    test = make_set(("a", "b", "c"), 7)
    rows = per_object_report(mask, cfg, params, test, plan, object_ids=["a", "b", "c", "zzz"])
    assert [r.object_id for r in rows] == ["a", "b", "c", "zzz"]
    assert rows[-1].absent and rows[-1].mean is None
    inputs = prepare_inputs(test.samples, mask, cfg.input_res)
    for f, p in enumerate(params):
        model = FusionModel(cfg)
        model.set_params(p)
        overall = accuracy(model.predict(inputs), test.labels)
        recomposed = sum(r.n_test * r.fold_accuracies[f] for r in rows if not r.absent) / len(test)
        assert abs(recomposed - overall) < 1e-9
    single = make_set(("only",), 9)
    rows = per_object_report(mask, cfg, params, single, plan)
    assert len(rows) == 1
    inputs = prepare_inputs(single.samples, mask, cfg.input_res)
    for f, p in enumerate(params):
        model = FusionModel(cfg)
        model.set_params(p)
        assert rows[0].fold_accuracies[f] == accuracy(model.predict(inputs), single.labels)


def test_unknown_overlap_rejected():
    mask = ABLATION_MASKS[-1]
    _, params = fold_models(mask)
    plan = AblationPlan(masks=(mask,), model_cfg=TINY)
    with pytest.raises(ObjectOverlap):
        unknown_eval(plan, {mask.name: params}, make_set(("a", "x"), 3), ["a", "b"])
