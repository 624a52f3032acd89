import csv
import io
import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import counts_dataset, fake_sample
from tactbench import dataset as dsmod
from tactbench.cli import build_parser, run_command
from tactbench.config import KEYS, KEY_INDEX, Config, ConfigError, _format, load_config, parse_corpus
from tactbench.dataset import Dataset

DOCS = Path(__file__).resolve().parents[1] / "docs" / "config.md"
TINY = ["--set", "train.input_res=8", "--set", "train.widths=2,4", "--set", "train.blocks=1",
        "--set", "train.hidden=4", "--set", "train.epochs=1"]


def run(argv, capsys):
    code = run_command([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- config -------------------------------------------------------------------

def test_every_key_has_default_and_doc():
    cfg = Config()
    for k in KEYS:
        assert k.doc and cfg[k.name] == k.default
        assert k.parse(_format(k.default)) == k.default


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    listed = set(re.findall(r"^\s{2}([a-z_]+(?:\.[a-z_0-9]+)?)\s+default ", out, flags=re.M))
    assert listed == set(KEY_INDEX)
    for k in KEYS:
        assert re.search(rf"^\s+{re.escape(k.name)}\s+default {re.escape(_format(k.default))}\s", out, flags=re.M)


def test_docs_table_matches_keys():
    rows = re.findall(r"^\| `([^`]+)` \| `([^`]*)` \|", DOCS.read_text(encoding="utf-8"), flags=re.M)
    assert [r[0] for r in rows] == [k.name for k in KEYS]
    for (name, default), k in zip(rows, KEYS):
        assert default == _format(k.default), name


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nseed = 7\nlift.mu_s = 0.7  # trailing\n\ntrain.mask = touch_left\n")
    cfg = load_config(p, {"seed": "9"})
    assert cfg["seed"] == 9 and cfg["lift.mu_s"] == 0.7 and cfg["train.mask"].name == "touch_left"
    p.write_text("lift.mu_z = 0.7\n")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(None, {"seed": "seven"})
    with pytest.raises(ConfigError):
        load_config(None, {"ablation.masks": ""})
    with pytest.raises(ConfigError):
        load_config(None, {"no.such": "1"})


def test_hash_ignores_workers_only():
    base = load_config()
    assert re.fullmatch(r"[0-9a-f]{8}", base.hash)
    assert load_config(None, {"workers": "3"}).hash == base.hash
    assert load_config(None, {"seed": "1"}).hash != base.hash
    assert load_config(None, {"lift.mu_s": "0.6"}).hash == base.hash


def test_builders_follow_keys():
    cfg = load_config(None, {"sensor.res_w": "20", "sensor.res_h": "30", "gripper.max_width": "0.07"})
    assert cfg.sensor().resolution == (20, 30)
    assert cfg.gripper().max_width == 0.07 and cfg.gripper().sensor.resolution == (20, 30)
    assert cfg.train_config().epochs == 10 and cfg.model_config().input_res == 64


def test_corpus_parsing(tmp_path):
    from tactbench.geometry import make_primitive, save_mesh
    save_mesh(make_primitive("box", (0.05, 0.05, 0.05)), tmp_path / "cube.obj")
    objs = parse_corpus("a=box:0.1,0.04,0.05; b=cube.obj", 16, tmp_path)
    assert [o for o, _ in objs] == ["a", "b"] and len(objs[1][1]) == 12
    with pytest.raises(ConfigError):
        parse_corpus("a=box:0.1,0.1,0.1;a=sphere:0.05")
    with pytest.raises(ConfigError):
        parse_corpus(" ; ")


# -- exit codes -----------------------------------------------------------------

def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(["filter", "--bogus"], capsys)
    assert code == 1 and "usage:" in err
    assert err.strip().splitlines()[-1].startswith("error: usage:")
    code, _, err = run([], capsys)
    assert code == 1


def test_data_errors_exit_2(tmp_path, capsys):
    code, _, err = run(["filter", "--in", tmp_path / "missing.tgds", "--out", tmp_path / "o.tgds"], capsys)
    assert code == 2 and err.count("\n") == 1 and err.startswith("error: FileNotFoundError:")
    (tmp_path / "bad.tgds").write_bytes(b"JUNKJUNKJUNK")
    code, _, err = run(["filter", "--in", tmp_path / "bad.tgds", "--out", tmp_path / "o.tgds"], capsys)
    assert code == 2 and "BadMagicError" in err
    (tmp_path / "c.cfg").write_text("nonsense.key = 1\n")
    code, _, err = run(["filter", "--config", tmp_path / "c.cfg", "--in", "x", "--out", "y"], capsys)
    assert code == 2 and err.startswith("error: ConfigError:")


def test_runtime_error_exit_3(tmp_path, capsys):
    corpus = "tiny=box:0.004,0.004,0.004"
    code, _, err = run(["collect", "--out", tmp_path / "d.tgds", "--n", 2, "--workers", 1,
                        "--set", f"corpus.objects={corpus}", "--set", "dataset.budget_factor=1"], capsys)
    assert code == 3 and err.startswith("error: BudgetExhausted:")


# -- subcommands ------------------------------------------------------------------

def test_filter_command_counts(tmp_path, capsys):
    dsmod.save(counts_dataset({"obj": (200, 500)}), tmp_path / "raw.tgds")
    code, out, _ = run(["filter", "--in", tmp_path / "raw.tgds", "--out", tmp_path / "f.tgds", "--cap", 500], capsys)
    assert code == 0 and "obj: success=200 failure=300" in out
    ds = dsmod.load(tmp_path / "f.tgds")
    assert ds.kind == "filtered" and len(ds) == 500
    assert re.fullmatch(r"[0-9a-f]{8}", ds.provenance["config_hash"])
    first = (tmp_path / "f.tgds").read_bytes()
    run(["filter", "--in", tmp_path / "raw.tgds", "--out", tmp_path / "f.tgds", "--cap", 500], capsys)
    assert (tmp_path / "f.tgds").read_bytes() == first


def test_collect_writes_container_telemetry_and_manifest(tmp_path, capsys):
    args = ["collect", "--n", 4, "--workers", 1, "--seed", 2, "--set", "corpus.objects=b=box:0.09,0.07,0.25",
            "--set", "corpus.scale=1.0"]
    assert run(args + ["--out", tmp_path / "a.tgds"], capsys)[0] == 0
    assert run(args + ["--out", tmp_path / "b.tgds"], capsys)[0] == 0
    assert (tmp_path / "a.tgds").read_bytes() == (tmp_path / "b.tgds").read_bytes()
    tel = json.loads((tmp_path / "a.tgds.telemetry.json").read_text())
    assert tel["provenance"]["seed"] == 2 and tel["telemetry"]["attempts_total"] >= 4
    assert (tmp_path / "a.tgds.manifest.csv").read_text().startswith("# provenance: config_hash=")


def test_select_objects_command(tmp_path, capsys):
    code, out, _ = run(["select-objects", "--out", tmp_path / "sel.csv", "--workers", 1,
                        "--set", "corpus.objects=b=box:0.04,0.04,0.06",
                        "--set", "selection.attempts_stage1=2", "--set", "selection.attempts_stage2=2",
                        "--set", "selection.collect_attempts_per_object=1000"], capsys)
    assert code == 0 and out.startswith("known=1")
    lines = (tmp_path / "sel.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and lines[1].startswith("object_id,success_0.6")
    assert lines[2].startswith("b,2,2,2,2,2,1,0.6,2,2,1,0")


@pytest.fixture
def labelled_file(tmp_path):
    samples = [fake_sample(oid, (i + j) % 2, i, seed=31 * j + i) for j, oid in enumerate(("a", "b", "u"))
               for i in range(20)]
    ds = Dataset(samples, "filtered", {}, {"seed": 0, "unknown_objects": ["u"]})
    path = tmp_path / "f.tgds"
    dsmod.save(ds, path)
    return path


def test_train_command(tmp_path, capsys, labelled_file):
    code, out, _ = run(["train", "--in", labelled_file, "--out", tmp_path / "m.tgmp", "--mask", "touch_left"] + TINY,
                       capsys)
    assert code == 0 and out.startswith("touch_left:")
    from tactbench.learn.model import load_params
    cfg, params = load_params(tmp_path / "m.tgmp")
    assert cfg.mask.name == "touch_left" and cfg.input_res == 8
    text = (tmp_path / "m.tgmp.metrics.csv").read_text().splitlines()
    assert text[0].startswith("# config_hash=") and text[0].endswith("std=population")
    assert text[1] == "mask,fold,test_accuracy,val_accuracy" and len(text) == 2 + 3 + 1


def test_ablate_and_report_commands(tmp_path, capsys, labelled_file):
    argv = ["ablate", "--in", labelled_file, "--workers", 1, "--set", "ablation.sizes=20,40"] + TINY
    assert run(argv + ["--out-dir", tmp_path / "r1"], capsys)[0] == 0
    assert run(argv + ["--out-dir", tmp_path / "r2"], capsys)[0] == 0
    assert run(["report", "--in", tmp_path / "r1" / "report.json", "--out-dir", tmp_path / "r3"], capsys)[0] == 0
    for name in ("ablation_long.csv", "ablation_summary.csv", "per_object.csv", "unknown.csv", "ablation.svg"):
        a = (tmp_path / "r1" / name).read_bytes()
        assert a == (tmp_path / "r2" / name).read_bytes() == (tmp_path / "r3" / name).read_bytes()
    summary = (tmp_path / "r1" / "ablation_summary.csv").read_text().splitlines()
    assert len(summary) == 2 + 9 * 2
    unknown = (tmp_path / "r1" / "unknown.csv").read_text().splitlines()
    assert unknown[1] == "mask,u,average" and len(unknown) == 2 + 9


def test_ablate_rejects_overlap(tmp_path, capsys):
    samples = [fake_sample("a", i % 2, i) for i in range(20)]
    dsmod.save(Dataset(samples, "filtered", {}, {"unknown_objects": []}), tmp_path / "d.tgds")
    ds = dsmod.load(tmp_path / "d.tgds")
    assert ds.unknown_objects == []


def read_pnm(path):
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        line_end = data.index(b"\n", pos)
        line = data[pos:line_end].decode("ascii")
        pos = line_end + 1
        if not line.startswith("#"):
            fields += line.split()
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    ch = 3 if magic == "P6" else 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    return magic, np.frombuffer(data[pos:], dtype=dtype).reshape(h, w, ch) if ch == 3 else \
        np.frombuffer(data[pos:], dtype=dtype).reshape(h, w), data


def test_render_sample(tmp_path, capsys):
    s = fake_sample("a", 1, 0, tactile=(60, 40), camera=(16, 16))
    s.tactile_left[:] = 0.0
    s.tactile_left[0, 0] = 0.002
    dsmod.save(Dataset([s], "raw", {}, {"seed": 0}), tmp_path / "d.tgds")
    prefix = tmp_path / "s"
    code, out, _ = run(["render-sample", "--in", tmp_path / "d.tgds", "--index", 0, "--out-prefix", prefix], capsys)
    assert code == 0
    magic, left, raw = read_pnm(f"{prefix}_left.pgm")
    assert magic == "P5" and left.shape == (60, 40) and left[0, 0] == 0 and left[1, 1] == 255
    assert b"# config_hash=" in raw
    magic, cam, _ = read_pnm(f"{prefix}_camera.ppm")
    assert magic == "P6" and np.array_equal(cam, s.rgb)
    magic, depth, _ = read_pnm(f"{prefix}_depth.pgm")
    assert depth.dtype == np.dtype(">u2") and depth.shape == (16, 16)
    code, _, err = run(["render-sample", "--in", tmp_path / "d.tgds", "--index", 5, "--out-prefix", prefix], capsys)
    assert code == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "tactbench", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("tactbench ")
