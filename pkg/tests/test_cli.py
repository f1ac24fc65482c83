import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ambireg import cli
from ambireg.config import DatasetManifest, RunConfig, load_config
from ambireg.errors import ConfigError
from ambireg.nn import lr_schedule

SMALL = {
    "data": {"n_train_phantoms": 2, "n_test_phantoms": 2, "poses_per_phantom": 6, "calibration_images": 8,
             "phantom": {"dims": [16, 32, 16], "spacing": [8.0, 8.0, 8.0]}},
    "camera": {"detector_px": [16, 16], "pixel_pitch_mm": 16.0},
    "condnet": {"volume_input_dims": [8, 16, 8], "image_input_dims": [16, 16], "volume_channels": [2, 2, 2],
                "image_channels": [2, 3, 3], "cond_dim": 6, "head_hidden": 4},
    "flow": {"depth": 2, "hidden": 8},
    "stage1": {"epochs": 2, "batch_size": 4},
    "stage2": {"epochs": 3, "batch_size": 4, "decay_every": 2},
    "modes": {"n_samples": 256},
}


def small_config(tmp_path, **sections):
    d = json.loads(json.dumps(SMALL))
    for k, v in sections.items():
        d.setdefault(k, {}).update(v)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return path


def run(tmp_path, cfg_path, out, *args):
    return cli.main(["--config", str(cfg_path), "--set", f"output_root={json.dumps(str(out))}", *args])


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".log")}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg_path = small_config(tmp)
    out = tmp / "out"
    assert run(tmp, cfg_path, out, "gen-data") == 0
    assert run(tmp, cfg_path, out, "train") == 0
    return tmp, cfg_path, out


def test_gen_data_byte_identical(tmp_path):
    cfg_path = small_config(tmp_path)
    assert run(tmp_path, cfg_path, tmp_path / "a", "gen-data") == 0
    assert run(tmp_path, cfg_path, tmp_path / "b", "gen-data") == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    assert (tmp_path / "a" / "gen-data.log").exists()


def test_gen_data_record_count_and_census(tmp_path):
    cfg_path = small_config(tmp_path, data={"n_train_phantoms": 2, "poses_per_phantom": 100,
                                            "n_test_phantoms": 0})
    assert run(tmp_path, cfg_path, tmp_path / "o", "gen-data") == 0
    m = DatasetManifest.read(tmp_path / "o" / "data" / "train.jsonl")
    assert len(m.records) == 200
    laos = np.array([r.pose.lao for r in m.records])
    assert np.all(((laos >= -20) & (laos <= 20)) | ((laos >= 160) & (laos <= 200)))
    assert 0 < np.sum(laos >= 160) < 200
    assert {r.phantom for r in m.records} == {"symmetric", "marked"}
    assert len({m.norm_constant}) == 1 and m.norm_constant > 0


def test_phantom_plan_marks_every_second():
    cfg = RunConfig()
    kinds = [k for _, _, k, _ in cli.phantom_plan(cfg, "train")]
    assert kinds == ["symmetric", "marked", "symmetric", "marked"]
    train_seeds = {s.seed for _, s, _, _ in cli.phantom_plan(cfg, "train")}
    test_seeds = {s.seed for _, s, _, _ in cli.phantom_plan(cfg, "test")}
    assert not train_seeds & test_seeds


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_loss_csv_format_and_lr(trained):
    _, _, out = trained
    rows = read_csv(out / "train" / "stage2_loss.csv")
    assert rows[0] == ["epoch", "lr", "train_nll"]
    assert len(rows) == 1 + 3
    for i, r in enumerate(rows[1:]):
        assert int(r[0]) == i
        assert float(r[1]) == lr_schedule(i, 0.01, 2, 0.1)
        assert np.isfinite(float(r[2]))
    rows = read_csv(out / "train" / "stage1_loss.csv")
    assert rows[0] == ["epoch", "lr", "train_mse"] and len(rows) == 3


@pytest.mark.parametrize("stop", [1, 3])
def test_train_resume_matches_uninterrupted(trained, tmp_path, stop):
    _, cfg_path, ref_out = trained
    out = tmp_path / "out"
    assert run(tmp_path, cfg_path, out, "gen-data") == 0
    assert run(tmp_path, cfg_path, out, "train", "--stop-after", str(stop)) == 0
    assert len(read_csv(out / "train" / ("stage1_loss.csv" if stop < 2 else "stage2_loss.csv"))) > 1
    assert run(tmp_path, cfg_path, out, "train") == 0
    assert tree_bytes(out / "train") == tree_bytes(ref_out / "train")


def test_eval_identity_checkpoint(tmp_path):
    cfg_path = small_config(tmp_path, stage1={"epochs": 0}, stage2={"epochs": 0})
    out = tmp_path / "o"
    for cmd in ("gen-data", "train", "eval"):
        assert run(tmp_path, cfg_path, out, cmd) == 0
    ed = out / "eval"
    summary = json.loads((ed / "summary.json").read_text())
    assert set(summary) == {"n_total", "n_multimodal", "rows", "by_phantom"}
    assert summary["n_total"] == 12 and summary["n_multimodal"] == 0
    assert [r["subset"] for r in summary["rows"]] == ["all", "symmetric", "marked"]
    for r in summary["rows"]:
        assert set(r) == {"subset", "n", "mean_L1_modes", "mean_L1_closer", "mean_L1_second", "mean_L1_single"}
    lines = (ed / "cases.jsonl").read_text().splitlines()
    assert len(lines) == 12
    assert all(json.loads(l)["report"]["label"] == "uni-modal" for l in lines)
    for i in (0, 1):
        rows = read_csv(ed / f"lao_hist_{i:04d}.csv")
        assert len(rows) == 361
        assert sum(int(r[2]) for r in rows[1:]) == 256
        assert (ed / f"lao_hist_{i:04d}.svg").read_text().startswith("<svg")


def test_eval_deterministic(trained, tmp_path):
    tmp, cfg_path, out = trained
    assert run(tmp, cfg_path, out, "eval") == 0
    first = tree_bytes(out / "eval")
    assert run(tmp, cfg_path, out, "eval") == 0
    assert tree_bytes(out / "eval") == first


def test_infer_report(trained, capsys):
    tmp, cfg_path, out = trained
    capsys.readouterr()
    rc = run(tmp, cfg_path, out, "infer", "--volume", str(out / "data/volumes/test_000.vol"),
             "--image", str(out / "data/images/test_000_0000.img"))
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["label"] in ("uni-modal", "multi-modal")
    assert len(report["mode_poses"]) == len(report["mode_weights"])


def test_infer_corrupted_image(trained, tmp_path):
    tmp, cfg_path, out = trained
    bad = tmp_path / "bad.img"
    bad.write_bytes((out / "data/images/test_000_0000.img").read_bytes()[:-7])
    rc = run(tmp, cfg_path, out, "infer", "--volume", str(out / "data/volumes/test_000.vol"),
             "--image", str(bad))
    assert rc == 1


def test_infer_dim_mismatch(trained, tmp_path):
    from ambireg.drr import Image2D, save_image

    tmp, cfg_path, out = trained
    img = tmp_path / "small.img"
    save_image(Image2D.from_array(np.zeros((8, 8), dtype=np.float32)), img)
    rc = run(tmp, cfg_path, out, "infer", "--volume", str(out / "data/volumes/test_000.vol"),
             "--image", str(img))
    assert rc == 1


def test_print_config_round_trip(capsys):
    assert cli.main(["print-config"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert RunConfig.from_dict(d) == RunConfig()
    assert d["data"]["poses_per_phantom"] == 64
    assert d["stage1"]["batch_size"] == 32 and d["stage2"]["lr"] == 0.01
    assert d["modes"]["threshold"] == 2000


def test_unknown_key_exit_code(tmp_path, capsys):
    assert cli.main(["--set", "stage1.nonsense=3", "print-config"]) == 1
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"flow": {"depht": 4}}))
    assert cli.main(["--config", str(bad), "print-config"]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert "error" in capsys.readouterr().err


def test_overrides_and_validation():
    cfg = load_config(None, ["stage2.epochs=5", "modes.histogram_cases=[3]", "data.marker.radius_mm=9"])
    assert cfg.stage2.epochs == 5 and cfg.modes.histogram_cases == (3,)
    assert cfg.data.marker.radius_mm == 9.0
    with pytest.raises(ConfigError):
        load_config(None, ["stage1.batch_size=0"])
    with pytest.raises(ConfigError):
        load_config(None, ["camera.detector_px=\"x\""])


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("AMBIREG_OUTPUT_ROOT", str(tmp_path / "envroot"))
    assert RunConfig().output_dir() == tmp_path / "envroot"


def test_missing_manifest_file_fails_fast(trained, tmp_path):
    tmp, cfg_path, out = trained
    m = DatasetManifest.read(out / "data" / "test.jsonl")
    m.records[0] = type(m.records[0])("volumes/nope.vol", m.records[0].image_path, m.records[0].pose,
                                      m.records[0].seed, m.records[0].phantom)
    path = out / "data" / "broken.jsonl"
    m.write(path)
    assert run(tmp, cfg_path, out, "eval", "--manifest", str(path)) == 1
