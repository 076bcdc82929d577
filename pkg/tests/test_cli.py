import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from priormap.cli import main
from priormap.grid import load_polylines
from priormap.nn.tensor_io import save_tensor
from priormap.render import read_ppm

FIX = Path(__file__).parent / "fixtures"
TINY = FIX / "tiny_config.json"


def write_traj(path, poses, origin=(1.3, 103.8)):
    path.write_text(json.dumps({"origin": list(origin), "poses": poses}))
    return path


def test_extract_sdmap_fixture(tmp_path, capsys):
    traj = write_traj(tmp_path / "t.json", [{"lat": 1.3, "lon": 103.8, "heading": 0.0}])
    assert main(["extract-sdmap", str(FIX / "two_ways.osm"), str(traj), str(tmp_path / "out")]) == 0
    polys = load_polylines(tmp_path / "out" / "sd_0000.json")
    assert len(polys) == 2
    ys = [p for p in polys if abs(p.points[0, 0]) < 1e-6]
    assert len(ys) == 1 and np.allclose(np.abs(ys[0].points[[0, -1], 1]), 32.0)
    stats = (tmp_path / "out" / "stats.txt").read_text()
    assert stats.startswith("way_count: 2\n") and "poses: 1" in stats


def test_extract_sdmap_service_toggle(tmp_path):
    traj = write_traj(tmp_path / "t.json", [{"lat": 0.0001, "lon": 0.0005, "heading": 0.0}],
                      origin=(0.0, 0.0))
    main(["extract-sdmap", str(FIX / "service_mix.osm"), str(traj), str(tmp_path / "a")])
    main(["extract-sdmap", str(FIX / "service_mix.osm"), str(traj), str(tmp_path / "b"),
          "--include-service"])
    assert (tmp_path / "a" / "stats.txt").read_text().startswith("way_count: 3")
    assert (tmp_path / "b" / "stats.txt").read_text().startswith("way_count: 5")
    assert len(load_polylines(tmp_path / "a" / "sd_0000.json")) == 3
    assert len(load_polylines(tmp_path / "b" / "sd_0000.json")) == 5


def test_extract_sdmap_empty_trajectory(tmp_path):
    traj = write_traj(tmp_path / "t.json", [])
    assert main(["extract-sdmap", str(FIX / "two_ways.osm"), str(traj), str(tmp_path / "o")]) == 0
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["stats.txt"]


def test_extract_sdmap_errors(tmp_path):
    traj = write_traj(tmp_path / "t.json", [])
    assert main(["extract-sdmap", str(tmp_path / "nope.osm"), str(traj), str(tmp_path)]) == 2
    bad = tmp_path / "bad.osm"
    bad.write_text("<osm><node id='1'\n</osm>")
    assert main(["extract-sdmap", str(bad), str(traj), str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["extract-sdmap", str(FIX / "two_ways.osm"), str(tmp_path / "bad.json"),
                 str(tmp_path)]) == 2
    worse = write_traj(tmp_path / "w.json", [{"lat": "x"}])
    assert main(["extract-sdmap", str(FIX / "two_ways.osm"), str(worse), str(tmp_path)]) == 2


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["render"]) == 1


def test_render_byte_oracle(tmp_path):
    save_tensor(tmp_path / "l.pmtn", np.array([[0, 1], [2, 3]], dtype=np.float32))
    assert main(["render", str(tmp_path / "l.pmtn"), str(tmp_path / "o.ppm")]) == 0
    want = b"P6\n2 2\n255\n" + bytes([0, 255, 0, 255, 0, 0, 0, 0, 255, 0, 0, 0])
    assert (tmp_path / "o.ppm").read_bytes() == want


def test_render_background_and_errors(tmp_path):
    save_tensor(tmp_path / "bg.pmtn", np.full((3, 5), 3, dtype=np.float32))
    main(["render", str(tmp_path / "bg.pmtn"), str(tmp_path / "bg.ppm")])
    assert not read_ppm(tmp_path / "bg.ppm").any()
    assert main(["render", str(tmp_path / "none.pmtn"), str(tmp_path / "x.ppm")]) == 2
    save_tensor(tmp_path / "r1.pmtn", np.zeros(4, dtype=np.float32))
    assert main(["render", str(tmp_path / "r1.pmtn"), str(tmp_path / "x.ppm")]) == 2
    assert main(["render", str(tmp_path / "bg.pmtn"), str(tmp_path / "x.ppm"),
                 "--overlay-sd"]) == 2


def test_missing_stage_names_dependency(tmp_path, capsys):
    wd = tmp_path / "wd"
    assert main(["train", "--config", str(TINY), "--workdir", str(wd)]) == 2
    assert "gen-world" in capsys.readouterr().err
    assert main(["gen-world", "--config", str(TINY), "--workdir", str(wd)]) == 0
    assert main(["finetune", "--config", str(TINY), "--workdir", str(wd)]) == 2
    err = capsys.readouterr().err
    assert "fusion" in err or "mae" in err


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nonsense": True}))
    assert main(["gen-world", "--config", str(cfg), "--workdir", str(tmp_path)]) == 2


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(TINY), "--workdir", str(wd)]) == 0
    return wd


def test_run_writes_artifacts(tiny_run):
    rep = json.loads((tiny_run / "eval" / "report.json").read_text())
    assert [r["label"] for r in rep][:2] == ["Baseline (no prior)", "S (SD prior)"]
    for stage in ("baseline", "fusion", "mae", "finetune"):
        assert (tiny_run / "checkpoints" / stage / "manifest.json").exists()
        assert (tiny_run / "logs" / f"{stage}.csv").exists()
    assert (tiny_run / "config" / "fusion.json").exists()


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    wd = tmp_path / "again"
    assert main(["run", "--config", str(TINY), "--workdir", str(wd)]) == 0
    for rel in ("eval/report.json", "eval/report.txt", "logs/fusion.csv", "logs/finetune.csv"):
        assert (wd / rel).read_bytes() == (tiny_run / rel).read_bytes(), rel


def test_gt_vs_gt_and_scene_render(tiny_run, tmp_path, capsys):
    wd = tmp_path / "gt"
    shutil.copytree(tiny_run / "data", wd / "data")
    assert main(["eval", "--config", str(TINY), "--workdir", str(wd), "--gt-vs-gt"]) == 0
    rep = json.loads((wd / "eval" / "report.json").read_text())
    assert rep[0]["miou"] == 1.0
    scene = tiny_run / "data" / "eval" / "scenes" / "0000"
    assert main(["render", str(scene), str(tmp_path / "a.ppm")]) == 0
    assert main(["render", str(scene), str(tmp_path / "b.ppm"), "--overlay-sd", "--config",
                 str(TINY)]) == 0
    a, b = read_ppm(tmp_path / "a.ppm"), read_ppm(tmp_path / "b.ppm")
    changed = np.any(a != b, axis=-1)
    assert changed.any() and np.all(b[changed] == 255)


def test_ablation_smoke(tiny_run, tmp_path):
    wd = tmp_path / "abl"
    shutil.copytree(tiny_run / "data", wd / "data")
    assert main(["ablate", "--config", str(TINY), "--workdir", str(wd)]) == 0
    text = (wd / "ablation" / "report.txt").read_text()
    assert text.splitlines()[0].split()[:2] == ["Method", "Div."]
    for mode in ("none", "simply-concat", "cnn-concat", "cross-attention"):
        assert mode in text
