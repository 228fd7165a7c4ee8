import hashlib
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from centerline_factory.cli import main
from centerline_factory.heads import HeadOutput, write_bevout
from centerline_factory.pipeline import read_label
from centerline_factory.synth import SceneSpec, generate


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    spec = SceneSpec(n_lanes=3, seed=6, n_frames=3, cameras=("front_center", "front_left"),
                     occluders=[(1, 0.0, 0.3, "invalid"), (2, 0.1, 0.8, "occlusion_valid")])
    return generate(spec).write(root)


def gen_args(b, out, *extra):
    return ["generate", "--map", str(b / "map.cmap.json"), "--trajectory", str(b / "log.traj.json"),
            "--calibration", str(b / "cameras.calib.json"), "--masks", str(b / "masks"), "--out", str(out), *extra]


def sha(p):
    return hashlib.sha256(Path(p).read_bytes()).hexdigest()


def test_missing_calibration_exits_2(bundle, tmp_path, capsys):
    args = gen_args(bundle, tmp_path / "o")
    args[args.index("--calibration") + 1] = str(tmp_path / "nope.calib.json")
    assert main(args) == 2
    assert "nope.calib.json" in capsys.readouterr().err


def test_bad_settings_exit_nonzero(bundle, tmp_path):
    assert main(gen_args(bundle, tmp_path / "o", "--t-occ", "-1")) == 2
    assert main(gen_args(bundle, tmp_path / "o", "--grid", "0,1.3,0,10,0.5")) == 2
    assert main(gen_args(bundle, tmp_path / "o", "--spacing", "-1")) == 2
    bad = tmp_path / "bad.traj.json"
    bad.write_text('{"frames": []}')
    args = gen_args(bundle, tmp_path / "o")
    args[args.index("--trajectory") + 1] = str(bad)
    assert main(args) == 1


def test_generate_is_deterministic_and_replayable(bundle, tmp_path):
    assert main(gen_args(bundle, tmp_path / "a")) == 0
    first = sha(tmp_path / "a" / "manifest.json")
    assert main(gen_args(bundle, tmp_path / "a")) == 0
    assert sha(tmp_path / "a" / "manifest.json") == first
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["t_occ"] == 0.4 and manifest["counts"]["frames"] == 6
    for rel, digest in manifest["outputs"].items():
        assert sha(tmp_path / "a" / rel) == digest
    # replay from the manifest alone
    replay = tmp_path / "replay.json"
    doc = dict(manifest)
    doc["config"] = dict(manifest["config"], out=str(tmp_path / "b"))
    replay.write_text(json.dumps(doc))
    assert main(["generate", "--config", str(replay)]) == 0
    for rel, digest in manifest["outputs"].items():
        assert sha(tmp_path / "b" / rel) == digest


def test_threshold_changes_retention(bundle, tmp_path):
    assert main(gen_args(bundle, tmp_path / "lo", "--t-occ", "0.2")) == 0
    assert main(gen_args(bundle, tmp_path / "hi", "--t-occ", "1.0")) == 0
    lo = json.loads((tmp_path / "lo" / "manifest.json").read_text())
    hi = json.loads((tmp_path / "hi" / "manifest.json").read_text())
    assert lo["counts"]["centerlines"] < hi["counts"]["centerlines"]
    assert lo["counts"]["centerlines"] == lo["retention"]["0.2"]
    assert hi["counts"]["centerlines"] == hi["retention"]["1.0"]
    ladder = [lo["retention"][k] for k in sorted(lo["retention"])]
    assert ladder == sorted(ladder)


def test_parallel_generate_matches_serial(bundle, tmp_path):
    assert main(gen_args(bundle, tmp_path / "s")) == 0
    assert main(gen_args(bundle, tmp_path / "p", "--jobs", "2")) == 0
    s = json.loads((tmp_path / "s" / "manifest.json").read_text())["outputs"]
    p = json.loads((tmp_path / "p" / "manifest.json").read_text())["outputs"]
    assert s == p


def test_sample_train_windows(tmp_path):
    masks = tmp_path / "m" / "cam"
    masks.mkdir(parents=True)
    for i in range(40):
        (masks / f"{1000 + i}.smask").write_bytes(b"")
    out = tmp_path / "pick.json"
    assert main(["sample-train", "--masks", str(tmp_path / "m"), "--seed", "3", "--out", str(out)]) == 0
    picked = json.loads(out.read_text())["frames"]
    assert len(picked) == 2
    assert int(picked[0]["frame_id"]) < 1020 <= int(picked[1]["frame_id"])
    again = tmp_path / "again.json"
    main(["sample-train", "--masks", str(tmp_path / "m"), "--seed", "3", "--out", str(again)])
    assert again.read_bytes() == out.read_bytes()
    for p in list(masks.iterdir())[20:]:
        p.unlink()
    main(["sample-train", "--masks", str(tmp_path / "m"), "--out", str(out)])
    assert len(json.loads(out.read_text())["frames"]) == 1


def test_filter_decode_eval_chain(bundle, tmp_path):
    labels = tmp_path / "labels"
    assert main(gen_args(bundle, labels, "--t-occ", "1.01")) == 0
    assert main(["filter", "--labels", str(labels), "--calibration", str(bundle / "cameras.calib.json"),
                 "--t-occ", "0.2", "--out", str(tmp_path / "f")]) == 0
    assert main(["filter", "--labels", str(tmp_path / "f"), "--calibration", str(bundle / "cameras.calib.json"),
                 "--t-occ", "0.5", "--out", str(tmp_path / "g")]) == 1
    direct = tmp_path / "direct"
    assert main(gen_args(bundle, direct, "--t-occ", "0.2")) == 0
    for p in sorted(direct.rglob("*.clabel.json")):
        a = read_label(p.read_bytes())
        b = read_label((tmp_path / "f" / p.relative_to(direct)).read_bytes())
        assert [c.lane_id for c in a.centerlines] == [c.lane_id for c in b.centerlines]

    # perfect head outputs from the ground-truth targets
    bev = tmp_path / "bev"
    for p in sorted(labels.rglob("*.clabel.json")):
        fl = read_label(p.read_bytes())
        dst = bev / p.relative_to(labels).with_name(p.name.replace(".clabel.json", ".bevout"))
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(write_bevout(HeadOutput.from_targets(fl.bev)))
    assert main(["decode", "--bevout", str(bev), "--out", str(tmp_path / "dec")]) == 0
    report = tmp_path / "eval.report.json"
    assert main(["eval", "--pred", str(tmp_path / "dec"), "--gt", str(labels), "--out", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert doc["corpus"]["f1"] == 1.0 and doc["corpus"]["fn"] == 0 and doc["corpus"]["tp"] > 0
    assert doc["match_spec"]["match_threshold"] == 1.5
    assert doc["error_average"] == "matched points"


def test_render_is_strict_xml(bundle, tmp_path):
    labels = tmp_path / "labels"
    assert main(gen_args(bundle, labels)) == 0
    out = tmp_path / "svg"
    assert main(["render", "--labels", str(labels), "--calibration", str(bundle / "cameras.calib.json"),
                 "--out", str(out)]) == 0
    files = sorted(out.rglob("*.svg"))
    assert len(files) == 6
    drawn = 0
    for f in files:
        root = ET.fromstring(f.read_bytes())
        assert root.tag == "{http://www.w3.org/2000/svg}svg"
        fl = read_label((labels / f.relative_to(out)).with_suffix(".clabel.json").read_bytes())
        lines = root.findall(".//{http://www.w3.org/2000/svg}polyline")
        assert len(lines) == sum(len(c.spline_2d) > 1 for c in fl.centerlines)
        drawn += len(lines)
    assert drawn > 0


def test_stats_split_conservation(bundle, tmp_path, capsys):
    labels = tmp_path / "labels"
    assert main(gen_args(bundle, labels)) == 0
    keys = sorted(str(p.relative_to(labels))[:-len(".clabel.json")] for p in labels.rglob("*.clabel.json"))
    splits = tmp_path / "splits.json"
    splits.write_text(json.dumps({"splits": {"train": keys[:3], "val": keys[3:5], "test": keys[5:]}}))
    out = tmp_path / "stats.json"
    assert main(["stats", "--labels", str(labels), "--splits", str(splits), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert sum(doc["splits"].values()) == doc["split_total"] == doc["frames"] == len(keys)
    assert doc["missing_frames"] == []
    assert sum(doc["r_occ_histogram"]["counts"]) == doc["centerlines"]


def test_bad_log_level_is_ignored(bundle, tmp_path, monkeypatch):
    monkeypatch.setenv("CLF_LOG", "chatty")
    assert main(gen_args(bundle, tmp_path / "o")) == 0
