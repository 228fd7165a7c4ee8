"""
Command-line walkthrough
========================

Everything below is what a shell session with the ``clf`` command would
do, called in-process so the script runs anywhere. A synthetic log is
written, labelled twice with different thresholds, rendered and summarised.
"""
import json
import tempfile
from pathlib import Path

from centerline_factory.cli import main

work = Path(tempfile.mkdtemp(prefix="clf-demo-"))
bundle = work / "bundle"

# clf synth --n-lanes 3 --frames 4 --cameras front_center,front_left --occluder 1,0,0.3,invalid
main(["synth", "--n-lanes", "3", "--frames", "4", "--cameras", "front_center,front_left",
      "--occluder", "1,0,0.3,invalid", "--seed", "7", "--out", str(bundle)])

inputs = ["--map", str(bundle / "map.cmap.json"), "--trajectory", str(bundle / "log.traj.json"),
          "--calibration", str(bundle / "cameras.calib.json"), "--masks", str(bundle / "masks")]
for t in ("0.2", "0.4"):
    main(["generate", *inputs, "--t-occ", t, "--out", str(work / f"labels-{t}")])
    manifest = json.loads((work / f"labels-{t}" / "manifest.json").read_text())
    print(f"t_occ {t}: {manifest['counts']['centerlines']} centerlines, retention ladder {manifest['retention']}")

# the manifest is enough to replay a run byte for byte
main(["generate", "--config", str(work / "labels-0.4" / "manifest.json"), "--out", str(work / "replay")])

main(["render", "--labels", str(work / "labels-0.4"), "--calibration", str(bundle / "cameras.calib.json"),
      "--out", str(work / "svg")])
main(["stats", "--labels", str(work / "labels-0.4"), "--out", str(work / "stats.json")])
print("outputs in", work)
