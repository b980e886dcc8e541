"""The command-line pipeline end to end, driven in-process.

Equivalent shell session::

    viewfusion phantom gen --seed 0 --out-dir data
    viewfusion corrupt --gt data/gt.vfv --seed 0 --out-dir data
    viewfusion fuse --mode lssf --volume data/volume.vfv \\
        --seg data/seg_X.vfv data/seg_Y.vfv data/seg_Z.vfv \\
        --prob data/prob_X.vfv data/prob_Y.vfv data/prob_Z.vfv \\
        --out fused.vfv --manifest fused.json --gt data/gt.vfv --threads 4
"""
import json
import tempfile
from pathlib import Path

from viewfusion.cli import main

with tempfile.TemporaryDirectory() as tmp:
    d = Path(tmp)
    main(["phantom", "gen", "--seed", "0", "--out-dir", str(d / "data")])
    main(["corrupt", "--gt", str(d / "data" / "gt.vfv"), "--seed", "0", "--out-dir", str(d / "data")])
    common = ["--volume", str(d / "data" / "volume.vfv"),
              "--seg", *[str(d / "data" / f"seg_{v}.vfv") for v in "XYZ"],
              "--prob", *[str(d / "data" / f"prob_{v}.vfv") for v in "XYZ"],
              "--gt", str(d / "data" / "gt.vfv")]
    for mode in ("mv", "staple", "lssf"):
        print(f"--- {mode}")
        main(["fuse", "--mode", mode, *common, "--out", str(d / f"{mode}.vfv"),
              "--manifest", str(d / f"{mode}.json"), "--threads", "4"])
    for mode in ("mv", "staple", "lssf"):
        m = json.loads((d / f"{mode}.json").read_text())
        t = json.loads((d / f"{mode}.timing.json").read_text())
        print(f"{mode}: mean DSC {m['mean_dsc']:.2f} in {t['wall_time_s']:.2f} s")
