"""The whole pipeline through the command line, at toy scale.

Each stage writes ``<stage>-<confighash>-<timestamp>/`` under the output
directory with the resolved config, ``metrics.jsonl`` and ``summary.json``.
The shell equivalent is ``encoderlab <stage> --config configs/toy.yaml ...``.
"""
from __future__ import annotations

import json
import tempfile
from pathlib import Path

from encoderlab.cli import run

CONFIG = str(Path(__file__).parents[1] / "configs" / "toy.yaml")
out = Path(tempfile.mkdtemp(prefix="encoderlab-"))


def stage(name, *extra):
    code, run_dir = run([name, "--config", CONFIG, "--out-dir", str(out), "--seed", "0", *map(str, extra)])
    assert code == 0, (name, code)
    print(f"{name:14} -> {run_dir.name}")
    return run_dir


data = stage("gen-data")
pre = stage("pretrain", "--data", data)
dist = stage("distill", "--data", data, "--teacher", pre / "model.npz")
vid = stage("video-ft", "--data", data, "--checkpoint", pre / "model.npz")
spa = stage("spatial-align", "--data", data, "--checkpoint", pre / "model.npz")
for ckpt, tag in ((pre, "base"), (spa, "aligned")):
    stage("probe", "--data", data, "--checkpoint", ckpt / "model.npz", "--model-id", tag)
zs = stage("zeroshot", "--data", data, "--checkpoint", pre / "model.npz")
stage("viz", "--data", data, "--checkpoint", pre / "model.npz")
rep = stage("report", "--sweep", out)

print(json.dumps(json.loads((zs / "summary.json").read_text())["zeroshot_heldout"], indent=1))
print("distill agreement:", json.loads((dist / "summary.json").read_text())["agreement"])
print("layer plots:", sorted(p.name for p in rep.glob("*.png")))
