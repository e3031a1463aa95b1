"""The command line end to end on a small dataset, inside a temporary directory.

Equivalent shell session:

    sdct-auxnet gen-data --out data --subjects-per-class 7 --test-subjects-per-class 2 --images-per-subject 10
    sdct-auxnet train --manifest data/manifest.csv --out run --preset desk --epochs 2
    sdct-auxnet eval --checkpoint run/checkpoint.sdct --manifest data/manifest.csv --out eval --theta 0
    sdct-auxnet sweep-theta --checkpoint run/checkpoint.sdct --manifest data/manifest.csv --out sweep

Run:  python3 demos/cli_walkthrough.py
"""
# %%
import csv
import tempfile
from pathlib import Path

from sdct_auxnet.cli import main


def show(path, limit=6):
    print(f"--- {path.name}")
    with path.open() as fh:
        for i, row in enumerate(csv.reader(fh)):
            if i >= limit:
                print("    ...")
                break
            print("   ", ",".join(row))


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    data, run = root / "data", root / "run"
    # %% generate, train, evaluate
    main(["gen-data", "--out", str(data), "--subjects-per-class", "7", "--test-subjects-per-class", "2",
          "--images-per-subject", "10"])
    main(["train", "--manifest", str(data / "manifest.csv"), "--out", str(run), "--preset", "desk", "--epochs", "2"])
    show(run / "metrics.csv")
    show(run / "aux_usage.csv")
    # %% theta = 0 hands every image to the network
    main(["eval", "--checkpoint", str(run / "checkpoint.sdct"), "--manifest", str(data / "manifest.csv"),
          "--out", str(root / "eval"), "--theta", "0"])
    show(root / "eval" / "aux_usage.csv")
    # %% one pass over the test set, every theta on the default grid
    main(["sweep-theta", "--checkpoint", str(run / "checkpoint.sdct"), "--manifest", str(data / "manifest.csv"),
          "--out", str(root / "sweep")])
    show(root / "sweep" / "aux_usage_sweep.csv", limit=12)
