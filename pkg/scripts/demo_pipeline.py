"""End-to-end CLI walkthrough: generate tiles, train, predict, evaluate and
render a confusion overlay, all through the diffnet subcommands.

Usage: python scripts/demo_pipeline.py [workdir]
"""

import sys
from pathlib import Path

from diffnet.cli import main as diffnet


def run(argv):
    print("$ diffnet " + " ".join(argv))
    rc = diffnet(argv)
    if rc != 0:
        raise SystemExit(f"subcommand failed with exit code {rc}")


def main():
    work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_run")
    tiles = work / "tiles"
    ckpt = work / "model.sunc"

    run(["gen", "--out-dir", str(tiles), "--count", "6", "--seed", "0",
         "--channels", "8", "--height", "64", "--width", "64"])
    run(["train", "--data-dir", str(tiles), "--out", str(ckpt),
         "--base-width", "8", "--steps", "200", "--batch-size", "4",
         "--patch-size", "64", "--seed", "0"])

    preds, truths = [], []
    for i in (0, 1):
        tile = tiles / f"tile_{i:05d}.btt"
        pred = work / f"pred_{i:05d}.btm"
        run(["predict", "--checkpoint", str(ckpt), "--tile", str(tile),
             "--out", str(pred)])
        preds.append(str(pred))
        truths.append(str(tile))

    run(["eval", "--pred", *preds, "--truth", *truths,
         "--out", str(work / "metrics.csv")])
    run(["render", "--pred", preds[0], "--truth", truths[0],
         "--out", str(work / "overlay.ppm")])

    print()
    print((work / "metrics.csv").read_text())
    print(f"artifacts in {work}/")


if __name__ == "__main__":
    main()
