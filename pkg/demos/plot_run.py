"""
Plot the artifacts of an ``spinedit optimize`` run.

    python3 demos/plot_run.py runs/citrate_mixed

Writes ``loss.png`` and ``spectra.png`` into the run directory. Needs
matplotlib, which the package itself does not depend on; without it the
script prints a text summary of the same CSV files instead.
"""

import csv
import re
import sys
from pathlib import Path


def read_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {h: [float(r[i]) for r in body] for i, h in enumerate(header)}


def main(run_dir):
    run = Path(run_dir)
    hist = read_columns(run / "history.csv")
    snaps = sorted(run.glob("snapshot_epoch*.csv"),
                   key=lambda p: int(re.search(r"epoch(\d+)", p.name).group(1)))
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print(f"{len(hist['epoch'])} epochs, first loss {hist['loss'][0]:.5g}, last {hist['loss'][-1]:.5g}")
        for p in snaps:
            s = read_columns(p)
            print(f"{p.name}: max real {max(s['real']):.4g}")
        return

    fig, ax = plt.subplots()
    ax.plot(hist["epoch"], hist["loss"])
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fig.savefig(run / "loss.png", dpi=120)

    fig, ax = plt.subplots()
    for p in snaps:
        s = read_columns(p)
        ax.plot(s["ppm"], s["real"], label=p.stem.replace("snapshot_", ""), lw=0.8)
    ax.invert_xaxis()
    ax.set_xlabel("ppm")
    ax.legend(fontsize=7)
    fig.savefig(run / "spectra.png", dpi=120)
    print(f"wrote {run / 'loss.png'} and {run / 'spectra.png'}")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
