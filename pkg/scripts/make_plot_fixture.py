"""Regenerate tests/data/fixture_metrics.csv and the frozen golden SVGs.

Only run this after an intentional change to the SVG renderer.
"""
from pathlib import Path

from revgn import plot, training

ROOT = Path(__file__).resolve().parents[1] / "tests" / "data"


def rows():
    out = []
    for run_id, opt, rate in (("gn", "gn", 0.5), ("adam", "adam", 0.8)):
        for seed in range(3):
            for epoch in range(6):
                loss = 2.3 * rate ** epoch * (1 + 0.05 * seed)
                out.append({
                    "run_id": run_id, "optimizer": opt, "lr": 1.0, "seed": seed,
                    "epoch": epoch, "step": 8 * epoch, "status": "ok",
                    "train_loss": loss, "test_loss": 1.1 * loss,
                    "train_acc": 1 - loss / 2.5, "test_acc": 0.95 - loss / 2.5 - 0.01 * seed,
                    "ntk_similarity": 1 - 0.05 * epoch * (seed + 1) / 3,
                    "cka": [1 - 0.02 * epoch, 1 - 0.04 * epoch - 0.01 * seed],
                })
    return out


if __name__ == "__main__":
    csv_path = ROOT / "fixture_metrics.csv"
    if csv_path.exists():
        csv_path.unlink()
    training.write_rows(csv_path, rows())
    for p in plot.plot_csv(csv_path, ROOT / "golden"):
        print(p)
