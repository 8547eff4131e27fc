"""
Where does the model look? Attention weights against the planted theme
=====================================================================

Uses the checkpoint and corpus written by 02_train_and_evaluate.py. Runs
``discovqa predict --dump-attention`` on a few test clips and compares the
dumped w_i with the ground-truth theme frames from the sidecar.

Run: python demos/03_attention_dump.py
"""
import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from discovqa.cli import main
from discovqa.features import load_manifest, read_sidecar

out = Path(__file__).resolve().parent / "demo_out"
if not (out / "demo.ckpt").exists():
    raise SystemExit("run demos/02_train_and_evaluate.py first")

entries = [e for e in load_manifest(out / "corpus" / "manifest.csv") if e.split == "test"]
truth = read_sidecar(out / "corpus" / "ground_truth.jsonl")

wins = 0
for e in entries:
    dump = out / f"{e.video_id}.attention.csv"
    main(["predict", "--ckpt", str(out / "demo.ckpt"), "--features", e.feature_path, "--sm", "8",
          "--dump-attention", str(dump)])

    # average w over every time a frame was sampled
    w_sum, hits = defaultdict(float), defaultdict(int)
    m_qk_total = defaultdict(float)
    for row in csv.DictReader(dump.open()):
        w_sum[int(row["frame"])] += float(row["w"])
        hits[int(row["frame"])] += 1
        m_qk_total[row["sample"]] += float(row["m_qk"])
    frames = sorted(w_sum)
    w = np.array([w_sum[f] / hits[f] for f in frames])
    theme = truth[e.video_id].theme[frames]
    gap = w[theme == 1].mean() - w[theme == 0].mean()
    wins += gap > 0

    # M_QK is a distribution over the sampled frames of each draw
    assert all(abs(v - 1) < 1e-9 for v in m_qk_total.values())
    print(f"{e.video_id}  theme frames {int(theme.sum()):2d}/{len(frames)}  mean w theme {w[theme == 1].mean():+.3f}"
          f"  other {w[theme == 0].mean():+.3f}")

print(f"theme frames weighted higher on {wins}/{len(entries)} test clips")
