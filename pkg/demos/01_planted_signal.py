"""A tour of the synthetic corpus: what is planted, and how MOS follows from it.

Run: python demos/01_planted_signal.py
"""
import numpy as np

from discovqa.features import SyntheticSpec, generate_synthetic_clip, mos_from_ground_truth
from discovqa.metrics import srocc

spec = SyntheticSpec(n_frames=32, channels=(8, 8, 8, 8), theme_vector_dim=4)
clip, mos, truth = generate_synthetic_clip(spec, seed=7)

print("levels:", [lv.shape for lv in clip.levels])
print("mos:", round(mos, 3))

# one character per frame: B = flicker burst, T = theme content, * = both
marks = {(0, 0): ".", (1, 0): "B", (0, 1): "T", (1, 1): "*"}
print("frames:", "".join(marks[int(b), int(t)] for b, t in zip(truth.burst, truth.theme)))

# bursts push features along one direction; the first level carries most of it
norms = np.linalg.norm(clip.levels[0], axis=1)
print("mean feature norm, burst frames vs clean:",
      round(norms[truth.burst == 1].mean(), 2), round(norms[truth.burst == 0].mean(), 2))

# the closed form reproduces the label from the sidecar alone
print("closed form:", mos_from_ground_truth(truth.burst, truth.importance) == mos)

# a burst on a theme frame costs more than the same burst elsewhere
on_theme = np.zeros(32, dtype=int)
on_theme[np.argmax(truth.theme)] = 1
off_theme = np.zeros(32, dtype=int)
off_theme[np.argmin(truth.theme)] = 1
print("one burst on a theme frame:", round(mos_from_ground_truth(on_theme, truth.importance), 3),
      "| off theme:", round(mos_from_ground_truth(off_theme, truth.importance), 3))

# how much does the weighting matter? rank clips by raw burst count against true mos
bursts, weighted, labels = [], [], []
for seed in range(300):
    _, m, t = generate_synthetic_clip(spec, seed)
    bursts.append(-t.burst.mean())
    weighted.append(-(t.burst * t.importance).sum() / t.importance.sum())
    labels.append(m)
print("SROCC of unweighted burst fraction:", round(srocc(bursts, labels), 3))
print("SROCC of theme-weighted burst fraction:", round(srocc(weighted, labels), 3))
