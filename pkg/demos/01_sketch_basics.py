"""Count Sketch basics: linearity, point estimates and heavy-hitter recovery.

Run with ``python3 demos/01_sketch_basics.py``.
"""

import numpy as np

from sketchfed import CountSketch, SketchConfig, sketch_size

rng = np.random.default_rng(0)
d = 10_000

# A gradient-like vector: mostly small noise with a handful of large entries.
g = rng.normal(size=d)
heavy = [17, 420, 9001]
g[heavy] = [150.0, -120.0, 90.0]

# Size the sketch for coordinates holding at least 5% of the squared norm.
rows, cols = sketch_size(tau=0.05, delta=0.01, dim=d)
cfg = SketchConfig(rows, cols, d, seed=42)
print(f"sketch {rows} x {cols} = {cfg.num_counters} counters for a {d}-dim vector")

sk = CountSketch.of(g, cfg)
print("estimates of the planted coordinates:", [round(sk.estimate(i), 2) for i in heavy])
print("true values:                          ", list(g[heavy]))
print(f"norm estimate {sk.l2_estimate():.1f} vs true {np.linalg.norm(g):.1f}")

top = sk.unsketch_topk(3)
print("top-3 recovered:", dict(zip(top.indices.tolist(), np.round(top.values, 2).tolist())))

# Sketches add: the sum of two clients' sketches is the sketch of the summed gradient.
h = rng.normal(size=d)
merged = CountSketch.of(g, cfg) + CountSketch.of(h, cfg)
print("linear:", np.allclose(merged.table, CountSketch.of(g + h, cfg).table))

# Wire format round trip.
blob = sk.to_bytes()
print(f"serialized to {len(blob)} bytes; round trip equal:", CountSketch.from_bytes(blob).config == cfg)
