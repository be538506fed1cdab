"""Why a sliding window: a signal spread over four rounds is invisible round by round.

Each round adds unit-norm noise. One coordinate receives a small, steady push
for four consecutive rounds. No single round makes it heavy, but the sum over
those four rounds does, and only the windowed structure keeps that sum around.
"""

import numpy as np

from sketchfed import CountSketch, SketchConfig, SlidingWindowSketch

d, rounds, window, tau = 1024, 40, 4, 0.5
rng = np.random.default_rng(3)
target, start = 77, 20
push = 12 ** -0.25

cfg = SketchConfig(7, 4096, d, seed=1)
windowed = SlidingWindowSketch(cfg, window)
single = SlidingWindowSketch(cfg, 1)

for t in range(rounds):
    g = rng.normal(size=d)
    g[target] = 0.0
    g /= np.linalg.norm(g)
    if start <= t < start + window:
        g[target] = push
    s = CountSketch.of(g, cfg)
    windowed.insert(s)
    single.insert(s)
    w_hit = target in windowed.find_heavy(tau).indices
    s_hit = target in single.find_heavy(tau).indices
    if start <= t < start + window + 1:
        print(f"round {t:2d}: window of {window} sees it: {w_hit!s:5}  single round sees it: {s_hit}")
