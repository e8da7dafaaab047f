"""Label two moons from a handful of labelled points.

Compares plain harmonic extension with WNLL as the labelled set shrinks.
Run: python3 demos/interpolate_moons.py
"""

import numpy as np

from wnll_lab.data import gen_synthetic
from wnll_lab.graph import TemplateSet, build_knn_graph, harmonic_extend, predict_labels, wnll_interpolate


def main():
    data = gen_synthetic("moons", 600, noise=0.08, seed=0)
    graph = build_knn_graph(data.x, k=10)
    rng = np.random.default_rng(0)
    print(f"{'labelled':>8}  {'harmonic':>8}  {'wnll':>6}")
    for per_class in (1, 2, 5, 20):
        idx = np.concatenate([rng.choice(np.flatnonzero(data.y == c), per_class, replace=False) for c in (0, 1)])
        template = TemplateSet.from_classes(idx, data.y[idx], 2)
        free = np.setdiff1d(np.arange(len(data)), idx)
        accs = [np.mean(predict_labels(f(graph, template))[free] == data.y[free])
                for f in (harmonic_extend, wnll_interpolate)]
        print(f"{2 * per_class:>8}  {accs[0]:>8.3f}  {accs[1]:>6.3f}")


if __name__ == "__main__":
    main()
