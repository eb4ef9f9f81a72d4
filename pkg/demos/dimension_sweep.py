"""How many dimensions does hierarchical retrieval need as the tree deepens?

For binary trees of growing height we find the smallest dimension at which
(a) the Gaussian construction and (b) a trained lookup table reach recall
above 95%. Then a few separation margins for the construction itself.

    python3 demos/dimension_sweep.py
"""
import numpy as np

from hierdual import (
    PhaseConfig,
    TreeSpec,
    build_perfect_tree,
    check_separation,
    construct_gaussian,
    dimension_sweep,
    handcrafted_dimension,
)

heights = [2, 3, 4, 5]
handcrafted, learned = [], []
template = [PhaseConfig(5_000, 5.0, 0.9, 4096, temperature=20.0, eval_every=500)]
for H in heights:
    h = build_perfect_tree(TreeSpec(H, 2))
    handcrafted.append(handcrafted_dimension(h, 0.95, trials=5, seed=0))
    learned.append(dimension_sweep(h, template, range(1, 65), 0.95, eval_size=5_000, normalize=False))
    print(f"H={H} m={h.node_count:>3}  handcrafted d={handcrafted[-1]:>3}  learned d={learned[-1]}")

# The construction's dimension grows roughly like H^2 log W; fit the exponent
# over the heights that actually have edges.
slope = np.polyfit(np.log(heights[1:]), np.log(handcrafted[1:]), 1)[0]
print(f"log-log slope of handcrafted dims: {slope:.2f}")

# Separation is stricter than recall: every matching score must beat every
# non-matching score by a margin. The margin grows with the dimension.
h = build_perfect_tree(TreeSpec(3, 3))
for dim in (8, 32, 128, 512):
    rep = check_separation(*construct_gaussian(h, dim, seed=0), h, epsilon=0.05)
    print(f"dim {dim:>4}: min match {rep.min_match_score:+.3f}  max non-match {rep.max_nonmatch_score:+.3f}  "
          f"margin {rep.margin:+.3f}  feasible {rep.feasible}")
