"""Lost in the long distance, and the pretrain-finetune fix, on a small tree.

A perfect tree of height 4 and width 5 has 155 nodes. A query's relevant
documents are itself (distance 0), its parent (1) and its grandparent (2).
Three dimensions are too few to get all three right from regular sampling.

    python3 demos/lost_in_long_distance.py
"""
import numpy as np

from hierdual import (
    PhaseConfig,
    SamplingKind,
    SamplingStrategy,
    TreeSpec,
    build_perfect_tree,
    frozen_eval_pairs,
    pretrain_finetune_phases,
    train,
)
from hierdual.sampler import distance_distribution

h = build_perfect_tree(TreeSpec(4, 5))
print(f"{h.node_count} nodes, max distance {h.max_distance}")

# Regular sampling: uniform query, then uniform relevant document.
# Distance 0 gets the biggest share, distance 2 the smallest.
for kind in (SamplingKind.REGULAR, SamplingKind.HEAVY_TAIL_TOY):
    shares = distance_distribution(h, kind)
    print(f"{kind.value:>16}: " + " ".join(f"d{d}={100 * s:.1f}%" for d, s in enumerate(shares)))

val = frozen_eval_pairs(h, 10_000, seed=0)


def show(name, best, history):
    r = best.validation_report
    per = " ".join(f"d{d}={r.recall_at(d):.2f}" for d in sorted(r.per_distance_recall))
    print(f"{name:>20}: best step {best.step:>5}  overall {r.overall_recall:.3f}  {per}")


# Unnormalized tables; the temperature divides the raw inner products.
regular = [PhaseConfig(20_000, 5.0, 0.9, 4096, temperature=20.0)]
best, hist = train(h, 3, regular, val, seed=0, normalize=False)
show("regular", best, hist)

# Distance-0 recall is near perfect, distance 2 is near zero. The trajectory:
for r in hist[::16]:
    print(f"    step {r.step:>5}: " + " ".join(f"{r.recall_at(d):.2f}" for d in range(3)))

# Mixing in long-distance pairs moves the failure instead of fixing it.
for p in (0.03, 0.3):
    mix = [PhaseConfig(20_000, 5.0, 0.9, 4096, 20.0, SamplingStrategy(SamplingKind.REBALANCED, mix_p=p))]
    best, hist = train(h, 3, mix, val, seed=0, normalize=False)
    show(f"rebalanced p={p}", best, hist)

# Pretrain on regular pairs, then finetune on long-distance pairs only with a
# smaller learning rate and a softer softmax. Checkpoints whose exact-match
# recall drops below 0.95 are never selected.
phases = pretrain_finetune_phases(
    10_000, 10_000, 5.0, 4096,
    lr_multiplier=1e-2, finetune_temperature=2000.0, temperature=20.0, exact_match_floor=0.95,
)
best, hist = train(h, 3, phases, val, seed=0, normalize=False)
show("pretrain-finetune", best, hist)

finetune = [r for r in hist if r.phase == 1]
d0 = np.array([r.recall_at(0) for r in finetune])
print(f"finetune evals: {len(finetune)}, exact-match recall range {d0.min():.2f}..{d0.max():.2f}")
