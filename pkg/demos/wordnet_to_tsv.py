"""Convert the WordNet 3.0 noun database into the package's edge-list TSV.

Point it at a directory holding ``data.noun`` and ``index.noun`` (any
WordNet 3.0 distribution). Output lines are ``child<TAB>parent`` with
``lemma.n.NN`` labels; a ``.gz`` suffix compresses the result.

    python3 demos/wordnet_to_tsv.py /path/to/wordnet-3.0 wordnet_nouns.tsv.gz
"""
import gzip
import os
import sys

import numpy as np

from hierdual import load_wordnet_nouns
from hierdual.hierarchy import write_edge_list

src, dst = sys.argv[1], sys.argv[2]
with open(os.path.join(src, "data.noun")) as data, open(os.path.join(src, "index.noun")) as index:
    h = load_wordnet_nouns(data, index)

sizes = h.relevant_sizes
print(f"{h.node_count} synsets, {len(h.edges)} hypernym edges")
print(f"max distance {h.max_distance}, largest relevant set {sizes.max()}, mean {sizes.mean():.1f}")

# A familiar chain: everything a cat is.
cat = h.index_of("cat.n.01")
print("cat.n.01 ->", ", ".join(sorted(h.label(v) for v in h.relevant_set(cat) if v != cat)))

# Pairs per distance under full enumeration; recall is reported on these slices.
print("pairs by distance:", np.bincount(h.relevant_distances).tolist())

opener = gzip.open if dst.endswith(".gz") else open
with opener(dst, "wt") as f:
    write_edge_list(h, f)
print("wrote", dst)
