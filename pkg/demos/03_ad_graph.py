"""
Neighbors through a reverse index
=================================

Old ads are indexed by their attribute tokens. A new ad's neighbors are the
old ads that share the most attributes with it, ties broken at random.
"""

import numpy as np

from gme.graph import build_reverse_index, retrieve_neighbors

old_ads = {
    1: {"category": (1,)},
    2: {"category": (1,), "brand": (2,)},
    3: {"brand": (2,)},
    4: {"category": (7,), "brand": (9,)},
}
index = build_reverse_index(old_ads)
print(index.dump(), end="")

query = {"category": (1,), "brand": (2,)}
nb = retrieve_neighbors(query, index, N=3, rng=np.random.default_rng(0))
for ad, score in zip(nb.ids, nb.scores):
    print(f"ad {ad}: shares {score} attribute(s)")

# very common tokens carry little information; the index can drop them
crowded = {i: {"tag": (0, i)} for i in range(10)}
print("dropped:", build_reverse_index(crowded, max_fraction=0.2).dropped)
