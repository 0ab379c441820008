"""
Initial embedding generators
============================

Each generator maps an ad's attributes (and optionally its neighbors) to an
initial ID embedding. Here they run with fresh, untrained parameters so the
wiring is visible.
"""

import numpy as np

from gme.generators import VARIANTS, GeneratorInput, init_generator

dim, width, n = 4, 12, 3
rng = np.random.default_rng(1)
inp = GeneratorInput(z0=rng.normal(size=width), P=rng.normal(size=(n, dim)), Z=rng.normal(size=(n, width)))

for variant in VARIANTS:
    gen = init_generator(variant, dim, width, seed=0)
    r0 = gen(inp, rng=np.random.default_rng(0))
    print(f"{variant:8s} gamma={gen.gamma:<5} r0={np.round(r0, 3)}")

# the attention vector starts at zero, so every neighbor starts with equal weight
gen = init_generator("GME-A", dim, width, seed=0)
print("initial attention", np.round(gen.attention(inp), 3))
gen.params["a"] = rng.normal(size=gen.params["a"].shape)
print("random attention ", np.round(gen.attention(inp), 3))

# neighbors with the ad's own attributes leave GME-G's attention uniform
gen = init_generator("GME-G", dim, width, seed=0)
gen.params["a"] = rng.normal(size=gen.params["a"].shape)
twins = GeneratorInput(inp.z0, inp.P, np.tile(inp.z0, (n, 1)))
print("GME-G with twin neighbors", gen.attention(twins))
