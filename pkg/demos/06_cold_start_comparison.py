"""
Comparing generators on cold-start ads
======================================

Runs the shipped synthetic configuration with two seeds and a reduced
number of variants, then prints cold-start AUC. Expect a few minutes.
"""

from dataclasses import replace
from pathlib import Path

from gme.evaluate import format_table
from gme.experiment import ExperimentConfig, compare_variants

cfg = ExperimentConfig.load(Path(__file__).resolve().parent.parent / "configs" / "synthetic.json")
cfg = replace(cfg, seeds=[0, 1], variants=["RndEmb", "MetaEmb", "GME-A"], gat_ablation=True)

results = compare_variants(cfg, warmup=False)
print(format_table(results), end="")
