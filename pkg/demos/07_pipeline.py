"""
The resumable pipeline
======================

The same run the ``gme`` command performs, driven from Python. A second
call finds every unit up to date and only reloads artifacts.
"""

import tempfile
from pathlib import Path

from gme.experiment import ExperimentConfig
from gme.pipeline import Pipeline

cfg = ExperimentConfig.from_json({
    "dataset": {"kind": "synthetic", "n_old_ads": 80, "n_new_ads": 20, "old_samples": 100, "new_samples": 70},
    "threshold": 80, "hidden": [16, 8], "base_epochs": 2, "meta_epochs": 1, "seeds": [0],
    "variants": ["RndEmb", "MetaEmb", "GME-A"],
})

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    first = Pipeline(cfg, out).run("report")
    print("ran:", first.ran)
    print((out / "report.txt").read_text())

    again = Pipeline(cfg, out).run("report")
    print("second call ran", len(again.ran), "units and skipped", len(again.skipped))

    # one sweep value per row, cold phase only
    path = Pipeline(cfg, out).sweep("gamma", ["0.25", "1.0"])
    print(path.read_text())
