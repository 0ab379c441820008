import csv
import json
import shutil
import time
from dataclasses import replace
from pathlib import Path

import pytest

from gme.cli import main
from gme.experiment import ExperimentConfig
from gme.generators import VARIANTS
from gme.pipeline import Pipeline, read_results_csv

SMOKE = {
    "dataset": {"kind": "synthetic", "n_old_ads": 60, "n_new_ads": 20, "old_samples": 100, "new_samples": 70,
                "attr_cardinality": 30},
    "threshold": 80, "hidden": [16, 8], "base_epochs": 2, "meta_epochs": 1, "n_neighbors": 5,
    "seeds": [0], "gat_ablation": True,
}


def write_config(path, **over):
    doc = {**SMOKE, **over}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = write_config(root / "cfg.json")
    t0 = time.perf_counter()
    code = main(["report", "--config", str(cfg), "--out", str(root / "out"), "-q"])
    return root, cfg, code, time.perf_counter() - t0


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_end_to_end_smoke_run(smoke, capsys):
    root, _, code, seconds = smoke
    assert code == 0 and seconds < 60
    out = root / "out"
    metrics = rows(out / "metrics.csv")
    assert {r["variant"] for r in metrics} == set(VARIANTS) | {"GME-P\\GAT", "GME-G\\GAT", "GME-A\\GAT"}
    assert {r["phase"] for r in metrics} == {"cold", "warm-1", "warm-2"}
    assert all(0 < float(r["auc"]) < 1 for r in metrics)
    report = (out / "report.txt").read_text()
    assert all(v in report for v in VARIANTS)
    for name in ("data_summary.json", "index.tsv", "MANIFEST.json", "seed0/base.ckpt", "seed0/neighbors_new.tsv",
                 "seed0/psi_GME-A.ckpt", "seed0/psi_GME-A-nogat.ckpt", "seed0/meta_curve_MetaEmb.csv"):
        assert (out / name).is_file(), name
    assert not (out / "seed0/psi_RndEmb.ckpt").exists()


def test_rerun_skips_everything(smoke, capsys):
    root, cfg, _, _ = smoke
    before = (root / "out/report.txt").read_text()
    outcome = Pipeline(ExperimentConfig.load(cfg), root / "out").run("report")
    assert outcome.ran == [] and "report" in outcome.skipped
    assert main(["report", "--config", str(cfg), "--out", str(root / "out"), "-q"]) == 0
    assert capsys.readouterr().out == before


def test_deleted_artifact_reruns_only_downstream(smoke):
    root, cfg, _, _ = smoke
    work = root / "partial"
    shutil.copytree(root / "out", work)
    (work / "seed0/psi_GME-A.ckpt").unlink()
    outcome = Pipeline(ExperimentConfig.load(cfg), work).run("report")
    assert outcome.ran == ["train-meta/seed0/GME-A", "evaluate/seed0/GME-A", "report"]
    assert (work / "metrics.csv").read_bytes() == (root / "out/metrics.csv").read_bytes()


def test_repeat_run_is_bit_identical(smoke):
    root, cfg, _, _ = smoke
    assert main(["report", "--config", str(cfg), "--out", str(root / "again"), "-q"]) == 0
    for name in ("metrics.csv", "seed0/base.ckpt", "seed0/psi_GME-G.ckpt", "index.tsv"):
        assert (root / "again" / name).read_bytes() == (root / "out" / name).read_bytes(), name


def test_stage_subcommands_stop_early(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["build-graph", "--config", str(cfg), "--out", str(tmp_path / "o"), "-q"]) == 0
    assert (tmp_path / "o/index.tsv").is_file() and not (tmp_path / "o/seed0/psi_GME-A.ckpt").exists()


def test_selectors_filter_units(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    out = tmp_path / "o"
    assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--variant", "MetaEmb", "-q"]) == 0
    assert sorted(p.name for p in (out / "seed0").glob("metrics_*.csv")) == ["metrics_MetaEmb.csv"]


@pytest.mark.parametrize("doc", ["{not json", json.dumps({"bogus": 1}),
                                 json.dumps({"dataset": {"kind": "movielens", "path": "/nonexistent"}}),
                                 json.dumps({"beta": 2.0})])
def test_config_errors_exit_2(tmp_path, doc):
    (tmp_path / "cfg.json").write_text(doc)
    assert main(["report", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o"), "-q"]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert main(["report"]) == 2
    assert main(["nonsense", "--config", "x", "--out", "y"]) == 2
    assert main(["sweep", "--config", str(write_config(tmp_path / "c.json")), "--out", str(tmp_path / "o"),
                 "--axis", "gamma", "--values", "2.5", "-q"]) == 2


def test_stage_failure_exits_3(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", M=1000)
    out = tmp_path / "o"
    assert main(["train-meta", "--config", str(cfg), "--out", str(out), "-q"]) == 3
    units = json.loads((out / "MANIFEST.json").read_text())["units"]
    assert "failed" in {u["status"] for u in units.values()}


def test_gamma_sweep_matches_plain_run(tmp_path):
    gamma = {v: 0.5 for v in ("MetaEmb", "NgbEmb", "GME-P", "GME-G", "GME-A")}
    cfg = ExperimentConfig.load(write_config(tmp_path / "cfg.json", gamma=gamma, variants=["MetaEmb", "GME-A"],
                                             gat_ablation=False))
    plain = Pipeline(cfg, tmp_path / "plain").run("evaluate").results
    sweep = rows(Pipeline(cfg, tmp_path / "sweep").sweep("gamma", ["0.5"]))
    cold = {r.variant: r.auc for r in plain if r.phase == "cold"}
    assert {r["variant"]: float(r["auc"]) for r in sweep} == cold
    assert [r["axis_value"] for r in sweep] == ["0.5", "0.5"]


def test_gat_sweep_pairs_rows(tmp_path):
    cfg = ExperimentConfig.load(write_config(tmp_path / "cfg.json", variants=["GME-A", "GME-G"]))
    out = rows(Pipeline(cfg, tmp_path / "o").sweep("gat", ["on", "off"]))
    assert [(r["axis_value"], r["variant"]) for r in out] == [
        ("on", "GME-A"), ("on", "GME-G"), ("off", "GME-A\\GAT"), ("off", "GME-G\\GAT")]


def test_neighbors_sweep_format(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", variants=["RndEmb", "NgbEmb", "GME-P"])
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--axis", "neighbors",
                 "--values", "0,3", "-q"]) == 0
    out = rows(tmp_path / "o/sweep_neighbors.csv")
    assert list(out[0]) == ["axis_value", "variant", "seed", "auc", "loss"]
    assert [(r["axis_value"], r["variant"]) for r in out] == [("0", "NgbEmb"), ("0", "GME-P"),
                                                             ("3", "NgbEmb"), ("3", "GME-P")]


def test_results_round_trip(smoke):
    root, _, _, _ = smoke
    back = read_results_csv(root / "out/metrics.csv")
    assert [(r.variant, r.phase) for r in back][:3] == [("RndEmb", "cold"), ("RndEmb", "warm-1"),
                                                         ("RndEmb", "warm-2")]


@pytest.mark.slow
def test_more_neighbors_help_gme_a_on_synthetic(tmp_path):
    cfg = ExperimentConfig.load(Path(__file__).resolve().parent.parent / "configs" / "synthetic.json")
    cfg = replace(cfg, variants=["GME-A"])
    means = {}
    for r in rows(Pipeline(cfg, tmp_path).sweep("neighbors", ["2", "6", "10"])):
        means.setdefault(int(r["axis_value"]), []).append(float(r["auc"]))
    curve = [sum(v) / len(v) for _, v in sorted(means.items())]
    assert curve[0] <= curve[1] <= curve[2]
