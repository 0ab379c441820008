"""Resumable, artifact-writing run of an experiment.

Work is split into units (``train-base/seed0``, ``train-meta/seed0/GME-A``,
...). Each unit records in ``MANIFEST.json`` the hash of its inputs and the
sha256 of every file it wrote. A later invocation skips a unit when its
input hash matches, every recorded file is still present with the same
digest, and no unit it depends on was re-run in the same invocation.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .ctr import load_checkpoint, save_checkpoint
from .data import ConfigError
from .evaluate import PhaseResult, eval_cold, format_table, write_results_csv
from .experiment import ExperimentConfig, Run, Splits, make_splits
from .generators import GME_VARIANTS, TRAINABLE, load_generator, save_generator
from .graph import NeighborSet

log = logging.getLogger(__name__)

STAGES = ("ingest", "train-base", "build-graph", "train-meta", "evaluate", "report")
SWEEP_AXES = ("gamma", "neighbors", "gat")
MANIFEST = "MANIFEST.json"

# config keys that select which units run rather than what a unit computes
_SELECTORS = ("seeds", "variants", "gat_ablation")


class StageError(RuntimeError):
    def __init__(self, unit: str, cause: BaseException):
        super().__init__(f"{unit} failed: {cause}")
        self.unit = unit


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_tag(variant: str, gat: bool = True) -> str:
    return variant if gat or variant not in GME_VARIANTS else f"{variant}-nogat"


class Manifest:
    def __init__(self, root: Path, cfg: ExperimentConfig):
        self.root = root
        self.path = root / MANIFEST
        doc = {}
        if self.path.exists():
            try:
                doc = json.loads(self.path.read_text())
            except ValueError:
                log.warning("unreadable %s, starting afresh", self.path)
        self.units: dict[str, dict] = doc.get("units", {})
        self.doc = {"format": 1, "config": cfg.to_json(), "config_hash": cfg.digest(), "units": self.units}

    def save(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.doc, indent=1, sort_keys=True))
        tmp.replace(self.path)

    def fresh(self, key: str, inputs: str) -> bool:
        rec = self.units.get(key)
        if not rec or rec.get("status") != "done" or rec.get("inputs") != inputs:
            return False
        for rel, digest in rec["outputs"].items():
            p = self.root / rel
            if not p.is_file() or sha256_file(p) != digest:
                log.info("%s: %s missing or modified", key, rel)
                return False
        return True

    def mark(self, key: str, status: str, inputs: str, outputs=()) -> None:
        self.units[key] = {"status": status, "inputs": inputs,
                           "outputs": {str(o): sha256_file(self.root / o) for o in outputs}}
        self.save()

    def digests(self, key: str) -> dict:
        return self.units.get(key, {}).get("outputs", {})


@dataclass
class Outcome:
    results: list[PhaseResult]
    ran: list[str]
    skipped: list[str]
    out: Path


class Pipeline:
    """One output directory, one configuration."""

    def __init__(self, cfg: ExperimentConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.out, cfg)
        self.manifest.save()
        self._base_cfg = {k: v for k, v in cfg.to_json().items() if k not in _SELECTORS}
        self._splits: Splits | None = None
        self._runs: dict[int, Run] = {}
        self.ran: list[str] = []
        self.skipped: list[str] = []

    # -- unit machinery --------------------------------------------------

    def _unit(self, key: str, deps: list[str], body, load) -> None:
        """Run ``body() -> output paths`` unless fresh; otherwise ``load()`` the stored outputs."""
        if key in self.ran or key in self.skipped:
            return
        inputs = _hash({"unit": key, "config": self._base_cfg,
                        "deps": {d: self.manifest.digests(d) for d in deps}})
        if not any(d in self.ran for d in deps) and self.manifest.fresh(key, inputs):
            self.skipped.append(key)
            log.info("skip %s", key)
            load()
            return
        log.info("run %s", key)
        self.manifest.mark(key, "running", inputs)
        try:
            outputs = body()
        except Exception as e:  # recorded, then surfaced as a stage failure
            self.manifest.mark(key, "failed", inputs)
            raise StageError(key, e) from e
        self.manifest.mark(key, "done", inputs, [Path(o).relative_to(self.out) for o in outputs])
        self.ran.append(key)

    @property
    def splits(self) -> Splits:
        if self._splits is None:
            self._splits = make_splits(self.cfg)
        return self._splits

    def run_for(self, seed: int) -> Run:
        if seed not in self._runs:
            self._runs[seed] = Run(self.cfg, self.splits, seed)
        return self._runs[seed]

    def _seed_dir(self, seed: int) -> Path:
        d = self.out / f"seed{seed}"
        d.mkdir(exist_ok=True)
        return d

    # -- stages ----------------------------------------------------------

    def ingest(self) -> None:
        path = self.out / "data_summary.json"

        def body():
            path.write_text(json.dumps(self.splits.summary(), indent=1, sort_keys=True) + "\n")
            return [path]

        self._unit("ingest", [], body, lambda: None)

    def train_base(self) -> None:
        self.ingest()
        for seed in self.cfg.seeds:
            run = self.run_for(seed)
            ckpt = self._seed_dir(seed) / "base.ckpt"
            curve = self._seed_dir(seed) / "base_curve.csv"

            def body(run=run, ckpt=ckpt, curve=curve):
                model = run.train_base()
                save_checkpoint(model, ckpt)
                _write_rows(curve, ["epoch", "loss"], run.base_history)
                return [ckpt, curve]

            def load(run=run, ckpt=ckpt):
                run.set_model(load_checkpoint(ckpt, self.splits.old.schema, self.splits.old.vocab))

            self._unit(f"train-base/seed{seed}", ["ingest"], body, load)

    def build_graph(self) -> None:
        self.ingest()
        index_path = self.out / "index.tsv"
        vocab = self.splits.full.vocab
        id_name = self.splits.full.schema.id_field.name

        def body():
            first = self.run_for(self.cfg.seeds[0])
            index_path.write_text(first.index.dump(vocab))
            return [index_path]

        self._unit("build-graph/index", ["ingest"], body, lambda: None)
        for seed in self.cfg.seeds:
            run = self.run_for(seed)
            path = self._seed_dir(seed) / "neighbors_new.tsv"

            def body(run=run, path=path):
                _write_neighbors(path, run.new_graph(), vocab, id_name)
                return [path]

            def load(run=run, path=path):
                run.set_new_graph(_read_neighbors(path, vocab, id_name))

            self._unit(f"build-graph/seed{seed}", ["build-graph/index"], body, load)

    def _psi_path(self, seed: int, tag: str) -> Path:
        return self._seed_dir(seed) / f"psi_{tag}.ckpt"

    def train_meta(self) -> None:
        self.train_base()
        self.build_graph()
        self._generators = {}
        for seed in self.cfg.seeds:
            run = self.run_for(seed)
            for variant, gat in self.cfg.variant_specs():
                tag = file_tag(variant, gat)
                if variant not in TRAINABLE:
                    self._generators[seed, tag] = run.train_generator(variant, gat)[0]
                    continue
                psi = self._psi_path(seed, tag)
                curve = self._seed_dir(seed) / f"meta_curve_{tag}.csv"

                def body(run=run, variant=variant, gat=gat, psi=psi, curve=curve, key=(seed, tag)):
                    gen, rows = run.train_generator(variant, gat)
                    save_generator(gen, psi)
                    _write_rows(curve, ["epoch", "task_count", "mean_l", "mean_l_a", "mean_l_b"], rows)
                    self._generators[key] = gen
                    return [psi, curve]

                def load(psi=psi, key=(seed, tag)):
                    self._generators[key] = load_generator(psi)

                self._unit(f"train-meta/seed{seed}/{tag}",
                           [f"train-base/seed{seed}", f"build-graph/seed{seed}"], body, load)

    def evaluate(self) -> list[PhaseResult]:
        self.train_meta()
        results: list[PhaseResult] = []
        for seed in self.cfg.seeds:
            run = self.run_for(seed)
            for variant, gat in self.cfg.variant_specs():
                tag = file_tag(variant, gat)
                path = self._seed_dir(seed) / f"metrics_{tag}.csv"
                deps = [f"train-base/seed{seed}", f"build-graph/seed{seed}"]
                if variant in TRAINABLE:
                    deps.append(f"train-meta/seed{seed}/{tag}")
                box: list[PhaseResult] = []

                def body(run=run, path=path, key=(seed, tag), box=box):
                    box.extend(run.evaluate(self._generators[key]))
                    write_results_csv(box, path)
                    return [path]

                def load(path=path, box=box):
                    box.extend(read_results_csv(path, n=len(self.splits.test)))

                self._unit(f"evaluate/seed{seed}/{tag}", deps, body, load)
                results.extend(box)
        return results

    def report(self) -> list[PhaseResult]:
        results = self.evaluate()
        deps = [k for k in self.manifest.units if k.startswith("evaluate/")
                and _selected(k, self.cfg)]
        metrics = self.out / "metrics.csv"
        report = self.out / "report.txt"

        def body():
            write_results_csv(results, metrics)
            report.write_text(format_table(results))
            return [metrics, report]

        self._unit("report", sorted(deps), body, lambda: None)
        return results

    def run(self, stage: str = "report") -> Outcome:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        step = {"ingest": self.ingest, "train-base": self.train_base, "build-graph": self.build_graph,
                "train-meta": self.train_meta, "evaluate": self.evaluate, "report": self.report}[stage]
        res = step()
        return Outcome(res if isinstance(res, list) else [], self.ran, self.skipped, self.out)

    # -- ablation sweeps -------------------------------------------------

    def sweep(self, axis: str, values) -> Path:
        """Meta-train and score the cold phase once per (value, variant, seed); long-format CSV."""
        if axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
        values = [parse_axis_value(axis, v) for v in values]
        if not values:
            raise ConfigError("sweep needs at least one value")
        self.train_base()
        applies = {"gamma": TRAINABLE, "neighbors": ("NgbEmb",) + GME_VARIANTS, "gat": GME_VARIANTS}[axis]
        variants = [v for v in self.cfg.variants if v in applies]
        rows = []
        key = "sweep"
        try:
            for value in values:
                for seed in self.cfg.seeds:
                    run = self.run_for(seed)
                    for variant in variants:
                        kw = {"gamma": {"gamma": value}, "neighbors": {"n_neighbors": value},
                              "gat": {"gat": value}}[axis]
                        gat = kw.pop("gat", True)
                        gen, _ = run.train_generator(variant, gat, **kw)
                        N = kw.get("n_neighbors")
                        res = eval_cold(run.splits.test, run.model, run.embeddings(gen, N), gen.name, seed)
                        rows.append({"axis_value": _fmt_axis(value), "variant": gen.name, "seed": seed,
                                     "auc": repr(res.auc), "loss": repr(res.loss)})
        except (ConfigError, StageError):
            raise
        except Exception as e:
            raise StageError(f"{key}/{axis}", e) from e
        path = self.out / f"sweep_{axis}.csv"
        _write_rows(path, ["axis_value", "variant", "seed", "auc", "loss"], rows)
        return path


def parse_axis_value(axis: str, raw):
    try:
        if axis == "gamma":
            v = float(raw)
            if not 0.0 < v <= 1.0:
                raise ValueError
            return v
        if axis == "neighbors":
            v = int(raw)
            if v < 0:
                raise ValueError
            return v
        if isinstance(raw, bool):
            return raw
        return {"on": True, "true": True, "1": True, "off": False, "false": False, "0": False}[str(raw).lower()]
    except (ValueError, KeyError):
        raise ConfigError(f"bad value {raw!r} for sweep axis {axis}") from None


def _fmt_axis(v) -> str:
    return ("on" if v else "off") if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)


def _selected(key: str, cfg: ExperimentConfig) -> bool:
    tags = {file_tag(v, g) for v, g in cfg.variant_specs()}
    _, seed, tag = key.split("/")
    return int(seed.removeprefix("seed")) in cfg.seeds and tag in tags


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_results_csv(path, n: int = 0) -> list[PhaseResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [PhaseResult(r["phase"], r["variant"], float(r["auc"]), float(r["loss"]), n, int(r["seed"]))
                for r in csv.DictReader(fh)]


def _write_neighbors(path, graph, vocab, id_name) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ad\tneighbors\tscores\n")
        for ad in sorted(graph):
            nb = graph[ad]
            fh.write(f"{vocab.token(id_name, ad)}\t{','.join(vocab.token(id_name, i) for i in nb.ids)}\t"
                     f"{','.join(map(str, nb.scores))}\n")


def _read_neighbors(path, vocab, id_name) -> dict[int, NeighborSet]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            ad, ids, scores = line.rstrip("\n").split("\t")
            q = vocab.index(id_name, ad)
            out[q] = NeighborSet(q, tuple(vocab.index(id_name, t) for t in ids.split(",") if t),
                                 tuple(int(s) for s in scores.split(",") if s))
    return out


def run_pipeline(cfg: ExperimentConfig, out, stage: str = "report") -> Outcome:
    return Pipeline(cfg, out).run(stage)
