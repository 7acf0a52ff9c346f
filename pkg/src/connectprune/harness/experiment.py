"""Multi-seed train -> prune -> fine-tune sweeps on the toy task.

Plan files are JSON::

    {
      "schema": "connectprune.plan/1",
      "name": "default",
      "presets": {"none": {}, "l1": {}, "connect": {}},
      "methods": ["magnitude", "synflow"],
      "fraction": 0.96,
      "scope": "local",
      "n_seeds": 20,
      "train": {"epochs": 200, "lr": 0.01, "batch_size": 256},
      "finetune": {"epochs": 50, "lr": 0.001}
    }

A preset entry overrides the named preset's coefficients (keys ``l1``,
``connect``, ``l2``); unknown preset names must give all three. ``seeds`` may
replace ``n_seeds`` with an explicit list.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import network as nw
from ..connectivity import total_connectivity
from ..pruning import PruneSpec, build_mask, score
from ..training import (
    PRESETS,
    RNG_SCHEME,
    RegularizerConfig,
    TrainConfig,
    evaluate,
    fine_tune,
    generate_toy,
    train,
)

log = logging.getLogger(__name__)

PLAN_SCHEMA = "connectprune.plan/1"
REPORT_SCHEMA = "connectprune.cluster_report/1"
RUN_SCHEMA = "connectprune.run/1"
CLUSTERS = ("COLLAPSE", "LOW", "PARTIAL", "FULL", "FAILED")
PLANS_DIR = Path(__file__).resolve().parent.parent / "plans"


@dataclass(frozen=True)
class Thresholds:
    full: float = 0.95  # strictly above
    partial_low: float = 0.625
    partial_high: float = 0.875


def classify(accuracy: float, phi: float, th: Thresholds = Thresholds()) -> str:
    if phi == 0.0:
        return "COLLAPSE"
    if accuracy > th.full:
        return "FULL"
    if th.partial_low <= accuracy < th.partial_high:
        return "PARTIAL"
    return "LOW"


@dataclass
class ExperimentPlan:
    presets: dict[str, RegularizerConfig]
    seeds: tuple[int, ...]
    methods: tuple[str, ...] = ("magnitude", "synflow")
    fraction: float = 0.96
    scope: str = "local"
    sizes: tuple[int, ...] = (6, 5, 5, 5, 1)
    scaling: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50, lr=0.001))
    n_train: int = 10_000
    n_test: int = 2_000
    data_seed: int = 0
    loss_aware_lambda: float = 0.1
    thresholds: Thresholds = field(default_factory=Thresholds)
    name: str = "default"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        if not self.presets:
            raise ValueError("plan needs at least one preset")
        PruneSpec(self.fraction, self.scope)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentPlan":
        raw = dict(raw)
        schema = raw.pop("schema", PLAN_SCHEMA)
        if schema != PLAN_SCHEMA:
            raise ValueError(f"unsupported plan schema {schema!r}")
        presets = {}
        for name, overrides in raw.pop("presets", {"none": {}, "l1": {}, "connect": {}}).items():
            overrides = overrides or {}
            if name in PRESETS:
                presets[name] = replace(PRESETS[name], **overrides)
            else:
                missing = {"l1", "connect", "l2"} - set(overrides)
                if missing:
                    raise ValueError(f"custom preset {name!r} must set {sorted(missing)}")
                presets[name] = RegularizerConfig(**overrides)
        if "seeds" in raw:
            seeds = tuple(int(s) for s in raw.pop("seeds"))
            raw.pop("n_seeds", None)
        else:
            seeds = tuple(range(int(raw.pop("n_seeds", 20))))
        kwargs = {"presets": presets, "seeds": seeds}
        if "train" in raw:
            kwargs["train"] = TrainConfig(**raw.pop("train"))
        if "finetune" in raw:
            kwargs["finetune"] = TrainConfig(**{"epochs": 50, "lr": 0.001, **raw.pop("finetune")})
        if "thresholds" in raw:
            kwargs["thresholds"] = Thresholds(**raw.pop("thresholds"))
        for key in ("methods", "sizes"):
            if key in raw:
                kwargs[key] = tuple(raw.pop(key))
        allowed = {"fraction", "scope", "scaling", "n_train", "n_test", "data_seed", "loss_aware_lambda", "name"}
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"unknown plan keys {sorted(unknown)}")
        kwargs.update(raw)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = PLAN_SCHEMA
        d["presets"] = {k: asdict(v) for k, v in self.presets.items()}
        return json.loads(json.dumps(d))

    def with_seeds(self, seeds) -> "ExperimentPlan":
        return replace(self, seeds=tuple(seeds))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_plan(path) -> ExperimentPlan:
    """Load a plan file; a bare name such as ``table5_exp2`` resolves to a shipped plan."""
    p = Path(path)
    if not p.exists() and (PLANS_DIR / f"{path}.json").exists():
        p = PLANS_DIR / f"{path}.json"
    with open(p) as fh:
        return ExperimentPlan.from_dict(json.load(fh))


@dataclass
class RunRecord:
    preset: str
    method: str
    seed: int
    status: str = "ok"
    train_acc: float | None = None
    train_phi: float | None = None
    train_phi_min: float | None = None
    post_prune_acc: float | None = None
    post_prune_phi: float | None = None
    post_finetune_acc: float | None = None
    final_phi: float | None = None
    cluster: str = "FAILED"
    error: str | None = None


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


def _mask_json(mask: nw.PruneMask) -> str:
    return json.dumps({
        "weights": [m.astype(int).tolist() for m in mask.weights],
        "scaling": {str(k): v.astype(int).tolist() for k, v in sorted(mask.scaling.items())},
    })


def run_seed(plan: ExperimentPlan, preset: str, seed: int, out_dir: str | None = None) -> list[RunRecord]:
    """Train one initialization under ``preset``, then prune and fine-tune it with every method."""
    base = Path(out_dir) / "runs" / preset if out_dir else None
    records = [RunRecord(preset, m, seed) for m in plan.methods]
    try:
        data = generate_toy(plan.n_train, plan.data_seed, plan.n_test)
        net = nw.init_random(plan.sizes, seed, scaling="hidden" if plan.scaling else None)
        reg = plan.presets[preset]
        trained, tmetrics = train(net, data, reg, replace(plan.train, seed=seed))
    except Exception as exc:  # recorded per run; a sweep never aborts
        for r in records:
            r.error = f"train: {exc!r}"
            r.status = "failed"
        return records
    train_acc = tmetrics.epochs[-1].test_acc
    train_phi = tmetrics.epochs[-1].phi_tot
    train_phi_min = min(e.phi_min for e in tmetrics.epochs)
    if base:
        _write(base / f"seed-{seed:04d}" / "trained.bin", nw.serialize(trained))
        _write(base / f"seed-{seed:04d}" / "train_metrics.jsonl", tmetrics.to_jsonl())

    for rec in records:
        rec.train_acc, rec.train_phi, rec.train_phi_min = train_acc, train_phi, train_phi_min
        try:
            n_batch = min(plan.train.batch_size, plan.n_train)
            table = score(trained, rec.method, x=data.x_train[:n_batch], y=data.y_train[:n_batch],
                          lam=plan.loss_aware_lambda, granularity="weight")
            mask = build_mask(table, PruneSpec(plan.fraction, plan.scope))
            pruned = nw.apply_mask(trained, mask)
            rec.post_prune_acc = evaluate(pruned, data.x_test, data.y_test)[1]
            rec.post_prune_phi = total_connectivity(pruned)
            tuned, fmetrics = fine_tune(pruned, data, replace(plan.finetune, seed=seed), reg)
            rec.post_finetune_acc = fmetrics.epochs[-1].test_acc
            rec.final_phi = total_connectivity(tuned)
            fmetrics.post_prune_acc = rec.post_prune_acc
            fmetrics.post_finetune_acc = rec.post_finetune_acc
            rec.cluster = classify(rec.post_finetune_acc, rec.final_phi, plan.thresholds)
            if base:
                d = base / rec.method / f"seed-{seed:04d}"
                _write(d / "model.bin", nw.serialize(tuned))
                _write(d / "mask.json", _mask_json(mask))
                _write(d / "scores.json", json.dumps(table.to_dict()))
                _write(d / "metrics.jsonl", fmetrics.to_jsonl())
        except Exception as exc:
            log.warning("run %s/%s/seed %d failed: %s", preset, rec.method, seed, exc)
            rec.status = "failed"
            rec.cluster = "FAILED"
            rec.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return records


@dataclass
class ClusterReport:
    header: dict
    groups: dict[str, dict]

    def counts(self, preset: str, method: str) -> dict[str, int]:
        return self.groups[f"{preset}/{method}"]["counts"]

    def to_json(self) -> str:
        return json.dumps({"schema": REPORT_SCHEMA, "header": self.header, "groups": self.groups},
                          sort_keys=True, indent=2) + "\n"


@dataclass
class ExperimentResult:
    report: ClusterReport
    runs: list[RunRecord]


def _job(args):
    plan, preset, seed, out_dir = args
    return run_seed(plan, preset, seed, out_dir)


def build_report(plan: ExperimentPlan, runs: list[RunRecord]) -> ClusterReport:
    groups = {}
    for preset in plan.presets:
        for method in plan.methods:
            mine = sorted((r for r in runs if r.preset == preset and r.method == method), key=lambda r: r.seed)
            counts = {c: 0 for c in CLUSTERS}
            for r in mine:
                counts[r.cluster] += 1
            groups[f"{preset}/{method}"] = {
                "preset": preset,
                "method": method,
                "counts": counts,
                "seeds": [r.seed for r in mine],
                "accuracies": [r.post_finetune_acc for r in mine],
                "final_phi": [r.final_phi for r in mine],
            }
    header = {
        "plan": plan.name,
        "plan_sha256": plan.digest(),
        "n_seeds": len(plan.seeds),
        "fraction": plan.fraction,
        "scope": plan.scope,
        "rng": RNG_SCHEME,
        "thresholds": {
            "COLLAPSE": "phi_total == 0",
            "FULL": f"acc > {plan.thresholds.full}",
            "PARTIAL": f"{plan.thresholds.partial_low} <= acc < {plan.thresholds.partial_high}",
            "LOW": "otherwise",
        },
    }
    return ClusterReport(header, groups)


def run_experiment(plan: ExperimentPlan, out_dir: str | None = None, workers: int = 1) -> ExperimentResult:
    """Run every (preset, seed) pipeline and summarise the fine-tuned accuracies by cluster."""
    jobs = [(plan, preset, seed, out_dir) for preset in plan.presets for seed in plan.seeds]
    if workers > 1:
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_job, jobs))
    else:
        batches = []
        for job in jobs:
            log.info("preset %s seed %d", job[1], job[2])
            batches.append(_job(job))
    runs = [r for batch in batches for r in batch]
    runs.sort(key=lambda r: (list(plan.presets).index(r.preset), plan.methods.index(r.method), r.seed))
    report = build_report(plan, runs)
    if out_dir:
        out = Path(out_dir)
        _write(out / "cluster_report.json", report.to_json())
        _write(out / "runs.jsonl", "".join(json.dumps({"schema": RUN_SCHEMA, **asdict(r)}, sort_keys=True) + "\n"
                                           for r in runs))
        _write(out / "plan.json", json.dumps(plan.to_dict(), sort_keys=True, indent=2) + "\n")
    return ExperimentResult(report, runs)


def accuracy_summary(values) -> dict:
    arr = np.array([v for v in values if v is not None], dtype=float)
    if arr.size == 0:
        return {"n": 0}
    return {"n": int(arr.size), "mean": float(arr.mean()), "min": float(arr.min()), "max": float(arr.max())}
