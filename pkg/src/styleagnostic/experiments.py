"""Experiment plans over (variant, lambda_adv, stage, target domain, seed) grids.

A plan is a JSON file. Running it executes every grid cell (generate data,
train, evaluate) and appends one :class:`MetricsRecord` per cell to
``<output_dir>/records.jsonl``. Completed cells are skipped on rerun, so an
interrupted plan resumes where it stopped and a finished plan is a no-op.
Appends go through an exclusive file lock, so several processes may work on
the same plan directory.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .evaluation import bias_metrics, cross_domain_accuracy, source_target_discrepancy
from .network import StageCNNConfig, build_model, inference_multiplies, parameter_count
from .synthdata import SPLITS, LabeledSet, StyleShiftSpec, generate_cue_conflict, generate_dataset
from .training import VARIANTS, TrainConfig, train

SCHEMA_VERSION = 1
KINDS = ("bias_sweep", "stage_ablation", "multi_source_dg", "single_source_dg",
         "unlabeled_extension", "component_ablation")
RECORDS_FILE = "records.jsonl"
FAILURES_FILE = "failures.jsonl"

# grid defaults per kind: variants, lambdas, stages, unlabeled options
_KIND_DEFAULTS = {
    "bias_sweep": dict(variants=["full"], lambdas=[0.0, 0.05, 0.1, 0.5, 1.0], stages=[3]),
    "stage_ablation": dict(variants=["full"], lambdas=[0.1], stages=[1, 2, 3]),
    "multi_source_dg": dict(variants=["baseline", "full"], lambdas=[0.1], stages=[3]),
    "single_source_dg": dict(variants=["baseline", "full"], lambdas=[0.1], stages=[3]),
    "unlabeled_extension": dict(variants=["full"], lambdas=[0.1], stages=[3], unlabeled=[False, True]),
    "component_ablation": dict(variants=list(VARIANTS), lambdas=[0.1], stages=[3]),
}

# variants whose training ignores lambda_adv; their grid collapses to lambda 0
_NO_ADV = ("baseline", "no_ASBL")


def derive_seed(base_seed: int, replicate: int) -> int:
    """Seed of every cell in one replicate.

    Cells that differ only in lambda, stage or variant share it, so their
    comparison is paired: same initialization, same batches.
    """
    return int(np.random.SeedSequence([int(base_seed), int(replicate)]).generate_state(1)[0])


@dataclass
class Cell:
    cell_id: str
    variant: str
    lambda_adv: float
    stage: int
    target_domain: int
    source_domains: tuple
    unlabeled: bool
    replicate: int
    seed: int

    @property
    def group(self) -> str:
        """Cell id without the replicate suffix."""
        return self.cell_id.rsplit("-r", 1)[0]


def _cell_id(variant, lam, stage, target, sources, unlabeled, replicate) -> str:
    src = "".join(str(s) for s in sources)
    return f"{variant}-lam{lam:g}-st{stage}-t{target}-s{src}-u{int(unlabeled)}-r{replicate}"


@dataclass
class ExperimentPlan:
    """One experiment grid.

    ``dataset``, ``model`` and ``train`` hold keyword overrides for
    :class:`StyleShiftSpec`, :class:`StageCNNConfig` (minus the stage) and
    :class:`TrainConfig`. ``seeds`` are replicate indices; each is turned
    into a cell seed by :func:`derive_seed`.
    """

    kind: str
    name: str = ""
    variants: Optional[list] = None
    lambdas: Optional[list] = None
    stages: Optional[list] = None
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    target_domains: list = field(default_factory=lambda: [3])
    source_domain: Optional[int] = None
    unlabeled: Optional[list] = None
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    stimuli_per_pair: int = 10
    discrepancy_cap: int = 600
    base_seed: int = 0
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        defaults = _KIND_DEFAULTS[self.kind]
        for key in ("variants", "lambdas", "stages"):
            if getattr(self, key) is None:
                setattr(self, key, list(defaults[key]))
        if self.unlabeled is None:
            self.unlabeled = list(defaults.get("unlabeled", [False]))
        self.name = self.name or self.kind
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"plan schema version {self.schema_version} is not supported "
                             f"(expected {SCHEMA_VERSION})")
        self.validate()

    def validate(self) -> None:
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError("lambda_adv values must be non-negative")
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        spec = self.dataset_spec()
        for t in self.target_domains:
            if not 0 <= t < spec.num_domains:
                raise ValueError(f"target domain {t} not in dataset with {spec.num_domains} domains")
        if self.kind == "single_source_dg":
            if self.source_domain is None:
                raise ValueError("single_source_dg needs source_domain")
            if self.source_domain in self.target_domains:
                raise ValueError("source_domain must differ from every target domain")
        for stage in self.stages:
            self.model_config(stage).validate()
        TrainConfig(**self.train)
        if self.stimuli_per_pair < 1:
            raise ValueError("stimuli_per_pair must be >= 1")

    # configs -------------------------------------------------------------------

    def dataset_spec(self) -> StyleShiftSpec:
        return StyleShiftSpec.from_dict(dict(self.dataset))

    def model_config(self, stage: int) -> StageCNNConfig:
        spec = self.dataset_spec()
        kw = dict(num_classes=spec.num_classes, input_shape=(3, spec.image_size, spec.image_size))
        kw.update(self.model)
        kw["randomization_stage"] = int(stage)
        return StageCNNConfig(**kw)

    def train_config(self, cell: Cell) -> TrainConfig:
        kw = dict(self.train)
        kw.update(lambda_adv=float(cell.lambda_adv), seed=int(cell.seed))
        return TrainConfig.for_variant(cell.variant, **kw)

    def sources_for(self, target: int) -> tuple:
        if self.source_domain is not None:
            return (int(self.source_domain),)
        return tuple(d for d in range(self.dataset_spec().num_domains) if d != target)

    def config_digest(self) -> str:
        """Hash of everything besides the grid that changes a cell's outcome."""
        payload = {k: getattr(self, k) for k in ("dataset", "model", "train", "stimuli_per_pair",
                                                 "discrepancy_cap", "base_seed", "schema_version")}
        blob = json.dumps(payload, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # grid ------------------------------------------------------------------------

    def cells(self) -> list[Cell]:
        out, seen = [], set()
        for variant in self.variants:
            lams = [0.0] if variant in _NO_ADV else [float(x) for x in self.lambdas]
            for lam in lams:
                for stage in self.stages:
                    for target in self.target_domains:
                        sources = self.sources_for(target)
                        for unl in self.unlabeled:
                            for rep in self.seeds:
                                cid = _cell_id(variant, lam, stage, target, sources, unl, rep)
                                if cid in seen:
                                    continue
                                seen.add(cid)
                                out.append(Cell(cid, variant, lam, int(stage), int(target), sources,
                                                bool(unl), int(rep), derive_seed(self.base_seed, rep)))
        return out

    # serialization -----------------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown plan fields: {sorted(extra)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_json(Path(path).read_text())


@dataclass
class MetricsRecord:
    cell_id: str
    plan: str
    kind: str
    variant: str
    lambda_adv: float
    stage: int
    target_domain: int
    source_domains: list
    unlabeled: bool
    replicate: int
    seed: int
    in_domain_accuracy: float
    target_accuracy: float
    shape_bias: Optional[float]
    texture_bias: Optional[float]
    shape_accuracy: float
    texture_accuracy: float
    d_A: float
    loss_c_first: float
    loss_c_last: float
    loss_unl_first: Optional[float]
    loss_unl_last: Optional[float]
    inference_parameters: int
    inference_multiplies: int
    trace: str
    config_digest: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("in_domain_accuracy", "target_accuracy", "shape_bias", "texture_bias",
                     "shape_accuracy", "texture_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.d_A <= 2.0:
            raise ValueError(f"d_A={self.d_A} outside [0, 2]")

    @property
    def group(self) -> str:
        return self.cell_id.rsplit("-r", 1)[0]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)


# data cache ----------------------------------------------------------------------------

@lru_cache(maxsize=16)
def _domain_sets(spec_json: str, domains: tuple) -> dict:
    spec = StyleShiftSpec.from_dict(json.loads(spec_json))
    return generate_dataset(spec, list(domains))


@lru_cache(maxsize=8)
def _stimuli(spec_json: str, n_per_pair: int, domains: tuple):
    spec = StyleShiftSpec.from_dict(json.loads(spec_json))
    return generate_cue_conflict(spec, n_per_pair, domains=list(domains))


def cell_data(plan: ExperimentPlan, cell: Cell) -> dict:
    """Source train/test sets, the whole target domain and the cue-conflict stimuli."""
    spec_json = json.dumps(plan.dataset_spec().to_dict(), sort_keys=True)
    src = _domain_sets(spec_json, tuple(cell.source_domains))
    tgt = _domain_sets(spec_json, (cell.target_domain,))
    return {
        "source_train": src["train"],
        "source_test": src["test"],
        "target": LabeledSet.concat([tgt[s] for s in SPLITS]),
        "target_train": tgt["train"],
        "stimuli": _stimuli(spec_json, plan.stimuli_per_pair, tuple(cell.source_domains)),
    }


# running ---------------------------------------------------------------------------------

def run_cell(plan: ExperimentPlan, cell: Cell, output_dir=None) -> MetricsRecord:
    """Generate data, train one variant and evaluate it. Deterministic in (plan, cell)."""
    out = Path(output_dir or plan.output_dir)
    trace_rel = f"traces/{plan.config_digest()}/{cell.cell_id}.jsonl"
    trace_path = out / trace_rel
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    trace_path.unlink(missing_ok=True)

    data = cell_data(plan, cell)
    model = build_model(plan.model_config(cell.stage), seed=cell.seed)
    config = plan.train_config(cell)
    unlabeled = data["target_train"].images if cell.unlabeled else None
    src = data["source_train"]
    result = train(model, src.images, src.labels, config, unlabeled=unlabeled, trace_path=trace_path)

    target = data["target"]
    bias = bias_metrics(model, data["stimuli"])
    disc = source_target_discrepancy(model, src.images, target.images, seed=cell.seed,
                                     max_per_domain=plan.discrepancy_cap)
    unl = [r["loss_unl"] for r in result.trace if r.get("loss_unl") is not None]
    return MetricsRecord(
        cell_id=cell.cell_id, plan=plan.name, kind=plan.kind, variant=cell.variant,
        lambda_adv=float(cell.lambda_adv), stage=cell.stage, target_domain=cell.target_domain,
        source_domains=list(cell.source_domains), unlabeled=cell.unlabeled, replicate=cell.replicate,
        seed=cell.seed,
        in_domain_accuracy=cross_domain_accuracy(model, data["source_test"].images, data["source_test"].labels),
        target_accuracy=cross_domain_accuracy(model, target.images, target.labels),
        shape_bias=bias.shape_bias, texture_bias=bias.texture_bias,
        shape_accuracy=bias.shape_accuracy, texture_accuracy=bias.texture_accuracy,
        d_A=float(np.clip(disc.d_A, 0.0, 2.0)),
        loss_c_first=result.trace[0]["loss_c"], loss_c_last=result.trace[-1]["loss_c"],
        loss_unl_first=unl[0] if unl else None, loss_unl_last=unl[-1] if unl else None,
        inference_parameters=parameter_count(model.inference_parameters()),
        inference_multiplies=inference_multiplies(model),
        trace=trace_rel, config_digest=plan.config_digest(),
    )


@contextmanager
def _locked(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_name(path.name + ".lock"), "a") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            # a torn trailing line from a killed writer; the cell will simply rerun
            continue
    return out


def _append_jsonl(path: Path, obj: dict) -> None:
    with open(path, "a+b") as fh:
        # a writer killed mid-line leaves no newline; start on a fresh line so the torn one stays isolated
        if fh.tell() > 0:
            fh.seek(-1, os.SEEK_END)
            if fh.read(1) != b"\n":
                fh.write(b"\n")
        fh.write((json.dumps(obj, sort_keys=True) + "\n").encode("utf-8"))
        fh.flush()
        os.fsync(fh.fileno())


def load_records(path) -> list[MetricsRecord]:
    """Records from a records file or a plan output directory."""
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS_FILE
    return [MetricsRecord.from_dict(d) for d in _read_jsonl(path)]


def completed_cells(output_dir, digest: Optional[str] = None) -> set[str]:
    """Ids of recorded cells, restricted to one plan configuration if ``digest`` is given."""
    return {d["cell_id"] for d in _read_jsonl(Path(output_dir) / RECORDS_FILE)
            if digest is None or d.get("config_digest") == digest}


def append_record(output_dir, record: MetricsRecord) -> bool:
    """Append unless the cell is already recorded. Returns whether it was written."""
    path = Path(output_dir) / RECORDS_FILE
    with _locked(path):
        if record.cell_id in completed_cells(output_dir, record.config_digest):
            return False
        _append_jsonl(path, record.to_dict())
    return True


def _record_failure(output_dir, cell: Cell, exc: BaseException) -> dict:
    entry = {"cell_id": cell.cell_id, "seed": cell.seed, "error": type(exc).__name__,
             "message": str(exc), "traceback": traceback.format_exc(limit=8)}
    path = Path(output_dir) / FAILURES_FILE
    with _locked(path):
        _append_jsonl(path, entry)
    return entry


def _run_one(plan_json: str, cell_dict: dict, output_dir: str) -> tuple[str, Optional[dict]]:
    plan = ExperimentPlan.from_json(plan_json)
    cell = Cell(**{**cell_dict, "source_domains": tuple(cell_dict["source_domains"])})
    try:
        record = run_cell(plan, cell, output_dir)
    except Exception as exc:  # noqa: BLE001 - the plan keeps going, the failure is logged
        return cell.cell_id, _record_failure(output_dir, cell, exc)
    append_record(output_dir, record)
    return cell.cell_id, None


@dataclass
class PlanResult:
    records: list
    ran: list
    skipped: list
    failed: list


def run_plan(plan: ExperimentPlan, output_dir=None, jobs: int = 1, progress=None) -> PlanResult:
    """Run every cell that has no record yet; returns all records of the plan."""
    out = Path(output_dir or plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan_path = out / "plan.json"
    if not plan_path.exists():
        plan.save(plan_path)
    digest = plan.config_digest()
    done = completed_cells(out, digest)
    cells = plan.cells()
    todo = [c for c in cells if c.cell_id not in done]
    skipped = [c.cell_id for c in cells if c.cell_id in done]
    ran, failed = [], []
    plan_json = plan.to_json()
    args = [(plan_json, asdict(c), str(out)) for c in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_run_one, *zip(*args))
            for cid, err in results:
                (failed if err else ran).append(cid)
                if progress:
                    progress(cid, err)
    else:
        for a in args:
            cid, err = _run_one(*a)
            (failed if err else ran).append(cid)
            if progress:
                progress(cid, err)
    wanted = {c.cell_id for c in cells}
    records = [r for r in load_records(out) if r.cell_id in wanted and r.config_digest == digest]
    return PlanResult(records, ran, skipped, failed)


def component_ablation(plan: ExperimentPlan, cell: Cell, output_dir=None) -> MetricsRecord:
    """Train one variant of a cell under the plan's otherwise identical config."""
    if cell.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cell.variant!r}; expected one of {VARIANTS}")
    return run_cell(plan, cell, output_dir)


# summaries --------------------------------------------------------------------------------

METRICS = ("in_domain_accuracy", "target_accuracy", "shape_bias", "texture_bias", "d_A")
_GROUP_KEYS = ("variant", "lambda_adv", "stage", "target_domain", "source_domains", "unlabeled")


def sign_test(diffs: Iterable[float]) -> dict:
    """One-sided sign test that paired differences are positive; ties are dropped."""
    diffs = [d for d in diffs if d is not None and not math.isnan(d)]
    pos = sum(d > 0 for d in diffs)
    neg = sum(d < 0 for d in diffs)
    n = pos + neg
    p = sum(math.comb(n, k) for k in range(pos, n + 1)) / 2 ** n if n else 1.0
    return {"n_positive": pos, "n_negative": neg, "n_ties": len(diffs) - n, "p_value": p}


def _mean_std(values: list) -> tuple[Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
    return mean, std


def _key(r: MetricsRecord) -> tuple:
    return tuple(tuple(getattr(r, k)) if k == "source_domains" else getattr(r, k) for k in _GROUP_KEYS)


def aggregate(records: Sequence[MetricsRecord]) -> list[dict]:
    """One row per grid cell (records grouped over replicates), sorted by cell key."""
    groups: dict = {}
    for r in records:
        groups.setdefault(_key(r), []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        rs = sorted(groups[key], key=lambda r: r.replicate)
        row = dict(zip(_GROUP_KEYS, key))
        row["source_domains"] = list(row["source_domains"])
        row["cell"] = rs[0].group
        row["n"] = len(rs)
        row["insufficient_seeds"] = len(rs) < 2
        for m in METRICS:
            row[f"{m}_mean"], row[f"{m}_std"] = _mean_std([getattr(r, m) for r in rs])
        rows.append(row)
    return rows


def paired_values(records: Sequence[MetricsRecord], metric: str, **where) -> dict[int, float]:
    """replicate -> metric for the records matching every ``where`` field."""
    out = {}
    for r in records:
        if all((list(getattr(r, k)) == list(v)) if k == "source_domains" else getattr(r, k) == v
               for k, v in where.items()):
            out[r.replicate] = getattr(r, metric)
    return out


def compare(records: Sequence[MetricsRecord], metric: str, better: dict, worse: dict,
            direction: str = "greater") -> dict:
    """Paired sign test that ``metric`` under ``better`` exceeds (or falls below) ``worse``."""
    a, b = paired_values(records, metric, **better), paired_values(records, metric, **worse)
    common = sorted(set(a) & set(b))
    sgn = 1.0 if direction == "greater" else -1.0
    diffs = [sgn * (a[i] - b[i]) for i in common if a[i] is not None and b[i] is not None]
    res = sign_test(diffs)
    res.update(metric=metric, better=better, worse=worse, direction=direction, replicates=common,
               mean_better=_mean_std([a[i] for i in common])[0],
               mean_worse=_mean_std([b[i] for i in common])[0])
    return res


def trend_test(records: Sequence[MetricsRecord], metric: str, direction: str = "increasing",
               **where) -> dict:
    """Ordering of the per-lambda means plus a sign test between the extreme lambdas."""
    sub = [r for r in records if all(getattr(r, k) == v for k, v in where.items())]
    lams = sorted({r.lambda_adv for r in sub})
    means = [_mean_std([getattr(r, metric) for r in sub if r.lambda_adv == lam])[0] for lam in lams]
    ok = all(m is not None for m in means)
    if direction == "increasing":
        ordered = ok and all(b > a for a, b in zip(means, means[1:]))
    else:
        ordered = ok and all(b < a for a, b in zip(means, means[1:]))
    res = {"metric": metric, "direction": direction, "lambdas": lams, "means": means,
           "strictly_ordered": bool(ordered) and len(lams) >= 2, "where": where}
    if len(lams) >= 2:
        res["sign_test"] = compare(sub, metric, {"lambda_adv": lams[-1]}, {"lambda_adv": lams[0]},
                                   "greater" if direction == "increasing" else "less")
    return res


def summarize(records: Sequence[MetricsRecord]) -> dict:
    """Per-cell aggregates and lambda trend tests; a pure function of the record set."""
    records = sorted(records, key=lambda r: r.cell_id)
    rows = aggregate(records)
    trends = []
    settings = sorted({(r.variant, r.stage, r.target_domain, tuple(r.source_domains), r.unlabeled)
                       for r in records}, key=str)
    for variant, stage, target, sources, unl in settings:
        where = dict(variant=variant, stage=stage, target_domain=target, unlabeled=unl)
        sub = [r for r in records if tuple(r.source_domains) == sources]
        if len({r.lambda_adv for r in sub if all(getattr(r, k) == v for k, v in where.items())}) < 2:
            continue
        trends.append(trend_test(sub, "shape_bias", "increasing", **where))
        trends.append(trend_test(sub, "d_A", "decreasing", **where))
    return {"schema_version": SCHEMA_VERSION, "rows": rows, "trends": trends,
            "n_records": len(records)}


def write_summary(summary: dict, output_dir) -> dict[str, Path]:
    """``summary.csv`` (one row per cell) and ``summary.json`` (rows, trends, plot series)."""
    import csv

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = summary["rows"]
    cols = ["cell", *_GROUP_KEYS, "n", "insufficient_seeds"]
    cols += [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    csv_path = out / "summary.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (" ".join(map(str, v)) if isinstance(v, list) else v) for k, v in row.items()})
    data = dict(summary)
    data["series"] = plot_series(rows)
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return {"csv": csv_path, "json": json_path}


def plot_series(rows: list[dict]) -> dict:
    """Plot-ready series: metric vs lambda per (variant, stage), metric vs stage per variant."""
    series = {"vs_lambda": [], "vs_stage": []}
    by_setting: dict = {}
    for row in rows:
        by_setting.setdefault((row["variant"], row["stage"], row["target_domain"], row["unlabeled"]), []).append(row)
    for (variant, stage, target, unl), rs in sorted(by_setting.items(), key=str):
        rs = sorted(rs, key=lambda r: r["lambda_adv"])
        series["vs_lambda"].append({
            "variant": variant, "stage": stage, "target_domain": target, "unlabeled": unl,
            "lambda_adv": [r["lambda_adv"] for r in rs],
            **{m: {"mean": [r[f"{m}_mean"] for r in rs], "std": [r[f"{m}_std"] for r in rs]} for m in METRICS},
        })
    by_variant: dict = {}
    for row in rows:
        by_variant.setdefault((row["variant"], row["lambda_adv"], row["target_domain"], row["unlabeled"]), []).append(row)
    for (variant, lam, target, unl), rs in sorted(by_variant.items(), key=str):
        rs = sorted(rs, key=lambda r: r["stage"])
        series["vs_stage"].append({
            "variant": variant, "lambda_adv": lam, "target_domain": target, "unlabeled": unl,
            "stage": [r["stage"] for r in rs],
            **{m: {"mean": [r[f"{m}_mean"] for r in rs], "std": [r[f"{m}_std"] for r in rs]} for m in METRICS},
        })
    return series
