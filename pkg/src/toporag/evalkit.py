"""Batch evaluation over a query set and the pass-rate/efficiency metrics.

Pass@k counts a case as solved when it passed within k loop iterations;
the cumulative curve is the same quantity traced over iterations 1..20.
Averages (iterations, tokens, wall clock) run over the full record set so
capped failures contribute their full cost; the median iteration-at-pass
is over successful cases only.
"""

from __future__ import annotations

import csv
import io
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .agents import CaseRunConfig, CaseState, run_case
from .budget import Calibration
from .encoder import EncoderModel
from .errors import EmptyRecords, ToporagError
from .retrieval import (
    ReferenceIndex,
    assemble_context,
    assemble_no_rag_context,
    retrieve,
)
from .topo import build_graph, parse_topology
from .util import stable_seed, to_json

PASS_AT_KS = (1, 5, 10, 20)
CURVE_MAX_ITER = 20


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    passed: bool
    pass_iteration: int | None
    iterations_run: int
    tokens_total: int
    wall_clock_s: float
    verify_runs: int
    capped: bool
    failure_mode: str | None = None

    def __post_init__(self):
        if self.passed and (self.pass_iteration is None or self.pass_iteration > self.iterations_run):
            raise ValueError("passed records need pass_iteration <= iterations_run")
        if self.capped and self.passed:
            raise ValueError("a capped record cannot have passed")

    def to_obj(self) -> dict:
        return {
            "case_id": self.case_id,
            "passed": self.passed,
            "pass_iteration": self.pass_iteration,
            "iterations_run": self.iterations_run,
            "tokens_total": self.tokens_total,
            "wall_clock_s": self.wall_clock_s,
            "verify_runs": self.verify_runs,
            "capped": self.capped,
            "failure_mode": self.failure_mode,
        }


def record_from_state(state: CaseState) -> CaseRecord:
    return CaseRecord(
        case_id=state.case_id,
        passed=state.phase == "PASSED",
        pass_iteration=state.pass_iteration,
        iterations_run=state.iteration,
        tokens_total=state.tokens_total,
        wall_clock_s=round(sum(state.wall_clock.values()), 6),
        verify_runs=state.verify_runs,
        capped=state.phase == "CAPPED",
        failure_mode=state.failure_mode,
    )


@dataclass
class EvalReport:
    records: list[CaseRecord]
    pass_at: dict[int, float]
    cumulative_curve: list[tuple[int, float]]
    iter_at_pass_hist: dict[int, int]
    avg_iterations: float
    median_iter_at_pass: float | None
    avg_time_s: float
    avg_tokens: float
    cap_fail_count: int

    def to_obj(self) -> dict:
        return {
            "pass_at": {str(k): v for k, v in sorted(self.pass_at.items())},
            "cumulative_curve": [{"iteration": i, "rate": r} for i, r in self.cumulative_curve],
            "iter_at_pass_hist": {str(k): v for k, v in sorted(self.iter_at_pass_hist.items())},
            "avg_iterations": self.avg_iterations,
            "median_iter_at_pass": self.median_iter_at_pass,
            "avg_time_s": self.avg_time_s,
            "avg_tokens": self.avg_tokens,
            "cap_fail_count": self.cap_fail_count,
            "records": [r.to_obj() for r in self.records],
        }


def pass_at_k(records: list[CaseRecord], k: int) -> float:
    """Fraction of records that passed within k iterations."""
    if not records:
        raise EmptyRecords("no records to evaluate")
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = sum(1 for r in records if r.passed and r.pass_iteration is not None and r.pass_iteration <= k)
    return hits / len(records)


def curves_and_stats(records: list[CaseRecord]) -> EvalReport:
    if not records:
        raise EmptyRecords("no records to evaluate")
    curve = [(k, pass_at_k(records, k)) for k in range(1, CURVE_MAX_ITER + 1)]
    hist: dict[int, int] = {}
    for r in records:
        if r.passed and r.pass_iteration is not None:
            hist[r.pass_iteration] = hist.get(r.pass_iteration, 0) + 1
    successes = sorted(i for i, n in hist.items() for _ in range(n))
    return EvalReport(
        records=list(records),
        pass_at={k: pass_at_k(records, k) for k in PASS_AT_KS},
        cumulative_curve=curve,
        iter_at_pass_hist=hist,
        avg_iterations=sum(r.iterations_run for r in records) / len(records),
        median_iter_at_pass=float(statistics.median(successes)) if successes else None,
        avg_time_s=sum(r.wall_clock_s for r in records) / len(records),
        avg_tokens=sum(r.tokens_total for r in records) / len(records),
        cap_fail_count=sum(1 for r in records if r.capped),
    )


@dataclass
class EvalConfig:
    corpus_dir: Path
    knowledge_path: Path
    out_dir: Path
    seed: int = 0
    parallelism: int = 1
    toporag_enabled: bool = True
    n_trim: int = 10
    calibration: Calibration = field(default_factory=Calibration)


def _eval_one(case_id: str, index: ReferenceIndex, model: EncoderModel, backends, config: EvalConfig) -> CaseRecord:
    try:
        topo_path = Path(config.corpus_dir) / f"{case_id}.json"
        topo_text = topo_path.read_text(encoding="utf-8")
        if config.toporag_enabled:
            query_graph = build_graph(parse_topology(topo_text))
            best = retrieve(index, query_graph, model, k=1)[0]
            context = assemble_context(index, topo_text, best, config.knowledge_path)
        else:
            context = assemble_no_rag_context(topo_text, config.knowledge_path)
        state = run_case(
            case_id,
            context,
            backends,
            CaseRunConfig(
                out_dir=Path(config.out_dir) / "cases",
                seed=stable_seed(config.seed, case_id),
                n_trim=config.n_trim,
                calibration=config.calibration,
            ),
        )
        return record_from_state(state)
    except (ToporagError, OSError) as exc:
        # hard pre-loop failure: failed-uncapped with the cause recorded
        return CaseRecord(
            case_id=case_id,
            passed=False,
            pass_iteration=None,
            iterations_run=0,
            tokens_total=0,
            wall_clock_s=0.0,
            verify_runs=0,
            capped=False,
            failure_mode=f"{type(exc).__name__}: {exc}"[:200],
        )


def run_eval(
    query_ids: list[str],
    index: ReferenceIndex | None,
    model: EncoderModel | None,
    backends,
    config: EvalConfig,
) -> EvalReport:
    """Evaluate every query case and write report.json/curve.csv/records.csv.

    Per-case errors become failed records; the batch never aborts. Records
    keep the order of the (sorted) query id list regardless of parallelism.
    """
    ids = sorted(query_ids)
    if config.toporag_enabled and (index is None or model is None):
        raise ValueError("retrieval-enabled evaluation needs an index and a model")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            records = list(pool.map(lambda cid: _eval_one(cid, index, model, backends, config), ids))
    else:
        records = [_eval_one(cid, index, model, backends, config) for cid in ids]

    report = curves_and_stats(records)
    (out_dir / "report.json").write_text(to_json(report.to_obj()), encoding="utf-8")
    (out_dir / "curve.csv").write_text(curve_csv(report), encoding="utf-8")
    (out_dir / "records.csv").write_text(records_csv(records), encoding="utf-8")
    return report


def curve_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "cumulative_rate"])
    for iteration, rate in report.cumulative_curve:
        writer.writerow([iteration, repr(rate)])
    return buf.getvalue()


def records_csv(records: list[CaseRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = [
        "case_id",
        "passed",
        "pass_iteration",
        "iterations_run",
        "tokens_total",
        "wall_clock_s",
        "verify_runs",
        "capped",
        "failure_mode",
    ]
    writer.writerow(header)
    for r in records:
        obj = r.to_obj()
        writer.writerow(["" if obj[k] is None else obj[k] for k in header])
    return buf.getvalue()
