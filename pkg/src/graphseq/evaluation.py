"""Evaluation: parsability, mean absolute error, diversity, significance.

A generated string is parsable when it deserializes and the task oracle
evaluates without error. MAE is computed over parsable first samples only;
a prompt's diversity is 1 when two independent samples and the ground
truth are pairwise distinct graphs (an unparsable sample scores 0, it does
not count as distinct-from-everything). Whole evaluations repeat with
separate seeds to estimate standard errors, and pooled-variance t-tests
compare metric runs across models.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import multiprocessing
import numpy as np
from scipy import stats as sstats

from . import model as nn
from .codec import CodecError, EOS_ID, SEP_ID, decode, deserialize, encode
from .datagen import Record, UnknownElementError, property_value
from .graphs import TextGraph, graph_equal, parse_description


class NoParsableSamplesError(RuntimeError):
    """MAE is undefined: no sample in the collection was parsable."""


def parsability_score(generated: str, task: str) -> int:
    """1 iff the string deserializes and the task oracle evaluates."""
    try:
        graph = deserialize(generated)
        property_value(task, graph)
    except (CodecError, UnknownElementError):
        return 0
    return 1


def mae(pairs: Sequence[tuple[float, TextGraph | None]], task: str) -> float:
    """Mean absolute error between oracle values and requested targets over
    the parsable samples (``None`` marks an undeserializable sample)."""
    errors = []
    for target, graph in pairs:
        if graph is None:
            continue
        try:
            value = property_value(task, graph)
        except UnknownElementError:
            continue
        errors.append(abs(value - target))
    if not errors:
        raise NoParsableSamplesError("no parsable samples to score")
    return float(np.mean(errors))


def diversity_score(sample1: TextGraph | None, sample2: TextGraph | None, ground_truth: TextGraph) -> int:
    """1 iff both samples parsed and all three graphs are pairwise distinct."""
    if sample1 is None or sample2 is None:
        return 0
    if graph_equal(sample1, sample2) or graph_equal(sample1, ground_truth) or graph_equal(sample2, ground_truth):
        return 0
    return 1


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    df: float


def ttest_unpaired(runs_a: Sequence[float], runs_b: Sequence[float], welch: bool = False) -> TTestResult:
    """Two-sided two-sample Student t-test (pooled variance by default,
    Welch behind the flag) at the 0.05 threshold."""
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least 2 runs per side")
    mean_a, mean_b = float(a.mean()), float(b.mean())
    var_a = float(a.var(ddof=1))
    var_b = float(b.var(ddof=1))
    if welch:
        se2 = var_a / a.size + var_b / b.size
        if se2 == 0.0:
            df = float(a.size + b.size - 2)
        else:
            df = se2**2 / (
                (var_a / a.size) ** 2 / (a.size - 1) + (var_b / b.size) ** 2 / (b.size - 1)
            )
    else:
        df = float(a.size + b.size - 2)
        pooled = ((a.size - 1) * var_a + (b.size - 1) * var_b) / df
        se2 = pooled * (1.0 / a.size + 1.0 / b.size)
    if se2 <= 0.0:
        if mean_a == mean_b:
            return TTestResult(t=0.0, p=1.0, significant=False, df=df)
        t = math.inf if mean_a > mean_b else -math.inf
        return TTestResult(t=t, p=0.0, significant=True, df=df)
    t = (mean_a - mean_b) / math.sqrt(se2)
    p = float(2.0 * sstats.t.sf(abs(t), df))
    return TTestResult(t=t, p=p, significant=p < 0.05, df=df)


@dataclass(frozen=True)
class SampleRecord:
    index: int
    desc: str
    target: float
    sample1: str
    sample2: str
    parsable1: int
    parsable2: int
    value1: float | None
    diversity: int


@dataclass(frozen=True)
class RunMetrics:
    parsability: float
    mae: float | None
    diversity: float
    n_prompts: int
    n_parsable: int


@dataclass(frozen=True)
class EvalReport:
    task: str
    checkpoint_id: str
    seeds: tuple[int, ...]
    runs: tuple[RunMetrics, ...]
    samples: tuple[tuple[SampleRecord, ...], ...]

    @property
    def n_repeats(self) -> int:
        return len(self.runs)

    def metric_runs(self, name: str) -> list[float]:
        values = []
        for run in self.runs:
            v = getattr(run, name)
            if v is not None:
                values.append(float(v))
        return values


METRIC_NAMES = ("parsability", "mae", "diversity")


def _mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    if len(values) == 1:
        return float(values[0]), 0.0
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def _try_parse(generated: str, task: str) -> tuple[TextGraph | None, float | None]:
    try:
        graph = deserialize(generated)
        return graph, float(property_value(task, graph))
    except (CodecError, UnknownElementError):
        return None, None


def _generated_text(sequence: np.ndarray, prompt_len: int) -> str:
    gen = sequence[prompt_len:]
    if gen.size and gen[-1] == EOS_ID:
        gen = gen[:-1]
    return decode(gen.tolist())


def _evaluate_once(
    param_arrays: dict[str, np.ndarray],
    config: nn.ModelConfig,
    records: Sequence[Record],
    task: str,
    seed: int,
    policy: nn.SamplePolicy,
    max_new_tokens: int,
    batch_size: int,
) -> tuple[RunMetrics, tuple[SampleRecord, ...]]:
    params = {k: nn.Tensor(v) for k, v in param_arrays.items()}
    prompts = []
    for idx, record in enumerate(records):
        ids = encode(record.desc) + [SEP_ID]
        target = parse_description(record.desc).target_value
        gt = deserialize(record.graph)
        prompts.append((idx, np.asarray(ids, dtype=np.int64), target, gt, record.desc))

    by_len: dict[int, list[int]] = {}
    for i, (_, ids, *_rest) in enumerate(prompts):
        by_len.setdefault(len(ids), []).append(i)

    results: dict[int, SampleRecord] = {}
    for length in sorted(by_len):
        group = by_len[length]
        # Both diversity samples of a prompt ride in the same batch; each
        # (prompt, sample) pair has its own seed so batching never matters.
        for start in range(0, len(group), batch_size):
            chunk = group[start : start + batch_size]
            rows = np.stack([prompts[i][1] for i in chunk for _ in range(2)])
            seeds = [[seed, prompts[i][0], s] for i in chunk for s in (0, 1)]
            sequences = nn.sample_batch(params, config, rows, policy, max_new_tokens, seeds)
            for j, i in enumerate(chunk):
                idx, ids, target, gt, desc = prompts[i]
                text1 = _generated_text(sequences[2 * j], len(ids))
                text2 = _generated_text(sequences[2 * j + 1], len(ids))
                g1, v1 = _try_parse(text1, task)
                g2, _v2 = _try_parse(text2, task)
                results[idx] = SampleRecord(
                    index=idx,
                    desc=desc,
                    target=target,
                    sample1=text1,
                    sample2=text2,
                    parsable1=int(g1 is not None),
                    parsable2=int(g2 is not None),
                    value1=v1,
                    diversity=diversity_score(g1, g2, gt),
                )
    ordered = tuple(results[i] for i in sorted(results))
    n = len(ordered)
    n_parsable = sum(r.parsable1 for r in ordered)
    abs_errors = [abs(r.value1 - r.target) for r in ordered if r.value1 is not None]
    run = RunMetrics(
        parsability=sum(r.parsable1 for r in ordered) / n,
        mae=float(np.mean(abs_errors)) if abs_errors else None,
        diversity=sum(r.diversity for r in ordered) / n,
        n_prompts=n,
        n_parsable=n_parsable,
    )
    return run, ordered


def resolve_workers(workers: int | None = None) -> int:
    """Worker cap: explicit argument, else GRAPHSEQ_WORKERS, else the
    available parallelism."""
    if workers is None:
        env = os.environ.get("GRAPHSEQ_WORKERS", "")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, workers)


def evaluate(
    params: dict[str, nn.Tensor],
    config: nn.ModelConfig,
    test_records: Sequence[Record],
    n_repeats: int = 3,
    seeds: Sequence[int] | None = None,
    policy: nn.SamplePolicy | None = None,
    max_new_tokens: int = 256,
    sample_batch_size: int = 16,
    workers: int | None = None,
    checkpoint_id: str = "",
) -> EvalReport:
    """Repeat a full test-set evaluation ``n_repeats`` times with distinct
    seeds; each prompt draws two samples (the first is scored for
    parsability and MAE, both feed diversity). Deterministic given seeds,
    regardless of batching or worker count."""
    if not test_records:
        raise ValueError("empty test set")
    tasks = {parse_description(r.desc).property_kind for r in test_records}
    if len(tasks) != 1:
        raise ValueError(f"test set mixes tasks: {sorted(tasks)}")
    task = tasks.pop()
    if seeds is None:
        seeds = list(range(n_repeats))
    seeds = [int(s) for s in seeds]
    if len(seeds) != n_repeats:
        raise ValueError("need one seed per repeat")
    policy = policy or nn.SamplePolicy()
    param_arrays = {k: v.data for k, v in params.items()}
    args = [
        (param_arrays, config, list(test_records), task, seed, policy, max_new_tokens, sample_batch_size)
        for seed in seeds
    ]
    n_workers = min(resolve_workers(workers), n_repeats)
    if n_workers > 1:
        ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods() else None)
        with ProcessPoolExecutor(max_workers=n_workers, mp_context=ctx) as pool:
            outcomes = list(pool.map(_evaluate_once_star, args))
    else:
        outcomes = [_evaluate_once(*a) for a in args]
    runs = tuple(out[0] for out in outcomes)
    samples = tuple(out[1] for out in outcomes)
    return EvalReport(task=task, checkpoint_id=checkpoint_id, seeds=tuple(seeds), runs=runs, samples=samples)


def _evaluate_once_star(args):
    return _evaluate_once(*args)


def report_machine_lines(report: EvalReport) -> list[str]:
    lines = []
    for name in METRIC_NAMES:
        values = report.metric_runs(name)
        mean, stderr = _mean_stderr(values)
        lines.append(
            f"metric={name} task={report.task} mean={mean:.10g} stderr={stderr:.10g} n={len(values)}"
        )
        for i, run in enumerate(report.runs):
            v = getattr(run, name)
            if v is not None:
                lines.append(f"run={i} metric={name} task={report.task} value={v:.10g}")
    return lines


def report_text(report: EvalReport) -> str:
    rows = [("metric", "mean", "stderr", "n")]
    for name in METRIC_NAMES:
        values = report.metric_runs(name)
        mean, stderr = _mean_stderr(values)
        rows.append((name, f"{mean:.6f}", f"{stderr:.6f}", str(len(values))))
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    out = [f"task: {report.task}", f"repeats: {report.n_repeats}", f"checkpoint: {report.checkpoint_id}"]
    for r in rows:
        out.append("  ".join(r[c].ljust(widths[c]) for c in range(4)).rstrip())
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class ParsedReport:
    task: str
    means: dict[str, float]
    runs: dict[str, list[float]]


def parse_machine_report(text: str) -> ParsedReport:
    task = None
    means: dict[str, float] = {}
    runs: dict[str, list[float]] = {name: [] for name in METRIC_NAMES}
    for line in text.splitlines():
        parts = dict(p.split("=", 1) for p in line.split())
        if not parts:
            continue
        if "task" in parts:
            if task is None:
                task = parts["task"]
            elif task != parts["task"]:
                raise ValueError("report mixes tasks")
        if "run" in parts:
            runs[parts["metric"]].append(float(parts["value"]))
        elif "metric" in parts:
            means[parts["metric"]] = float(parts["mean"])
    if task is None:
        raise ValueError("not a machine-readable evaluation report")
    return ParsedReport(task=task, means=means, runs=runs)


def compare_reports(a: ParsedReport, b: ParsedReport, welch: bool = False) -> list[dict]:
    """Per-metric significance table between two parsed reports."""
    if a.task != b.task:
        raise ValueError(f"task mismatch: {a.task} vs {b.task}")
    rows = []
    for name in METRIC_NAMES:
        runs_a, runs_b = a.runs.get(name, []), b.runs.get(name, [])
        if len(runs_a) < 2 or len(runs_b) < 2:
            continue
        result = ttest_unpaired(runs_a, runs_b, welch=welch)
        rows.append(
            {
                "metric": name,
                "mean_a": float(np.mean(runs_a)),
                "mean_b": float(np.mean(runs_b)),
                "t": result.t,
                "p": result.p,
                "significant": result.significant,
            }
        )
    return rows
