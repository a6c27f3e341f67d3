"""Diagnostics over finished runs: prompt similarity, adaptation and
forgetting, pool pruning, parameter-count sweeps and report tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.stats import spearmanr

DEFAULT_GRID = (48, 96, 192, 384, 768, 1536, 3072, 6144, 12288)
REPORT_COLUMNS = ("run_id", "seed", "method", "n_params_prompt", "n_params_keys", "task_index", "global_acc",
                  "local_acc", "p_sim", "adaptation", "forgetting", "reg_kind", "lambda_reg")
SWEEP_COLUMNS = ("n_params", "seed", "final_acc", "adaptation", "forgetting", "status", "error")


# -- prompt similarity ---------------------------------------------------------


@dataclass(frozen=True)
class PromptSimilarity:
    value: float
    negative: bool = False
    zero_prototype: bool = False


def prompt_similarity(vectors) -> PromptSimilarity:
    """``100 * mean_i cos(p_i, mean_j p_j)`` over K flattened prompts.

    A zero prototype yields 0 with ``zero_prototype`` set; negative values
    are reported as is and flagged.
    """
    p = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if p.shape[0] < 1:
        raise ValueError("need at least one retrieved prompt")
    proto = p.mean(axis=0)
    pn = np.linalg.norm(proto)
    if pn == 0.0:
        warnings.warn("prompt prototype has zero norm; similarity set to 0", RuntimeWarning, stacklevel=2)
        return PromptSimilarity(0.0, zero_prototype=True)
    norms = np.linalg.norm(p, axis=1)
    cos = np.where(norms > 0, (p @ proto) / np.where(norms > 0, norms, 1.0) / pn, 0.0)
    value = 100.0 * float(cos.mean())
    if value < 0:
        warnings.warn(f"prompt similarity {value:.2f} is negative", RuntimeWarning, stacklevel=2)
    return PromptSimilarity(value, negative=value < 0)


# -- adaptation and forgetting ---------------------------------------------------


def adaptation(local_method, local_probe, t: int) -> float:
    """Local accuracy gain over the probe on task ``t`` right after training it."""
    a, b = local_method[t][t], local_probe[t][t]
    if a is None or b is None:
        raise ValueError(f"local accuracy for task {t} is undefined")
    return a - b


def record_adaptation(method_rec, probe_rec) -> list[float]:
    if method_rec.tasks != probe_rec.tasks:
        raise ValueError("adaptation needs runs over the same stream")
    return [adaptation(method_rec.acc_local, probe_rec.acc_local, t) for t in range(method_rec.n_tasks)]


def forgetting(acc, s: int) -> float | None:
    """``A[s][s] - A[T-1][s]``; None for the last task."""
    last = len(acc) - 1
    if not 0 <= s < last:
        return None
    return acc[s][s] - acc[last][s]


def mean_forgetting(acc) -> float | None:
    vals = [forgetting(acc, s) for s in range(len(acc) - 1)]
    return float(np.mean(vals)) if vals else None


# -- pruning ---------------------------------------------------------------------


@dataclass(frozen=True)
class PruneResult:
    kept: tuple[int, ...]
    acc_before: float
    acc_after: float
    p_sim_after: float | None


def prune_pool(runner, fraction: float, seed: int = 0) -> PruneResult:
    """Drop ``floor(fraction * M)`` random prompts and re-evaluate.

    Evaluation only; the runner's own pool is restored afterwards.
    """
    from .methods import PromptState
    from .tensor import Tensor

    state = runner.prompt
    if state is None or state.strategy != "pool":
        raise ValueError("pruning needs a prompt pool")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    m = state.pool_size
    n_drop = math.floor(fraction * m)
    if n_drop >= m:
        raise ValueError("pruning would leave no prompts")
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.permutation(m)[n_drop:])
    pruned = PromptState("pool", Tensor(state.values.data[kept]), Tensor(state.keys.data[kept]),
                         state.mask[kept], min(state.top_n, len(kept)), state.lam)
    before = _global_accuracy(runner)
    runner.prompt = pruned
    try:
        after = _global_accuracy(runner)
        p_sim = runner.prompt_similarity()
    finally:
        runner.prompt = state
    return PruneResult(tuple(int(k) for k in kept), before, after, p_sim)


def _global_accuracy(runner) -> float:
    t = runner.t - 1
    seen = runner.stream.seen_classes(max(t, 0))
    idx = np.concatenate(runner.stream.test_idx[:t + 1])
    feats, _ = runner.features(idx)
    return float(np.mean(runner.predict(feats, seen) == runner.dataset.labels[idx]))


# -- sweep -----------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    n_params: int
    seed: int
    final_acc: float | None
    adaptation: float | None
    forgetting: float | None
    status: str = "ok"
    error: str = ""


@dataclass
class SweepResult:
    points: list[SweepPoint]

    def series(self, seed: int) -> list[SweepPoint]:
        return sorted((p for p in self.points if p.seed == seed), key=lambda p: p.n_params)

    def grid(self) -> list[int]:
        return sorted({p.n_params for p in self.points})

    def mean_by_n(self, attr: str) -> dict[int, float]:
        out = {}
        for n in self.grid():
            vals = [getattr(p, attr) for p in self.points if p.n_params == n and p.status == "ok"]
            out[n] = float(np.mean(vals)) if vals else float("nan")
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for p in sorted(self.points, key=lambda p: (p.n_params, p.seed)):
            w.writerow([p.n_params, p.seed, _fmt(p.final_acc), _fmt(p.adaptation), _fmt(p.forgetting),
                        p.status, p.error])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def validate_grid(grid) -> list[int]:
    grid = [int(n) for n in grid]
    if len(grid) < 3 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("sweep grid needs at least three strictly increasing points")
    if grid[0] < 1 or grid[-1] / grid[0] < 100:
        raise ValueError("sweep grid must span at least two decades")
    return grid


def _sweep_job(args):
    from .engine import run_stream

    dataset, stream, backbone, method, train, n = args
    try:
        rec = run_stream(dataset, stream, backbone, replace(method, strategy="only_prompt", n_params=n), train)
        return n, train.seed, rec, None
    except Exception as exc:  # recorded per point, never dropped
        return n, train.seed, None, f"{type(exc).__name__}: {exc}"


def sweep(dataset, stream, backbone, grid=DEFAULT_GRID, seeds=(0, 1, 2), method=None, train=None,
          jobs: int = 1) -> tuple[SweepResult, dict]:
    """OnlyPrompt at every grid size and seed, plus a linear probe per seed.

    Returns the sweep result and a mapping of run records keyed by
    ``(n_params, seed)``; probe records use ``n_params = 0``.
    """
    from .engine import MethodConfig, TrainConfig, run_stream

    grid = validate_grid(grid)
    method = method or MethodConfig()
    train = train or TrainConfig()
    probes = {s: run_stream(dataset, stream, backbone, replace(method, strategy="none"), replace(train, seed=s))
              for s in seeds}
    jobs_args = [(dataset, stream, backbone, method, replace(train, seed=s), n) for s in seeds for n in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, jobs_args))
    else:
        results = [_sweep_job(a) for a in jobs_args]
    points, records = [], {(0, s): r for s, r in probes.items()}
    for n, s, rec, err in results:
        if rec is None:
            points.append(SweepPoint(n, s, None, None, None, "failed", err))
            continue
        records[(n, s)] = rec
        adapt = float(np.mean(record_adaptation(rec, probes[s])))
        points.append(SweepPoint(n, s, rec.final_acc, adapt, mean_forgetting(rec.acc)))
    return SweepResult(points), records


@dataclass(frozen=True)
class TrendSummary:
    adaptation_rho: float
    forgetting_rho_upper: float
    best_interior: int
    interior_margin: float  # percentage points above the better endpoint


def sweep_trends(result: SweepResult) -> TrendSummary:
    """Spearman trends and the inverted-U margin of a finished sweep."""
    ok = [p for p in result.points if p.status == "ok"]
    grid = result.grid()
    rho_a = spearmanr([p.n_params for p in ok], [p.adaptation for p in ok]).statistic
    upper = set(grid[len(grid) // 2:])
    up = [p for p in ok if p.n_params in upper]
    rho_f = spearmanr([p.n_params for p in up], [p.forgetting for p in up]).statistic
    acc = result.mean_by_n("final_acc")
    ends = max(acc[grid[0]], acc[grid[-1]])
    best = max(grid[1:-1], key=lambda n: acc[n])
    return TrendSummary(float(rho_a), float(rho_f), best, 100.0 * (acc[best] - ends))


# -- regularizer strength selection ------------------------------------------------


def validation_stream(stream, fraction: float = 0.25, seed: int = 0):
    """Hold out ``fraction`` of every task's training samples as its test set."""
    from .data import StreamSpec

    rng = np.random.default_rng([seed, 0x5A])
    train, val = [], []
    for idx in stream.train_idx:
        perm = rng.permutation(idx)
        k = max(1, int(round(fraction * len(idx))))
        val.append(np.sort(perm[:k]))
        train.append(np.sort(perm[k:]))
    return StreamSpec(stream.tasks, tuple(train), tuple(val), stream.class_order, stream.seed)


def select_reg_strength(dataset, stream, backbone, method, train, candidates, tolerance: float = 0.01):
    """Pick the strength with least validation forgetting whose validation
    accuracy stays within ``tolerance`` of the unregularized run.

    Returns the chosen strength and ``{strength: (final_acc, forgetting)}``.
    """
    from .engine import run_stream

    val = validation_stream(stream, seed=train.seed)
    scores = {}
    for lam in [0.0] + [float(c) for c in candidates]:
        rec = run_stream(dataset, val, backbone, method, replace(train, reg_strength=lam))
        scores[lam] = (rec.final_acc, mean_forgetting(rec.acc))
    base_acc = scores[0.0][0]
    ok = [lam for lam, (a, _) in scores.items() if a >= base_acc - tolerance]
    best = min(ok, key=lambda lam: (scores[lam][1], -lam))
    return best, scores


# -- reports -----------------------------------------------------------------------


def mean_std(values) -> tuple[float, float | None]:
    vals = np.asarray(list(values), dtype=np.float64)
    if len(vals) == 0:
        raise ValueError("no values")
    return float(vals.mean()), (float(vals.std(ddof=1)) if len(vals) > 1 else None)


def format_cell(values, scale: float = 100.0) -> str:
    """``"86.9 (±0.4)"`` from fractions; a single value has no spread."""
    m, s = mean_std(values)
    if s is None:
        return f"{m * scale:.1f}"
    return f"{m * scale:.1f} (±{s * scale:.1f})"


def validate_record(rec) -> None:
    t_n = rec.n_tasks
    for name in ("acc", "acc_local"):
        mat = getattr(rec, name)
        if len(mat) != t_n or any(len(r) != t_n for r in mat):
            raise ValueError(f"{rec.run_id}: {name} is not {t_n}x{t_n}")
        for t, row in enumerate(mat):
            for s, v in enumerate(row):
                if s > t and v is not None:
                    raise ValueError(f"{rec.run_id}: {name}[{t}][{s}] must be undefined")
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"{rec.run_id}: {name}[{t}][{s}]={v} outside [0, 1]")
    if len(rec.test_sizes) != t_n:
        raise ValueError(f"{rec.run_id}: test_sizes length mismatch")


def _probe_for(rec, probes):
    for p in probes:
        if p.tasks == rec.tasks and p.seed == rec.seed and p is not rec:
            return p
    return None


def report_rows(records) -> list[dict]:
    probes = [r for r in records if r.method == "linear_probe"]
    rows = []
    for rec in records:
        validate_record(rec)
        probe = _probe_for(rec, probes)
        done = [t for t in range(rec.n_tasks) if rec.acc[t][t] is not None]
        for t in done:
            adapt = None
            if probe is not None and rec.method != "linear_probe" and probe.acc_local[t][t] is not None:
                adapt = adaptation(rec.acc_local, probe.acc_local, t)
            forg = forgetting(rec.acc, t) if rec.complete else None
            rows.append({
                "run_id": rec.run_id, "seed": rec.seed, "method": rec.method,
                "n_params_prompt": rec.n_params_prompt, "n_params_keys": rec.n_params_keys,
                "task_index": t, "global_acc": rec.global_acc(t), "local_acc": rec.acc_local[t][t],
                "p_sim": rec.p_sim[t] if t < len(rec.p_sim) else None, "adaptation": adapt,
                "forgetting": forg, "reg_kind": rec.reg_kind, "lambda_reg": rec.lambda_reg,
            })
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in REPORT_COLUMNS])
    return buf.getvalue()


def summary_table(records) -> list[dict]:
    """Group complete runs by method setting and aggregate over seeds."""
    groups: dict[tuple, list] = {}
    for rec in records:
        if rec.complete:
            key = (rec.method, rec.n_params_prompt, rec.reg_kind, rec.lambda_reg)
            groups.setdefault(key, []).append(rec)
    out = []
    for (method, n_p, reg, lam), recs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        recs = sorted(recs, key=lambda r: r.seed)
        acc = [r.final_acc for r in recs]
        forg = [f for f in (mean_forgetting(r.acc) for r in recs) if f is not None]
        m, s = mean_std(acc)
        row = {"method": method, "n_params_prompt": n_p, "reg_kind": reg, "lambda_reg": lam,
               "seeds": [r.seed for r in recs], "final_acc_mean": m, "final_acc_std": s,
               "final_acc": format_cell(acc), "forgetting": format_cell(forg) if forg else ""}
        psims = [r.p_sim[-1] for r in recs if r.p_sim and r.p_sim[-1] is not None]
        row["p_sim"] = format_cell(psims, 1.0) if psims else ""
        out.append(row)
    return out


def render_table(summary) -> str:
    head = ("method", "params", "reg", "final acc", "forgetting", "P_sim")
    lines = [" | ".join(head)]
    for r in summary:
        reg = r["reg_kind"] if r["reg_kind"] == "none" else f"{r['reg_kind']}({r['lambda_reg']:g})"
        lines.append(" | ".join([r["method"], str(r["n_params_prompt"]), reg, r["final_acc"], r["forgetting"],
                                 r["p_sim"]]))
    return "\n".join(lines) + "\n"


def emit_report(records) -> tuple[str, str]:
    """CSV rows (one per run and task) and a JSON summary.

    The JSON holds every record verbatim, the seed-aggregated table and a
    SHA-256 over the canonical record serialization.
    """
    records = list(records)
    rows = report_rows(records)
    payload = [r.to_dict() for r in records]
    canon = json.dumps(payload, sort_keys=True).encode("utf-8")
    summary = {
        "content_hash": hashlib.sha256(canon).hexdigest(),
        "records": payload,
        "summary": summary_table(records),
        "rows": rows,
    }
    return rows_to_csv(rows), json.dumps(summary, sort_keys=True, indent=1) + "\n"


def load_report(text: str):
    from .engine import RunRecord

    data = json.loads(text)
    return [RunRecord.from_dict(d) for d in data["records"]]


def sweep_point_dicts(result: SweepResult) -> list[dict]:
    return [asdict(p) for p in result.points]
