"""Open-set metrics, implicit-class correspondence and the ablation protocol.

This is the only module that reads ``TargetSet.ground_truth``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import net
from .errors import ContractError

ABLATION_MODES = (
    "full",
    "pretrain_only",
    "k_fixed_1",
    "k_star_no_iters",
    "k_gt_no_iters",
    "k_gt_iters",
)


def _gt(target) -> np.ndarray:
    if target.ground_truth is None:
        raise ContractError("target set has no ground truth; evaluation impossible")
    return target.ground_truth


def os_metrics(predictions, target, num_known: int):
    """``(os, os_star, per_class)``.

    Implicit ground-truth classes collapse into one unknown class and every
    predicted index ``>= num_known`` counts as predicting unknown.
    ``per_class`` has ``num_known + 1`` entries; classes absent from the
    target are ``None`` and left out of both means.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    gt = _gt(target)
    if pred.shape != gt.shape:
        raise ContractError("one prediction per target sample required")
    gt_c = np.minimum(gt, num_known)
    pred_c = np.minimum(pred, num_known)
    per_class = []
    for j in range(num_known + 1):
        mask = gt_c == j
        per_class.append(float(np.mean(pred_c[mask] == j)) if mask.any() else None)
    known = [a for a in per_class[:num_known] if a is not None]
    if not known:
        raise ContractError("no known-class samples in the target; OS* undefined")
    present = [a for a in per_class if a is not None]
    return float(np.mean(present)), float(np.mean(known)), per_class


def k_error(k_star, k_gt) -> float:
    if k_star < 0 or k_gt < 0:
        raise ContractError("class counts must be non-negative")
    return float(abs(k_star - k_gt))


def implicit_count(target, num_known: int) -> int:
    gt = _gt(target)
    return int(len(np.unique(gt[gt >= num_known])))


def correspondence(model, target, n: int):
    """Distinct true implicit classes hit by the top-``n`` samples of each discovered class.

    Returns ``(count, short)``; ``short`` is True when some discovered class
    had fewer than ``n`` samples assigned to it by argmax.
    """
    c = model.c
    nk = c.num_known
    if c.k < 1:
        raise ContractError("model has no discovered outputs")
    gt = _gt(target)
    _, probs, _ = net.forward(model.f, c, target.features)
    pred = np.argmax(probs, axis=1)
    hit = set()
    short = False
    for j in range(nk, c.out_dim):
        members = np.flatnonzero(pred == j)
        if members.size < n:
            short = True
        order = members[np.argsort(-probs[members, j], kind="stable")][:n]
        hit.update(int(g) for g in gt[order] if g >= nk)
    return len(hit), short


@dataclass
class MetricsReport:
    os: float
    os_star: float
    per_class_accuracy: list
    k_star: int | None = None
    k_gt: int | None = None
    k_error: float | None = None
    correspondence: dict = field(default_factory=dict)
    missing_classes: list = field(default_factory=list)
    mode: str = "full"
    provenance: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    sweep: list | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["correspondence"] = {str(k): v for k, v in self.correspondence.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["correspondence"] = {int(k): v for k, v in d.get("correspondence", {}).items()}
        if d.get("sweep") is not None:
            d["sweep"] = [list(row) for row in d["sweep"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def evaluate(model, target, mode="full", ns=(1, 3, 5), provenance=None) -> MetricsReport:
    c = model.c
    _, probs, _ = net.forward(model.f, c, target.features)
    pred = np.argmax(probs, axis=1)
    os_, os_star, per_class = os_metrics(pred, target, c.num_known)
    missing = [j for j, a in enumerate(per_class) if a is None]
    report = MetricsReport(os_, os_star, per_class, missing_classes=missing, mode=mode,
                           provenance=dict(provenance or {}))
    if mode != "pretrain_only":
        k_gt = implicit_count(target, c.num_known)
        report.k_star = c.k
        report.k_gt = k_gt
        report.k_error = k_error(c.k, k_gt)
        report.correspondence = {n: correspondence(model, target, n)[0] for n in ns}
    return report


# -- ablation protocol ----------------------------------------------------


def _run_cell(args):
    from .adapter import run
    from .data import generate
    from .numkit import Rng

    mode, seed, cfg_base, spec = args
    cfg = cfg_base.replace(seed=seed, ablation_mode=mode)
    source, target = generate(spec, Rng(seed).child("data"))
    if mode.startswith("k_gt"):
        cfg = cfg.replace(k_gt=implicit_count(target, source.num_classes))
    _, _, report = run(cfg, source, target)
    return report


def ablation_suite(cfg_base, modes, seeds, spec=None, workers: int = 1):
    """Run every ``(mode, seed)`` cell on freshly generated benchmark data.

    The seed drives both the data generator and training. Returns
    ``{mode: [MetricsReport per seed]}``.
    """
    from .data import ShiftSpec

    spec = spec or ShiftSpec()
    bad = set(modes) - set(ABLATION_MODES)
    if bad:
        raise ContractError(f"unknown ablation modes {sorted(bad)}")
    cells = [(m, s, cfg_base, spec) for m in modes for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_run_cell, cells))
    else:
        reports = [_run_cell(c) for c in cells]
    table = {m: [] for m in modes}
    for (m, _, _, _), r in zip(cells, reports):
        table[m].append(r)
    return table


def _mean_sd(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def summarize(table) -> list[dict]:
    rows = []
    for mode, reports in table.items():
        row = {"mode": mode, "runs": len(reports)}
        for key in ("os", "os_star", "k_error"):
            row[f"{key}_mean"], row[f"{key}_sd"] = _mean_sd([getattr(r, key) for r in reports])
        rows.append(row)
    return rows


SUMMARY_COLUMNS = ("mode", "runs", "os_mean", "os_sd", "os_star_mean", "os_star_sd",
                   "k_error_mean", "k_error_sd")


def _cell(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_cell(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def rows_csv(table) -> str:
    """One line per ``(mode, seed)`` cell."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "seed", "os", "os_star", "k_star", "k_gt", "k_error"])
    for mode, reports in table.items():
        for r in reports:
            w.writerow([mode, r.provenance.get("seed", ""), _cell(r.os), _cell(r.os_star),
                        _cell(r.k_star), _cell(r.k_gt), _cell(r.k_error)])
    return buf.getvalue()
