"""Perturbation faithfulness metrics, coverage reports, and file writers."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .graph import Graph
from .rules import RULE_REGISTRY
from .tensor import OpKind, Tensor

OCCLUSIONS = ("mean-fill", "zero-fill", "blur")


@dataclass
class PerturbationCurve:
    xs: np.ndarray
    ys: np.ndarray
    kind: str
    baseline: float

    def __post_init__(self) -> None:
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.shape != self.ys.shape or self.xs.ndim != 1:
            raise ValueError("xs and ys must be 1-D and of equal length")
        if self.xs.size == 0 or self.xs[0] != 0 or np.any(np.diff(self.xs) <= 0):
            raise ValueError("xs must start at 0 and be strictly increasing")


def auc(curve: PerturbationCurve) -> float:
    """Trapezoid area on the x axis rescaled to [0, 1]; 0 for a single point."""
    if curve.xs.size < 2:
        return 0.0
    t = curve.xs / curve.xs[-1]
    return float(np.trapezoid(curve.ys, t))


def _fill_value(x: Tensor, occlusion: str) -> Tensor:
    if occlusion == "mean-fill":
        return np.full_like(x, x.mean())
    if occlusion == "zero-fill":
        return np.zeros_like(x)
    if occlusion == "blur":
        if x.ndim < 2:
            raise ValueError("blur occlusion needs an input with two spatial axes")
        sigma = [0.0] * (x.ndim - 2) + [1.0, 1.0]
        return gaussian_filter(x, sigma=sigma, mode="nearest")
    raise ValueError(f"unknown occlusion {occlusion!r}; choose from {OCCLUSIONS}")


def morf_lerf(
    score: Callable[[Tensor], float],
    x: Tensor,
    attributions: Tensor,
    steps: int,
    occlude_per_step: int,
    occlusion: str = "mean-fill",
) -> tuple[PerturbationCurve, PerturbationCurve]:
    """MoRF and LeRF curves for one sample.

    ``score`` maps an input to the scalar being explained (the target logit).
    Step ``i`` replaces the ``i * occlude_per_step`` most (MoRF) or least
    (LeRF) relevant features of ``x`` by the occlusion fill. Ties keep the
    flat feature order.
    """
    x = np.asarray(x, dtype=np.float64)
    attributions = np.asarray(attributions, dtype=np.float64)
    if attributions.shape != x.shape:
        raise ValueError(f"attribution shape {attributions.shape} != input shape {x.shape}")
    n = x.size
    if steps < 0 or occlude_per_step <= 0 or steps * occlude_per_step > n:
        raise ValueError(f"{steps} steps of {occlude_per_step} features exceed {n} features")
    fill = _fill_value(x, occlusion).ravel()
    flat_attr = attributions.ravel()
    base = float(score(x))
    xs = np.arange(steps + 1) * occlude_per_step / n
    curves = []
    for kind, order in (("MoRF", np.argsort(-flat_attr, kind="stable")), ("LeRF", np.argsort(flat_attr, kind="stable"))):
        ys = [base]
        cur = x.ravel().copy()
        for i in range(steps):
            idx = order[i * occlude_per_step : (i + 1) * occlude_per_step]
            cur[idx] = fill[idx]
            ys.append(float(score(cur.reshape(x.shape))))
        curves.append(PerturbationCurve(xs, np.asarray(ys), kind, base))
    return curves[0], curves[1]


def abpc(morf: PerturbationCurve, lerf: PerturbationCurve) -> float:
    """Area between perturbation curves: AUC(LeRF) - AUC(MoRF)."""
    if morf.xs.shape != lerf.xs.shape or not np.array_equal(morf.xs, lerf.xs):
        raise ValueError("curves have different x grids")
    return auc(lerf) - auc(morf)


def comprehensiveness_sufficiency(
    morf: PerturbationCurve, lerf: PerturbationCurve, baseline: float | None = None
) -> tuple[float, float]:
    """Baseline area minus MoRF area, and baseline area minus LeRF area."""
    b = morf.baseline if baseline is None else baseline
    flat = PerturbationCurve(morf.xs, np.full_like(morf.xs, b), "baseline", b)
    base_auc = auc(flat) if morf.xs.size > 1 else 0.0
    return base_auc - auc(morf), base_auc - auc(lerf)


def top_k_hits(attributions: Tensor, ground_truth: Iterable[int], k: int) -> float:
    """Fraction of the ``k`` highest-scoring flat indices found in ``ground_truth``."""
    if k <= 0:
        raise ValueError("k must be positive")
    flat = np.asarray(attributions).ravel()
    top = np.argsort(-flat, kind="stable")[:k]
    truth = set(int(i) for i in ground_truth)
    return sum(int(i) in truth for i in top) / min(k, flat.size)


@dataclass
class CoverageReport:
    per_kind: dict[str, dict[str, Any]] = field(default_factory=dict)
    covered: int = 0
    total: int = 0

    @property
    def uncovered(self) -> int:
        return self.total - self.covered

    @property
    def fraction(self) -> float:
        return self.covered / self.total if self.total else 1.0

    @property
    def uncovered_kinds(self) -> list[str]:
        return sorted(k for k, v in self.per_kind.items() if not v["covered"])

    def to_json(self) -> dict[str, Any]:
        return {
            "per_kind": self.per_kind,
            "covered": self.covered,
            "uncovered": self.uncovered,
            "total": self.total,
            "coverage": self.fraction,
            "uncovered_kinds": self.uncovered_kinds,
        }


def coverage_report(graph: Graph, registry: Mapping[Any, str] = RULE_REGISTRY) -> CoverageReport:
    counts = Counter(str(n.kind) for n in graph.nodes)
    names = {str(k) for k in registry}
    rep = CoverageReport()
    for kind, c in sorted(counts.items()):
        ok = kind in names
        rep.per_kind[kind] = {"count": c, "covered": ok}
        rep.total += c
        rep.covered += c if ok else 0
    return rep


# -- writers -----------------------------------------------------------------


def write_attribution_csv(path: str, relevance: Tensor) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_index", "relevance"])
        for i, r in enumerate(np.asarray(relevance).ravel()):
            w.writerow([i, repr(float(r))])


def write_curves_csv(path: str, morf: PerturbationCurve, lerf: PerturbationCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "fraction", "morf", "lerf"])
        for i, (x, m, l) in enumerate(zip(morf.xs, morf.ys, lerf.ys)):
            w.writerow([i, repr(float(x)), repr(float(m)), repr(float(l))])


def heatmap_2d(relevance: Tensor) -> np.ndarray:
    """Collapse a relevance tensor to 2-D for display (leading axes summed)."""
    r = np.asarray(relevance, dtype=np.float64)
    if r.ndim == 0:
        return r.reshape(1, 1)
    if r.ndim == 1:
        return r.reshape(1, -1)
    return r.reshape(-1, *r.shape[-2:]).sum(axis=0)


def to_pgm(image: np.ndarray) -> str:
    """P2 ASCII PGM text with values min-max scaled to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape, dtype=int) if hi == lo else np.rint((img - lo) / (hi - lo) * 255).astype(int)
    h, w = scaled.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in scaled)
    return f"P2\n{w} {h}\n255\n{rows}\n"


def write_pgm(path: str, image: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(to_pgm(image))


def mean_curve(curves: Sequence[PerturbationCurve], kind: str) -> PerturbationCurve:
    ys = np.mean([c.ys for c in curves], axis=0)
    return PerturbationCurve(curves[0].xs, ys, kind, float(np.mean([c.baseline for c in curves])))
