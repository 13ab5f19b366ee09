"""Benchmark evaluation and the corruption robustness sweep."""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fssd.data import corrupt
from fssd.metrics import detection_metrics

N_BINS = 50


@dataclass
class Histogram:
    layer: str
    edges: np.ndarray
    counts_in: np.ndarray
    counts_ood: np.ndarray


@dataclass
class EvalReport:
    method: str
    auroc: float
    auprc: float
    fpr80: float
    n_in: int
    n_ood: int
    histograms: list = field(default_factory=list)
    scores_in: np.ndarray = None
    scores_ood: np.ndarray = None
    layer_names: list = field(default_factory=list)
    layers_in: np.ndarray = None
    layers_ood: np.ndarray = None

    def row(self):
        return [self.method, repr(self.auroc), repr(self.auprc), repr(self.fpr80), self.n_in, self.n_ood]


def layer_histograms(layer_names, S_in, S_ood, bins=N_BINS):
    """One shared-range histogram per layer column."""
    out = []
    for k, name in enumerate(layer_names):
        lo = min(S_in[:, k].min(), S_ood[:, k].min())
        hi = max(S_in[:, k].max(), S_ood[:, k].max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        out.append(Histogram(name, edges, np.histogram(S_in[:, k], edges)[0], np.histogram(S_ood[:, k], edges)[0]))
    return out


def evaluate_detector(det, model, x_in, x_ood, with_histograms=True):
    S_in = S_ood = None
    taps = []
    if hasattr(det, "layer_scores"):
        S_in, S_ood = det.layer_scores(model, x_in), det.layer_scores(model, x_ood)
        s_in, s_ood = S_in @ det.weights + det.bias, S_ood @ det.weights + det.bias
        taps = list(det.taps)
        hists = layer_histograms(taps, S_in, S_ood) if with_histograms else []
    else:
        s_in, s_ood = det.score(model, x_in), det.score(model, x_ood)
        hists = []
    m = detection_metrics(s_in, s_ood)
    return EvalReport(det.name, m["auroc"], m["auprc"], m["fpr80"], len(s_in), len(s_ood), hists, s_in, s_ood,
                      taps, S_in, S_ood)


def eval_all(pair, model, detectors):
    """Metrics on the test portions only; refuses pairs whose val/test indices overlap."""
    pair.check_disjoint()
    x_in, x_ood = pair.in_dist_test.inputs, pair.ood_test.inputs
    return [evaluate_detector(d, model, x_in, x_ood) for d in detectors]


def _workers():
    try:
        return max(1, int(os.environ.get("FSSD_THREADS", "1")))
    except ValueError:
        return 1


def robustness_sweep(pair, model, detectors, specs, seed=0):
    """Rows (kind, level, method, auroc, auprc, fpr80); both test sides are corrupted."""
    pair.check_disjoint()

    def one(args):
        i, spec = args
        x_in = corrupt(pair.in_dist_test.inputs, spec, seed + 2 * i)
        x_ood = corrupt(pair.ood_test.inputs, spec, seed + 2 * i + 1)
        rows = []
        for det in detectors:
            r = evaluate_detector(det, model, x_in, x_ood, with_histograms=False)
            rows.append((spec.kind, spec.level, r.method, r.auroc, r.auprc, r.fpr80))
        return rows

    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        chunks = list(ex.map(one, enumerate(specs)))
    return [row for chunk in chunks for row in chunk]


def write_reports_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "auroc", "auprc", "fpr80", "n_in", "n_ood"])
        for r in reports:
            w.writerow(r.row())


def write_histograms_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "bin_left", "count", "population"])
        for r in reports:
            for h in r.histograms:
                for left, c in zip(h.edges[:-1], h.counts_in):
                    w.writerow([f"{r.method}:{h.layer}", repr(float(left)), int(c), "in"])
                for left, c in zip(h.edges[:-1], h.counts_ood):
                    w.writerow([f"{r.method}:{h.layer}", repr(float(left)), int(c), "ood"])


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "level", "method", "auroc", "auprc", "fpr80"])
        for kind, level, method, a, p, f in rows:
            w.writerow([kind, level, method, repr(a), repr(p), repr(f)])
