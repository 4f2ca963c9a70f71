"""Cross-policy evaluation, ablation deltas, curves and histogram reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .datastore import Dataset, label_histogram, write_histogram_csv
from .models import SampleSet
from .phy import MCS_MIN, N_CLASSES

POLICY_ORDER = ("cnn_lstm", "cnn_only", "dqn", "lut")
Z95 = 1.959963984540054


def samples_checksum(s: SampleSet) -> str:
    h = hashlib.sha256()
    for a in (s.x, s.y, s.scenario, s.sinr_db):
        if a is not None:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class PolicyResult:
    predictions: np.ndarray  # MCS indices
    labels: np.ndarray  # MCS indices
    scenario: np.ndarray

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.correct))

    def confusion(self) -> np.ndarray:
        """15 x 15 counts, rows true MCS, columns predicted MCS."""
        cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        np.add.at(cm, (self.labels - MCS_MIN, self.predictions - MCS_MIN), 1)
        return cm

    def subset_accuracy(self, mask) -> tuple[float, int]:
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        return (float(np.mean(self.correct[mask])) if n else float("nan")), n


@dataclass
class ComparisonReport:
    results: dict  # policy name -> PolicyResult
    scenario_tags: tuple
    split_checksum: str
    metadata: dict = field(default_factory=dict)

    def accuracy(self, policy: str) -> float:
        return self.results[policy].accuracy

    def per_scenario(self, policy: str) -> dict:
        r = self.results[policy]
        return {tag: r.subset_accuracy(r.scenario == i) for i, tag in enumerate(self.scenario_tags)
                if np.any(r.scenario == i)}

    def scenario_mask(self, pattern: str) -> np.ndarray:
        """Samples whose scenario tag contains ``pattern`` as a ``_``-separated part."""
        ids = [i for i, t in enumerate(self.scenario_tags) if f"_{pattern}_" in f"_{t}_" or t == pattern]
        any_result = next(iter(self.results.values()))
        return np.isin(any_result.scenario, ids)

    def summary(self) -> dict:
        return {
            "split_checksum": self.split_checksum,
            "metadata": self.metadata,
            "policies": {
                name: {
                    "accuracy": r.accuracy,
                    "n": r.n,
                    "per_scenario": {k: {"accuracy": a, "n": n} for k, (a, n) in self.per_scenario(name).items()},
                }
                for name, r in self.results.items()
            },
        }

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "accuracy", "n"])
            for name, r in self.results.items():
                w.writerow([name, repr(r.accuracy), r.n])
        for name, r in self.results.items():
            with open(os.path.join(out_dir, f"confusion_{name}.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["true\\pred", *range(MCS_MIN, MCS_MIN + N_CLASSES)])
                for i, row in enumerate(r.confusion()):
                    w.writerow([MCS_MIN + i, *row.tolist()])
        with open(os.path.join(out_dir, "per_scenario.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "scenario", "accuracy", "n"])
            for name in self.results:
                for tag, (acc, n) in self.per_scenario(name).items():
                    w.writerow([name, tag, repr(acc), n])
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def compare_policies(policies: dict, test: SampleSet, metadata: dict | None = None) -> ComparisonReport:
    """Run every policy on the same test samples.

    ``policies`` maps a name to a callable taking the SampleSet and
    returning MCS indices.  The inputs are hashed before and after each
    policy runs, so a policy that mutates them is caught.
    """
    if len(test) == 0:
        raise ValueError("test split is empty")
    digest = samples_checksum(test)
    labels = np.asarray(test.y) + MCS_MIN
    scen = np.zeros(len(test), dtype=int) if test.scenario is None else np.asarray(test.scenario)
    results = {}
    for name, policy in policies.items():
        pred = np.asarray(policy(test), dtype=int).reshape(-1)
        if pred.shape != labels.shape:
            raise ValueError(f"policy {name} returned {pred.shape[0]} predictions for {len(labels)} samples")
        if np.any((pred < MCS_MIN) | (pred >= MCS_MIN + N_CLASSES)):
            raise ValueError(f"policy {name} produced an index outside the MCS range")
        if samples_checksum(test) != digest:
            raise RuntimeError(f"policy {name} modified the shared test inputs")
        results[name] = PolicyResult(pred, labels, scen)
    return ComparisonReport(results, tuple(test.scenario_tags), digest, dict(metadata or {}))


# ---------------------------------------------------------------------------
# Deltas and orderings


@dataclass(frozen=True)
class AccuracyDelta:
    delta: float
    ci_low: float
    ci_high: float
    n: int

    def as_dict(self) -> dict:
        return {"delta": self.delta, "ci_low": self.ci_low, "ci_high": self.ci_high, "n": self.n}


def accuracy_delta(report: ComparisonReport, a: str, b: str, mask=None) -> AccuracyDelta:
    """acc(a) - acc(b) with a normal-approximation binomial 95% interval."""
    ra, rb = report.results[a], report.results[b]
    m = np.ones(ra.n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pa, n = ra.subset_accuracy(m)
    pb, _ = rb.subset_accuracy(m)
    if n == 0:
        raise ValueError("empty comparison subset")
    half = Z95 * math.sqrt((pa * (1 - pa) + pb * (1 - pb)) / n)
    d = pa - pb
    return AccuracyDelta(d, d - half, d + half, n)


def lstm_ablation_delta(report: ComparisonReport, subset: str | None = None) -> AccuracyDelta:
    """Accuracy gain of the CNN-LSTM over the CNN-only model, optionally on a scenario subset."""
    mask = None if subset is None else report.scenario_mask(subset)
    return accuracy_delta(report, "cnn_lstm", "cnn_only", mask)


def ordering_holds(report: ComparisonReport, a: str, b: str, slack: float = 0.01) -> bool:
    """acc(a) >= acc(b), tolerating a shortfall of up to ``slack`` only while the CI covers zero."""
    d = accuracy_delta(report, a, b)
    if d.delta >= 0:
        return True
    return d.delta >= -slack and d.ci_high >= 0


# ---------------------------------------------------------------------------
# Curves and histograms


def training_curves(reports: dict, path) -> None:
    """One long CSV (model,epoch,loss,train_acc,test_acc) across models.

    ``reports`` maps a model name to a TrainReport-like object with
    ``loss``, ``train_acc`` and ``test_acc`` lists.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "epoch", "loss", "train_acc", "test_acc"])
        for name, rep in reports.items():
            for e, row in enumerate(zip(rep.loss, rep.train_acc, rep.test_acc), start=1):
                w.writerow([name, e, *(repr(float(v)) for v in row)])


def histogram_summary(ds: Dataset) -> list[dict]:
    """Per scenario: sample count, modal MCS and label variance."""
    out = []
    idx = np.arange(MCS_MIN, MCS_MIN + N_CLASSES)
    for tag in ds.manifest.tags:
        counts = label_histogram(ds, tag)
        n = int(counts.sum())
        if n == 0:
            mode, var = "", float("nan")
        else:
            mean = float(counts @ idx) / n
            mode, var = int(idx[np.argmax(counts)]), float(counts @ (idx - mean) ** 2) / n
        out.append({"scenario": tag, "n": n, "modal_mcs": mode, "variance": var})
    return out


def write_histograms(ds: Dataset, out_dir) -> None:
    """``histogram_<scenario>.csv`` for every scenario plus ``histogram_summary.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    for tag in ds.manifest.tags:
        write_histogram_csv(os.path.join(out_dir, f"histogram_{tag}.csv"), label_histogram(ds, tag))
    with open(os.path.join(out_dir, "histogram_summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["scenario", "n", "modal_mcs", "variance"], lineterminator="\n")
        w.writeheader()
        for row in histogram_summary(ds):
            w.writerow({**row, "variance": repr(row["variance"])})
