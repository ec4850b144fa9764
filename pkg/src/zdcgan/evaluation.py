"""Evaluation protocol: five readout channels per response, pooled empirical
Wasserstein-1 distances between true and generated channel values,
shower-center error and intensity-gap diagnostics, and report emission.

Channel geometry is the placeholder quadrant mapping (rows split at 28,
columns at 15, row-major quadrant order) plus the total sum as channel 5; swap
CHANNEL_SLICES to drop in a real tower layout.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import data as dt
from .nets import Networks

ROW_SPLIT = 28
COL_SPLIT = 15
DEFAULT_BINS = 40

# (row_slice, col_slice) per aggregate channel; channel 5 is the full grid sum.
CHANNEL_SLICES = (
    (slice(0, ROW_SPLIT), slice(0, COL_SPLIT)),
    (slice(0, ROW_SPLIT), slice(COL_SPLIT, dt.WIDTH)),
    (slice(ROW_SPLIT, dt.HEIGHT), slice(0, COL_SPLIT)),
    (slice(ROW_SPLIT, dt.HEIGHT), slice(COL_SPLIT, dt.WIDTH)),
)


class ChannelValues(NamedTuple):
    ch1: float
    ch2: float
    ch3: float
    ch4: float
    ch5: float


def extract_channels(x: np.ndarray) -> ChannelValues:
    """Quadrant sums (top-left, top-right, bottom-left, bottom-right) plus the
    total sum; ch1 + ch2 + ch3 + ch4 == ch5."""
    x = dt.validate_responses(x)[0].astype(np.float64)
    quads = [float(x[rs, cs].sum()) for rs, cs in CHANNEL_SLICES]
    return ChannelValues(*quads, float(x.sum()))


def channels_matrix(responses: np.ndarray) -> np.ndarray:
    """Vectorized channel extraction, shape (n, 5) float64."""
    arr = np.asarray(responses, dtype=np.float64)
    cols = [arr[:, rs, cs].sum(axis=(1, 2)) for rs, cs in CHANNEL_SLICES]
    cols.append(arr.sum(axis=(1, 2)))
    return np.stack(cols, axis=1)


def ws1(a, b) -> float:
    """Empirical 1-D Wasserstein-1 distance between two samples.

    Equal sizes reduce to the mean absolute difference of sorted order
    statistics; unequal sizes integrate |F_a^-1 - F_b^-1| over the merged
    quantile grid (both inverse CDFs are piecewise constant, so the integral
    is evaluated exactly on the segments between quantile breakpoints).
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("ws1 requires non-empty samples")
    n, m = a.size, b.size
    if n == m:
        return float(np.mean(np.abs(a - b)))
    breaks = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    edges = np.concatenate([[0.0], breaks, [1.0]])
    widths = np.diff(edges)
    mids = (edges[:-1] + edges[1:]) / 2
    ia = np.minimum((mids * n).astype(np.int64), n - 1)
    ib = np.minimum((mids * m).astype(np.int64), m - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


@dataclass
class ChannelHistogram:
    channel: int
    bin_edges: list[float]           # n_bins + 1 edges, shared by both sets
    count_true: list[int]
    count_gen: list[int]


@dataclass
class EvalReport:
    per_channel_ws: list[float]
    mean_ws: float
    center_error_mean: float
    intensity_gap: float
    histograms: list[ChannelHistogram]
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "per_channel_ws": self.per_channel_ws,
            "mean_ws": self.mean_ws,
            "center_error_mean": self.center_error_mean,
            "intensity_gap": self.intensity_gap,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "histograms": [
                {
                    "channel": h.channel,
                    "bin_edges": h.bin_edges,
                    "count_true": h.count_true,
                    "count_gen": h.count_gen,
                }
                for h in self.histograms
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(
            per_channel_ws=[float(v) for v in d["per_channel_ws"]],
            mean_ws=float(d["mean_ws"]),
            center_error_mean=float(d["center_error_mean"]),
            intensity_gap=float(d["intensity_gap"]),
            histograms=[
                ChannelHistogram(
                    channel=int(h["channel"]),
                    bin_edges=[float(v) for v in h["bin_edges"]],
                    count_true=[int(v) for v in h["count_true"]],
                    count_gen=[int(v) for v in h["count_gen"]],
                )
                for h in d["histograms"]
            ],
            n_samples=int(d["n_samples"]),
            seed=int(d["seed"]),
        )


def channel_histograms(true_values, generated_values, channel: int, n_bins: int = DEFAULT_BINS) -> ChannelHistogram:
    """Histogram both sets over shared uniform bins spanning the union range.
    A degenerate range (all values equal) falls back to one unit-wide bin."""
    tv = np.asarray(true_values, dtype=np.float64).ravel()
    gv = np.asarray(generated_values, dtype=np.float64).ravel()
    if tv.size == 0 or gv.size == 0:
        raise ValueError("histogram inputs must be non-empty")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    lo = float(min(tv.min(), gv.min()))
    hi = float(max(tv.max(), gv.max()))
    if lo == hi:
        edges = np.array([lo - 0.5, lo + 0.5])
    else:
        edges = np.linspace(lo, hi, n_bins + 1)
    ct, _ = np.histogram(tv, bins=edges)
    cg, _ = np.histogram(gv, bins=edges)
    return ChannelHistogram(
        channel=channel,
        bin_edges=[float(e) for e in edges],
        count_true=[int(c) for c in ct],
        count_gen=[int(c) for c in cg],
    )


def compare_sets(
    true_responses: np.ndarray,
    generated_responses: np.ndarray,
    center_targets: np.ndarray,
    seed: int,
    n_bins: int = DEFAULT_BINS,
) -> EvalReport:
    """Assemble an EvalReport from pooled true/generated responses.

    center_targets holds, per generated response, the stored center of its
    condition group; the center error is the Euclidean distance from the
    generated argmax pixel to that target.
    """
    true_ch = channels_matrix(true_responses)
    gen_ch = channels_matrix(generated_responses)
    per_channel = [ws1(true_ch[:, k], gen_ch[:, k]) for k in range(5)]
    maxima = dt.find_max_pixels(generated_responses)
    center_err = float(np.mean(np.linalg.norm(maxima - np.asarray(center_targets), axis=1)))
    gap = abs(
        float(np.mean(dt.intensities(true_responses))) - float(np.mean(dt.intensities(generated_responses)))
    )
    hists = [channel_histograms(true_ch[:, k], gen_ch[:, k], channel=k + 1, n_bins=n_bins) for k in range(5)]
    return EvalReport(
        per_channel_ws=per_channel,
        mean_ws=float(np.mean(per_channel)),
        center_error_mean=center_err,
        intensity_gap=gap,
        histograms=hists,
        n_samples=int(generated_responses.shape[0]),
        seed=seed,
    )


def generate_for_dataset(
    nets: Networks,
    dataset: dt.Dataset,
    samples_per_condition: int,
    seed: int,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample samples_per_condition responses per group with fresh latents.

    Returns (generated responses, per-response group center targets), ordered
    by ascending group id. Deterministic given seed.
    """
    if samples_per_condition < 1:
        raise ValueError("samples_per_condition must be >= 1")
    stats = dt.compute_stats(dataset)
    gids = sorted(dataset.groups)
    conds = np.stack([dataset.conditions[dataset.groups[g][0]] for g in gids])
    conds = np.repeat(conds, samples_per_condition, axis=0)
    centers = np.array([stats.per_group[g].center for g in gids], dtype=np.float64)
    centers = np.repeat(centers, samples_per_condition, axis=0)

    latent_dim = nets.config.latent_dim if nets.config is not None else 10
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    z = torch.randn(conds.shape[0], latent_dim, generator=gen)
    nets.eval_mode()
    out = []
    with torch.no_grad():
        ct = torch.as_tensor(conds, dtype=torch.float32)
        for i in range(0, ct.shape[0], batch_size):
            out.append(nets.generator(z[i : i + batch_size], ct[i : i + batch_size]))
    return torch.cat(out).numpy().astype(np.float32), centers


def evaluate_model(
    nets: Networks,
    test_dataset: dt.Dataset,
    samples_per_condition: int = 8,
    seed: int = 0,
    n_bins: int = DEFAULT_BINS,
) -> EvalReport:
    """Pooled evaluation over the test split: per-channel WS-1 between all
    true and all generated channel values, mean WS, center error against each
    group's stored center, and the intensity gap."""
    if len(test_dataset) == 0:
        raise ValueError("test dataset is empty")
    generated, centers = generate_for_dataset(nets, test_dataset, samples_per_condition, seed)
    return compare_sets(test_dataset.responses, generated, centers, seed=seed, n_bins=n_bins)


def write_report(report: EvalReport, directory: str | Path) -> None:
    """Emit report.json plus hist_ch{1..5}.csv (bin_lo, bin_hi, count_true,
    count_gen). Floats are serialized at full precision."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    for h in report.histograms:
        with open(d / f"hist_ch{h.channel}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_lo", "bin_hi", "count_true", "count_gen"])
            for i in range(len(h.count_true)):
                w.writerow([repr(h.bin_edges[i]), repr(h.bin_edges[i + 1]), h.count_true[i], h.count_gen[i]])


def load_report(directory: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads((Path(directory) / "report.json").read_text()))
