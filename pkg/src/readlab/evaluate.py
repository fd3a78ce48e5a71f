"""Evaluation: accuracy, label-fraction sweeps, feature export, reports.

The sweep's canonical artifact is ``sweep.csv``; the SVG chart is a
presentation convenience rendered without any plotting dependency.
2-D projections use plain PCA; the exported ``features.tsv`` is the
hand-off point for external projection tools.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import trainer as trainer_mod
from .classifier import ClassifierHead, Encoder, class_probabilities, encode_batch
from .corpus import Example, Vocabulary, decode, tokenize
from .errors import ReadLabError
from .generator import TokenGenerator, sample_trajectories


def accuracy(encoder: Encoder, head: ClassifierHead, test_set: Sequence[Example]) -> float:
    """Fraction of test examples whose argmax over the k task classes is gold.

    The fake class is excluded from prediction; ties break deterministically
    toward the lowest class index.
    """
    if not test_set:
        raise ReadLabError("empty test set")
    with torch.no_grad():
        probs = class_probabilities(head, encode_batch(encoder, [ex.tokens for ex in test_set]))
    task_probs = probs[:, : head.k].numpy()
    pred = task_probs.argmax(axis=1)
    gold = np.array([ex.label for ex in test_set])
    return float((pred == gold).mean())


# ---------------------------------------------------------------------------
# Label-fraction sweep


@dataclass
class CellResult:
    final_acc: float | None = None
    best_acc: float | None = None
    metrics_path: str | None = None
    error: str | None = None


@dataclass
class SweepResult:
    cells: dict[tuple[str, float, int], CellResult]

    @property
    def failures(self) -> dict[tuple[str, float, int], str]:
        return {key: c.error for key, c in self.cells.items() if c.error is not None}

    def mean_final(self, variant: str, fraction: float) -> float:
        vals = [c.final_acc for (v, f, _), c in self.cells.items()
                if v == variant and f == fraction and c.final_acc is not None]
        return float(np.mean(vals)) if vals else float("nan")


def _run_cell(base_config, train_examples, test_examples, variant, fraction, seed, outdir):
    cfg = dataclasses.replace(base_config, variant=variant, label_fraction=fraction,
                              seed=seed)
    cell_dir = Path(outdir) / f"cell-{variant}-f{fraction}-s{seed}"
    _, records = trainer_mod.run(cfg, train_examples, test_examples, outdir=cell_dir)
    accs = [r["test_accuracy"] for r in records if "test_accuracy" in r]
    return CellResult(final_acc=accs[-1], best_acc=max(accs),
                      metrics_path=str(cell_dir / "metrics.jsonl"))


def sweep(base_config, train_examples: Sequence[Example], test_examples: Sequence[Example],
          fractions: Sequence[float], variants: Sequence[str], seeds: Sequence[int],
          outdir: str | Path, jobs: int = 1) -> SweepResult:
    """Run every (variant, fraction, seed) cell and write sweep.csv + sweep.svg.

    Failed cells are recorded with their reason (and in failures.csv) and do
    not appear in sweep.csv; the sweep itself keeps going.
    """
    if not fractions or not variants or not seeds:
        raise ReadLabError("sweep grid must be non-empty")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    keys = [(v, float(f), int(s)) for v in variants for f in fractions for s in seeds]
    cells: dict[tuple[str, float, int], CellResult] = {}

    def job(key):
        v, f, s = key
        try:
            return key, _run_cell(base_config, train_examples, test_examples, v, f, s, outdir)
        except Exception as exc:  # record and continue with other cells
            return key, CellResult(error=f"{type(exc).__name__}: {exc}")

    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            for key, result in pool.map(job, keys):
                cells[key] = result
    else:
        for key in keys:
            cells[key] = job(key)[1]

    with open(outdir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "fraction", "seed", "final_acc", "best_acc"])
        for key in keys:
            cell = cells[key]
            if cell.error is None:
                writer.writerow([key[0], key[1], key[2], cell.final_acc, cell.best_acc])
    failures = {key: cells[key].error for key in keys if cells[key].error is not None}
    if failures:
        with open(outdir / "failures.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "fraction", "seed", "reason"])
            for (v, f, s), reason in failures.items():
                writer.writerow([v, f, s, reason])
    result = SweepResult(cells=cells)
    _write_sweep_svg(result, sorted({f for _, f, _ in keys}), list(variants),
                     outdir / "sweep.svg")
    return result


def _write_sweep_svg(result: SweepResult, fractions: Sequence[float],
                     variants: Sequence[str], path: str | Path) -> None:
    """Minimal accuracy-vs-fraction line chart, one polyline per variant."""
    width, height, margin = 480, 320, 48
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]

    def sx(f):
        lo, hi = min(fractions), max(fractions)
        span = (hi - lo) or 1.0
        return margin + (f - lo) / span * (width - 2 * margin)

    def sy(a):
        return height - margin - a * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
             f'y2="{height - margin}" stroke="black"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
             f'stroke="black"/>']
    for f in fractions:
        parts.append(f'<text x="{sx(f):.1f}" y="{height - margin + 16}" font-size="10" '
                     f'text-anchor="middle">{f}</text>')
    for a in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{margin - 6}" y="{sy(a):.1f}" font-size="10" '
                     f'text-anchor="end">{a}</text>')
    for i, v in enumerate(variants):
        pts = [(f, result.mean_final(v, f)) for f in fractions]
        pts = [(f, a) for f, a in pts if not np.isnan(a)]
        if not pts:
            continue
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(f):.1f},{sy(a):.1f}" for f, a in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 14 * i}" font-size="10" '
                     f'fill="{color}">{v}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Feature export and 2-D projection


def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project (n, d) points onto their top-2 principal components.

    Returns (projected (n, 2), components (2, d), mean (d,)). Component
    signs are fixed so the largest-magnitude coordinate is positive, which
    keeps the output stable across runs.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ReadLabError("pca_2d needs an (n >= 2, d) matrix")
    mean = pts.mean(axis=0)
    centered = pts - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros((2 - vt.shape[0], pts.shape[1]))])
    for i in range(2):
        j = int(np.abs(comps[i]).argmax())
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T, comps, mean


def export_features(encoder: Encoder, examples: Sequence[Example],
                    path: str | Path) -> np.ndarray:
    """Write `gold_label<TAB>f_1,...,f_d` rows plus a 2-D PCA companion file.

    The companion ``features_2d.csv`` (label,x,y) sits next to ``path``.
    Returns the raw feature matrix.
    """
    if not examples:
        raise ReadLabError("no examples to export")
    with torch.no_grad():
        feats = encode_batch(encoder, [ex.tokens for ex in examples]).numpy()
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for ex, row in zip(examples, feats):
            label = ex.label if ex.label is not None else -1
            fh.write(f"{label}\t" + ",".join(repr(float(v)) for v in row) + "\n")
    proj, _, _ = pca_2d(feats.astype(np.float64))
    with open(path.parent / "features_2d.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "x", "y"])
        for ex, (x, y) in zip(examples, proj):
            label = ex.label if ex.label is not None else -1
            writer.writerow([label, repr(float(x)), repr(float(y))])
    return feats


def silhouette_score(points: np.ndarray, labels: Sequence[int]) -> float:
    """Mean silhouette over all points (euclidean), hand-rolled for 2-D use."""
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ReadLabError("silhouette needs at least 2 clusters")
    dists = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    scores = np.zeros(len(pts))
    for i in range(len(pts)):
        same = labels == labels[i]
        n_same = same.sum() - 1
        a = dists[i, same].sum() / n_same if n_same > 0 else 0.0
        b = min(dists[i, labels == other].mean() for other in uniq if other != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


# ---------------------------------------------------------------------------
# Generation quality


@dataclass
class GenReportRow:
    generated: str
    nearest_real: str
    cosine: float


def generation_report(generator: TokenGenerator, encoder: Encoder, vocab: Vocabulary,
                      real_examples: Sequence[Example], n: int,
                      rng: int | torch.Generator, max_len: int = 64,
                      path: str | Path | None = None) -> list[GenReportRow]:
    """Sample n texts and map each to its nearest real text by cosine.

    Similarity is computed between encoder features; rows are written as
    `generated<TAB>nearest_real<TAB>cosine` when a path is given.
    """
    if n < 1:
        raise ReadLabError("generation_report needs n >= 1")
    if not real_examples:
        raise ReadLabError("empty real corpus")
    trajs = sample_trajectories(generator, n, max_len, rng)
    with torch.no_grad():
        real_feats = encode_batch(encoder, [ex.tokens for ex in real_examples]).numpy()
        gen_feats = encode_batch(encoder, [t.tokens for t in trajs]).numpy()

    def unit(x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.maximum(norms, 1e-12)

    sims = unit(gen_feats) @ unit(real_feats).T
    rows = []
    for i, traj in enumerate(trajs):
        j = int(sims[i].argmax())
        rows.append(GenReportRow(generated=decode(traj.tokens, vocab),
                                 nearest_real=real_examples[j].text,
                                 cosine=float(sims[i, j])))
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(f"{row.generated}\t{row.nearest_real}\t{row.cosine!r}\n")
    return rows


def distinct_ngram_ratio(texts: Sequence[str], n: int) -> float:
    """Unique n-grams divided by total n-grams across the whole corpus."""
    if not texts:
        raise ReadLabError("distinct_ngram_ratio needs a non-empty text list")
    if n < 1:
        raise ReadLabError("n must be >= 1")
    total = 0
    seen: set[tuple[str, ...]] = set()
    for text in texts:
        toks = tokenize(text)
        for i in range(len(toks) - n + 1):
            seen.add(tuple(toks[i: i + n]))
            total += 1
    if total == 0:
        raise ReadLabError(f"corpus has no {n}-grams")
    return len(seen) / total
