"""Static reports: metric tables with chance levels, term frequencies,
distance histograms, design correlations and grey-level slice images."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from . import bmap
from .corpus import load_corpus, term_frequencies
from .evaluation import DISTANCE_GROUPS, distance_diagnostics, precision_recall
from .reverse import METRICS_COLUMNS, fmt, read_csv, slug, write_csv

logger = logging.getLogger(__name__)


class IncompleteRunError(ValueError):
    pass


# ----------------------------------------------------------------------------
# images


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit portable grey map."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def to_grey(values: np.ndarray, symmetric: bool = False) -> np.ndarray:
    """Linear map of finite values to 0..255 (``symmetric`` centres 0 at 128)."""
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    if symmetric:
        m = float(np.abs(v).max())
        scaled = 0.5 + 0.5 * v / m if m > 0 else np.full(v.shape, 0.5)
    else:
        lo, hi = float(v.min()), float(v.max())
        scaled = (v - lo) / (hi - lo) if hi > lo else np.zeros(v.shape)
    return np.clip(np.floor(scaled * 255.0 + 0.5), 0, 255).astype(np.uint8)


def slice_mosaic(volume: np.ndarray, columns: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile the axial (last-axis) slices of a volume into one 2-D image."""
    vol = np.asarray(volume)
    nx, ny, nz = vol.shape
    cols = columns or int(math.ceil(math.sqrt(nz)))
    rows = int(math.ceil(nz / cols))
    out = np.zeros((rows * (ny + pad) - pad, cols * (nx + pad) - pad), dtype=vol.dtype)
    for k in range(nz):
        r, c = divmod(k, cols)
        # y down, x across
        out[r * (ny + pad): r * (ny + pad) + ny, c * (nx + pad): c * (nx + pad) + nx] = vol[:, ::-1, k].T
    return out


def map_image(mask, values: np.ndarray, outline: np.ndarray | None = None) -> np.ndarray:
    """Grey mosaic of a masked map; outline voxels are drawn white."""
    img = to_grey(mask.unmask(values), symmetric=True)
    img[~mask.in_mask] = 0
    if outline is not None:
        img[mask.unmask(outline.astype(np.uint8)) > 0] = 255
    return slice_mosaic(img)


# ----------------------------------------------------------------------------
# tables


def _load_run(run_dir: Path) -> dict:
    path = run_dir / "run.json"
    if not path.is_file():
        raise IncompleteRunError(f"{run_dir}: no run.json, not a completed run directory")
    return json.loads(path.read_text())


def recompute_metrics(run_dir) -> list[dict]:
    """metrics.csv rows rebuilt from the per-fold prediction files."""
    run_dir = Path(run_dir)
    for name in ("metrics.csv", "chance.csv", "folds.csv"):
        if not (run_dir / name).is_file():
            raise IncompleteRunError(f"{run_dir}: missing {name}")
    original = {r["term"]: r for r in read_csv(run_dir / "metrics.csv")}
    pred: dict[str, list[bool]] = {t: [] for t in original}
    truth: dict[str, list[bool]] = {t: [] for t in original}
    for fold in read_csv(run_dir / "folds.csv"):
        path = run_dir / fold["file"]
        if not path.is_file():
            raise IncompleteRunError(f"{run_dir}: missing {fold['file']}")
        for r in read_csv(path):
            if r["term"] in pred:
                pred[r["term"]].append(r["predicted"] == "1")
                truth[r["term"]].append(r["truth"] == "1")
    rows = []
    for term, o in original.items():
        m = precision_recall(np.array(pred[term], dtype=bool), np.array(truth[term], dtype=bool), term)
        row = dict(o)
        row["precision"] = fmt(m.precision)
        row["recall"] = fmt(m.recall)
        row["support_test"] = fmt(m.support)
        rows.append(row)
    return rows


def write_report(run_dir) -> Path:
    """Write ``report/`` inside a completed forward or reverse run directory."""
    run_dir = Path(run_dir)
    run = _load_run(run_dir)
    command = run.get("command")
    rdir = run_dir / "report"
    rdir.mkdir(exist_ok=True)
    corpus_path = run.get("corpus")
    if not corpus_path or not Path(corpus_path).is_file():
        raise IncompleteRunError(f"{run_dir}: corpus {corpus_path!r} recorded in run.json is missing")
    corpus = load_corpus(corpus_path)

    freqs = term_frequencies(corpus)
    ranked = sorted(freqs, key=lambda t: -freqs[t])  # stable: ties keep taxonomy order
    write_csv(rdir / "term_frequencies.csv", ("rank", "term", "category", "n_maps"),
              [(k + 1, t, corpus.taxonomy.category_of(t), freqs[t]) for k, t in enumerate(ranked)])

    diag = distance_diagnostics(corpus)
    groups = DISTANCE_GROUPS + ("all",)
    edges = diag.histograms["all"][1]
    write_csv(rdir / "distance_histograms.csv", ("bin_low", "bin_high") + groups,
              [[edges[b], edges[b + 1]] + [int(diag.histograms[g][0][b]) for g in groups]
               for b in range(edges.size - 1)])
    write_csv(rdir / "distance_summary.csv", ("group", "n_pairs", "median", "mean"),
              [(g, diag.distances[g].size, diag.median(g),
                float(diag.distances[g].mean()) if diag.distances[g].size else float("nan"))
               for g in groups])
    write_csv(rdir / "design_correlation.csv", ("term",) + diag.design_columns,
              [[t] + list(diag.design_correlation[i]) for i, t in enumerate(diag.design_columns)])
    write_csv(rdir / "correlated_pairs.csv", ("term_a", "term_b", "r"), diag.correlated_pairs(0.5))
    heat = to_grey(diag.design_correlation, symmetric=True)
    write_pgm(rdir / "design_correlation.pgm", np.kron(heat, np.ones((8, 8), dtype=np.uint8)))

    sdir = rdir / "slices"
    sdir.mkdir(exist_ok=True)
    if command == "reverse":
        rows = recompute_metrics(run_dir)
        write_csv(rdir / "metrics.csv", METRICS_COLUMNS, [[r[c] for c in METRICS_COLUMNS] for r in rows])
        chance = {r["term"]: r for r in read_csv(run_dir / "chance.csv")}
        write_csv(rdir / "bars.csv", ("term", "support_test", "precision", "recall", "precision_chance",
                                      "precision_chance_sd", "recall_chance", "recall_chance_sd"),
                  [[r["term"], r["support_test"], r["precision"], r["recall"],
                    chance[r["term"]]["precision_chance"], chance[r["term"]]["precision_chance_sd"],
                    chance[r["term"]]["recall_chance"], chance[r["term"]]["recall_chance_sd"]]
                   for r in sorted(rows, key=lambda r: -int(r["support_test"]))])
        adir = run_dir / "atlas"
        for term in run.get("terms", []):
            wpath = adir / f"{slug(term)}_smoothed.bmap"
            if wpath.is_file():
                values = bmap.read_masked_vector(wpath, corpus.mask)
                _, _, cells, _ = bmap.read_bmap(adir / f"{slug(term)}_outline.bmap")
                write_pgm(sdir / f"{slug(term)}.pgm",
                          map_image(corpus.mask, values, corpus.mask.apply(cells)))
    elif command == "forward":
        fdir = run_dir / "forward"
        for term in run.get("terms", []):
            values = bmap.read_masked_vector(fdir / f"{slug(term)}_t.bmap", corpus.mask)
            _, _, cells, _ = bmap.read_bmap(fdir / f"{slug(term)}_outline.bmap")
            write_pgm(sdir / f"{slug(term)}.pgm", map_image(corpus.mask, values, corpus.mask.apply(cells)))
    else:
        raise IncompleteRunError(f"{run_dir}: unknown command {command!r} in run.json")
    return rdir
