"""Forward-inference runs: GLM fit, per-term contrasts and outline masks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import bmap
from .corpus import Corpus, build_design_matrix
from .glm import ContrastResult, GlmFit, fit_glm, term_contrast
from .reverse import slug, write_csv
from .volume import outline_mask

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("term", "threshold", "n_significant", "alpha", "dof", "max_abs_t")


@dataclass(eq=False)
class ForwardResult:
    fit: GlmFit
    contrasts: dict[str, ContrastResult]
    outlines: dict[str, np.ndarray] = field(default_factory=dict)


def _finite_for_ranking(t: np.ndarray) -> np.ndarray:
    """Replace infinite t values by a finite value beyond every finite one."""
    finite = np.isfinite(t)
    big = 2.0 * float(np.abs(t[finite]).max()) + 1.0 if finite.any() else 1.0
    return np.nan_to_num(t, nan=0.0, posinf=big, neginf=-big)


def run_forward(corpus: Corpus, exclude: Iterable[str] = (), alpha: float = 0.05,
                contrast: str = "indicator", sigma_map: float = 2.0,
                fraction: float = 0.05, outline_order: str = "smooth-then-threshold") -> ForwardResult:
    """Fit the GLM on every map and test each remaining term.

    Raises ``CollinearDesignError`` (listing the column groups to exclude)
    when the design is rank deficient.
    """
    design = build_design_matrix(corpus, exclude)
    fit = fit_glm(corpus.data, design)
    contrasts, outlines = {}, {}
    for term in design.term_columns:
        res = term_contrast(fit, term, alpha, contrast)
        contrasts[term] = res
        outlines[term] = outline_mask(corpus.mask, _finite_for_ranking(res.t_values), sigma_map,
                                      fraction, outline_order)
    return ForwardResult(fit, contrasts, outlines)


def write_forward_outputs(result: ForwardResult, corpus: Corpus, out_dir, config: dict,
                          extra: dict | None = None) -> Path:
    """t, p and significance volumes per term, outlines and ``summary.csv``."""
    out = Path(out_dir)
    fdir = out / "forward"
    fdir.mkdir(parents=True, exist_ok=True)
    bmap.write_mask(fdir / "mask.bmap", corpus.mask)
    rows = []
    for term, res in result.contrasts.items():
        s = slug(term)
        t_store = _finite_for_ranking(res.t_values)
        bmap.write_masked_vector(fdir / f"{s}_t.bmap", corpus.mask, t_store, "mask.bmap")
        bmap.write_masked_vector(fdir / f"{s}_p.bmap", corpus.mask, res.p_values, "mask.bmap")
        bmap.write_cells(fdir / f"{s}_significant.bmap", corpus.mask.unmask(res.significant) > 0)
        bmap.write_cells(fdir / f"{s}_outline.bmap", corpus.mask.unmask(result.outlines[term]) > 0)
        rows.append({"term": term, "threshold": res.fwer_threshold, "n_significant": res.n_significant,
                     "alpha": res.alpha, "dof": result.fit.dof,
                     "max_abs_t": float(np.abs(res.t_values).max())})
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows)
    run = {"command": "forward", "config": config, "terms": list(result.contrasts)}
    run.update(extra or {})
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    return out
