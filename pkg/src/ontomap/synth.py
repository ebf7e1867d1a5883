"""Synthetic multi-study corpora with known ground truth.

Each map is the sum of the effect maps of its condition's terms, an additive
per-study offset map and spatially smoothed Gaussian noise::

    x = sum_{T in terms} effect_T + study_effect + noise
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bmap
from .corpus import Condition, Corpus, MapRecord, Study, Taxonomy, save_corpus
from .volume import BrainMask, smooth_data, smoothing_gain

logger = logging.getLogger(__name__)

# 19 studies: 486 subjects, 131 conditions, 3829 subject x condition maps
DEFAULT_SUBJECTS = (33, 39, 14, 40, 28, 31, 34, 23, 44, 14, 21, 25, 35, 25, 17, 14, 15, 15, 19)
DEFAULT_CONDITIONS = (9, 10, 3, 11, 7, 9, 10, 6, 11, 3, 5, 7, 10, 7, 5, 3, 4, 5, 6)
DEFAULT_N_MAPS = 3826


class PlanError(ValueError):
    """The requested layout cannot satisfy the frequency plan; ``term`` names the culprit."""

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary identifiers."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple = (24, 24, 18)
    voxel_size: tuple = (3.0, 3.0, 3.0)
    mask_scale: float = 1.1
    n_studies: int = 19
    subjects_per_study: tuple | None = None
    conditions_per_study: tuple | None = None
    n_maps: int | None = None
    n_laboratories: int = 2
    noise_sigma: float = 1.0
    noise_smoothing: float = 1.0
    effect_amplitude: float = 1.0
    blob_sigma: float = 1.5
    blob_truncate: float = 2.0
    blobs_per_term: tuple = (1, 3)
    allow_overlap: bool = True
    study_effect_amplitude: float = 1.0
    study_effect_smoothing: float = 4.0
    interaction_amplitude: float = 0.0
    zipf_exponent: float = 2.0
    both_modalities_prob: float = 0.07
    empty_category_prob: float = 0.1
    double_term_prob: float = 0.05
    digits_count_prob: float = 0.8
    # 3 keeps every term scorable under leave-one-study-out
    min_span: int = 3

    @classmethod
    def paper_default(cls, **overrides) -> "SynthConfig":
        base = dict(subjects_per_study=DEFAULT_SUBJECTS, conditions_per_study=DEFAULT_CONDITIONS,
                    n_maps=DEFAULT_N_MAPS)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class GroundTruth:
    mask: BrainMask
    taxonomy: Taxonomy
    effect_maps: dict
    blobs: dict
    noise_sigma: float
    study_effect_amplitude: float
    study_effects: dict = field(default_factory=dict)
    frequency_plan: dict = field(default_factory=dict)

    def support(self, term: str) -> np.ndarray:
        return self.effect_maps[term] != 0


def _blob(coords: np.ndarray, center: np.ndarray, sigma: float, radius: float) -> np.ndarray:
    r2 = ((coords - center) ** 2).sum(axis=1)
    out = np.exp(-0.5 * r2 / sigma ** 2)
    out[r2 > radius ** 2] = 0.0
    return out


def make_ground_truth(taxonomy: Taxonomy, mask: BrainMask, config: SynthConfig,
                      seed: int) -> GroundTruth:
    """Per-term effect maps made of 1-3 truncated Gaussian blobs.

    Blob centres are distinct in-mask voxels; with ``allow_overlap=False``
    blobs of different terms have disjoint supports.
    """
    rng = np.random.default_rng(derive_seed(seed, "ground-truth"))
    coords = mask.coords.astype(np.float64)
    radius = config.blob_truncate * config.blob_sigma
    lo, hi = config.blobs_per_term
    effects, blobs = {}, {}
    placed: list[tuple[np.ndarray, str]] = []
    for term in taxonomy.terms:
        n_blobs = int(rng.integers(lo, hi + 1))
        centers = []
        for _ in range(n_blobs):
            for _attempt in range(1000):
                c = coords[rng.integers(mask.p)]
                if any(np.array_equal(c, u) for u, _ in placed):
                    continue
                if not config.allow_overlap and any(
                        owner != term and np.sqrt(((c - u) ** 2).sum()) <= 2 * radius
                        for u, owner in placed):
                    continue
                break
            else:
                raise PlanError(f"mask too small to place {n_blobs} blobs for term {term!r}", term)
            centers.append(c)
            placed.append((c, term))
        eff = np.zeros(mask.p)
        for c in centers:
            eff += config.effect_amplitude * _blob(coords, c, config.blob_sigma, radius)
        effects[term] = eff
        blobs[term] = [[int(v) for v in c] for c in centers]
    return GroundTruth(mask, taxonomy, effects, blobs, config.noise_sigma,
                       config.study_effect_amplitude)


def _zipf(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def _fix_sum(values: np.ndarray, total: int, floor: int, rng) -> np.ndarray:
    v = values.copy()
    while v.sum() != total:
        i = int(rng.integers(v.size))
        if v.sum() < total:
            v[i] += 1
        elif v[i] > floor:
            v[i] -= 1
    return v


def _plan_terms(taxonomy: Taxonomy, n_cond: Sequence[int], config: SynthConfig, rng):
    """Term sets for every (study, condition)."""
    cats = taxonomy.categories
    weights = {c: _zipf(len(taxonomy.terms_by_category[c]), config.zipf_exponent) for c in cats}
    plan = []
    for s, nc in enumerate(n_cond):
        conds = []
        for _ in range(nc):
            terms = set()
            for ci, cat in enumerate(cats):
                names = taxonomy.terms_by_category[cat]
                if ci == 0:
                    k = 2 if (len(names) > 1 and rng.random() < config.both_modalities_prob) else 1
                else:
                    u = rng.random()
                    k = 0 if u < config.empty_category_prob else (
                        2 if u > 1 - config.double_term_prob and len(names) > 1 else 1)
                if k:
                    picks = rng.choice(len(names), size=k, replace=False, p=weights[cat])
                    terms.update(names[i] for i in sorted(picks))
            if "digits" in terms and "count" in taxonomy.terms and rng.random() < config.digits_count_prob:
                terms.add("count")
            conds.append(terms)
        plan.append(conds)

    # every term must occur in at least min_span studies (2 at minimum)
    n_studies = len(n_cond)
    span = max(2, min(config.min_span, n_studies))
    for term in taxonomy.terms:
        have = [s for s in range(n_studies) if any(term in c for c in plan[s])]
        if len(have) >= span:
            continue
        if n_studies < span:
            raise PlanError(f"term {term!r} cannot span {span} studies with only "
                            f"{n_studies} study", term)
        candidates = [s for s in range(n_studies) if s not in have]
        extra = rng.choice(candidates, size=span - len(have), replace=False)
        for s in sorted(int(v) for v in extra):
            c = int(rng.integers(len(plan[s])))
            plan[s][c].add(term)
    return plan


def generate_corpus(gt: GroundTruth, n_studies: int | None = None,
                    subjects_per_study=None, conditions_per_study=None,
                    seed: int = 0, config: SynthConfig | None = None):
    """Sample a corpus from ``gt``.

    Returns
    -------
    (Corpus, GroundTruth, dict)
        The corpus, the ground truth completed with study effects and the
        frequency plan, and a JSON-serializable ledger of sampled quantities.
    """
    config = config or SynthConfig()
    n_studies = config.n_studies if n_studies is None else n_studies
    subjects_per_study = subjects_per_study if subjects_per_study is not None else config.subjects_per_study
    conditions_per_study = (conditions_per_study if conditions_per_study is not None
                            else config.conditions_per_study)
    if n_studies < 1:
        raise PlanError("need at least one study")
    rng = np.random.default_rng(derive_seed(seed, "layout"))
    mask, tax = gt.mask, gt.taxonomy

    if subjects_per_study is None:
        subj = rng.integers(12, 40, n_studies)
    elif np.isscalar(subjects_per_study):
        subj = np.full(n_studies, int(subjects_per_study))
    else:
        subj = np.asarray(subjects_per_study, dtype=np.int64)
    if conditions_per_study is None:
        cond = rng.integers(3, 11, n_studies)
    elif np.isscalar(conditions_per_study):
        cond = np.full(n_studies, int(conditions_per_study))
    else:
        cond = np.asarray(conditions_per_study, dtype=np.int64)
    if subj.size != n_studies or cond.size != n_studies:
        raise PlanError("per-study subject/condition counts must have one entry per study")
    if (subj < 1).any() or (cond < 1).any():
        raise PlanError("every study needs at least one subject and one condition")

    term_plan = _plan_terms(tax, cond.tolist(), config, rng)

    studies, slots = [], []
    for s in range(n_studies):
        sid = f"study{s + 1:02d}"
        lab = f"lab{s % max(1, config.n_laboratories) + 1}"
        subjects = tuple(f"sub{j + 1:03d}" for j in range(subj[s]))
        conds = tuple(Condition(f"cond{c + 1:02d}", frozenset(term_plan[s][c]))
                      for c in range(cond[s]))
        studies.append(Study(sid, lab, subjects, conds))
        for sub in subjects:
            for c in conds:
                slots.append((s, sub, c.id))

    target = config.n_maps
    dropped = []
    if target is not None:
        if target > len(slots):
            raise PlanError(f"{target} maps requested but layout only has {len(slots)} slots")
        # drop surplus slots, never the last map of a (study, condition)
        per_cond: dict = {}
        for k, (s, _, c) in enumerate(slots):
            per_cond.setdefault((s, c), []).append(k)
        order = rng.permutation(len(slots))
        drop = set()
        for k in order:
            if len(drop) == len(slots) - target:
                break
            s, _, c = slots[k]
            if len(per_cond[(s, c)]) - sum(1 for j in per_cond[(s, c)] if j in drop) > 1:
                drop.add(int(k))
        dropped = [slots[k] for k in sorted(drop)]
        slots = [sl for k, sl in enumerate(slots) if k not in drop]

    records = tuple(MapRecord(studies[s].id, sub, c) for s, sub, c in slots)

    # ground-truth study effects and optional term x study interactions
    gain_study = smoothing_gain(mask, config.study_effect_smoothing)
    study_effects = {}
    for s, st in enumerate(studies):
        r = np.random.default_rng(derive_seed(seed, "study-effect", st.id))
        field_ = smooth_data(mask, r.standard_normal(mask.p), config.study_effect_smoothing) / gain_study
        study_effects[st.id] = gt.study_effect_amplitude * field_
    interaction = {}
    if config.interaction_amplitude:
        for st in studies:
            r = np.random.default_rng(derive_seed(seed, "interaction", st.id))
            interaction[st.id] = {t: float(1.0 + config.interaction_amplitude * r.standard_normal())
                                  for t in tax.terms}

    effect_matrix = np.vstack([gt.effect_maps[t] for t in tax.terms])
    study_pos = {st.id: k for k, st in enumerate(studies)}
    gain_noise = smoothing_gain(mask, config.noise_smoothing)
    data = np.empty((len(records), mask.p), dtype=np.float32)
    chunk = 256
    for start in range(0, len(records), chunk):
        recs = records[start: start + chunk]
        noise = np.vstack([
            np.random.default_rng(derive_seed(seed, "noise", r.id)).standard_normal(mask.p)
            for r in recs])
        if config.noise_sigma:
            noise = smooth_data(mask, noise, config.noise_smoothing) / gain_noise * config.noise_sigma
        else:
            noise[:] = 0.0
        for k, r in enumerate(recs):
            terms = studies[study_pos[r.study]].condition(r.condition).terms
            sig = np.zeros(mask.p)
            for t in terms:
                scale = interaction[r.study][t] if interaction else 1.0
                sig += scale * effect_matrix[tax.terms.index(t)]
            data[start + k] = sig + study_effects[r.study] + noise[k]

    corpus = Corpus(tax, mask, tuple(studies), records, data.astype(np.float64))
    plan = {t: 0 for t in tax.terms}
    for s, _, c in slots:
        for t in studies[s].condition(c).terms:
            plan[t] += 1
    gt = replace(gt, study_effects=study_effects, frequency_plan=plan)
    ledger = {
        "seed": seed,
        "config": config.to_dict(),
        "p": mask.p,
        "n_maps": len(records),
        "n_subjects": int(subj.sum()),
        "n_conditions": int(cond.sum()),
        "blobs": gt.blobs,
        "support_size": {t: int(np.count_nonzero(gt.effect_maps[t])) for t in tax.terms},
        "conditions": {st.id: {c.id: sorted(c.terms) for c in st.conditions} for st in studies},
        "laboratories": {st.id: st.laboratory for st in studies},
        "dropped_slots": [[studies[s].id, sub, c] for s, sub, c in dropped],
        "interaction": interaction,
        "frequency_plan": plan,
    }
    return corpus, gt, ledger


def synthesize(config: SynthConfig | None = None, seed: int = 0, taxonomy: Taxonomy | None = None):
    """Mask, ground truth and corpus in one call."""
    config = config or SynthConfig.paper_default()
    taxonomy = taxonomy or Taxonomy.default()
    mask = BrainMask.ellipsoid(config.dims, config.voxel_size, config.mask_scale)
    gt = make_ground_truth(taxonomy, mask, config, seed)
    return generate_corpus(gt, seed=seed, config=config)


def write_synthetic(out_dir, corpus: Corpus, gt: GroundTruth, ledger: dict) -> Path:
    """Manifest, BMAP1 volumes, ground-truth effect volumes and ledger.json."""
    out_dir = Path(out_dir)
    manifest = save_corpus(corpus, out_dir)
    gt_dir = out_dir / "ground_truth"
    gt_dir.mkdir(exist_ok=True)
    for k, t in enumerate(corpus.taxonomy.terms):
        bmap.write_masked_vector(gt_dir / f"effect_{k:02d}.bmap", corpus.mask, gt.effect_maps[t], "mask.bmap")
    for sid, v in gt.study_effects.items():
        bmap.write_masked_vector(gt_dir / f"study_{sid}.bmap", corpus.mask, v, "mask.bmap")
    led = dict(ledger)
    led["effect_files"] = {t: f"ground_truth/effect_{k:02d}.bmap"
                           for k, t in enumerate(corpus.taxonomy.terms)}
    (out_dir / "ledger.json").write_text(json.dumps(led, indent=1, sort_keys=True) + "\n")
    return manifest
