"""Ontology taxonomy, study/condition/map data model and design matrices."""

from __future__ import annotations

import json
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import bmap
from .volume import BrainMask, MaskedVector, VolumeGrid

logger = logging.getLogger(__name__)

TABLE1 = OrderedDict([
    ("stimulus modality", ["visual", "auditory"]),
    ("explicit stimulus", ["words", "shapes", "digits", "abstract patterns",
                           "non-vocal sounds", "scramble", "face"]),
    ("instructions", ["attend", "read", "move", "track", "count", "discriminate", "inhibit"]),
    ("overt response", ["saccades", "none", "button press"]),
])

INTERCEPT = "intercept"


class CorpusError(ValueError):
    """Invalid corpus content; ``entity`` names the offending id."""

    def __init__(self, message: str, entity: str | None = None):
        super().__init__(message)
        self.entity = entity


@dataclass(frozen=True)
class Taxonomy:
    categories: tuple[str, ...]
    terms_by_category: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        cats = tuple(self.categories)
        tbc = OrderedDict((c, tuple(self.terms_by_category[c])) for c in cats)
        if set(self.terms_by_category) != set(cats):
            raise CorpusError("terms_by_category keys must match categories")
        seen = set()
        for cat, terms in tbc.items():
            if not terms:
                raise CorpusError(f"category {cat!r} has no terms", cat)
            for t in terms:
                if t in seen:
                    raise CorpusError(f"term {t!r} appears in more than one category", t)
                seen.add(t)
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "terms_by_category", tbc)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[str]]) -> "Taxonomy":
        return cls(tuple(mapping), {k: tuple(v) for k, v in mapping.items()})

    @classmethod
    def default(cls) -> "Taxonomy":
        return cls.from_mapping(TABLE1)

    @property
    def terms(self) -> tuple[str, ...]:
        return tuple(t for c in self.categories for t in self.terms_by_category[c])

    def category_of(self, term: str) -> str:
        for cat in self.categories:
            if term in self.terms_by_category[cat]:
                return cat
        raise CorpusError(f"unknown term {term!r}", term)

    def to_dict(self) -> dict:
        return {c: list(self.terms_by_category[c]) for c in self.categories}


@dataclass(frozen=True)
class Condition:
    id: str
    terms: frozenset

    def __post_init__(self):
        object.__setattr__(self, "terms", frozenset(self.terms))


@dataclass(frozen=True)
class Study:
    id: str
    laboratory: str
    subject_ids: tuple[str, ...]
    conditions: tuple[Condition, ...]

    def __post_init__(self):
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        ids = [c.id for c in self.conditions]
        dup = [k for k, v in Counter(ids).items() if v > 1]
        if dup:
            raise CorpusError(f"study {self.id!r}: duplicate condition id {dup[0]!r}", self.id)

    def condition(self, cid: str) -> Condition:
        for c in self.conditions:
            if c.id == cid:
                return c
        raise KeyError(cid)


@dataclass(frozen=True)
class MapRecord:
    study: str
    subject: str
    condition: str

    @property
    def id(self) -> str:
        return f"{self.study}/{self.subject}/{self.condition}"


@dataclass(frozen=True, eq=False)
class Corpus:
    """A validated collection of annotated activation maps.

    ``data`` holds one row per map (``n x p``), aligned with ``records``.
    """

    taxonomy: Taxonomy
    mask: BrainMask
    studies: tuple[Study, ...]
    records: tuple[MapRecord, ...]
    data: np.ndarray
    strict: bool = False
    _study_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))
        object.__setattr__(self, "records", tuple(self.records))
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            data = data.reshape(len(self.records), -1)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        index = {}
        for s in self.studies:
            if s.id in index:
                raise CorpusError(f"duplicate study id {s.id!r}", s.id)
            index[s.id] = s
        object.__setattr__(self, "_study_index", index)
        self._validate()

    def _validate(self):
        terms = set(self.taxonomy.terms)
        for s in self.studies:
            for c in s.conditions:
                if not c.terms:
                    raise CorpusError(f"condition {s.id}/{c.id} has no terms", f"{s.id}/{c.id}")
                bad = sorted(c.terms - terms)
                if bad:
                    raise CorpusError(
                        f"condition {s.id}/{c.id} uses unknown term {bad[0]!r}", f"{s.id}/{c.id}")
                if self.strict:
                    per_cat = Counter(self.taxonomy.category_of(t) for t in c.terms)
                    over = [k for k, v in per_cat.items() if v > 1]
                    if over:
                        raise CorpusError(
                            f"condition {s.id}/{c.id} has several terms in category {over[0]!r}",
                            f"{s.id}/{c.id}")
        if self.data.shape != (len(self.records), self.mask.p):
            raise CorpusError(
                f"map data shape {self.data.shape} does not match "
                f"({len(self.records)}, p={self.mask.p})")
        seen = set()
        for r in self.records:
            s = self._study_index.get(r.study)
            if s is None:
                raise CorpusError(f"map {r.id} references unknown study {r.study!r}", r.id)
            if r.subject not in s.subject_ids:
                raise CorpusError(f"map {r.id} references unknown subject {r.subject!r}", r.id)
            try:
                s.condition(r.condition)
            except KeyError:
                raise CorpusError(
                    f"map {r.id} references unknown condition {r.condition!r}", r.id) from None
            if r.id in seen:
                raise CorpusError(f"duplicate map {r.id}", r.id)
            seen.add(r.id)
        if not np.all(np.isfinite(self.data)):
            bad = int(np.flatnonzero(~np.isfinite(self.data).all(axis=1))[0])
            raise CorpusError(f"map {self.records[bad].id} has non-finite values",
                              self.records[bad].id)

    @property
    def n_maps(self) -> int:
        return len(self.records)

    def study(self, sid: str) -> Study:
        return self._study_index[sid]

    def map_terms(self, i: int) -> frozenset:
        r = self.records[i]
        return self._study_index[r.study].condition(r.condition).terms

    def map_vector(self, i: int) -> MaskedVector:
        return MaskedVector(self.mask, self.data[i])

    @cached_property
    def labels(self) -> np.ndarray:
        """Boolean ``n x n_terms`` occurrence matrix in taxonomy term order."""
        terms = self.taxonomy.terms
        col = {t: j for j, t in enumerate(terms)}
        out = np.zeros((self.n_maps, len(terms)), dtype=bool)
        for i in range(self.n_maps):
            for t in self.map_terms(i):
                out[i, col[t]] = True
        out.setflags(write=False)
        return out

    def term_labels(self, term: str) -> np.ndarray:
        return self.labels[:, self.taxonomy.terms.index(term)]

    @cached_property
    def map_studies(self) -> np.ndarray:
        return np.array([r.study for r in self.records], dtype=object)

    @cached_property
    def map_laboratories(self) -> np.ndarray:
        return np.array([self._study_index[r.study].laboratory for r in self.records], dtype=object)


def load_corpus(manifest_path, strict: bool = False) -> Corpus:
    """Load and validate a corpus from a JSON manifest.

    Paths inside the manifest are resolved relative to the manifest file.
    """
    manifest_path = Path(manifest_path)
    try:
        spec = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    try:
        taxonomy = Taxonomy.from_mapping(spec["taxonomy"])
        grid_spec = spec["grid"]
        grid = VolumeGrid(tuple(grid_spec["dims"]), tuple(grid_spec.get("voxel_size_mm", (1, 1, 1))))
        mask_path = root / spec["mask_file"]
        study_specs = spec["studies"]
        map_specs = spec["maps"]
    except KeyError as exc:
        raise CorpusError(f"manifest {manifest_path} missing field {exc}") from exc
    if not mask_path.exists():
        raise CorpusError(f"mask file {mask_path} does not exist", str(mask_path))
    mask = bmap.read_mask(mask_path, grid.voxel_size)
    if mask.grid.dims != grid.dims:
        raise CorpusError(f"mask grid {mask.grid.dims} does not match manifest grid {grid.dims}")

    studies = []
    for s in study_specs:
        conds = tuple(Condition(c["id"], frozenset(c["terms"])) for c in s["conditions"])
        studies.append(Study(s["id"], s.get("laboratory", s["id"]), tuple(s["subjects"]), conds))

    records = []
    data = np.empty((len(map_specs), mask.p))
    for i, m in enumerate(map_specs):
        rec = MapRecord(m["study"], m["subject"], m["condition"])
        path = root / m["file"]
        if not path.exists():
            raise CorpusError(f"map {rec.id}: file {path} does not exist", rec.id)
        try:
            data[i] = bmap.read_masked_vector(path, mask)
        except bmap.BmapError as exc:
            raise CorpusError(f"map {rec.id}: {exc}", rec.id) from exc
        records.append(rec)
    return Corpus(taxonomy, mask, tuple(studies), tuple(records), data, strict=strict)


def manifest_dict(corpus: Corpus, mask_file: str, map_files: Sequence[str]) -> dict:
    return {
        "taxonomy": corpus.taxonomy.to_dict(),
        "grid": {"dims": list(corpus.mask.grid.dims),
                 "voxel_size_mm": list(corpus.mask.grid.voxel_size)},
        "mask_file": mask_file,
        "studies": [
            {"id": s.id, "laboratory": s.laboratory, "subjects": list(s.subject_ids),
             "conditions": [{"id": c.id, "terms": [t for t in corpus.taxonomy.terms if t in c.terms]}
                            for c in s.conditions]}
            for s in corpus.studies
        ],
        "maps": [{"file": f, "study": r.study, "subject": r.subject, "condition": r.condition}
                 for f, r in zip(map_files, corpus.records)],
    }


def save_corpus(corpus: Corpus, directory, mask_name: str = "mask.bmap") -> Path:
    """Write manifest.json, the mask and one BMAP1 masked vector per map."""
    directory = Path(directory)
    (directory / "maps").mkdir(parents=True, exist_ok=True)
    bmap.write_mask(directory / mask_name, corpus.mask)
    files = []
    for i in range(corpus.n_maps):
        rel = f"maps/map_{i:05d}.bmap"
        bmap.write_masked_vector(directory / rel, corpus.mask, corpus.data[i], mask_name)
        files.append(rel)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest_dict(corpus, mask_name, files), indent=1) + "\n")
    return path


@dataclass(frozen=True)
class TermSpan:
    term: str
    n_studies: int
    usable: bool


def validate_term_span(corpus: Corpus, map_indices: Iterable[int] | None = None,
                       min_studies: int = 2) -> dict[str, TermSpan]:
    """Count distinct studies per term and flag terms below ``min_studies``.

    Without ``map_indices`` the count runs over study conditions; with it,
    only over the studies of the given maps (e.g. a training fold).
    Terms that never occur are absent from the report.
    """
    studies_of: dict[str, set] = {}
    if map_indices is None:
        for s in corpus.studies:
            for c in s.conditions:
                for t in c.terms:
                    studies_of.setdefault(t, set()).add(s.id)
    else:
        for i in map_indices:
            sid = corpus.records[i].study
            for t in corpus.map_terms(i):
                studies_of.setdefault(t, set()).add(sid)
    report = {}
    for t in corpus.taxonomy.terms:
        if t in studies_of:
            k = len(studies_of[t])
            report[t] = TermSpan(t, k, k >= min_studies)
    return report


@dataclass(frozen=True)
class DesignMatrix:
    columns: tuple[str, ...]
    Y: np.ndarray
    intercept_included: bool
    categories: tuple = ()
    excluded: tuple = ()

    @property
    def n_rows(self) -> int:
        return self.Y.shape[0]

    @property
    def term_columns(self) -> tuple[str, ...]:
        return self.columns[:-1] if self.intercept_included else self.columns

    def column(self, name: str) -> int:
        return self.columns.index(name)


def build_design_matrix(corpus: Corpus, excluded_terms: Iterable[str] = (),
                        intercept: bool = True) -> DesignMatrix:
    """Binary map-by-term occurrence matrix, optional intercept appended last."""
    excluded = set(excluded_terms)
    unknown = sorted(excluded - set(corpus.taxonomy.terms))
    if unknown:
        raise CorpusError(f"cannot exclude unknown term {unknown[0]!r}", unknown[0])
    terms = [t for t in corpus.taxonomy.terms if t not in excluded]
    if not terms:
        raise CorpusError("excluding every term leaves an empty design")
    idx = [corpus.taxonomy.terms.index(t) for t in terms]
    Y = corpus.labels[:, idx].astype(np.float64)
    cats = [corpus.taxonomy.category_of(t) for t in terms]
    if intercept:
        Y = np.column_stack([Y, np.ones(corpus.n_maps)])
        terms.append(INTERCEPT)
        cats.append(None)
    return DesignMatrix(tuple(terms), Y, intercept, tuple(cats),
                        tuple(t for t in corpus.taxonomy.terms if t in excluded))


def term_frequencies(corpus: Corpus) -> dict[str, int]:
    """Number of maps whose condition carries each term, in taxonomy order."""
    counts = corpus.labels.sum(axis=0)
    return {t: int(c) for t, c in zip(corpus.taxonomy.terms, counts)}

