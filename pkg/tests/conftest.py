import numpy as np
import pytest

from ontomap.corpus import Condition, Corpus, MapRecord, Study, Taxonomy
from ontomap.synth import SynthConfig, synthesize
from ontomap.volume import BrainMask


def make_corpus(conditions_by_study, data=None, p=4, labs=None, taxonomy=None, seed=0):
    """One map per (study, condition); conditions given as term lists."""
    taxonomy = taxonomy or Taxonomy.default()
    mask = BrainMask.full((p, 1, 1))
    studies, records = [], []
    for s, conds in enumerate(conditions_by_study):
        sid = f"s{s}"
        cs = tuple(Condition(f"c{k}", frozenset(terms)) for k, terms in enumerate(conds))
        studies.append(Study(sid, labs[s] if labs else sid, ("sub1",), cs))
        records += [MapRecord(sid, "sub1", c.id) for c in cs]
    if data is None:
        data = np.random.default_rng(seed).normal(size=(len(records), p))
    return Corpus(taxonomy, mask, tuple(studies), tuple(records), data)


SMALL = dict(dims=(10, 10, 8), n_studies=4, subjects_per_study=(4, 3, 4, 3),
             conditions_per_study=(5, 4, 5, 4), n_laboratories=2)


@pytest.fixture(scope="session")
def small_synth():
    """(corpus, ground truth, ledger) for a four-study corpus on a small grid."""
    return synthesize(SynthConfig(**SMALL), seed=11)


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory, small_synth):
    from ontomap.synth import write_synthetic

    out = tmp_path_factory.mktemp("corpus")
    return write_synthetic(out, *small_synth)


ACCEPTANCE: dict = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance criterion's outcome, then assert it."""

    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
