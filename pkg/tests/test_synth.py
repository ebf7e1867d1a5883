import itertools
import json

import numpy as np
import pytest

from ontomap.corpus import Taxonomy, load_corpus, term_frequencies, validate_term_span
from ontomap.synth import (PlanError, SynthConfig, derive_seed, generate_corpus, make_ground_truth,
                           synthesize, write_synthetic)
from ontomap.volume import BrainMask

from conftest import SMALL


def test_ground_truth_is_deterministic():
    mask = BrainMask.ellipsoid((10, 10, 8))
    a = make_ground_truth(Taxonomy.default(), mask, SynthConfig(), 4)
    b = make_ground_truth(Taxonomy.default(), mask, SynthConfig(), 4)
    assert a.blobs == b.blobs
    assert all(np.array_equal(a.effect_maps[t], b.effect_maps[t]) for t in a.effect_maps)
    for t, eff in a.effect_maps.items():
        assert eff.any()
        assert 1 <= len(a.blobs[t]) <= 3


def test_zero_amplitude_gives_zero_effects():
    gt = make_ground_truth(Taxonomy.default(), BrainMask.ellipsoid((10, 10, 8)),
                           SynthConfig(effect_amplitude=0.0), 0)
    assert not any(e.any() for e in gt.effect_maps.values())


def test_no_overlap_gives_disjoint_supports():
    gt = make_ground_truth(Taxonomy.from_mapping({"a": ["x", "y"]}), BrainMask.ellipsoid((16, 16, 12)),
                           SynthConfig(allow_overlap=False), 3)
    assert not (gt.support("x") & gt.support("y")).any()


def test_mask_too_small_raises():
    with pytest.raises(PlanError):
        make_ground_truth(Taxonomy.default(), BrainMask.full((2, 2, 2)),
                          SynthConfig(allow_overlap=False), 0)


def test_noiseless_maps_are_sums_of_effects():
    cfg = SynthConfig(**dict(SMALL, noise_sigma=0.0, study_effect_amplitude=0.0))
    corpus, gt, _ = synthesize(cfg, seed=1)
    for i in range(corpus.n_maps):
        expected = sum(gt.effect_maps[t] for t in corpus.map_terms(i))
        np.testing.assert_allclose(corpus.data[i], expected, atol=1e-12)


def test_frequencies_and_span(small_synth):
    corpus, gt, ledger = small_synth
    assert term_frequencies(corpus) == gt.frequency_plan == ledger["frequency_plan"]
    span = validate_term_span(corpus)
    assert len(span) == 19 and all(s.usable for s in span.values())


def test_paper_default_shape():
    cfg = SynthConfig.paper_default()
    mask = BrainMask.ellipsoid(cfg.dims, cfg.voxel_size, cfg.mask_scale)
    gt = make_ground_truth(Taxonomy.default(), mask, cfg, 0)
    corpus, _, ledger = generate_corpus(gt, seed=0, config=cfg)
    assert len(corpus.studies) == 19
    assert corpus.n_maps == 3826
    assert len(corpus.taxonomy.terms) == 19
    assert ledger["n_subjects"] == 486 and ledger["n_conditions"] == 131
    assert 6000 <= mask.p <= 8000


def test_two_studies_still_satisfy_span():
    corpus, _, _ = synthesize(SynthConfig(**dict(SMALL, n_studies=2, subjects_per_study=3,
                                                 conditions_per_study=4)), seed=5)
    assert len(corpus.studies) == 2
    assert all(s.n_studies == 2 for s in validate_term_span(corpus).values())


def test_laboratories_alternate(small_synth):
    corpus = small_synth[0]
    labs = [s.laboratory for s in corpus.studies]
    assert len(set(labs)) == 2


def test_written_corpus_loads_back(tmp_path, small_synth):
    corpus, gt, ledger = small_synth
    manifest = write_synthetic(tmp_path, corpus, gt, ledger)
    back = load_corpus(manifest)
    assert back.n_maps == corpus.n_maps
    np.testing.assert_allclose(back.data, corpus.data, rtol=1e-6, atol=1e-6)
    led = json.loads((tmp_path / "ledger.json").read_text())
    assert led["frequency_plan"] == ledger["frequency_plan"]
    assert set(led["effect_files"]) == set(corpus.taxonomy.terms)


def test_confound_gap_grows_with_amplitude():
    from ontomap.evaluation import distance_diagnostics

    gaps = []
    for amp in (0.0, 1.0, 2.0):
        corpus = synthesize(SynthConfig(**dict(SMALL, study_effect_amplitude=amp)), seed=2)[0]
        d = distance_diagnostics(corpus)
        gaps.append(d.median("same-labels") - d.median("same-study"))
    assert gaps[0] < gaps[1] < gaps[2]


def test_derive_seed_is_stable():
    assert derive_seed(0, "perm", "visual") == derive_seed(0, "perm", "visual")
    assert derive_seed(0, "perm", "visual") != derive_seed(1, "perm", "visual")
    values = {derive_seed(0, k) for k in itertools.product("abc", repeat=2)}
    assert len(values) == 9
