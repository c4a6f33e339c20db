import numpy as np
import pytest

from remoh_lab.synth import (
    DATA_CONFIGS,
    TAU,
    AttributeBasis,
    CompositionConfig,
    DatasetManifest,
    build_dataset,
    gen_identity,
    hard_negative,
    presence_audit,
    projections,
    render_clip,
)

from conftest import SMALL_DATA


def test_identity_determinism_and_norm():
    a, b = gen_identity(5), gen_identity(5)
    assert np.array_equal(a.pattern, b.pattern)
    assert abs(np.linalg.norm(a.pattern) - 1) < 1e-9


def test_distinct_identities_nearly_orthogonal():
    cos = [abs(gen_identity(2 * i).pattern @ gen_identity(2 * i + 1).pattern) for i in range(100)]
    assert np.mean(cos) < 0.2


def test_noiseless_single_identity_clip_is_the_pattern():
    sig = gen_identity(1, d=16)
    c = render_clip([sig], None, "anchor", sigma=0.0, seed=0, frames=4)
    for f in c.frames:
        cos = f @ sig.pattern / np.linalg.norm(f)
        assert abs(cos - 1) < 1e-12


def test_positive_profile_needs_identity():
    with pytest.raises(ValueError):
        render_clip([], None, "anchor", seed=0)


def test_hard_negative_band_and_threshold():
    sig = gen_identity(3, d=64)
    basis = AttributeBasis.generate(64, np.random.default_rng(0), protect=[sig.pattern])
    for s in range(50):
        c = hard_negative(sig, (0.7, 0.95), s, scenario="park", basis=basis)
        assert 0.7 <= c.attrs["cosine"] <= 0.95
        assert projections(c, sig.pattern).max() < TAU
    c = hard_negative(sig, (0.0, 0.0), 0)
    assert c.attrs["cosine"] == 0.0
    assert np.max(np.abs(projections(c, sig.pattern))) < 1e-12
    with pytest.raises(ValueError):
        hard_negative(sig, (0.9, 0.5), 0)
    with pytest.raises(ValueError):
        hard_negative(sig, (0.5, 1.0), 0)


def test_two_identity_clip_both_above_threshold(small_manifest):
    man = build_dataset(CompositionConfig(context_rich=1, high_fidelity=1, hard_negative=1, random_negative=1,
                                          two_entity=4, qa_per_clip=3), seed=2)
    pairs = [c for c in man.clips if len(c.identities) == 2]
    assert len(pairs) == 4
    for c in pairs:
        for n in c.identities:
            assert projections(c, man.concepts[n].pattern).min() > TAU


def test_presence_audit_default_dataset():
    man = build_dataset(seed=0)
    assert len(man.clips) >= 140
    assert presence_audit(man) == {"positive_violations": 0, "negative_violations": 0}


def test_determinism_and_byte_identical_files(tmp_path):
    a = build_dataset(SMALL_DATA, seed=9).write(tmp_path / "a")
    b = build_dataset(SMALL_DATA, seed=9).write(tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for f in sorted((tmp_path / "a" / "clips").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "clips" / f.name).read_bytes()
    c = build_dataset(SMALL_DATA, seed=10).write(tmp_path / "c")
    assert c.read_bytes() != a.read_bytes()


def test_manifest_round_trip(tmp_path, small_manifest):
    small_manifest.write(tmp_path)
    back = DatasetManifest.read(tmp_path)
    assert back.qa == small_manifest.qa
    assert [c.id for c in back.clips] == [c.id for c in small_manifest.clips]
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(back.clips, small_manifest.clips))
    assert back.concepts.keys() == small_manifest.concepts.keys()


def test_splits_disjoint_and_anchor_in_train(small_manifest):
    train = {c.id for c in small_manifest.clips if c.split == "train"}
    ev = {c.id for c in small_manifest.clips if c.split == "eval"}
    assert train and ev and not train & ev
    assert all(c.split == "train" for c in small_manifest.clips if c.stratum == "anchor")
    for q in small_manifest.qa:
        assert q.split == small_manifest.clip(q.clip_id).split


def test_qa_count_matches_composition():
    cfg = CompositionConfig()
    man = build_dataset(cfg, seed=0)
    per_concept = cfg.anchor + cfg.context_rich + cfg.high_fidelity + cfg.hard_negative + cfg.random_negative
    assert len(man.clips) == cfg.concepts * per_concept
    assert len(man.qa) == len(man.clips) * cfg.qa_per_clip


def test_strata_filters_reproduce_data_configs(small_manifest):
    for name, strata in DATA_CONFIGS.items():
        f = small_manifest.filter(strata)
        train_strata = {q.stratum for q in f.split("train")}
        assert train_strata == set(strata), name
        assert f.split("eval") == small_manifest.split("eval")
    with pytest.raises(ValueError):
        small_manifest.filter(["bogus"])
    pos = small_manifest.filter(("anchor", "context-rich", "high-fidelity"))
    assert all(q.polarity != "negative" for q in pos.split("train"))
