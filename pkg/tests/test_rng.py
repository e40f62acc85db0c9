import numpy as np

from survey_conformal.rng import derive_seed, id_hashes, keyed_uniforms, string_hash


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, "u", 3) == derive_seed(1, "u", 3)
    seeds = {derive_seed(0, "u", r) for r in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(1, 2) != derive_seed(2, 1)


def test_keyed_uniforms_depend_only_on_key():
    keys = id_hashes([f"r{i}" for i in range(500)])
    u = keyed_uniforms(7, keys)
    assert np.all((u >= 0) & (u < 1))
    perm = np.random.default_rng(0).permutation(500)
    assert np.array_equal(keyed_uniforms(7, keys[perm]), u[perm])
    assert not np.array_equal(keyed_uniforms(8, keys), u)
    assert not np.array_equal(keyed_uniforms(7, keys, counter=1), u)


def test_keyed_uniforms_look_uniform():
    u = keyed_uniforms(3, id_hashes([str(i) for i in range(20000)]))
    hist = np.histogram(u, bins=10, range=(0, 1))[0]
    assert abs(u.mean() - 0.5) < 0.01 and hist.min() > 1800


def test_string_hash_matches_vector_form():
    ids = ["a", "b", "respondent-17"]
    assert id_hashes(ids).tolist() == [string_hash(s) for s in ids]
