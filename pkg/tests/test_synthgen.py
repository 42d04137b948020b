import numpy as np
import pytest

from afire_mind.errors import InvalidSpec
from afire_mind.metrics import pearson
from afire_mind.mind import MINDNetwork
from afire_mind.objective import mse_loss
from afire_mind.synthgen import (
    MODES,
    generate,
    learned_prior,
    oracle_ceiling,
    read_teacher,
    recovery_score,
    write_dataset,
)

SMALL = dict(d=4, o=6, n_experts=3, n_subjects=3, n_episodes=2, n_tr=120)


def test_noiseless_teacher_is_exact():
    ds = generate(**SMALL, sigma=0.0, seed=1)
    for ep in ds.episodes:
        np.testing.assert_array_equal(ep.responses, ep.clean)
        np.testing.assert_array_equal(ds.teacher.predict(ep.tokens, ep.subject_id), ep.clean)
    np.testing.assert_allclose(oracle_ceiling(ds), 1.0, atol=1e-12)


def test_ceiling_matches_snr_formula():
    ds = generate(**dict(SMALL, n_tr=2000), sigma=0.8, seed=2)
    clean = np.concatenate([ep.clean for ep in ds.episodes])
    expected = np.sqrt(clean.var(0) / (clean.var(0) + 0.8**2))
    np.testing.assert_allclose(oracle_ceiling(ds), expected, atol=0.03)


def test_ceiling_limits_and_target():
    noisy = generate(**dict(SMALL, n_tr=2000), sigma=1e4, seed=3)
    assert np.abs(oracle_ceiling(noisy)).mean() < 0.05
    ds = generate(**dict(SMALL, n_tr=500), target_ceiling=0.6, seed=3)
    assert abs(oracle_ceiling(ds).mean() - 0.6) < 0.03


def test_same_seed_bit_identical():
    a, b = generate(**SMALL, seed=5), generate(**SMALL, seed=5)
    for x, y in zip(a.episodes, b.episodes):
        np.testing.assert_array_equal(x.tokens, y.tokens)
        np.testing.assert_array_equal(x.responses, y.responses)
    c = generate(**SMALL, seed=6)
    assert not np.array_equal(a.episodes[0].tokens, c.episodes[0].tokens)


def test_invalid_spec():
    with pytest.raises(InvalidSpec):
        generate(**SMALL, mode="nope")
    with pytest.raises(InvalidSpec):
        generate(**SMALL, sigma=-1.0)
    with pytest.raises(InvalidSpec):
        generate(**dict(SMALL, n_tr=0))


@pytest.mark.parametrize("mode", MODES)
def test_mixtures_are_distributions(mode):
    ds = generate(**SMALL, mode=mode, seed=7)
    m = ds.teacher.mixtures
    np.testing.assert_allclose(m.sum(1), 1.0, atol=1e-12)
    assert np.all(m >= 0)
    if mode == "disjoint":
        np.testing.assert_allclose(m.max(1), 1.0, atol=1e-12)
        assert list(m.argmax(1)) == [s % 3 for s in range(3)]
    if mode == "shared":
        np.testing.assert_array_equal(m, np.broadcast_to(m[0], m.shape))
        assert np.sum(m[0] > 1e-9) == 2


def test_ar_tokens_are_correlated():
    ds = generate(**dict(SMALL, n_tr=2000), ar_coef=0.9, seed=8)
    z = ds.episodes[0].tokens[:, 0]
    assert abs(pearson(z[1:], z[:-1]) - 0.9) < 0.05
    assert abs(z.var() - 1.0) < 0.3


def test_disjoint_realizable_by_student():
    ds = generate(**SMALL, mode="disjoint", sigma=0.0, seed=9)
    t = ds.teacher.net
    student = MINDNetwork.from_config(dict(t.config(), w_max=100))
    student.store.load_from(t.store)
    for ep in ds.episodes:
        n = ep.tokens.shape[0]
        pred, _, _ = student.forward(ep.tokens, np.zeros(n, dtype=int), np.full(n, ep.subject_id))
        assert mse_loss(pred, ep.responses)[0] < 1e-20


@pytest.mark.parametrize("mode", ["shared", "disjoint"])
def test_recovery_score_of_teacher_is_one(mode):
    ds = generate(**SMALL, mode=mode, seed=10)
    assert recovery_score(ds.teacher.net, ds) > 1 - 1e-9


def test_recovery_score_uniform_prior_is_zero():
    ds = generate(**SMALL, mode="disjoint", seed=11)
    student = MINDNetwork(4, 4, 8, 6, 3, 2, 3, use_afire=False, seed=0)
    np.testing.assert_allclose(learned_prior(student), 1 / 3)
    assert abs(recovery_score(student, ds)) < 1e-9


def test_write_and_read_teacher(tmp_path):
    ds = generate(**SMALL, mode="disjoint", seed=12)
    write_dataset(ds, tmp_path)
    teacher, meta = read_teacher(tmp_path)
    np.testing.assert_array_equal(teacher.mixtures, ds.teacher.mixtures)
    assert meta["spec"]["mode"] == "disjoint"
    for key in ds.teacher.net.store:
        np.testing.assert_array_equal(teacher.net.store[key], ds.teacher.net.store[key])
