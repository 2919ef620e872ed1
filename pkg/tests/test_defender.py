import math

import numpy as np
import pytest

from logitcorrect import attacks, defender, nn
from logitcorrect.defender import DefenderConfig, LogitsRecord


def small_cnn(seed=0):
    return nn.build_network("conv2d(1,4,3) relu maxpool2x2 dense(64,10)", 10, seed, (8, 8, 1))


def synthetic_records(n, c=5, seed=0, shift=3.0):
    """Clean logits peak at the label; adversarial ones add a fixed fingerprint."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, c, n)
    z = rng.normal(size=(n, c)).astype(np.float32)
    z[np.arange(n), y] += 4.0
    fingerprint = np.zeros(c, np.float32)
    fingerprint[0] = shift
    z_adv = z.copy()
    z_adv[np.arange(n), (y + 1) % c] += 12.0
    z_adv += fingerprint
    return [LogitsRecord(z[i], z_adv[i], int(y[i]), "pgd", i, True) for i in range(n)]


def test_record_validation():
    with pytest.raises(ValueError):
        LogitsRecord(np.zeros(3), np.zeros(4), 0, "pgd")
    with pytest.raises(ValueError):
        LogitsRecord(np.array([np.nan, 0]), np.zeros(2), 0, "pgd")


def test_eps_zero_pgd_records_are_clean():
    net = small_cnn()
    x = np.random.default_rng(0).random((7, 8, 8, 1)).astype(np.float32)
    y = nn.predict(nn.logits(net, x))
    recs, _, _ = defender.build_logits_dataset(net, attacks.AttackConfig("pgd", eps=0.0, alpha=0.01), x, y)
    assert len(recs) == 7 and [r.source for r in recs] == list(range(7))
    assert all(r.z.tobytes() == r.z_adv.tobytes() for r in recs)
    assert [r.label for r in recs] == y.tolist()


def test_successful_pgd_records_flip_argmax():
    net = small_cnn(1)
    x = np.random.default_rng(1).random((30, 8, 8, 1)).astype(np.float32)
    y = nn.predict(nn.logits(net, x))
    recs, _, _ = defender.build_logits_dataset(net, attacks.preset("desk-mnist", "pgd"), x, y)
    assert any(r.success for r in recs)
    for r in recs:
        assert int(np.argmax(r.z)) == r.label
        if r.success:
            assert int(np.argmax(r.z_adv)) != r.label


def test_clean_fraction_is_binomial():
    cfg = DefenderConfig(p_clean=0.3, batch_size=256)
    rng = np.random.default_rng(0)
    n, epochs = 4000, 10
    taken = sum(int(c.sum()) for _ in range(epochs) for _, c in defender.clean_mask_batches(n, cfg, rng))
    total = n * epochs
    sigma = math.sqrt(total * 0.3 * 0.7)
    assert abs(taken - 0.3 * total) < 3 * sigma


def test_every_example_seen_once_per_epoch():
    cfg = DefenderConfig(batch_size=7)
    idx = np.concatenate([i for i, _ in defender.clean_mask_batches(50, cfg, np.random.default_rng(1))])
    assert sorted(idx.tolist()) == list(range(50))


def test_training_is_seed_deterministic():
    recs = synthetic_records(100)
    cfg = DefenderConfig(hidden=16, epochs=3, batch_size=32, seed=5)
    a, b = defender.train_defender(recs, cfg), defender.train_defender(recs, cfg)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.params(), b.params()))


def test_defender_learns_fingerprinted_correction():
    recs = synthetic_records(600, seed=1)
    held = synthetic_records(300, seed=2)
    g = defender.train_defender(recs, DefenderConfig(hidden=64, epochs=300, lr=3e-3))
    rep = defender.evaluate_defense(g, held)
    assert rep.adv_no_defense.value < 0.05
    assert rep.adv_corrected.value > 0.9 and rep.clean_corrected.value > 0.9


def test_all_clean_training_preserves_argmax():
    recs = synthetic_records(600, seed=3)
    held = synthetic_records(300, seed=4)
    g = defender.train_defender(recs, DefenderConfig(hidden=64, epochs=40, lr=3e-3, p_clean=1.0))
    rep = defender.evaluate_defense(g, held, "clean")
    assert rep.clean_corrected.value >= 0.95 * rep.clean_no_defense.value
    assert rep.adv_corrected is None


def test_single_layer_arm_trains():
    recs = synthetic_records(200)
    g = defender.train_defender(recs, DefenderConfig(depth="single-layer", epochs=5))
    assert g.arch == "dense(5,5)"
    assert defender.evaluate_defense(g, recs).adv_corrected.total == 200


def test_one_record_loss_decreases():
    rec = synthetic_records(1)
    log = defender.DefenderLog()
    defender.train_defender(rec, DefenderConfig(hidden=1, epochs=10, batch_size=1, lr=1e-2, p_clean=0.0), log)
    losses = [r["loss"] for r in log.rows]
    assert losses[-1] < losses[0]


def test_correct_logits_shape_and_repeatability():
    g = nn.build_network(defender.defender_arch(5, DefenderConfig(hidden=8)), 5, 0, (5,))
    z = np.arange(5, dtype=np.float32)
    out = defender.correct_logits(g, z)
    assert out.shape == (5,) and np.isfinite(out).all()
    assert out.tobytes() == defender.correct_logits(g, z).tobytes()


def test_identity_defender_changes_nothing():
    recs = synthetic_records(50)
    rep = defender.evaluate_defense(defender.identity_defender(5), recs)
    assert rep.clean_corrected == rep.clean_no_defense
    assert rep.adv_corrected == rep.adv_no_defense


def test_transfer_matrix_diagonal_matches_evaluate():
    sets = {"pgd": synthetic_records(80, seed=5), "mim": synthetic_records(80, seed=6)}
    gs = {k: defender.train_defender(v, DefenderConfig(hidden=8, epochs=2)) for k, v in sets.items()}
    tm = defender.transfer_matrix(gs, sets)
    for k in sets:
        assert tm.get(k, k) == defender.evaluate_defense(gs[k], sets[k]).adv_corrected
    single = defender.transfer_matrix({"pgd": gs["pgd"]}, {"pgd": sets["pgd"]})
    assert single.table() == [[tm.get("pgd", "pgd")]]


def test_config_validation():
    with pytest.raises(ValueError):
        DefenderConfig(p_clean=1.5)
    with pytest.raises(ValueError):
        DefenderConfig(depth="three-layer")
    assert defender.PAPER_DEFENDER.hidden == 10_000 and defender.PAPER_DEFENDER.lr == 5e-5
