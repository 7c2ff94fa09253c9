import numpy as np
import pytest

from conftest import synthetic_dataset
from qfi.checkpoint import save_checkpoint
from qfi.faults import FaultSite, count_vulnerable_bits
from qfi.layers import build_ccdf
from qfi.train import TrainConfig, cross_entropy, evaluate, init_parameters, train

PROTECT32 = frozenset({FaultSite.B32, FaultSite.O32})


def tiny_cfg(**kw):
    base = dict(epochs=1, batch_size=64, learning_rate=0.05, momentum=0.9, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# ---- cross entropy ----------------------------------------------------------


def test_uniform_logits_loss_is_ln10():
    logits = np.zeros((4, 10), dtype=np.float32)
    labels = np.array([0, 3, 7, 9])
    loss, _ = cross_entropy(logits, labels)
    assert loss == pytest.approx(np.log(10.0), abs=1e-12)


def test_dominant_logit_loss_goes_to_zero():
    logits = np.zeros((1, 10), dtype=np.float32)
    logits[0, 4] = 50.0
    loss, _ = cross_entropy(logits, np.array([4]))
    assert loss < 1e-9


def test_cross_entropy_gradient_matches_central_differences():
    rng = np.random.default_rng(12)
    # float64 probes so the +/-h step is exact; the loss math is float64
    logits = rng.normal(0, 2, (3, 10))
    labels = np.array([2, 5, 9])
    _, grad = cross_entropy(logits, labels)
    h = 1e-4
    for i in range(3):
        for j in range(10):
            up = logits.copy()
            up[i, j] += h
            down = logits.copy()
            down[i, j] -= h
            fd = (cross_entropy(up, labels)[0] - cross_entropy(down, labels)[0]) / (2 * h)
            assert abs(grad[i, j] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 10), dtype=np.float32), np.array([10]))


# ---- training ---------------------------------------------------------------


def train_bytes(tmp_path, name, cfg, n=256):
    model = build_ccdf()
    ckpt = train(model, synthetic_dataset(n, seed=1), cfg, log_every=0)
    path = tmp_path / name
    save_checkpoint(ckpt, path)
    return path.read_bytes(), ckpt


def test_fixed_seed_gives_byte_identical_checkpoints(tmp_path):
    b1, _ = train_bytes(tmp_path, "a.ckpt", tiny_cfg())
    b2, _ = train_bytes(tmp_path, "b.ckpt", tiny_cfg())
    assert b1 == b2


def test_fat_with_zero_faults_is_conventional_training(tmp_path):
    b1, _ = train_bytes(tmp_path, "conv.ckpt", tiny_cfg())
    b2, _ = train_bytes(
        tmp_path, "fat0.ckpt", tiny_cfg(faults_per_forward=0, protected_sites=PROTECT32)
    )
    # protected_sites echo differs in metadata only; parameters must match
    from qfi.checkpoint import load_checkpoint

    c1 = load_checkpoint(tmp_path / "conv.ckpt")
    c2 = load_checkpoint(tmp_path / "fat0.ckpt")
    for (n1, a1), (n2, a2) in zip(c1.model.parameters(), c2.model.parameters()):
        assert n1 == n2 and np.array_equal(a1, a2)


def test_fat_training_keeps_scales_finite(tmp_path):
    cfg = tiny_cfg(epochs=2, faults_per_forward=8, protected_sites=PROTECT32)
    _, ckpt = train_bytes(tmp_path, "fat.ckpt", cfg)
    for tag, obs in ckpt.model.observers():
        assert np.isfinite(obs.ema_absmax), tag
        assert obs.ema_absmax > 0, tag


def test_fat_differs_from_conventional(tmp_path):
    b1, _ = train_bytes(tmp_path, "c.ckpt", tiny_cfg(epochs=2))
    b2, _ = train_bytes(
        tmp_path, "f.ckpt", tiny_cfg(epochs=2, faults_per_forward=8, protected_sites=PROTECT32)
    )
    assert b1 != b2


def test_fat_needs_a_calibration_epoch():
    model = build_ccdf()
    cfg = tiny_cfg(epochs=1, faults_per_forward=8, protected_sites=PROTECT32)
    with pytest.raises(ValueError, match="calibration epoch"):
        train(model, synthetic_dataset(64), cfg, log_every=0)


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_divergence_aborts_with_diagnostic():
    model = build_ccdf()
    cfg = tiny_cfg(learning_rate=1e38)
    with pytest.raises(RuntimeError, match="diverged"):
        train(model, synthetic_dataset(256, seed=1), cfg, log_every=0)


def test_progress_lines_format(capsys):
    import re

    train(build_ccdf(), synthetic_dataset(128, seed=1), tiny_cfg(), log_every=1)
    lines = [l for l in capsys.readouterr().out.splitlines() if l]
    assert len(lines) == 2  # two batches of 64
    for line in lines:
        assert re.fullmatch(r"\d+,\d+,\d+\.\d{6},0\.\d{4}", line), line


def test_too_many_training_faults_rejected():
    model = build_ccdf()
    budget = count_vulnerable_bits(model, model.input_shape).restricted(PROTECT32)
    cfg = tiny_cfg(epochs=2, faults_per_forward=budget.total + 1, protected_sites=PROTECT32)
    with pytest.raises(ValueError, match="exceed"):
        train(model, synthetic_dataset(64), cfg, log_every=0)


# ---- evaluation -------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    model = build_ccdf()
    ckpt = train(
        model,
        synthetic_dataset(512, seed=2),
        TrainConfig(epochs=2, seed=5),
        test_dataset=synthetic_dataset(128, seed=9),
        log_every=0,
    )
    return ckpt


def test_eval_zero_faults_equals_recorded_baseline(trained):
    test_set = synthetic_dataset(128, seed=9)
    acc = evaluate(trained.model, test_set, n_faults=0)
    assert acc == trained.metadata["final_test_acc"]
    assert acc > 0.9  # the synthetic task is trivially separable


def test_eval_threads_do_not_change_results(trained):
    test_set = synthetic_dataset(300, seed=11)
    kw = dict(n_faults=24, master_seed=7, repeat=1)
    a1 = evaluate(trained.model, test_set, threads=1, **kw)
    a4 = evaluate(trained.model, test_set, threads=4, **kw)
    assert a1 == a4


def test_eval_repeat_changes_results(trained):
    test_set = synthetic_dataset(300, seed=11)
    a0 = evaluate(trained.model, test_set, n_faults=64, master_seed=7, repeat=0)
    a1 = evaluate(trained.model, test_set, n_faults=64, master_seed=7, repeat=1)
    assert a0 != a1  # different repeats draw different plans


def test_eval_too_many_faults_rejected(trained):
    test_set = synthetic_dataset(16, seed=1)
    budget = count_vulnerable_bits(trained.model, trained.model.input_shape)
    with pytest.raises(ValueError, match="exceed"):
        evaluate(trained.model, test_set, n_faults=budget.total + 1)


def test_saturation_at_full_population_on_random_weights():
    model = build_ccdf()
    init_parameters(model, 123)
    # calibrate from a quick training-mode pass, then freeze
    ds = synthetic_dataset(64, seed=4)
    from qfi.faults import EMPTY_PLAN, stream

    model.forward_train(ds.images, EMPTY_PLAN, dropout_rng=stream(0, "dropout", 0, 0))
    model.freeze()
    budget = count_vulnerable_bits(model, model.input_shape)
    # 60 samples keeps the full-population draws affordable; ~10% +/- noise
    acc = evaluate(model, synthetic_dataset(60, seed=8), n_faults=budget.total, master_seed=0)
    assert 0.0 <= acc <= 0.30



def test_protected_sites_excluded_from_eval_population(trained):
    test_set = synthetic_dataset(200, seed=13)
    # with everything but B32 protected, plans only hit bias bits
    protect = frozenset(FaultSite) - {FaultSite.B32}
    acc = evaluate(
        trained.model, test_set, n_faults=4, protected_sites=protect, master_seed=3
    )
    assert 0.0 <= acc <= 1.0
