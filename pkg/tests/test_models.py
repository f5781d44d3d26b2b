import numpy as np
import pytest

from nodekd import autodiff as ad
from nodekd.autodiff import ShapeError, Tensor, finite_diff_check
from nodekd.checkpoint import (
    CorruptCheckpointError, KindMismatchError, ShapeTableError, VersionMismatchError, load_checkpoint,
    read_checkpoint, save_checkpoint,
)
from nodekd.models import (
    DEPTH_PRESETS, StudentNodeNet, TeacherNet, accuracy, init_he, norm_groups, predict, zero_residuals,
)
from nodekd.rng import stream

X = np.random.default_rng(1).random((2, 2, 4, 4))


def teacher(**kw):
    kw.setdefault("width", 4)
    kw.setdefault("blocks", 2)
    return init_he(TeacherNet((2, 4, 4), 3, **kw), np.random.default_rng(0))


def student(**kw):
    kw.setdefault("width", 4)
    return init_he(StudentNodeNet((2, 4, 4), 3, **kw), np.random.default_rng(0))


def test_norm_groups():
    assert norm_groups(64) == 32 and norm_groups(16) == 16 and norm_groups(48) == 24 and norm_groups(7) == 7


def test_depth_presets():
    assert DEPTH_PRESETS == {"tiny": 4, "small": 8, "medium": 14}
    assert TeacherNet.from_preset("small", input_shape=(1, 2, 2), num_classes=2).blocks == 8
    with pytest.raises(ValueError):
        TeacherNet.from_preset("huge", input_shape=(1, 2, 2), num_classes=2)


# init -----------------------------------------------------------------------------

def test_he_std_for_3x3_conv_with_16_inputs():
    m = init_he(TeacherNet((16, 8, 8), 2, width=16, blocks=1), np.random.default_rng(0))
    # fan_in = 9 * 16 = 144
    w = m.params["block0.conv1.weight"]
    assert w.shape == (16, 16, 3, 3)
    assert abs(w.std() - np.sqrt(2 / 144)) / np.sqrt(2 / 144) < 0.1


def test_he_empirical_std_large_tensor():
    m = init_he(StudentNodeNet((1, 1, 2), 2, width=100, stem="dense"), np.random.default_rng(3))
    w = m.params["odefunc.fc1.weight"]      # (101, 100): >= 10^4 elements
    assert w.size >= 10_000
    assert abs(w.std() - np.sqrt(2 / 101)) / np.sqrt(2 / 101) < 0.05


def test_he_biases_and_norms():
    m = teacher()
    for name, v in m.params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert np.all(v == 0)
        if name.endswith(".gamma"):
            assert np.all(v == 1)


# teacher --------------------------------------------------------------------------

def test_teacher_logit_shape():
    m = init_he(TeacherNet((3, 8, 8), 10, width=8, blocks=1), np.random.default_rng(0))
    assert m.forward(np.zeros((4, 3, 8, 8))).shape == (4, 10)


def test_teacher_zeroed_blocks_reduce_to_stem_and_head():
    m = zero_residuals(teacher())
    p = {k: Tensor(v) for k, v in m.params.items()}
    h = ad.relu(ad.group_norm(
        ad.conv2d(m._prepare_input(X), p["stem.weight"], padding=1) + ad.reshape(p["stem.bias"], (1, -1, 1, 1)),
        p["stem_norm.gamma"], p["stem_norm.beta"], norm_groups(4)))
    expected = ad.mean(h, axis=(2, 3)) @ p["fc.weight"] + p["fc.bias"]
    assert np.array_equal(m.forward(X).data, expected.data)


def test_teacher_golden_logits():
    expected = np.array([[-0.08883101160602036, 0.5338052051891294, 0.3598619131487842],
                         [-0.09081617575975386, 0.5168609130958017, 0.40397712697970567]])
    np.testing.assert_allclose(teacher().forward(X).data, expected, rtol=1e-12, atol=1e-14)


def test_teacher_rejects_wrong_input_shape():
    with pytest.raises(ShapeError):
        teacher().forward(np.zeros((2, 1, 4, 4)))


def test_teacher_gradient_fd():
    m = teacher(width=2, blocks=1)
    assert finite_diff_check(lambda p: ad.sum(m.forward(X, p) * m.forward(X, p)), dict(m.params),
                             rel_tol=1e-4).passed


# student --------------------------------------------------------------------------

def test_student_logit_shape_and_nfe():
    logits, nfe = student().forward(X)
    assert logits.shape == (2, 3) and nfe >= 7


def test_student_golden_logits():
    expected = np.array([[-0.3687009306711614, -0.1718715375012368, -0.1991088580738904],
                         [-0.19110040343409523, -0.1784512847752069, -0.24319301297440318]])
    logits, nfe = student().forward(X)
    np.testing.assert_allclose(logits.data, expected, rtol=1e-12, atol=1e-14)
    assert nfe == 25


@pytest.mark.parametrize("t1", [0.5, 1.0, 5.0])
def test_zero_dynamics_logits_independent_of_horizon(t1):
    m = student(t1=t1)
    for name in m.params:
        if name.startswith("odefunc.conv3"):
            m.params[name][:] = 0.0
    p = {k: Tensor(v) for k, v in m.params.items()}
    expected = m._head(m.stem_forward(X), p)
    np.testing.assert_allclose(m.forward(X)[0].data, expected.data, rtol=0, atol=1e-14)


def test_dense_student_shape():
    m = init_he(StudentNodeNet((1, 1, 2), 2, width=8, stem="dense"), np.random.default_rng(0))
    assert m.forward(np.random.default_rng(0).random((5, 1, 1, 2)))[0].shape == (5, 2)


@pytest.mark.parametrize("seed", range(3))
def test_unit_time_matches_long_horizon(seed):
    m = init_he(StudentNodeNet((2, 4, 4), 3, width=4, t1=100.0), stream(seed, "init"))
    x = stream(seed, "x").random((3, 2, 4, 4))
    long, _ = m.forward(x)
    unit, _ = m.forward(x, unit_time=True)
    assert np.max(np.abs(long.data - unit.data)) < 1e-2


def test_student_gradient_fd_fixed_step():
    m = init_he(StudentNodeNet((2, 4, 4), 2, width=2, solver="rk4", n_steps=2), np.random.default_rng(4))
    x = np.random.default_rng(5).random((2, 2, 4, 4))

    def loss(p):
        logits, _ = m.forward(x, p)
        return ad.sum(logits * logits)

    assert finite_diff_check(loss, dict(m.params), rel_tol=1e-3).passed


def test_nfe_longer_horizon_not_smaller():
    from nodekd.data import gen_synthetic
    from nodekd.distill import DistillConfig, train_plain
    ds = gen_synthetic("moons", 64, 0.1, seed=0)
    for seed in range(10):
        m = init_he(StudentNodeNet((1, 1, 2), 2, width=4, stem="dense"), stream(seed, "init"))
        m, _ = train_plain(m, ds, None, DistillConfig(epochs=1, batch_size=32, optimizer="adam", lr=1e-2, seed=seed))
        short = m.forward(ds.images)[1]
        long = StudentNodeNet(**{**m.hyperparameters(), "t1": 100.0}, params=m.params).forward(ds.images)[1]
        assert long >= short


def test_student_validation():
    with pytest.raises(ValueError):
        StudentNodeNet((1, 2, 2), 2, t1=0.0)
    with pytest.raises(ValueError):
        StudentNodeNet((1, 2, 2), 2, solver="midpoint")
    with pytest.raises(RuntimeError):
        StudentNodeNet((1, 2, 2), 2).forward(np.zeros((1, 1, 2, 2)))


def test_predict_and_accuracy():
    m = teacher()
    assert predict(m, X)[1] == 0
    labels = m.forward(X).data.argmax(1)
    assert accuracy(m, X, labels) == 1.0
    assert accuracy(m, X, (labels + 1) % 3) == 0.0


# checkpoints ----------------------------------------------------------------------

@pytest.mark.parametrize("factory", [teacher, student])
def test_checkpoint_round_trip(tmp_path, factory):
    m = factory()
    save_checkpoint(m, tmp_path / "m.nodk", {"epochs": 3, "seed": 7})
    back, meta = load_checkpoint(tmp_path / "m.nodk")
    assert type(back) is type(m) and back.hyperparameters() == m.hyperparameters()
    assert list(back.params) == list(m.params)
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    assert meta == {"epochs": 3, "seed": 7}
    assert np.array_equal(predict(back, X)[0].data, predict(m, X)[0].data)


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(teacher(), tmp_path / "m.nodk")
    blob = (tmp_path / "m.nodk").read_bytes()
    (tmp_path / "m.nodk").write_bytes(blob[:-10])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "m.nodk")


def test_checkpoint_bad_magic_and_version(tmp_path):
    save_checkpoint(teacher(), tmp_path / "m.nodk")
    blob = (tmp_path / "m.nodk").read_bytes()
    (tmp_path / "a").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "a")
    (tmp_path / "b").write_bytes(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "b")


def test_checkpoint_kind_mismatch(tmp_path):
    save_checkpoint(teacher(), tmp_path / "t.nodk")
    with pytest.raises(KindMismatchError):
        load_checkpoint(tmp_path / "t.nodk", expected_kind="student")


def test_checkpoint_shape_table_mismatch(tmp_path):
    m = teacher()
    m.params["fc.weight"] = np.zeros((5, 3))
    save_checkpoint(m, tmp_path / "m.nodk")
    with pytest.raises(ShapeTableError):
        load_checkpoint(tmp_path / "m.nodk")


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(student(), tmp_path / "s.nodk")
    blob = (tmp_path / "s.nodk").read_bytes()
    assert blob[:4] == b"NODK" and int.from_bytes(blob[4:8], "little") == 1
    meta, params = read_checkpoint(tmp_path / "s.nodk")
    assert meta["kind"] == "student" and meta["param_count"] == len(params)
    assert meta["arch.t1"] == 1.0
