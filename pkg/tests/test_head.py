import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from landmark_retrieval.config import ArcFaceParams, TrainConfig
from landmark_retrieval.exceptions import (
    BatchTooSmallError,
    DimMismatchError,
    FormatError,
    InvalidTargetError,
)
from landmark_retrieval.head import (
    Batch,
    Checkpoint,
    LossConfig,
    MetricHead,
    MetricLearningHead,
    TraceRow,
    TrainingSet,
    _batches,
    arcface_logits,
    backward,
    cosine_logits,
    dual_stream_loss,
    format_trace,
    head_forward,
    imprint_classifier,
    load_checkpoint,
    loss_and_grads,
    poly_lr,
    save_checkpoint,
    softmax_ce,
    steps_per_epoch,
    train_two_stage,
)

PARAMS = ("projection", "bn_gamma", "bn_beta", "classifier")


def random_head(rng, in_dim=8, dim=8):
    head = MetricHead.initialize(in_dim, dim, seed=int(rng.integers(2**31)))
    head.bn_gamma = rng.uniform(0.5, 1.5, dim)
    head.bn_beta = rng.normal(0, 0.3, dim)
    return head


def small_problem(seed, mix, kind, scale=30.0):
    rng = np.random.default_rng(seed)
    head = random_head(rng)
    W = rng.normal(size=(4, 8))
    batch = Batch(rng.normal(size=(4, 8)), rng.integers(0, 4, size=4))
    if mix:
        batch.x_mix = rng.normal(size=(4, 8))
        batch.y_b = rng.integers(0, 4, size=4)
    return head, W, batch


def param_ref(head, W, name):
    return W if name == "classifier" else getattr(head, name)


def max_fd_error(head, W, batch, cfg, h=1e-5):
    grads = backward(batch, head, W, cfg)
    worst = 0.0
    for name in PARAMS:
        p = param_ref(head, W, name)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = loss_and_grads(batch, head, W, cfg, need_grad=False)[0].total
            p[idx] = orig - h
            down = loss_and_grads(batch, head, W, cfg, need_grad=False)[0].total
            p[idx] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(grads[name][idx] - fd) / max(1.0, abs(fd)))
    return worst


@pytest.mark.parametrize("kind", ["softmax", "cosine", "arcface"])
@pytest.mark.parametrize("mix", [False, True])
def test_gradients_match_finite_differences(kind, mix):
    cfg = LossConfig(kind, ArcFaceParams())
    for seed in range(20):
        head, W, batch = small_problem(seed, mix, kind)
        assert max_fd_error(head, W, batch, cfg) <= 1e-4, seed


@pytest.mark.parametrize("variant", [dict(mix_margin=False), dict(joint_bn=True), dict(joint_bn=True, mix_margin=False)])
def test_gradient_variants(variant):
    cfg = LossConfig("arcface", ArcFaceParams(), **variant)
    for seed in range(5):
        head, W, batch = small_problem(100 + seed, True, "arcface")
        assert max_fd_error(head, W, batch, cfg) <= 1e-4


def test_doubled_scale_doubles_logits_and_grads_still_check():
    rng = np.random.default_rng(3)
    E = rng.normal(size=(5, 8))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    W = rng.normal(size=(4, 8))
    t = rng.integers(0, 4, size=5)
    a = arcface_logits(E, W, t, ArcFaceParams(scale=30))
    b = arcface_logits(E, W, t, ArcFaceParams(scale=60))
    np.testing.assert_allclose(b, 2 * a, rtol=1e-14)
    head, W, batch = small_problem(4, True, "arcface")
    assert max_fd_error(head, W, batch, LossConfig("arcface", ArcFaceParams(scale=60))) <= 1e-4


def test_zero_gradient_fixed_point():
    head = MetricHead.initialize(3, 5, seed=0)
    head.bn_beta = np.linspace(0.1, 0.5, 5)
    x = np.tile([0.2, -0.4, 1.0], (4, 1))
    W = np.tile(np.random.default_rng(0).normal(size=5), (4, 1))
    for kind in ("softmax", "arcface"):
        grads = backward(Batch(x, np.arange(4)), head, W, LossConfig(kind, ArcFaceParams(margin=0.0)))
        assert np.abs(grads["classifier"]).max() <= 1e-10


def straight_line_forward(X, P, gamma, beta, mean, var, eps):
    out = []
    for x in X:
        y = []
        for j in range(P.shape[1]):
            z = sum(x[i] * P[i, j] for i in range(P.shape[0]))
            y.append(gamma[j] * (z - mean[j]) / math.sqrt(var[j] + eps) + beta[j])
        n = math.sqrt(sum(v * v for v in y))
        out.append([v / n for v in y])
    return np.array(out)


def test_head_forward_examples():
    head = MetricHead(np.eye(4), np.ones(4), np.zeros(4), np.zeros(4), np.ones(4))
    x = np.array([[1.0, 2.0, -2.0, 4.0]])
    np.testing.assert_allclose(head_forward(x, head), x / np.linalg.norm(x), atol=1e-12)

    rng = np.random.default_rng(5)
    head = random_head(rng, 6, 5)
    head.bn_running_mean = rng.normal(size=5)
    head.bn_running_var = rng.uniform(0.5, 2, size=5)
    X = rng.normal(size=(8, 6))
    expected = straight_line_forward(
        X, head.projection, head.bn_gamma, head.bn_beta, head.bn_running_mean, head.bn_running_var, head.bn_epsilon
    )
    np.testing.assert_allclose(head_forward(X, head, "eval"), expected, atol=1e-12)
    batch_mean = (X @ head.projection).mean(axis=0)
    batch_var = (X @ head.projection).var(axis=0)
    expected = straight_line_forward(X, head.projection, head.bn_gamma, head.bn_beta, batch_mean, batch_var, head.bn_epsilon)
    before = head.bn_running_mean.copy()
    np.testing.assert_allclose(head_forward(X, head, "train"), expected, atol=1e-12)
    np.testing.assert_allclose(head.bn_running_mean, 0.9 * before + 0.1 * batch_mean)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10), st.sampled_from(["train", "eval"]))
def test_head_outputs_unit_norm(seed, n, mode):
    rng = np.random.default_rng(seed)
    head = random_head(rng, 5, 7)
    E = head_forward(rng.normal(size=(n, 5)), head, mode)
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-6)


def test_head_forward_errors():
    head = MetricHead.initialize(3, 4)
    with pytest.raises(BatchTooSmallError):
        head_forward(np.ones((1, 3)), head, "train")
    with pytest.raises(DimMismatchError):
        head_forward(np.ones((2, 5)), head)
    with pytest.raises(ValueError):
        head_forward(np.ones((2, 3)), head, "test")


def test_cosine_logits_examples():
    rng = np.random.default_rng(6)
    W = rng.normal(size=(3, 4))
    emb = W[1] / np.linalg.norm(W[1])
    assert cosine_logits(emb, W)[1] == pytest.approx(1.0)
    W2 = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    np.testing.assert_array_equal(cosine_logits([0, 0, 1.0], W2), [0, 0])
    e = rng.normal(size=4)
    e /= np.linalg.norm(e)
    expected = [sum(e[i] * W[k, i] for i in range(4)) / math.sqrt(sum(W[k, i] ** 2 for i in range(4))) for k in range(3)]
    np.testing.assert_allclose(cosine_logits(e, W), expected, atol=1e-12)


def test_arcface_examples():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(5, 6))
    e = rng.normal(size=6)
    e /= np.linalg.norm(e)
    np.testing.assert_array_equal(arcface_logits(e, W, 2, ArcFaceParams(margin=0.0)), 30 * cosine_logits(e, W))
    aligned = W[3] / np.linalg.norm(W[3])
    logit = arcface_logits(aligned, W, 3, ArcFaceParams(margin=0.3, scale=30))[3]
    assert abs(logit - 30 * math.cos(0.3)) <= 1e-4
    assert abs(logit - 28.6600946) <= 1e-4


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.floats(0.01, 1.5))
def test_margin_lowers_target_logit(seed, margin):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, 5))
    e = rng.normal(size=5)
    e /= np.linalg.norm(e)
    t = int(rng.integers(4))
    theta = math.acos(cosine_logits(e, W)[t])
    with_m = arcface_logits(e, W, t, ArcFaceParams(margin=margin))
    without = arcface_logits(e, W, t, ArcFaceParams(margin=0.0))
    if theta + margin < math.pi:
        assert with_m[t] < without[t]
    np.testing.assert_array_equal(np.delete(with_m, t), np.delete(without, t))


@given(st.integers(0, 10_000), st.floats(0.5, 100), st.floats(0.5, 100))
def test_scale_keeps_argmax(seed, s1, s2):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(6, 5))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    W = rng.normal(size=(4, 5))
    t = np.zeros(6, dtype=int)
    a = arcface_logits(E, W, t, ArcFaceParams(margin=0.0, scale=s1))
    b = arcface_logits(E, W, t, ArcFaceParams(margin=0.0, scale=s2))
    np.testing.assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))


def test_arcface_target_checks():
    W = np.eye(3)
    with pytest.raises(InvalidTargetError):
        arcface_logits([1.0, 0, 0], W, 3)
    with pytest.raises(InvalidTargetError):
        arcface_logits(np.eye(3), W, [0, 1])


def test_softmax_ce_examples():
    for K in (2, 5, 100):
        assert softmax_ce(np.zeros(K), 1) == pytest.approx(math.log(K), abs=1e-12)
    assert softmax_ce([50.0, 0.0, 0.0], 0) < 1e-20
    rng = np.random.default_rng(8)
    z = rng.normal(size=5) * 3
    direct = -math.log(math.exp(z[2]) / sum(math.exp(v) for v in z))
    assert abs(softmax_ce(z, 2) - direct) <= 1e-12
    with pytest.raises(InvalidTargetError):
        softmax_ce(z, 5)


@given(st.integers(0, 10_000))
def test_ce_non_negative(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 6)) * rng.uniform(0.1, 100)
    assert np.all(softmax_ce(z, rng.integers(0, 6, size=4)) >= 0)


def test_dual_stream_examples():
    rng = np.random.default_rng(9)
    base = rng.normal(size=(3, 5))
    mix = rng.normal(size=(3, 5))
    y = np.array([0, 4, 2])
    total, l_base, l_mix = dual_stream_loss(base, mix, y, y)
    assert l_mix == float(np.mean(softmax_ce(mix, y)))
    assert total == l_base + l_mix

    _, _, l_uni = dual_stream_loss(base, np.zeros((3, 5)), y, np.array([1, 1, 3]))
    assert l_uni == pytest.approx(math.log(5), abs=1e-12)

    yb = np.array([1, 0, 3])
    expected_mix = []
    expected_base = []
    for i in range(3):
        def ce(z, t):
            return -math.log(math.exp(z[t]) / sum(math.exp(v) for v in z))
        expected_base.append(ce(base[i], y[i]))
        expected_mix.append(0.5 * ce(mix[i], y[i]) + 0.5 * ce(mix[i], yb[i]))
    total, l_base, l_mix = dual_stream_loss(base, mix, y, yb)
    assert abs(l_base - np.mean(expected_base)) <= 1e-12
    assert abs(l_mix - np.mean(expected_mix)) <= 1e-12
    assert abs(total - l_base - l_mix) == 0.0

    total, l_base, l_mix = dual_stream_loss(base, base, y, y)
    assert total == pytest.approx(2 * l_base, rel=1e-15)


def test_loss_parts_match_independent_forward():
    head, W, batch = small_problem(11, True, "arcface")
    cfg = LossConfig("arcface", ArcFaceParams())
    parts = loss_and_grads(batch, head, W, cfg, need_grad=False)[0]

    def embed(X):
        Z = X @ head.projection
        Y = head.bn_gamma * (Z - Z.mean(0)) / np.sqrt(Z.var(0) + head.bn_epsilon) + head.bn_beta
        return Y / np.linalg.norm(Y, axis=1, keepdims=True)

    Eb, Em = embed(batch.x_base), embed(batch.x_mix)
    lb = arcface_logits(Eb, W, batch.y_a)
    mix_pair = (arcface_logits(Em, W, batch.y_a), arcface_logits(Em, W, batch.y_b))
    total, l_base, l_mix = dual_stream_loss(lb, mix_pair, batch.y_a, batch.y_b)
    assert parts.total == pytest.approx(total, rel=1e-12)
    assert parts.base == pytest.approx(l_base, rel=1e-12)
    assert parts.mix == pytest.approx(l_mix, rel=1e-12)


def test_poly_lr():
    assert poly_lr(0, 0.01, 100) == 0.01
    assert poly_lr(100, 0.01, 100) == 0.0
    assert poly_lr(50, 0.01, 100, power=1.0) == pytest.approx(0.005)
    assert poly_lr(25, 0.1, 100, 0.9) == pytest.approx(0.1 * 0.75**0.9)
    with pytest.raises(ValueError):
        poly_lr(101, 0.01, 100)


def test_batches_fold_singleton_tail():
    rng = np.random.default_rng(0)
    batches = _batches(65, 32, rng)
    sizes = [len(b) for b in batches]
    assert sizes == [32, 33]
    assert sorted(np.concatenate(batches).tolist()) == list(range(65))
    assert steps_per_epoch(65, 32) == len(sizes)
    assert steps_per_epoch(66, 32) == 3
    assert steps_per_epoch(5, 32) == 1
    with pytest.raises(BatchTooSmallError):
        steps_per_epoch(1, 32)


def test_training_set_alignment():
    X = np.zeros((4, 3))
    with pytest.raises(DimMismatchError):
        TrainingSet(X, np.zeros(4, int), 2, np.zeros((3, 3)), np.zeros(3, int))
    ts = TrainingSet(X, np.zeros(4, int), 2, np.zeros((4, 3)), np.zeros(4, int))
    assert ts.mix_features.shape == (1, 4, 3)


def test_format_trace_columns():
    rows = [TraceRow(0, 1, 0.01, 2.0, None, 2.0)]
    assert format_trace(rows).splitlines() == ["step,lr,L_base,L_total", "0,0.01,2.0,2.0"]
    rows = [TraceRow(0, 2, 0.01, 2.0, 1.5, 3.5)]
    assert format_trace(rows).splitlines() == ["step,lr,L_base,L_mix,L_total", "0,0.01,2.0,1.5,3.5"]


def test_imprint_classifier_rows_are_class_means():
    rng = np.random.default_rng(1)
    E = rng.normal(size=(9, 4))
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    W = imprint_classifier(E, labels, 4)
    for c in range(3):
        m = E[labels == c].mean(axis=0)
        np.testing.assert_allclose(W[c], m / np.linalg.norm(m))
    assert np.linalg.norm(W[3]) < 0.2


def blobs3(seed=0, n=30):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(3, 6)) * 2
    y = np.repeat(np.arange(3), n)
    return means[y] + 0.1 * rng.normal(size=(len(y), 6)), y


def test_train_two_stage_deterministic():
    X, y = blobs3()
    cfg = TrainConfig(embed_dim=8, stage1_epochs=2, stage2_epochs=2, batch_size=16)
    a = train_two_stage(TrainingSet(X, y, 3), TrainingSet(X, y, 3), cfg)
    b = train_two_stage(TrainingSet(X, y, 3), TrainingSet(X, y, 3), cfg)
    assert format_trace(a[3]) == format_trace(b[3])
    np.testing.assert_array_equal(a[0].projection, b[0].projection)
    assert [r.stage for r in a[3]] == [1] * 12 + [2] * 12
    assert [r.step for r in a[3]] == list(range(24))


def test_train_two_stage_with_mix_records_l_mix():
    X, y = blobs3()
    yb = (y + 1) % 3
    cfg = TrainConfig(embed_dim=8, stage1_epochs=1, stage2_epochs=1, batch_size=16)
    _, _, _, trace = train_two_stage(TrainingSet(X, y, 3), TrainingSet(X, y, 3, X[::-1], yb), cfg, cutmix=True)
    assert all(r.mix is None for r in trace if r.stage == 1)
    assert all(r.mix is not None and r.total == r.base + r.mix for r in trace if r.stage == 2)
    assert format_trace(trace).splitlines()[0] == "step,lr,L_base,L_mix,L_total"
    with pytest.raises(ValueError):
        train_two_stage(TrainingSet(X, y, 3), TrainingSet(X, y, 3), cfg, cutmix=True)


def test_estimator_api():
    X, y = blobs3(1)
    labels = np.array([10, 20, 30])[y]
    est = MetricLearningHead(embed_dim=8, stage1_epochs=3, stage2_epochs=2, batch_size=16)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.transform(X)
    est.fit(X, labels)
    assert est.loss_kind_ == "softmax"
    assert est.transform(X).shape == (len(X), 8)
    assert set(est.predict(X)) <= {10, 20, 30}
    assert np.mean(est.predict(X) == labels) > 0.9
    est.finetune(X, labels, X[::-1], labels[::-1])
    assert est.loss_kind_ == "arcface"
    assert np.all(np.abs(est.decision_function(X)) <= 1)
    with pytest.raises(InvalidTargetError):
        est.finetune(X, labels, X, np.full(len(X), 99))


def test_from_config_round_trip():
    cfg = TrainConfig(embed_dim=16, lr0=0.2, seed=5)
    est = MetricLearningHead.from_config(cfg, ArcFaceParams(margin=0.2, scale=10))
    assert est._train_config() == cfg.model_copy(update={"cutmix": False})
    assert (est.margin, est.scale, est.random_state) == (0.2, 10, 5)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    head = random_head(rng, 5, 4)
    ckpt = Checkpoint(head, rng.normal(size=(3, 4)), np.array([7, 8, 9]), 2, ArcFaceParams(margin=0.25, scale=12))
    path = tmp_path / "h.bin"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert path.read_bytes()[:4] == b"HEAD"
    for name in ("projection", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
        np.testing.assert_array_equal(getattr(back.head, name), getattr(head, name))
    np.testing.assert_array_equal(back.classifier, ckpt.classifier)
    np.testing.assert_array_equal(back.classes, ckpt.classes)
    assert back.stage == 2 and back.arcface == ckpt.arcface
    save_checkpoint(tmp_path / "h2.bin", back)
    assert (tmp_path / "h2.bin").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("mangle", [lambda d: d[:10], lambda d: b"XXXX" + d[4:], lambda d: d[:-1], lambda d: d + b"\0"])
def test_checkpoint_rejects_bad_files(tmp_path, mangle):
    head = MetricHead.initialize(3, 2)
    path = tmp_path / "h.bin"
    save_checkpoint(path, Checkpoint(head, np.ones((2, 2)), np.arange(2), 1))
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(FormatError):
        load_checkpoint(path)
