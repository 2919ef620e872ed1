import numpy as np
import pytest

from logitcorrect import classifier, nn


def onehot_identity_net(c=10):
    return nn.Network((nn.Dense(np.eye(c, dtype=np.float32), np.zeros(c, np.float32)),), c)


def onehot_data(labels, c=10):
    labels = np.asarray(labels)
    return classifier.Dataset(np.eye(c, dtype=np.float32)[labels], labels, c)


def perceptron_separates(x, y, epochs=100):
    """Independent separability check: a perceptron reaching zero mistakes."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    s = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(xb.shape[1])
    for _ in range(epochs):
        wrong = 0
        for xi, si in zip(xb, s):
            if si * (xi @ w) <= 0:
                w += si * xi
                wrong += 1
        if not wrong:
            return True
    return False


def test_separable_toy_set_mlp():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (200, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0.1).astype(np.int64)
    keep = np.abs(x[:, 0] + 0.5 * x[:, 1] - 0.1) > 0.05  # margin
    x, y = x[keep], y[keep]
    assert perceptron_separates(x, y)
    # images must live in [0, 1]; an affine map keeps the set separable
    imgs = ((x + 1) / 2).astype(np.float32).reshape(-1, 1, 2, 1)
    data = classifier.Dataset(imgs, y, num_classes=2)
    net = classifier.train_classifier(
        data, classifier.ClassifierSpec(arch="mlp-2h", widths=(16, 16), epochs=60, batch_size=16, lr=1e-2))
    assert classifier.evaluate_accuracy(net, data).value >= 0.99


def test_zero_epochs_gives_chance_level():
    rng = np.random.default_rng(1)
    data = classifier.Dataset(rng.random((1000, 4, 4, 1)).astype(np.float32), np.arange(1000) % 10)
    net = classifier.train_classifier(data, classifier.ClassifierSpec(arch="mlp-2h", epochs=0))
    assert abs(classifier.evaluate_accuracy(net, data).value - 0.1) < 0.05


def test_training_is_seed_deterministic():
    rng = np.random.default_rng(2)
    data = classifier.Dataset(rng.random((64, 4, 4, 1)).astype(np.float32), np.arange(64) % 10)
    spec = classifier.ClassifierSpec(arch="cnn-small", widths=(2, 3, 8), epochs=2, batch_size=16, seed=4)
    a = classifier.train_classifier(data, spec)
    b = classifier.train_classifier(data, spec)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.params(), b.params()))


def test_predict_logits_onehot():
    net = onehot_identity_net()
    e3 = np.eye(10, dtype=np.float32)[3]
    assert np.array_equal(classifier.predict_logits(net, e3), e3)


def test_predict_logits_repeatable_and_equal_to_forward():
    net = nn.build_network("conv2d(1,2,3) relu maxpool2x2 dense(8,10)", 10, seed=3, input_shape=(4, 4, 1))
    img = np.random.default_rng(0).random((4, 4, 1)).astype(np.float32)
    a = classifier.predict_logits(net, img)
    assert a.tobytes() == classifier.predict_logits(net, img).tobytes()
    assert a.tobytes() == nn.forward(net, img[None]).activations[-1][0].tobytes()


def test_predict_logits_rejects_out_of_range_pixels():
    with pytest.raises(ValueError):
        classifier.predict_logits(onehot_identity_net(), np.full(10, 1.5, np.float32))


def test_accuracy_counts():
    net = onehot_identity_net()
    assert classifier.evaluate_accuracy(net, onehot_data(range(10))).value == 1.0
    wrong = classifier.Dataset(np.eye(10, dtype=np.float32), (np.arange(10) + 1) % 10)
    assert classifier.evaluate_accuracy(net, wrong).value == 0.0
    mixed = classifier.Dataset(np.eye(10, dtype=np.float32)[:4], [0, 1, 2, 0])
    acc = classifier.evaluate_accuracy(net, mixed)
    assert (acc.correct, acc.total, acc.value) == (3, 4, 0.75)


def test_select_one_per_class():
    data = onehot_data(np.tile(np.arange(10), 3))
    subset, manifest = classifier.select_correct_subset(onehot_identity_net(), data, 1)
    assert len(subset) == 10 and sorted(subset.labels.tolist()) == list(range(10))
    assert manifest["indices"] == list(range(10)) and manifest["missing_classes"] == []


def test_select_reports_missing_class():
    labels = np.tile(np.arange(10), 2)
    imgs = np.eye(10, dtype=np.float32)[labels]
    imgs[labels == 3] = np.eye(10, dtype=np.float32)[4]  # every 3 now looks like a 4
    data = classifier.Dataset(imgs, labels)
    subset, manifest = classifier.select_correct_subset(onehot_identity_net(), data, 5)
    assert 3 not in subset.labels and manifest["missing_classes"] == [3]
    assert classifier.evaluate_accuracy(onehot_identity_net(), subset).value == 1.0


def test_dataset_validation():
    with pytest.raises(ValueError):
        classifier.Dataset(np.zeros((2, 2, 2, 1)), [0])
    with pytest.raises(ValueError):
        classifier.Dataset(np.zeros((1, 2, 2, 1)), [10])
    with pytest.raises(ValueError):
        classifier.LabeledExample(np.full((2, 2, 1), -0.1), 0)


def test_mnist_cnn_reaches_97_percent(data_dir):
    from logitcorrect.experiment import load_split
    train, test = load_split(data_dir, "train"), load_split(data_dir, "test")
    net = classifier.train_classifier(train, classifier.ClassifierSpec(epochs=5))
    assert classifier.evaluate_accuracy(net, test).value >= 0.97
