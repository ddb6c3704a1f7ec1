from collections import Counter

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from padensemble import train as train_mod
from padensemble.augment import JitterSpec, PaddingSpec, pad_to
from padensemble.corpus import ImageSample
from padensemble.model import BackboneSpec, EnsembleSpec, build_classifier, forward, images_to_tensor
from padensemble.synthetic import make_corpus
from padensemble.train import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    NonFiniteLossError,
    TrainConfig,
    TrainError,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    select_best,
    train_ensemble,
    train_member,
    write_training_log,
)

TINY = BackboneSpec("tiny_test_net", pretrained=False)


def tiny(seed=0):
    return build_classifier(TINY, 3, seed=seed)


def separable_set(n_per_class=4, size=8):
    values = {-1: 30, 0: 128, 1: 225}
    return [
        ImageSample(f"s{c}_{i}", np.full((size, size, 3), values[c] + 3 * i, dtype=np.uint8), c)
        for c in (-1, 0, 1)
        for i in range(n_per_class)
    ]


def sgd_trajectory(lr, momentum, p0, a, c, steps):
    p = torch.tensor([p0], dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([p], TrainConfig(learning_rate=lr, momentum=momentum))
    out = []
    for _ in range(steps):
        opt.zero_grad()
        (0.5 * a * (p - c) ** 2).sum().backward()
        opt.step()
        out.append(float(p.detach()))
    return out


def test_momentum_matches_recurrence():
    a, c, p, v = 3.0, -2.0, 1.0, 0.0
    expected = []
    for _ in range(10):
        g = a * (p - c)
        v = 0.9 * v + g
        p = p - 0.001 * v
        expected.append(p)
    got = sgd_trajectory(0.001, 0.9, 1.0, a, c, 10)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-9)


def test_tiny_gradients_match_finite_differences(rng):
    clf = tiny(2).double()
    batch = [ImageSample(str(i), rng.integers(0, 256, size=(9, 9, 3), dtype=np.uint8)) for i in range(4)]
    x = images_to_tensor(batch, TINY, torch.float64)
    y = torch.tensor([0, 1, 2, 1])
    loss = F.cross_entropy(clf(x), y)
    loss.backward()
    h = 1e-6
    for name, param in clf.named_parameters():
        flat, grad = param.data.view(-1), param.grad.view(-1)
        for idx in rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False):
            old = float(flat[idx])
            with torch.no_grad():
                flat[idx] = old + h
                up = float(F.cross_entropy(clf(x), y))
                flat[idx] = old - h
                down = float(F.cross_entropy(clf(x), y))
                flat[idx] = old
            fd = (up - down) / (2 * h)
            an = float(grad[idx])
            assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd), 1e-6), (name, idx, an, fd)


def test_select_best_earliest_minimum():
    assert select_best([0.9, 0.4, 0.4, 0.7]) == (2, 0.4)
    assert select_best([5.0]) == (1, 5.0)
    with pytest.raises(TrainError):
        select_best([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.5, 1.0]), min_size=1, max_size=30))
def test_select_best_brute_force(losses):
    m = min(losses)
    assert select_best(losses) == (losses.index(m) + 1, m)


def test_separable_set_is_fit():
    data = separable_set()
    cp = train_member(tiny(), data, [], TrainConfig(epochs=100, selection_mode="training_loss"))
    assert len(cp.history) == 100
    assert cp.history[-1].train_loss < cp.history[0].train_loss


def test_single_epoch_best_is_one():
    data = separable_set(2)
    cp = train_member(tiny(), data, data, TrainConfig(epochs=1))
    assert cp.best_epoch == 1
    assert cp.best_loss == cp.history[0].val_loss


def test_injected_loss_sequence_selects_weights_of_best_epoch():
    seq = [0.9, 0.4, 0.4, 0.7]
    snapshots = {}

    def evaluate(clf, epoch):
        snapshots[epoch] = {k: v.clone() for k, v in clf.state_dict().items()}
        return seq[epoch - 1]

    cp = train_member(tiny(), separable_set(2), [], TrainConfig(epochs=4), evaluate=evaluate)
    assert (cp.best_epoch, cp.best_loss) == (2, 0.4)
    for k, v in snapshots[2].items():
        np.testing.assert_array_equal(cp.parameters[k], v.numpy())


def test_checkpoint_equals_brute_force_min_of_history():
    data = separable_set(3)
    cp = train_member(tiny(), data[::2], data[1::2], TrainConfig(epochs=6))
    vals = [r.val_loss for r in cp.history]
    assert cp.best_loss == min(vals)
    assert cp.best_epoch == vals.index(min(vals)) + 1


def test_train_member_errors():
    with pytest.raises(TrainError, match="empty"):
        train_member(tiny(), [], [], TrainConfig(epochs=1))
    with pytest.raises(TrainError, match="validation"):
        train_member(tiny(), separable_set(1), [], TrainConfig(epochs=1))
    clf = tiny()
    with torch.no_grad():
        clf.head.bias[0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        train_member(clf, separable_set(1), [], TrainConfig(epochs=2, selection_mode="training_loss"))
    assert (info.value.epoch, info.value.batch) == (1, 0)


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(learning_rate=0), dict(momentum=1.0), dict(batch_size=0),
                dict(selection_mode="best"), dict(validation_fraction=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.learning_rate, cfg.momentum, cfg.batch_size) == (100, 0.001, 0.9, 8)


def _small_corpus():
    return make_corpus({-1: 8, 0: 4, 1: 3}, 6, 12, seed=3)


def test_train_ensemble_five_members():
    spec = EnsembleSpec.of(["tiny_test_net"] * 5, pretrained=False)
    cps = train_ensemble(spec, _small_corpus(), JitterSpec(), TrainConfig(epochs=2, seed=1))
    assert [cp.member_index for cp in cps] == [0, 1, 2, 3, 4]
    assert len({cp.config_fingerprint for cp in cps}) == 1
    assert len({cp.input_target() for cp in cps}) == 1
    # members start from different derived seeds
    assert not np.array_equal(cps[0].parameters["head.weight"], cps[1].parameters["head.weight"])


def test_train_ensemble_single_member_and_determinism():
    spec = EnsembleSpec.of(["tiny_test_net"], pretrained=False)
    a = train_ensemble(spec, _small_corpus(), JitterSpec(), TrainConfig(epochs=3, seed=4))
    b = train_ensemble(spec, _small_corpus(), JitterSpec(), TrainConfig(epochs=3, seed=4))
    assert len(a) == 1
    assert a[0] == b[0]


def test_training_input_is_class_balanced(monkeypatch):
    seen = []
    real = train_mod.train_member

    def spy(clf, train_set, val_set, config, **kw):
        seen.append(Counter(s.label for s in train_set))
        assert len({(s.height, s.width) for s in train_set + list(val_set)}) == 1
        return real(clf, train_set, val_set, config, **kw)

    monkeypatch.setattr(train_mod, "train_member", spy)
    spec = EnsembleSpec.of(["tiny_test_net"] * 2, pretrained=False)
    train_ensemble(spec, _small_corpus(), JitterSpec(), TrainConfig(epochs=1))
    assert len(seen) == 2
    for hist in seen:
        assert len(set(hist.values())) == 1


def test_padding_target_from_full_labeled_corpus():
    corpus = _small_corpus()
    cps = train_ensemble(EnsembleSpec.of(["tiny_test_net"], False), corpus, JitterSpec(), TrainConfig(epochs=1))
    assert cps[0].input_target() == (max(s.height for s in corpus), max(s.width for s in corpus))


def _trained_checkpoint():
    return train_ensemble(
        EnsembleSpec.of(["tiny_test_net"], False), _small_corpus(), JitterSpec(), TrainConfig(epochs=2)
    )[0]


def test_checkpoint_round_trip(tmp_path):
    cp = _trained_checkpoint()
    path = save_checkpoint(cp, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back == cp
    for k in cp.parameters:
        assert back.parameters[k].tobytes() == cp.parameters[k].tobytes()
    batch = [pad_to(s, cp.padding) for s in _small_corpus()[:4]]
    np.testing.assert_array_equal(forward(cp.to_classifier(), batch), forward(back.to_classifier(), batch))


def test_checkpoint_version_mismatch(tmp_path):
    path = save_checkpoint(_trained_checkpoint(), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[len(CHECKPOINT_MAGIC)] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_truncated_and_fingerprint(tmp_path):
    cp = _trained_checkpoint()
    path = save_checkpoint(cp, tmp_path / "m.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(data[:5])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    cp.config_fingerprint = ""
    save_checkpoint(cp, path)
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path)


def test_training_log(tmp_path):
    cp = _trained_checkpoint()
    lines = write_training_log([cp], tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "member,epoch,train_loss,val_loss"
    assert len(lines) == 3
