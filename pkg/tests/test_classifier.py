import numpy as np
import pytest

from evidx import classifier as clf
from evidx import synth
from evidx.engine import Tape, Tensor, backward, no_grad, ops
from evidx.errors import ContractError, DataError, DimensionError, FormatError, ParameterError


def test_zero_image_taps_nonnegative():
    model = clf.init_classifier(0)
    logits, acts = clf.forward_with_taps(model, np.zeros((1, 3, 64, 64)))
    assert logits.shape == (1, 4)
    assert list(acts) == ["block1", "block2", "block3"]
    assert all((a.data >= 0).all() for a in acts.values())


def test_tap_shapes_stable(random_model, rng):
    shapes = None
    for _ in range(3):
        _, acts = clf.forward_with_taps(random_model, rng.random((2, 3, 32, 32)))
        now = {k: v.shape for k, v in acts.items()}
        assert shapes is None or now == shapes
        shapes = now
    assert shapes == {"block1": (2, 4, 32, 32), "block2": (2, 8, 16, 16)}


def test_identical_input_bit_identical_logits(random_model, rng):
    x = rng.random((1, 3, 32, 32))
    assert np.array_equal(clf.logits_of(random_model, x), clf.logits_of(random_model, x))


@pytest.mark.parametrize("shape", [(1, 3, 64, 64), (3, 32, 32), (1, 1, 32, 32)])
def test_wrong_shape_rejected(random_model, shape):
    with pytest.raises(DimensionError, match="classifier expects"):
        clf.forward_with_taps(random_model, np.zeros(shape))


def test_image_size_must_divide():
    with pytest.raises(DimensionError):
        clf.init_classifier(0, image_size=36)


def test_forward_from_tap_matches_full_forward(random_model, rng):
    x = rng.random((2, 3, 32, 32))
    logits, acts = clf.forward_with_taps(random_model, x)
    for tap in random_model.tap_names:
        np.testing.assert_allclose(clf.forward_from_tap(random_model, tap, acts[tap]).data, logits.data, rtol=0, atol=1e-12)
    with pytest.raises(ContractError):
        clf.forward_from_tap(random_model, "block9", acts["block1"])


def test_frozen_hash_stable_over_1000_forwards(random_model, rng):
    before = clf.weight_hash(random_model)
    x = rng.random((1, 3, 32, 32))
    with no_grad():
        for _ in range(1000):
            clf.forward_with_taps(random_model, x)
    assert clf.weight_hash(random_model) == before


def test_frozen_params_receive_no_grad(random_model, rng):
    x = Tensor(rng.random((1, 3, 32, 32)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(clf.forward_with_taps(random_model, x)[0])
    backward(loss, tape)
    assert x.grad is not None and np.abs(x.grad).sum() > 0
    assert all(p.grad is None for p in random_model.parameters())


def test_round_trip_bit_identical(tmp_path, small_model, small_corpus):
    path = tmp_path / "m.evdx"
    clf.save_model(small_model, path)
    back = clf.load_model(path)
    probes = np.stack([c.pixels for c in small_corpus[:10]])
    assert np.abs(clf.logits_of(back, probes) - clf.logits_of(small_model, probes)).max() == 0
    assert back.frozen and clf.weight_hash(back) == clf.weight_hash(small_model)


def test_truncated_file_rejected(random_model):
    blob = clf.dumps(random_model)
    for cut in (5, 20, len(blob) - 8):
        with pytest.raises(FormatError):
            clf.loads(blob[:cut])


def test_wrong_magic_named(random_model):
    blob = b"EVDY" + clf.dumps(random_model)[4:]
    with pytest.raises(FormatError, match=r"expected b'EVDX', found b'EVDY'"):
        clf.loads(blob)


def test_wrong_version_rejected(random_model):
    blob = bytearray(clf.dumps(random_model))
    blob[4] = 9
    with pytest.raises(FormatError, match="expected 1, found 9"):
        clf.loads(bytes(blob))


def test_one_epoch_above_chance():
    train, test = synth.split_corpus(synth.generate_corpus(100, 64, 42))
    result = clf.train_classifier(train, epochs=1, seed=42, test_corpus=test)
    assert result.test_accuracy > 0.25


def test_same_seed_same_trajectory():
    corpus = synth.generate_corpus(8, 32, 2)
    a = clf.train_classifier(corpus, epochs=2, seed=7, channels=(4, 8))
    b = clf.train_classifier(corpus, epochs=2, seed=7, channels=(4, 8))
    c = clf.train_classifier(corpus, epochs=2, seed=8, channels=(4, 8))
    assert a.epoch_hashes == b.epoch_hashes
    assert a.epoch_hashes != c.epoch_hashes
    assert a.model.frozen


def test_empty_class_rejected():
    corpus = [c for c in synth.generate_corpus(3, 32, 0) if c.label != 2]
    with pytest.raises(DataError, match="counts per class"):
        clf.train_classifier(corpus, epochs=1)
    with pytest.raises(DataError):
        clf.train_classifier([], epochs=1)


def test_bad_label_smoothing():
    with pytest.raises(ParameterError):
        clf.train_classifier(synth.generate_corpus(1, 32, 0), epochs=1, label_smoothing=1.0)


def test_argmax_ties_pick_lowest_index():
    model = clf.init_classifier(0, channels=(4,), image_size=32)
    for p in model.params.values():
        p.data[...] = 0.0
    model.freeze()
    assert clf.predict(model, np.zeros((2, 3, 32, 32))).tolist() == [0, 0]


def test_probabilities_sum_to_one(rng):
    p = clf.probabilities(rng.standard_normal((5, 4)) * 50)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-15)
