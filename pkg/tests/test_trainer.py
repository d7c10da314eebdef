import numpy as np
import pytest

from glu_ctc.errors import AllInfeasibleError, EmptyDatasetError
from glu_ctc.nn.model import ModelConfig, init_params
from glu_ctc.trainer import (STOP_EARLY, STOP_MAX_EPOCHS, TrainConfig, TrainedModel,
                             evaluate_loss, labels_for_head, predict_from_output, predict_tags,
                             split_indices, train)

N_FRAMES, N_MELS = 20, 16


def toy_set(n=10, seed=0):
    """Class 0 lights the low bins, class 1 the high bins, in separate time spans."""
    rng = np.random.default_rng(seed)
    data = []
    for i in range(n):
        x = rng.normal(scale=0.1, size=(N_FRAMES, N_MELS)).astype(np.float32)
        seq = []
        if i % 2 == 0:
            x[2:8, :4] += 3.0
            seq += [0, 1]
        if i % 3 != 2:
            x[11:17, -4:] += 3.0
            seq += [2, 3]
        data.append((x, seq))
    return data


def test_ctc_loss_strictly_decreases():
    _, log = train(toy_set(), 2, TrainConfig(max_epochs=5, patience=4, seed=0))
    losses = [r.train_loss for r in log.epochs]
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert [r.epoch for r in log.epochs] == [1, 2, 3, 4, 5]
    assert log.stop_reason == STOP_MAX_EPOCHS


@pytest.mark.parametrize("head", ["gmp", "gap"])
def test_pooled_heads_train(head):
    data = [(x, s) for x, s in toy_set()]
    tags = labels_for_head([s for _, s in data], head)
    model, log = train([(x, t) for (x, _), t in zip(data, tags)], 2,
                       TrainConfig(head=head, max_epochs=3, patience=2))
    assert model.config.output_width == 2
    assert np.isfinite(log.epochs[-1].train_loss)


def test_patience_zero_stops_at_first_non_improving_epoch():
    _, log = train(toy_set(), 2, TrainConfig(max_epochs=60, patience=0, lr=0.05, seed=1))
    vals = [r.val_loss for r in log.epochs]
    assert log.stop_reason == STOP_EARLY
    assert vals[-1] >= min(vals[:-1])
    assert all(b < a for a, b in zip(vals[:-1], vals[1:-1]))


def test_best_checkpoint_returned():
    data = toy_set()
    model, log = train(data, 2, TrainConfig(max_epochs=12, patience=2, lr=0.05, seed=1))
    vals = [r.val_loss for r in log.epochs]
    assert log.best_epoch == int(np.argmin(vals)) + 1
    # rerunning the held-out split through the returned model reproduces the best loss
    split_rng = np.random.default_rng(np.random.SeedSequence(1).spawn(4)[0])
    _, val_idx = split_indices(len(data), 0.2, split_rng)
    val = evaluate_loss(model, [model.normalize(data[i][0]) for i in val_idx],
                        [data[i][1] for i in val_idx])
    assert val == pytest.approx(min(vals), rel=1e-6)


def test_same_seed_same_log_and_params():
    cfg = TrainConfig(max_epochs=3, patience=2, seed=4)
    m1, log1 = train(toy_set(), 2, cfg)
    m2, log2 = train(toy_set(), 2, cfg)
    assert log1 == log2
    assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)


def test_errors():
    with pytest.raises(EmptyDatasetError):
        train([], 2)
    x = np.zeros((2, N_MELS), dtype=np.float32)
    with pytest.raises(AllInfeasibleError):
        train([(x, [0, 1, 2, 3]), (x, [0, 1, 0, 1])], 2)
    with pytest.raises(ValueError):
        train([(x, {0}), (x, {1})], 2, TrainConfig(head="ctc"))


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=5, patience=5)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=0.5)


class TestPredict:
    cfg_ctc = ModelConfig(2, head="ctc", n_mels=N_MELS)
    cfg_gmp = ModelConfig(2, head="gmp", n_mels=N_MELS)

    def test_ctc_decode_gives_tags(self):
        # dog is class 0: start id 0, end id 1, blank 4
        probs = np.full((4, 5), 0.01)
        for t, k in enumerate([0, 4, 1, 4]):
            probs[t, k] = 0.96
        pred = predict_from_output(probs, None, self.cfg_ctc)
        assert pred.decode == [0, 1] and pred.tags == {0}
        np.testing.assert_allclose(pred.scores, [0.96, 0.01])

    def test_empty_decode_still_scores(self):
        probs = np.full((3, 5), 0.05)
        probs[:, 4] = 0.8
        pred = predict_from_output(probs, None, self.cfg_ctc)
        assert pred.decode == [] and pred.tags == set()
        np.testing.assert_allclose(pred.scores, [0.05, 0.05])

    def test_threshold(self):
        pred = predict_from_output(np.zeros((3, 2)), np.array([0.49, 0.51]), self.cfg_gmp)
        assert pred.tags == {1}

    def test_predict_tags_single_and_list(self, rng):
        model = TrainedModel(init_params(self.cfg_ctc, rng), self.cfg_ctc,
                             np.zeros(N_MELS, np.float32), np.ones(N_MELS, np.float32))
        x = rng.normal(size=(N_FRAMES, N_MELS))
        one = predict_tags(x, model)
        many = predict_tags([x, rng.normal(size=(7, N_MELS))], model)
        assert one.trace.shape == (N_FRAMES, 5) and many[1].trace.shape == (7, 5)
        np.testing.assert_array_equal(one.scores, many[0].scores)


def test_trained_model_roundtrip(tmp_path, rng):
    cfg = ModelConfig(2, n_mels=N_MELS)
    model = TrainedModel(init_params(cfg, rng), cfg, rng.normal(size=N_MELS).astype(np.float32),
                         rng.uniform(1, 2, N_MELS).astype(np.float32))
    model.save(tmp_path)
    loaded = TrainedModel.load(tmp_path)
    assert loaded.config == cfg and set(loaded.params) == set(model.params)
    assert loaded.mean.tobytes() == model.mean.tobytes()
