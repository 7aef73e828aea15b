import numpy as np
import pytest

from hourglass_mtl.errors import ConfigurationError, DegenerateInputError, DivergenceError
from hourglass_mtl.evaluation import confusion
from hourglass_mtl.shapes import Sample, synth_shapes
from hourglass_mtl.trainer import (
    LOG_HEADER,
    TrainConfig,
    augment,
    clip_gradients,
    evaluate_epoch,
    format_config,
    parse_config,
    prepare_data,
    split_indices,
    train,
)

TINY = dict(stages=2, base_width=4, batch_size=2, crop=16, lr=5e-5)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_shapes(3, 10, 32, 4)


class TestConfig:
    def test_parse(self):
        cfg = parse_config("# run\ntasks = S, E ,D\nlr = 0.001\nfixed_batch = yes\niterations=5\n")
        assert cfg.tasks == ("E", "S", "D")
        assert cfg.lr == 0.001 and cfg.fixed_batch and cfg.iterations == 5

    def test_round_trip(self):
        cfg = TrainConfig(tasks=("S", "C"), lr=0.5, crop=32, lambda_C=0.0, manifest="m.tsv")
        assert parse_config(format_config(cfg)) == cfg

    @pytest.mark.parametrize(
        "text",
        ["tasks = S,X", "tasks = E", "lr = 0", "lr = fast", "nonsense = 1", "lr = 1\nlr = 2", "just words",
         "lambda_S = 0\nlambda_E = 0\nlambda_C = 0\nlambda_D = 0", "momentum = 1.5", "K = 1"],
    )
    def test_rejects(self, text):
        with pytest.raises(ConfigurationError):
            parse_config(text)

    def test_split(self):
        train_idx, test_idx = split_indices(250)
        assert list(train_idx) == list(range(200)) and list(test_idx) == list(range(200, 250))


class TestAugment:
    @pytest.fixture
    def sample(self):
        return synth_shapes(1, 1, 32, 4)[0]

    def test_identity(self, sample):
        cfg = TrainConfig(crop=0, flip_prob=0.0, contrast_min=1, contrast_max=1, brightness_min=0, brightness_max=0)
        out = augment(sample, np.random.default_rng(0), cfg)
        assert np.array_equal(out.image, sample.image)
        assert np.array_equal(out.labels, sample.labels)
        assert np.array_equal(out.instances, sample.instances)

    def test_forced_flip_is_involution(self, sample):
        cfg = TrainConfig(flip_prob=1.0, contrast_min=1, contrast_max=1, brightness_min=0, brightness_max=0)
        once = augment(sample, np.random.default_rng(0), cfg)
        twice = augment(once, np.random.default_rng(1), cfg)
        assert np.array_equal(once.labels, sample.labels[:, ::-1])
        assert np.array_equal(once.instances, sample.instances[:, ::-1])
        assert np.array_equal(twice.image, sample.image)
        assert np.array_equal(twice.labels, sample.labels)

    @pytest.mark.parametrize("seed", range(10))
    def test_label_set_and_ranges(self, sample, seed):
        cfg = TrainConfig(crop=16)
        out = augment(sample, np.random.default_rng(seed), cfg)
        assert out.labels.shape == (16, 16) and out.image.shape == (3, 16, 16)
        assert set(np.unique(out.labels)) <= set(np.unique(sample.labels))
        assert 0 <= out.image.min() and out.image.max() <= 1

    def test_crop_too_large(self, sample):
        with pytest.raises(ConfigurationError):
            augment(sample, np.random.default_rng(0), TrainConfig(crop=40))

    def test_deterministic(self, sample):
        cfg = TrainConfig(crop=24)
        a = augment(sample, np.random.default_rng(5), cfg)
        b = augment(sample, np.random.default_rng(5), cfg)
        assert a.image.tobytes() == b.image.tobytes()


class TestTrain:
    def test_log_and_shapes(self, tiny_data):
        cfg = TrainConfig(tasks=("S", "E", "C", "D"), iterations=3, eval_every=2, **TINY)
        res = train(cfg, tiny_data)
        assert [r[0] for r in res.log.rows] == [1, 2, 3]
        assert all(r[2] is not None and r[5] is not None for r in res.log.rows)
        assert res.log.rows[1][6] is not None and res.log.rows[0][6] is None
        assert res.log.rows[-1][6] == res.metrics.seg.miou
        assert res.latent is not None and res.latent.vectors.shape[1] == 8
        assert len(LOG_HEADER) == len(res.log.rows[0])

    def test_disabled_tasks_not_logged(self, tiny_data):
        res = train(TrainConfig(tasks=("S", "E"), lambda_E=0.0, iterations=1, **TINY), tiny_data)
        assert res.log.rows[0][2] is None and res.log.rows[0][3] is not None

    def test_zero_weight_equivalence(self, tiny_data):
        a = train(TrainConfig(tasks=("S",), iterations=4, **TINY), tiny_data)
        b = train(TrainConfig(tasks=("S", "E"), lambda_E=0.0, iterations=4, **TINY), tiny_data)
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()
        assert a.log.totals == b.log.totals

    def test_same_seed_same_params(self, tiny_data):
        cfg = TrainConfig(tasks=("S", "D"), iterations=3, **TINY)
        a, b = train(cfg, tiny_data), train(cfg, tiny_data)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_loss_decreases_on_fixed_batch(self, tiny_data):
        cfg = TrainConfig(tasks=("S",), iterations=60, fixed_batch=True, **TINY)
        totals = train(cfg, tiny_data).log.totals
        assert totals[-1] < 0.5 * totals[0]

    def test_divergence(self, tiny_data):
        cfg = TrainConfig(tasks=("S",), iterations=50, **{**TINY, "lr": 1e250})
        with pytest.raises(DivergenceError) as info:
            train(cfg, tiny_data)
        assert info.value.iteration >= 1

    def test_empty_dataset(self):
        with pytest.raises(DegenerateInputError):
            train(TrainConfig(iterations=1), [])

    def test_crop_must_fit_pooling(self, tiny_data):
        with pytest.raises(ConfigurationError):
            train(TrainConfig(iterations=1, **{**TINY, "crop": 18}), tiny_data)

    def test_class_weights_from_train_split(self, tiny_data):
        data = prepare_data(tiny_data, TrainConfig())
        assert len(data.train_idx) == 8
        assert data.class_weights.seg.shape == (4,)
        assert data.class_weights.energy.shape == (6,)


class TestEvaluateEpoch:
    def test_perfect_stub(self, tiny_data):
        truth = {s.image.tobytes(): s.labels for s in tiny_data}

        def stub(images):
            labels = np.stack([truth[im.tobytes()] for im in images]).astype(int)
            return (labels[:, None] == np.arange(4)[None, :, None, None]).astype(float)

        assert evaluate_epoch(stub, tiny_data).seg.miou == 1.0

    def test_constant_class(self, tiny_data):
        def stub(images):
            out = np.zeros((len(images), 4, 32, 32))
            out[:, 2] = 1.0
            return out

        report = evaluate_epoch(stub, tiny_data, n_classes=4)
        labels = np.stack([s.labels for s in tiny_data])
        iou2 = ((labels == 2).sum()) / labels.size
        assert report.seg.miou == pytest.approx(iou2 / 4, abs=1e-12)

    def test_ties_go_to_lowest(self):
        s = Sample(np.zeros((3, 8, 8)), np.ones((8, 8), dtype=np.uint8), np.zeros((8, 8), dtype=np.uint16))
        report = evaluate_epoch(lambda im: np.zeros((len(im), 3, 8, 8)), [s], n_classes=3)
        assert report.seg.class_recall[1] == 0.0
        assert np.array_equal(confusion(np.zeros((8, 8), int), s.labels, n_classes=3), np.asarray(
            [[0, 0, 0], [64, 0, 0], [0, 0, 0]]))

    def test_empty_split(self):
        with pytest.raises(DegenerateInputError):
            evaluate_epoch(lambda im: im, [])


class TestPriorBias:
    def test_heads_start_at_training_frequencies(self, tiny_data):
        data = prepare_data(tiny_data, TrainConfig(**TINY))
        res = train(TrainConfig(tasks=("S",), iterations=0, prior_bias=True, **TINY), data)
        p = 1 / (1 + np.exp(-res.params["head_S.1.b"]))
        assert np.allclose(p, np.clip(data.frequencies["S"], 1e-4, 1 - 1e-4), rtol=0, atol=1e-12)
        assert res.params["head_D.1.b"].shape == (6,)

    def test_frequencies_from_train_split_only(self, tiny_data):
        data = prepare_data(tiny_data, TrainConfig(**TINY))
        labels = np.concatenate([tiny_data[i].labels.ravel() for i in data.train_idx])
        assert np.allclose(data.frequencies["S"], np.bincount(labels, minlength=4) / labels.size)
        edges = np.concatenate([data.targets[i].edge.ravel() for i in data.train_idx])
        assert data.frequencies["E"][0] == pytest.approx(edges.mean())


class TestClip:
    def test_scales_to_max_norm(self):
        g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        assert clip_gradients(g, 1.0) == pytest.approx(5.0)
        assert np.allclose(g["a"], [0.6, 0.0]) and np.allclose(g["b"], [[0.8]])

    def test_leaves_small_gradients(self):
        g = {"a": np.array([0.3, 0.4])}
        assert clip_gradients(g, 1.0) == pytest.approx(0.5)
        assert np.array_equal(g["a"], [0.3, 0.4])

    def test_rejects_negative(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(clip_norm=-1.0)

    def test_clipped_run_deterministic(self, tiny_data):
        cfg = TrainConfig(tasks=("S", "C"), iterations=3, clip_norm=10.0, **TINY)
        a, b = train(cfg, tiny_data), train(cfg, tiny_data)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        c = train(TrainConfig(tasks=("S", "C"), iterations=3, **TINY), tiny_data)
        assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)
