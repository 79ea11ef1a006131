import math

import numpy as np
import pytest

from psx import datasets as ds
from psx import numcore as nc
from psx import pointer_head as ph
from psx import training as tr


def small_store(**arrays):
    store = nc.ParamStore(np.float64)
    for k, v in arrays.items():
        store.add(k, np.asarray(v, dtype=np.float64))
    return store


class TestClipGlobalNorm:
    def test_below_max_unchanged(self):
        store = small_store(p=[0.3, 0.4])  # norm 0.5
        store.grads["p"][...] = [0.3, 0.4]
        factor = tr.clip_global_norm(store, 1.0)
        assert factor == 1.0
        np.testing.assert_allclose(store.grads["p"], [0.3, 0.4])

    def test_scales_to_max(self):
        store = small_store(a=[0.0, 0.0], b=[0.0])
        store.grads["a"][...] = [0.0, 4.0]
        factor = tr.clip_global_norm(store, 1.0)
        assert abs(factor - 0.25) < 1e-12
        total = sum(float((g ** 2).sum()) for g in store.grads.values())
        assert abs(math.sqrt(total) - 1.0) < 1e-9

    def test_zero_gradients_no_division(self):
        store = small_store(p=[1.0, 2.0])
        assert tr.clip_global_norm(store, 1.0) == 1.0

    def test_property_post_norm_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            store = small_store(
                a=rng.normal(size=4), b=rng.normal(size=(2, 3))
            )
            store.grads["a"][...] = rng.normal(scale=5, size=4)
            store.grads["b"][...] = rng.normal(scale=5, size=(2, 3))
            max_norm = float(rng.uniform(0.1, 3.0))
            tr.clip_global_norm(store, max_norm)
            total = math.sqrt(
                sum(float((g ** 2).sum()) for g in store.grads.values())
            )
            assert total <= max_norm + 1e-9

    def test_non_finite_gradient_names_slot(self):
        store = small_store(fine=[1.0], broken=[1.0])
        store.grads["broken"][...] = np.nan
        with pytest.raises(tr.NumericalError, match="broken"):
            tr.clip_global_norm(store, 1.0)


class TestAdam:
    def test_zero_gradient_no_change(self):
        store = small_store(p=[1.0, -2.0])
        opt = tr.Adam(store, lr=0.1)
        opt.step()
        np.testing.assert_allclose(store.values["p"], [1.0, -2.0])

    def test_first_step_is_minus_lr(self):
        # bias-corrected: mhat = g, vhat = g^2 -> step = -lr / (1 + eps')
        store = small_store(p=[0.0])
        store.grads["p"][...] = [1.0]
        opt = tr.Adam(store, lr=0.01)
        opt.step()
        assert abs(float(store.values["p"][0]) + 0.01) < 1e-6 * 0.01

    def test_constant_gradient_step_approaches_lr_sign(self):
        store = small_store(p=[0.0])
        opt = tr.Adam(store, lr=0.01)
        for _ in range(400):
            store.grads["p"][...] = [2.5]
            prev = float(store.values["p"][0])
            opt.step()
        assert abs((prev - float(store.values["p"][0])) - 0.01) < 1e-4 * 0.01


class TestAdadelta:
    def test_zero_gradient_no_change(self):
        store = small_store(p=[3.0])
        opt = tr.Adadelta(store)
        opt.step()
        assert float(store.values["p"][0]) == 3.0

    def test_first_step_magnitude(self):
        g = 0.7
        rho, eps = 0.95, 1e-6
        store = small_store(p=[1.0])
        store.grads["p"][...] = [g]
        opt = tr.Adadelta(store, rho=rho, eps=eps)
        opt.step()
        expected = math.sqrt(eps) / math.sqrt((1 - rho) * g * g + eps) * g
        assert abs((1.0 - float(store.values["p"][0])) - expected) < 1e-12

    def test_accumulators_stay_non_negative(self):
        rng = np.random.default_rng(1)
        store = small_store(p=rng.normal(size=5))
        opt = tr.Adadelta(store)
        for _ in range(100):
            store.grads["p"][...] = rng.normal(size=5)
            opt.step()
            assert (opt.eg["p"] >= 0).all() and (opt.ex["p"] >= 0).all()


class TestTrainConfig:
    def test_file_parsing_and_overrides(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(
            "optimizer=adadelta\nlearning_rate=0.002\nbatch_size=16\n"
            "max_grad_norm=2.0\ninverse_temperature=1.5\nswitch_bias_init=-0.5\n"
            "early_stop_patience=3\neval_every=100\nseed=9\nmax_updates=50\n"
        )
        cfg = tr.TrainConfig.from_file(path)
        assert cfg.optimizer == "adadelta" and cfg.batch_size == 16
        assert cfg.seed == 9 and cfg.max_updates == 50
        cfg2 = tr.TrainConfig.from_file(path, seed=11, learning_rate=0.5)
        assert cfg2.seed == 11 and cfg2.learning_rate == 0.5
        assert cfg2.batch_size == 16

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("learning_rte=0.1\n")
        with pytest.raises(ValueError):
            tr.TrainConfig.from_file(path)

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            tr.TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            tr.TrainConfig(optimizer="sgd")

    def test_text_roundtrip(self, tmp_path):
        cfg = tr.TrainConfig(seed=4, max_updates=7)
        path = tmp_path / "cfg.txt"
        path.write_text(cfg.to_text())
        assert tr.TrainConfig.from_file(path) == cfg


def copy_model_cfg(**overrides):
    base = dict(
        task="seq2seq", vocab_size=20, shortlist_size=15, hidden=16,
        emb_dim=8, att_dim=12, readout_dim=12, switch_dim=8,
    )
    base.update(overrides)
    return ph.ModelConfig(**base)


def copy_stream(seed, batch_size=16, seq_len=4, vocab=20, shortlist=15,
                fraction=0.5):
    gen = ds.gen_copy_task(vocab, seq_len, fraction, seed, shortlist)

    def batches():
        while True:
            yield tr.examples_to_batch([next(gen) for _ in range(batch_size)])

    return batches()


def copy_dev(seed=99, count=40, seq_len=4):
    return list(ds.gen_copy_task(20, seq_len, 0.5, seed, 15, count=count))


class TestTrainLoop:
    def test_zero_updates_returns_initial_params_and_empty_curves(self):
        cfg = tr.TrainConfig(max_updates=0, batch_size=8)
        result = tr.train(copy_model_cfg(), copy_stream(1), copy_dev(), cfg)
        assert result.curves.points == []
        assert result.updates_run == 0
        fresh = ph.build_model(
            copy_model_cfg(), seed=cfg.seed, dtype=np.float32,
            switch_bias_init=cfg.switch_bias_init,
        )
        for name in fresh.store.names():
            np.testing.assert_array_equal(
                result.model.store.values[name], fresh.store.values[name]
            )

    def test_single_batch_overfit_loss_non_increasing(self):
        model = ph.build_model(copy_model_cfg(), seed=3, dtype=np.float32)
        batch = tr.examples_to_batch(
            list(ds.gen_copy_task(20, 4, 0.5, 5, 15, count=16))
        )
        opt = tr.Adam(model.store, 8e-4)
        losses = []
        for _ in range(50):
            model.store.zero_grads()
            loss, _ = model.batch_nll(batch, 1.0)
            nc.backward(loss)
            tr.clip_global_norm(model.store, 1.0)
            opt.step()
            losses.append(float(loss.data))
        for earlier, later in zip(losses, losses[1:]):
            assert later <= earlier + 1e-6
        assert losses[-1] < losses[0]

    def test_determinism_identical_curves(self):
        cfg = tr.TrainConfig(
            max_updates=60, eval_every=20, batch_size=8, seed=5,
            inverse_temperature=1.0,
        )
        runs = []
        for _ in range(2):
            result = tr.train(copy_model_cfg(), copy_stream(7), copy_dev(), cfg)
            runs.append(result.curves.to_csv())
        assert runs[0] == runs[1]
        assert runs[0].splitlines()[0] == "updates,train_nll,dev_nll,dev_metric"
        assert len(runs[0].splitlines()) == 4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_aborts_with_diagnostic(self):
        # float32 overflow: the first Adam step moves parameters to
        # +-1e30, whose products overflow and poison the next forward
        cfg = tr.TrainConfig(
            max_updates=500, eval_every=0, batch_size=8, seed=2,
            learning_rate=1e30, inverse_temperature=1.0,
        )
        with pytest.raises(tr.NumericalError, match="update"):
            tr.train(copy_model_cfg(), copy_stream(9), copy_dev(), cfg)

    def test_early_stopping_keeps_best_checkpoint(self):
        cfg = tr.TrainConfig(
            max_updates=2000, eval_every=10, batch_size=8, seed=6,
            early_stop_patience=2, learning_rate=0.5,
            inverse_temperature=1.0,
        )
        result = tr.train(copy_model_cfg(), copy_stream(11), copy_dev(), cfg)
        if result.updates_run < 2000:  # stopped early
            dev_nlls = [p.dev_nll for p in result.curves.points]
            assert result.best_dev_nll == min(dev_nlls)
            metrics = tr.evaluate(result.model, copy_dev(), 1.0)
            assert abs(metrics["mean_step_nll"] - result.best_dev_nll) < 1e-5

    def test_deferred_pointer_resolved_from_attention(self):
        model = ph.build_model(copy_model_cfg(), seed=8, dtype=np.float64)
        rng = np.random.default_rng(9)
        for v in model.store.values.values():
            v[...] = rng.normal(scale=0.4, size=v.shape)
        src = np.array([4, 9, 3])
        out = model.step_outputs(src, [5])[0]
        j = int(np.argmax(out.loc))
        deferred = model.sequence_nll(
            src, [ph.StepTarget(0, deferred=True)], target_ids=[5]
        )
        explicit = model.sequence_nll(
            src, [ph.StepTarget(0, location=j)], target_ids=[5]
        )
        assert deferred == explicit


class TestEvaluate:
    def test_perfect_pointing_model_has_zero_error(self):
        # copy_fraction 1 with a switch forced off the shortlist points at
        # position t with certainty achieved by construction on T_x = 1
        cfg = copy_model_cfg()
        model = ph.build_model(cfg, seed=10, dtype=np.float32)
        model.store.values["sw.W3"][...] = 0.0
        model.store.values["sw.b3"][...] = -60.0
        examples = list(ds.gen_copy_task(20, 1, 1.0, 12, 15, count=30))
        metrics = tr.evaluate(model, examples, 1.0)
        assert metrics["error_rate"] == 0.0
        assert metrics["token_accuracy"] == 1.0
        assert metrics["pointer_usage"] == 1.0
        assert metrics["switch_accuracy"] == 1.0

    def test_untrained_rarest_model_near_chance(self):
        cfg = ph.ModelConfig(
            task="rarest", vocab_size=600, shortlist_size=540, hidden=32,
            emb_dim=16, att_dim=16, readout_dim=16, switch_dim=16, seq_len=7,
        )
        model = ph.build_model(cfg, seed=13, dtype=np.float32)
        dev = list(ds.gen_rarest_word(ds.SyntheticConfig(seed=14), count=300))
        metrics = tr.evaluate(model, dev, 2.0)
        assert metrics["error_rate"] > 0.5

    def test_baseline_reports_zero_pointer_usage(self):
        cfg = copy_model_cfg(pointer=False)
        model = ph.build_model(cfg, seed=15, dtype=np.float32)
        metrics = tr.evaluate(model, copy_dev(count=20), 1.0)
        assert metrics["pointer_usage"] == 0.0
        assert metrics["switch_accuracy"] is None

    def test_variable_length_datasets_bucketed(self):
        cfg = copy_model_cfg()
        model = ph.build_model(cfg, seed=16, dtype=np.float32)
        examples = list(ds.gen_copy_task(20, 3, 0.5, 17, 15, count=11))
        examples += list(ds.gen_copy_task(20, 5, 0.4, 18, 15, count=7))
        metrics = tr.evaluate(model, examples, 1.0)
        assert metrics["examples"] == 18
        assert metrics["steps"] == 11 * 3 + 7 * 5


class TestSoftmaxOnlyBaseline:
    def test_rarest_baseline_covers_whole_vocabulary(self):
        cfg = ph.ModelConfig(
            task="rarest", vocab_size=600, shortlist_size=540, hidden=8,
            emb_dim=4, att_dim=4, readout_dim=4, switch_dim=4, seq_len=7,
        )
        base = tr.softmax_only_baseline(cfg)
        assert not base.pointer
        assert base.output_size == 600
        model = ph.build_model(base, seed=19, dtype=np.float32)
        assert model.store.values["w.W2"].shape[0] == 600
        assert not any(n.startswith("sw.") for n in model.store.names())
        assert not any(n.startswith("loc.") for n in model.store.names())

    def test_seq2seq_baseline_restricted_to_shortlist(self):
        base = tr.softmax_only_baseline(copy_model_cfg())
        assert base.output_size == 15

    def test_baseline_passes_gradient_check(self):
        cfg = ph.ModelConfig(
            task="rarest", vocab_size=10, shortlist_size=8, hidden=4,
            emb_dim=3, att_dim=3, readout_dim=4, switch_dim=3, seq_len=4,
            pointer=False,
        )
        model = ph.build_model(cfg, seed=20, dtype=np.float64)
        rng = np.random.default_rng(21)
        for v in model.store.values.values():
            v[...] = rng.normal(scale=0.5, size=v.shape)
        batch = {
            "source": np.array([[1, 5, 9, 2]]),
            "target": np.array([[9]]),
            "z": np.array([[1]]),
            "ptr": np.array([[ph.NO_PTR]]),
        }

        def loss_fn(store):
            probe = ph.RarestWordModel(cfg, store)
            loss, _ = probe.batch_nll(batch)
            return loss

        report = nc.grad_check(loss_fn, model.store, tolerance=1e-4)
        assert report.passed, report.summary()


class TestCurves:
    def test_update_counts_strictly_increasing(self):
        curves = tr.Curves()
        curves.append(tr.CurvePoint(10, 1.0, 1.0, 0.5))
        with pytest.raises(ValueError):
            curves.append(tr.CurvePoint(10, 0.9, 0.9, 0.6))

    def test_jsonl_roundtrip(self):
        curves = tr.Curves()
        curves.append(tr.CurvePoint(5, 1.25, 1.5, 0.25))
        curves.append(tr.CurvePoint(10, 1.0, 1.25, 0.5))
        again = tr.Curves.from_jsonl(curves.to_jsonl())
        assert again.to_csv() == curves.to_csv()
