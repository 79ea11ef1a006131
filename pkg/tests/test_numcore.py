import numpy as np
import pytest

from psx import numcore as nc


def param_store(**arrays):
    store = nc.ParamStore(np.float64)
    for name, arr in arrays.items():
        store.add(name, arr)
    return store


class TestSoftmax:
    def test_uniform_logits(self):
        out = nc.softmax(np.zeros(4)).data
        np.testing.assert_allclose(out, [0.25, 0.25, 0.25, 0.25], atol=1e-15)

    def test_known_values(self):
        # exp(1)/sum, exp(2)/sum, exp(3)/sum evaluated at high precision
        out = nc.softmax(np.array([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(
            out, [0.09003057317038046, 0.24472847105479764, 0.6652409557748219],
            atol=1e-12,
        )

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(size=7)
            a = nc.softmax(x).data
            b = nc.softmax(x + 123.456).data
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_large_logits_no_overflow(self):
        out = nc.softmax(np.array([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)

    def test_sums_to_one_by_dtype(self):
        rng = np.random.default_rng(1)
        for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-6)):
            for _ in range(20):
                x = rng.normal(scale=5, size=(3, 11)).astype(dtype)
                sums = nc.softmax(x).data.sum(axis=-1)
                assert np.abs(sums - 1.0).max() < tol

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            nc.softmax(np.zeros(0))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            nc.softmax(np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            nc.softmax(np.array([np.inf, 0.0]))


class TestSigmoid:
    def test_symmetry_point(self):
        assert float(nc.sigmoid(np.asarray(0.0)).data) == 0.5

    def test_known_value(self):
        # 1 / (exp(1) + 1)
        assert abs(float(nc.sigmoid(np.asarray(-1.0)).data) - 0.2689414213699951) < 1e-12

    def test_saturation_without_overflow(self):
        assert abs(float(nc.sigmoid(np.asarray(36.0)).data) - 1.0) < 1e-12
        low = float(nc.sigmoid(np.asarray(-500.0)).data)
        assert 0.0 <= low < 1e-200

    def test_antisymmetry(self):
        rng = np.random.default_rng(2)
        x = rng.normal(scale=3, size=50)
        y1 = nc.sigmoid(x).data
        y2 = nc.sigmoid(-x).data
        np.testing.assert_allclose(y1, 1.0 - y2, atol=1e-12)
        assert (np.diff(nc.sigmoid(np.sort(x)).data) >= 0).all()


class TestAffine:
    def test_identity(self):
        out = nc.affine(np.eye(2), np.array([3.0, 4.0]), np.zeros(2))
        np.testing.assert_allclose(out.data, [3.0, 4.0])

    def test_zero_weight_gives_bias(self):
        out = nc.affine(np.zeros((2, 3)), np.array([9.0, 9.0, 9.0]),
                        np.array([1.0, 2.0]))
        np.testing.assert_allclose(out.data, [1.0, 2.0])

    def test_hand_value(self):
        out = nc.affine(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]),
                        np.zeros(2))
        np.testing.assert_allclose(out.data, [3.0, 7.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nc.affine(np.zeros((2, 3)), np.zeros(4), np.zeros(2))
        with pytest.raises(ValueError):
            nc.affine(np.zeros((2, 3)), np.zeros(3), np.zeros(3))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        w, b = rng.normal(size=(4, 3)), rng.normal(size=4)
        x = rng.normal(size=(5, 3))
        out = nc.affine(w, x, b).data
        for i in range(5):
            np.testing.assert_allclose(out[i], w @ x[i] + b, atol=1e-12)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        store = param_store(p=np.arange(6.0).reshape(2, 3))
        loss = nc.sum_all(store.node("p"))
        nc.backward(loss)
        np.testing.assert_allclose(store.grads["p"], np.ones((2, 3)))

    def test_disconnected_parameter_gets_zero(self):
        store = param_store(p=np.ones(3), q=np.ones(3))
        loss = nc.sum_all(store.node("p"))
        nc.backward(loss)
        np.testing.assert_allclose(store.grads["q"], np.zeros(3))

    def test_accumulates_across_calls(self):
        store = param_store(p=np.ones(3))
        for _ in range(2):
            nc.backward(nc.sum_all(store.node("p")))
        np.testing.assert_allclose(store.grads["p"], 2 * np.ones(3))

    def test_non_scalar_loss_rejected(self):
        store = param_store(p=np.ones(3))
        with pytest.raises(ValueError):
            nc.backward(store.node("p"))

    def test_shared_parameter_node_used_twice(self):
        store = param_store(p=np.array([2.0]))
        p = store.node("p")
        loss = nc.sum_all(nc.mul(p, p))  # d/dp p^2 = 2p
        nc.backward(loss)
        np.testing.assert_allclose(store.grads["p"], [4.0])

    def test_three_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        store = param_store(
            W1=rng.normal(size=(5, 4)), b1=rng.normal(size=5),
            W2=rng.normal(size=(4, 5)), b2=rng.normal(size=4),
            W3=rng.normal(size=(2, 4)), b3=rng.normal(size=2),
        )
        x = rng.normal(size=(3, 4))

        def loss_fn(s):
            ns = s.nodes()
            h1 = nc.tanh(nc.affine(ns["W1"], x, ns["b1"]))
            h2 = nc.relu(nc.affine(ns["W2"], h1, ns["b2"]))
            out = nc.sigmoid(nc.affine(ns["W3"], h2, ns["b3"]))
            return nc.sum_all(nc.mul(out, out))

        report = nc.grad_check(loss_fn, store, tolerance=1e-4)
        assert report.passed, report.summary()


def _random_composition(seed):
    """A mixed graph touching every primitive, checked against FD.

    Inputs are N(0,1); weight matrices carry 1/sqrt(fan-in) so tanh stays
    out of deep saturation, where true gradients fall to the 1e-8 scale at
    which central differences are pure cancellation noise.
    """
    rng = np.random.default_rng(seed)
    store = param_store(
        E=rng.normal(size=(6, 3)),
        W=rng.normal(size=(4, 3)) / np.sqrt(3), b=rng.normal(size=4) * 0.5,
        U=rng.normal(size=(4, 4)) / 2.0,
        v=rng.normal(size=4),
        q=rng.normal(size=(2, 4)),
        wl=rng.normal(size=(2, 3)),
        pre=rng.normal(size=(2, 1)),
    )
    ids = rng.integers(0, 6, size=(2,))
    picks = rng.integers(0, 5, size=(2,))
    ce_ids = rng.integers(0, 5, size=(2,))

    def loss_fn(s):
        ns = s.nodes()
        e = nc.embed(ns["E"], ids)  # (2,3)
        h = nc.tanh(nc.affine(ns["W"], e, ns["b"]))  # (2,4)
        # relu is checked separately: a finite-difference probe straddling
        # its kink reports spurious error for any correct implementation
        rows = [h, nc.tanh(nc.linear(ns["U"], h)), nc.sigmoid(h)]
        ann = nc.stack_time(rows + [nc.mul(h, h), nc.sub(h, ns["q"])])  # (2,5,4)
        scores = nc.matvec(nc.add(ann, nc.repeat_time(ns["q"], 5)), ns["v"])
        w = nc.softmax(scores)  # (2,5)
        ctx = nc.weighted_sum(w, ann)  # (2,4)
        d = nc.sigmoid(nc.scale(ns["pre"], 1.7))
        fused = nc.concat(
            [nc.mul_last(nc.softmax(ns["wl"]), d),
             nc.mul_last(w, nc.one_minus(d))]
        )
        nll = nc.scale(nc.log_floor(nc.pick(fused, picks)), -1.0)
        ce = nc.cross_entropy(scores, ce_ids)
        return nc.add(nc.sum_all(nll), nc.add(nc.mean_all(ce), nc.mean_all(ctx)))

    return loss_fn, store


class TestCompositionProperty:
    def test_backward_matches_fd_over_20_seeds(self):
        for seed in range(20):
            loss_fn, store = _random_composition(seed)
            report = nc.grad_check(loss_fn, store, tolerance=1e-4)
            assert report.passed, f"seed {seed}: {report.summary()}"

    def test_relu_gradient_away_from_kink(self):
        rng = np.random.default_rng(7)
        for seed in range(5):
            x = rng.normal(size=(3, 4))
            x[np.abs(x) < 1e-2] = 1e-2  # keep the FD probe off the kink
            store = param_store(p=x)
            report = nc.grad_check(
                lambda s: nc.sum_all(nc.mul(nc.relu(s.node("p")), s.node("p"))),
                store, tolerance=1e-6,
            )
            assert report.passed, report.summary()


class TestGradCheck:
    def test_quadratic_is_near_exact(self):
        store = param_store(p=np.array([1.0, -2.0, 3.0]))
        report = nc.grad_check(
            lambda s: nc.sum_all(nc.mul(s.node("p"), s.node("p"))), store
        )
        assert report.passed
        assert report.worst_error < 1e-9

    def test_corrupted_gradient_is_flagged(self):
        store = param_store(good=np.array([0.5, 1.5]), bad=np.array([2.0]))

        def loss_fn(s):
            fine = nc.sum_all(nc.mul(s.node("good"), s.node("good")))
            # doubled backward: factor-two gradient corruption on 'bad'
            node = s.node("bad")
            broken = nc.Node(node.data.copy(), (node,))
            broken._bwd = lambda g: nc._acc(node, 2.0 * g)
            return nc.add(fine, nc.sum_all(broken))

        report = nc.grad_check(loss_fn, store, tolerance=1e-4)
        assert not report.passed
        assert report.failures == ["bad"]
        assert report.worst_slot == "bad"
        assert report.errors["good"] < 1e-8

    def test_requires_float64(self):
        store = nc.ParamStore(np.float32)
        store.add("p", np.ones(2))
        with pytest.raises(ValueError):
            nc.grad_check(lambda s: nc.sum_all(s.node("p")), store)


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = param_store(p=np.ones(2))
        with pytest.raises(ValueError):
            store.add("p", np.ones(2))

    def test_zero_grads(self):
        store = param_store(p=np.ones(3))
        nc.backward(nc.sum_all(store.node("p")))
        store.zero_grads()
        assert (store.grads["p"] == 0).all()

    def test_grad_shapes_match(self):
        store = param_store(p=np.ones((2, 5)))
        assert store.grads["p"].shape == (2, 5)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        store = param_store(alpha=rng.normal(size=(3, 2)), beta=rng.normal(size=4))
        path = tmp_path / "model.psx"
        nc.save_checkpoint(path, store, meta={"task": "demo", "n": 3})
        loaded, meta = nc.load_checkpoint(path)
        assert meta == {"task": "demo", "n": 3}
        assert loaded.dtype == np.float64
        for name in store.names():
            np.testing.assert_array_equal(loaded.values[name], store.values[name])

    def test_float32_roundtrip(self, tmp_path):
        store = nc.ParamStore(np.float32)
        store.add("w", np.linspace(-1, 1, 6).reshape(2, 3))
        path = tmp_path / "m32.psx"
        nc.save_checkpoint(path, store)
        loaded, _ = nc.load_checkpoint(path)
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded.values["w"], store.values["w"])

    def test_magic_header(self, tmp_path):
        path = tmp_path / "model.psx"
        nc.save_checkpoint(path, param_store(p=np.ones(1)))
        assert path.read_bytes()[:8] == b"PSXCKPT1"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.psx"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(nc.CheckpointError):
            nc.load_checkpoint(path)


class TestMiscOps:
    def test_concat_and_split_gradients(self):
        store = param_store(a=np.ones(2), b=np.ones(3))
        ns = store.nodes()
        out = nc.concat([ns["a"], ns["b"]])
        nc.backward(nc.sum_all(nc.mul(out, out)))
        np.testing.assert_allclose(store.grads["a"], 2 * np.ones(2))
        np.testing.assert_allclose(store.grads["b"], 2 * np.ones(3))

    def test_log_floor_blocks_gradient_below_floor(self):
        store = param_store(p=np.array([0.5, 1e-15]))
        nc.backward(nc.sum_all(nc.log_floor(store.node("p"))))
        np.testing.assert_allclose(store.grads["p"], [2.0, 0.0])

    def test_pick_out_of_range(self):
        with pytest.raises(ValueError):
            nc.pick(np.ones((2, 3)), np.array([0, 3]))

    def test_embed_out_of_range(self):
        with pytest.raises(ValueError):
            nc.embed(np.ones((4, 2)), np.array([4]))

    def test_elementwise_shape_checks(self):
        with pytest.raises(ValueError):
            nc.add(np.ones(2), np.ones(3))
        with pytest.raises(ValueError):
            nc.mul_last(np.ones((2, 3)), np.ones((2, 2)))

    def test_outputs_finite_on_random_inputs(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            x = rng.normal(scale=3, size=(4, 6))
            for node in (
                nc.softmax(x), nc.tanh(x), nc.sigmoid(x), nc.relu(x),
                nc.log_floor(nc.softmax(x)),
            ):
                assert np.isfinite(node.data).all()
