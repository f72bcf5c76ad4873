"""Tensor-op tests against independent oracles.

Every expected value here is produced by a reimplementation that shares no
code with the tape: nested-loop convolution, scalar gate equations for the
LSTM, central finite differences for gradients, and a scalar Adam reference.
"""

import math

import numpy as np
import pytest

import jointattn.numerics as nm
from jointattn.numerics import (
    AdamState,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    adam_update,
    backward,
)


# ---------------------------------------------------------------------------
# oracles


def conv_oracle(x, k, b):
    h, w, c_in = x.shape
    c_out = k.shape[3]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, w, c_out))
    for i in range(h):
        for j in range(w):
            for co in range(c_out):
                acc = b[co]
                for kh in range(3):
                    for kw in range(3):
                        for ci in range(c_in):
                            acc += xp[i + kh, j + kw, ci] * k[kh, kw, ci, co]
                out[i, j, co] = acc
    return out


def lstm_oracle(x, h, c, w, b):
    """Scalar, gate-by-gate LSTM step."""
    H = len(h)
    z = np.concatenate([x, h]) @ w + b

    def sg(v):
        return 1.0 / (1.0 + math.exp(-v))

    h_new = np.zeros(H)
    c_new = np.zeros(H)
    for j in range(H):
        i_g = sg(z[j])
        f_g = sg(z[H + j])
        g_g = math.tanh(z[2 * H + j])
        o_g = sg(z[3 * H + j])
        c_new[j] = f_g * c[j] + i_g * g_g
        h_new[j] = o_g * math.tanh(c_new[j])
    return h_new, c_new


def fd_grads(f, arrays, step=1e-4):
    """Central finite differences of a scalar function of named arrays."""
    grads = {}
    for name in arrays:
        a = arrays[name]
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(arrays)
            flat[i] = orig - step
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads


def assert_close_to_fd(analytic, numeric, tol=1e-4):
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    for av, nv in zip(a, n):
        if abs(av) < 1e-7 and abs(nv) < 1e-7:
            continue
        rel = abs(av - nv) / (abs(av) + abs(nv))
        assert rel < tol, f"analytic {av} vs finite-diff {nv} (rel {rel})"


# ---------------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_zero_input_gives_bias(self):
        x = np.zeros((4, 5, 3))
        k = np.random.default_rng(0).normal(size=(3, 3, 3, 2))
        b = np.array([1.5, -2.0])
        out = nm.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        assert np.array_equal(out[..., 0], np.full((4, 5), 1.5))
        assert np.array_equal(out[..., 1], np.full((4, 5), -2.0))

    def test_identity_kernel(self):
        x = np.array([[[3.7]]])
        k = np.zeros((3, 3, 1, 1))
        k[1, 1, 0, 0] = 1.0
        out = nm.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 3.7

    def test_identity_kernel_is_identity_map(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 7, 4))
        k = np.zeros((3, 3, 4, 4))
        for c in range(4):
            k[1, 1, c, c] = 1.0
        out = nm.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(4))).data
        assert np.array_equal(out, x)

    def test_two_by_two_all_ones_kernel(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        k = np.ones((3, 3, 1, 1))
        out = nm.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data
        # every 3x3 window clipped by padding covers the whole 2x2 input
        assert out[0, 0, 0] == 10.0
        expected = conv_oracle(x, k, np.zeros(1))
        assert np.allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_nested_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 4, 3))
        k = rng.normal(size=(3, 3, 3, 2))
        b = rng.normal(size=2)
        out = nm.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        assert np.allclose(out, conv_oracle(x, k, b), atol=1e-10)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(4, 5, 5, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        batched = nm.conv2d(Tensor(xs), Tensor(k), Tensor(b)).data
        for i in range(4):
            single = nm.conv2d(Tensor(xs[i]), Tensor(k), Tensor(b)).data
            assert np.max(np.abs(batched[i] - single)) < 1e-12

    def test_linearity_in_input(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 4, 2))
        y = rng.normal(size=(4, 4, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        zb = Tensor(np.zeros(3))
        a, bcoef = 0.7, -1.3
        lhs = nm.conv2d(Tensor(a * x + bcoef * y), Tensor(k), zb).data
        rhs = a * nm.conv2d(Tensor(x), Tensor(k), zb).data \
            + bcoef * nm.conv2d(Tensor(y), Tensor(k), zb).data
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            nm.conv2d(Tensor(np.zeros((3, 3, 2))), Tensor(np.zeros((3, 3, 5, 1))),
                      Tensor(np.zeros(1)))


# ---------------------------------------------------------------------------
# dense


class TestDense:
    def test_zero_weights_give_bias(self):
        out = nm.dense(Tensor([1.0, 2.0, 3.0]), Tensor(np.zeros((3, 2))),
                       Tensor([5.0, -1.0])).data
        assert np.array_equal(out, [5.0, -1.0])

    def test_identity_weights(self):
        x = np.array([0.5, -2.0, 7.0])
        out = nm.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data
        assert np.array_equal(out, x)

    def test_direct_product_oracle(self):
        a, b, c, d = 1.5, -0.5, 2.0, 3.5
        out = nm.dense(Tensor([1.0, 2.0]), Tensor([[a, b], [c, d]]),
                       Tensor(np.zeros(2))).data
        assert np.allclose(out, [a + 2 * c, b + 2 * d], atol=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            nm.dense(Tensor([1.0, 2.0]), Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# lstm_step


class TestLstmStep:
    def test_zero_params_closed_form(self):
        v = np.array([0.3, -1.2, 0.0, 2.5])
        w = np.zeros((6 + 4, 16))
        b = np.zeros(16)
        h, c = nm.lstm_step(Tensor(np.zeros(6)), Tensor(np.zeros(4)), Tensor(v),
                            Tensor(w), Tensor(b))
        assert np.allclose(c.data, 0.5 * v, atol=1e-12)
        assert np.allclose(h.data, 0.5 * np.tanh(0.5 * v), atol=1e-12)

    def test_all_zero(self):
        w = np.zeros((5, 8))
        h, c = nm.lstm_step(Tensor(np.zeros(3)), Tensor(np.zeros(2)),
                            Tensor(np.zeros(2)), Tensor(w), Tensor(np.zeros(8)))
        assert np.array_equal(h.data, np.zeros(2))
        assert np.array_equal(c.data, np.zeros(2))

    @pytest.mark.parametrize("seed", [0, 7, 42])
    def test_matches_gate_equation_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=5)
        h0 = rng.normal(size=3)
        c0 = rng.normal(size=3)
        w = rng.normal(size=(8, 12), scale=0.5)
        b = rng.normal(size=12, scale=0.5)
        h, c = nm.lstm_step(Tensor(x), Tensor(h0), Tensor(c0), Tensor(w), Tensor(b))
        h_ref, c_ref = lstm_oracle(x, h0, c0, w, b)
        assert np.max(np.abs(h.data - h_ref)) < 1e-10
        assert np.max(np.abs(c.data - c_ref)) < 1e-10

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(9)
        xs = rng.normal(size=(3, 5))
        hs = rng.normal(size=(3, 4))
        cs = rng.normal(size=(3, 4))
        w = rng.normal(size=(9, 16))
        b = rng.normal(size=16)
        hb, cb = nm.lstm_step(Tensor(xs), Tensor(hs), Tensor(cs), Tensor(w), Tensor(b))
        for i in range(3):
            hi, ci = nm.lstm_step(Tensor(xs[i]), Tensor(hs[i]), Tensor(cs[i]),
                                  Tensor(w), Tensor(b))
            assert np.max(np.abs(hb.data[i] - hi.data)) < 1e-12
            assert np.max(np.abs(cb.data[i] - ci.data)) < 1e-12


# ---------------------------------------------------------------------------
# softmax family


class TestSoftmax:
    def test_uniform_logits(self):
        out = nm.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).data
        assert np.allclose(out, 0.25, atol=1e-12)

    def test_constant_logits_uniform(self):
        for c in (-100.0, 0.0, 3.14, 250.0):
            out = nm.softmax(Tensor([c] * 5)).data
            assert np.allclose(out, 0.2, atol=1e-12)

    def test_log_ratio_example(self):
        out = nm.softmax(Tensor([math.log(1.0), math.log(3.0)])).data
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    def test_probability_vector(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            out = nm.softmax(Tensor(rng.normal(size=9, scale=10.0))).data
            assert out.min() > 0.0
            assert abs(out.sum() - 1.0) < 1e-6

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=7)
        base = nm.softmax(Tensor(x)).data
        shifted = nm.softmax(Tensor(x + 123.456)).data
        assert np.max(np.abs(base - shifted)) < 1e-9

    def test_empty_raises(self):
        with pytest.raises(ShapeError):
            nm.softmax(Tensor(np.zeros(0)))

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 6))
        ls = nm.log_softmax(Tensor(x)).data
        ref = np.log(nm.softmax(Tensor(x)).data)
        assert np.max(np.abs(ls - ref)) < 1e-12


# ---------------------------------------------------------------------------
# backward


class TestBackward:
    def test_sum_of_params_grad_is_one(self):
        p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            loss = nm.sum_all(p)
        backward(loss)
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_sum_of_squares_grad(self):
        v = np.array([1.0, -2.0, 0.5])
        p = Tensor(v, requires_grad=True)
        with Tape():
            loss = nm.sum_all(nm.mul(p, p))
        backward(loss)
        assert np.allclose(p.grad, 2.0 * v, atol=1e-12)

    def test_consumed_tape_raises(self):
        p = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = nm.sum_all(p)
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)

    def test_unrecorded_loss_raises(self):
        loss = nm.sum_all(Tensor([1.0, 2.0]))
        with pytest.raises(TapeError):
            backward(loss)

    def test_grads_accumulate_across_tapes(self):
        p = Tensor([2.0], requires_grad=True)
        for _ in range(3):
            with Tape():
                loss = nm.sum_all(nm.mul(p, p))
            backward(loss)
        assert np.allclose(p.grad, 3 * 2.0 * 2.0, atol=1e-12)

    def test_param_reused_in_graph(self):
        p = Tensor([3.0], requires_grad=True)
        with Tape():
            loss = nm.sum_all(nm.add(nm.mul(p, p), p))  # x^2 + x
        backward(loss)
        assert np.allclose(p.grad, 2 * 3.0 + 1.0, atol=1e-12)

    def test_composition_matches_finite_differences(self):
        # conv -> relu -> spatial mean -> dense -> lstm -> softmax -> scalar
        rng = np.random.default_rng(11)
        shapes = {
            "k": (3, 3, 2, 3),
            "kb": (3,),
            "w": (3, 4),
            "wb": (4,),
            "lw": (4 + 3, 12),
            "lb": (12,),
        }
        arrays = {n: rng.normal(size=s, scale=0.4) for n, s in shapes.items()}
        x = rng.normal(size=(2, 4, 5, 2))
        h0 = rng.normal(size=(2, 3))
        c0 = rng.normal(size=(2, 3))
        target = rng.normal(size=(2, 4))

        def forward(a, record=False):
            ts = {n: Tensor(v, requires_grad=record) for n, v in a.items()}
            f = nm.relu(nm.conv2d(Tensor(x), ts["k"], ts["kb"]))
            pooled = nm.spatial_mean(f)
            z = nm.dense(pooled, ts["w"], ts["wb"])
            h, _ = nm.lstm_step(z, Tensor(h0), Tensor(c0), ts["lw"], ts["lb"])
            probs = nm.softmax(h)
            diff = nm.sub(probs, Tensor(target[:, :3]))
            return nm.mean_all(nm.mul(diff, diff)), ts

        with Tape():
            loss, ts = forward(arrays, record=True)
        backward(loss)

        numeric = fd_grads(lambda a: forward(a)[0].item(), arrays)
        for name in shapes:
            assert_close_to_fd(ts[name].grad, numeric[name])

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_path_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        arrays = {
            "keys_w": rng.normal(size=(3, 2 * 2), scale=0.5),
            "keys_b": rng.normal(size=4, scale=0.5),
            "q": rng.normal(size=(1, 2, 2), scale=0.5),
        }
        feat = rng.normal(size=(1, 2, 3, 3))  # batch 1, 2x3 grid, 3 channels

        def forward(a, record=False):
            ts = {n: Tensor(v, requires_grad=record) for n, v in a.items()}
            flat = nm.reshape(Tensor(feat), (6, 3))
            keys = nm.reshape(nm.dense(flat, ts["keys_w"], ts["keys_b"]), (1, 6, 2, 2))
            logits = nm.attention_scores(keys, ts["q"])
            weights = nm.softmax(logits)
            mixed = nm.attention_apply(weights, keys)
            return nm.sum_all(nm.mul(mixed, mixed)), ts

        with Tape():
            loss, ts = forward(arrays, record=True)
        backward(loss)
        numeric = fd_grads(lambda a: forward(a)[0].item(), arrays)
        for name in arrays:
            assert_close_to_fd(ts[name].grad, numeric[name])

    def test_elementwise_ops_match_finite_differences(self):
        rng = np.random.default_rng(13)
        v = rng.normal(size=8) * 0.9 + 0.05  # keep away from kinks

        def forward(a, record=False):
            t = Tensor(a["v"], requires_grad=record)
            y = nm.add(nm.exp(nm.scale(t, 0.3)), nm.tanh(t))
            y = nm.mul(y, nm.sigmoid(t))
            y = nm.minimum(y, nm.clip(t, -0.5, 0.5))
            return nm.sum_all(y), t

        arrays = {"v": v}
        with Tape():
            loss, t = forward(arrays, record=True)
        backward(loss)
        numeric = fd_grads(lambda a: forward(a)[0].item(), arrays)
        assert_close_to_fd(t.grad, numeric["v"])

    def test_gather_and_log_softmax_match_finite_differences(self):
        rng = np.random.default_rng(14)
        logits = rng.normal(size=(4, 5))
        idx = np.array([0, 3, 2, 4])

        def forward(a, record=False):
            t = Tensor(a["l"], requires_grad=record)
            lp = nm.gather_last(nm.log_softmax(t), idx)
            return nm.mean_all(lp), t

        arrays = {"l": logits}
        with Tape():
            loss, t = forward(arrays, record=True)
        backward(loss)
        numeric = fd_grads(lambda a: forward(a)[0].item(), arrays)
        assert_close_to_fd(t.grad, numeric["l"])

    def test_untracked_inputs_get_no_grad(self):
        x = Tensor(np.ones(3))  # constant
        p = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            loss = nm.sum_all(nm.mul(x, p))
        backward(loss)
        assert x.grad is None
        assert np.array_equal(p.grad, np.ones(3))


# ---------------------------------------------------------------------------
# adam


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        st = AdamState(p, lr=1e-3)
        before = p["w"].data.copy()
        adam_update(p, {"w": np.zeros(2)}, st)
        assert np.array_equal(p["w"].data, before)

    def test_first_step_scalar_oracle(self):
        lr, b1, b2, eps = 1e-4, 0.9, 0.999, 1e-8
        g = 0.37
        p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
        st = AdamState(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
        adam_update(p, {"w": np.array([g])}, st)
        m = (1 - b1) * g / (1 - b1)
        v = (1 - b2) * g * g / (1 - b2)
        expected = 2.0 - lr * m / (math.sqrt(v) + eps)
        assert abs(p["w"].data[0] - expected) < 1e-15

    def test_constant_gradient_monotone_decrease(self):
        p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        st = AdamState(p, lr=1e-4)
        prev = 0.0
        for _ in range(100):
            adam_update(p, {"w": np.array([1.0])}, st)
            assert p["w"].data[0] < prev
            prev = p["w"].data[0]

    def test_matches_scalar_reference_over_steps(self):
        lr, b1, b2, eps = 3e-3, 0.9, 0.999, 1e-8
        rng = np.random.default_rng(17)
        p = {"w": Tensor(rng.normal(size=4), requires_grad=True)}
        st = AdamState(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
        ref = p["w"].data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 21):
            g = rng.normal(size=4)
            adam_update(p, {"w": g}, st)
            for j in range(4):
                m[j] = b1 * m[j] + (1 - b1) * g[j]
                v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j]
                mh = m[j] / (1 - b1 ** t)
                vh = v[j] / (1 - b2 ** t)
                ref[j] -= lr * mh / (math.sqrt(vh) + eps)
        assert np.max(np.abs(p["w"].data - ref)) < 1e-12

    def test_step_counter_increases(self):
        p = {"w": Tensor(np.zeros(1), requires_grad=True)}
        st = AdamState(p)
        for expect in (1, 2, 3):
            adam_update(p, {"w": np.zeros(1)}, st)
            assert st.step == expect


# ---------------------------------------------------------------------------
# determinism and serialization


class TestDeterminism:
    def test_repeated_forward_bit_identical(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(3, 6, 6, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        outs = []
        for _ in range(3):
            f = nm.relu(nm.conv2d(Tensor(x), Tensor(k), Tensor(b)))
            outs.append(nm.softmax(nm.spatial_mean(f)).data)
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(outs[1], outs[2])

    def test_backward_bit_identical(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(2, 4, 4, 2))
        kv = rng.normal(size=(3, 3, 2, 3))
        grads = []
        for _ in range(2):
            k = Tensor(kv, requires_grad=True)
            with Tape():
                loss = nm.mean_all(nm.conv2d(Tensor(x), k, Tensor(np.zeros(3))))
            backward(loss)
            grads.append(k.grad)
        assert np.array_equal(grads[0], grads[1])


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        params = {
            "conv/k": rng.normal(size=(3, 3, 2, 4)),
            "conv/b": rng.normal(size=4),
            "lstm/w": rng.normal(size=(10, 16)),
        }
        blob = str(tmp_path / "p.bin")
        man = str(tmp_path / "p.json")
        nm.save_params(blob, man, params)
        loaded = nm.load_params(blob, man)
        assert set(loaded) == set(params)
        for k in params:
            assert np.array_equal(loaded[k], params[k])

    def test_byte_identical_across_saves(self, tmp_path):
        rng = np.random.default_rng(24)
        params = {"a": rng.normal(size=(5, 3)), "b": rng.normal(size=7)}
        paths = []
        for tag in ("one", "two"):
            blob = tmp_path / f"{tag}.bin"
            man = tmp_path / f"{tag}.json"
            nm.save_params(str(blob), str(man), params)
            paths.append((blob.read_bytes(), man.read_bytes()))
        assert paths[0] == paths[1]

    def test_tensor_values_accepted(self, tmp_path):
        params = {"w": Tensor(np.arange(4.0), requires_grad=True)}
        blob = str(tmp_path / "p.bin")
        man = str(tmp_path / "p.json")
        nm.save_params(blob, man, params)
        loaded = nm.load_params(blob, man)
        assert np.array_equal(loaded["w"], np.arange(4.0))
