"""Loss values against independent oracles, range/shift properties, and
analytic-vs-central-finite-difference gradient checks at double precision."""

import math

import numpy as np
import pytest
import torch

from wimuse import (
    HyperParams,
    cross_entropy,
    feature_kd_loss,
    logits_kd_loss,
    multitask_ce,
    softmax,
    uncertainty_weighted,
    wimuse_total_loss,
)
from wimuse.losses import cross_entropy_from_logits
from wimuse.models import ForwardOutput


from gradcheck import check_gradients


def _leaf(rng, *shape):
    return torch.tensor(rng.normal(size=shape), dtype=torch.float64, requires_grad=True)


class TestSoftmax:
    def test_symmetric_pair(self):
        torch.testing.assert_close(softmax(torch.tensor([0.0, 0.0])),
                                   torch.tensor([0.5, 0.5]))

    def test_analytic_quarter(self):
        p = softmax(torch.tensor([0.0, math.log(3.0)], dtype=torch.float64))
        torch.testing.assert_close(p, torch.tensor([0.25, 0.75], dtype=torch.float64))

    def test_matches_high_precision_oracle(self):
        import mpmath
        mpmath.mp.dps = 50
        z = [1.0, 2.0, 3.0]
        exps = [mpmath.e ** v for v in z]
        total = sum(exps)
        expected = [float(e / total) for e in exps]
        p = softmax(torch.tensor(z, dtype=torch.float64))
        np.testing.assert_allclose(p.numpy(), expected, rtol=1e-14)

    def test_sums_to_one(self, rng):
        for _ in range(50):
            z = torch.tensor(rng.normal(scale=10.0, size=rng.integers(2, 9)))
            assert abs(float(softmax(z).sum()) - 1.0) <= 1e-12

    def test_shift_invariance(self, rng):
        for _ in range(50):
            z = torch.tensor(rng.normal(size=6), dtype=torch.float64)
            shifted = softmax(z + 13.7)
            torch.testing.assert_close(softmax(z), shifted, rtol=0, atol=1e-12)

    def test_extreme_magnitudes_stay_finite(self):
        p = softmax(torch.tensor([1e4, -1e4, 0.0]))
        assert torch.isfinite(p).all()
        assert float(p.sum()) == pytest.approx(1.0)


class TestCrossEntropy:
    def test_one_hot_correct_is_zero(self):
        p = torch.tensor([0.0, 1.0, 0.0])
        assert float(cross_entropy(p, 1)) == pytest.approx(0.0)

    def test_uniform_is_log_m(self):
        for m in (2, 5, 9):
            p = torch.full((m,), 1.0 / m, dtype=torch.float64)
            assert float(cross_entropy(p, 0)) == pytest.approx(math.log(m), rel=1e-12)

    def test_scalar_oracle(self):
        p = torch.tensor([0.25, 0.75], dtype=torch.float64)
        assert float(cross_entropy(p, 1)) == pytest.approx(-math.log(0.75), rel=1e-12)

    def test_zero_probability_clamped_finite(self):
        p = torch.tensor([1.0, 0.0])
        v = float(cross_entropy(p, 1))
        assert math.isfinite(v) and v > 20

    def test_nonnegative_and_zero_iff_certain(self, rng):
        for _ in range(100):
            raw = rng.random(4) + 1e-3
            p = torch.tensor(raw / raw.sum())
            y = int(rng.integers(0, 4))
            v = float(cross_entropy(p, y))
            assert v >= 0.0
            assert (v == 0.0) == (float(p[y]) == 1.0)

    def test_batched(self):
        p = torch.tensor([[0.5, 0.5], [0.9, 0.1]], dtype=torch.float64)
        out = cross_entropy(p, torch.tensor([0, 1]))
        np.testing.assert_allclose(out.numpy(), [math.log(2.0), -math.log(0.1)], rtol=1e-12)


class TestMultitaskCe:
    def test_unit_weights_sum(self):
        losses = {"a": torch.tensor(0.3), "b": torch.tensor(0.9)}
        assert float(multitask_ce(losses, {"a": 1.0, "b": 1.0})) == pytest.approx(1.2)

    def test_zero_weight_drops_task(self):
        losses = {"a": torch.tensor(0.3), "b": torch.tensor(0.9)}
        assert float(multitask_ce(losses, {"a": 1.0, "b": 0.0})) == pytest.approx(0.3)

    def test_weighted_arithmetic(self):
        losses = {"a": torch.tensor(0.5), "b": torch.tensor(1.0)}
        assert float(multitask_ce(losses, {"a": 2.0, "b": 3.0})) == pytest.approx(4.0)

    def test_missing_weight_rejected(self):
        with pytest.raises(KeyError, match="weight"):
            multitask_ce({"a": torch.tensor(0.1)}, {})

    def test_linear_in_each_loss(self, rng):
        w = {"a": 1.3, "b": 0.7}
        base = {"a": torch.tensor(rng.random()), "b": torch.tensor(rng.random())}
        bumped = dict(base)
        bumped["a"] = base["a"] + 1.0
        delta = float(multitask_ce(bumped, w)) - float(multitask_ce(base, w))
        assert delta == pytest.approx(w["a"], rel=1e-6)


class TestUncertaintyWeighted:
    def test_zero_logvars_reduce_to_sum(self):
        losses = {"a": torch.tensor(0.4), "b": torch.tensor(0.6)}
        s = {"a": torch.tensor(0.0), "b": torch.tensor(0.0)}
        assert float(uncertainty_weighted(losses, s)) == pytest.approx(1.0)

    def test_single_task_optimum_from_calculus(self):
        # minimizing exp(-s) * l + s over s gives s* = ln(l), value 1 + ln(l)
        for l in (0.5, 1.7, 4.2):
            s_star = torch.tensor(math.log(l), dtype=torch.float64)
            v = float(uncertainty_weighted({"t": torch.tensor(l, dtype=torch.float64)},
                                           {"t": s_star}))
            assert v == pytest.approx(1.0 + math.log(l), rel=1e-12)
            # neighbourhood check: the optimum really is a minimum
            for ds in (-0.05, 0.05):
                v2 = float(uncertainty_weighted(
                    {"t": torch.tensor(l, dtype=torch.float64)},
                    {"t": s_star + ds}))
                assert v2 > v

    def test_diverges_as_logvar_grows(self):
        losses = {"t": torch.tensor(1.0)}
        v = float(uncertainty_weighted(losses, {"t": torch.tensor(50.0)}))
        assert v > 49.0

    def test_missing_logvar_rejected(self):
        with pytest.raises(KeyError, match="log-variance"):
            uncertainty_weighted({"t": torch.tensor(1.0)}, {})


def _identity_lt(channels, dtype=torch.float64):
    lt = torch.nn.Conv1d(channels, channels, 1, bias=False).to(dtype)
    with torch.no_grad():
        lt.weight.copy_(torch.eye(channels, dtype=dtype).unsqueeze(-1))
    return lt


def _pool10_oracle(feat):
    """Independent adaptive-average-pool oracle: bin i spans
    [floor(i*T/10), ceil((i+1)*T/10))."""
    B, C, T = feat.shape
    out = np.zeros((B, C, 10))
    for i in range(10):
        lo = (i * T) // 10
        hi = -(-((i + 1) * T) // 10)
        out[:, :, i] = feat[:, :, lo:hi].mean(axis=2)
    return out


class TestFeatureKdLoss:
    def test_equal_features_identity_transform_zero(self, rng):
        f = torch.tensor(rng.normal(size=(2, 4, 12)))
        lt = _identity_lt(4)
        out = feature_kd_loss(f.double(), f.double(), lt)
        torch.testing.assert_close(out, torch.zeros(2, dtype=torch.float64), atol=1e-12, rtol=0)

    def test_antipodal_unit_vectors_give_two(self, rng):
        f = torch.tensor(rng.normal(size=(3, 4, 10)))
        out = feature_kd_loss((-f).double(), f.double(), _identity_lt(4))
        torch.testing.assert_close(out, torch.full((3,), 2.0, dtype=torch.float64),
                                   atol=1e-12, rtol=0)

    def test_matches_pool_flatten_normalize_distance_oracle(self, rng):
        student = rng.normal(size=(2, 3, 14))
        teacher = rng.normal(size=(2, 3, 6))
        lt = torch.nn.Conv1d(3, 3, 1, bias=False).double()
        with torch.no_grad():
            lt.weight.copy_(torch.tensor(rng.normal(size=(3, 3, 1))))
        got = feature_kd_loss(torch.tensor(student), torch.tensor(teacher), lt).detach().numpy()

        W = lt.weight.detach().numpy()[:, :, 0]
        s_pool = _pool10_oracle(student)
        t_pool = _pool10_oracle(teacher)
        s_lt = np.einsum("oc,bct->bot", W, s_pool)
        expected = []
        for b in range(2):
            u = s_lt[b].reshape(-1)
            v = t_pool[b].reshape(-1)
            u = u / np.linalg.norm(u)
            v = v / np.linalg.norm(v)
            expected.append(np.linalg.norm(u - v))
        np.testing.assert_allclose(got, expected, rtol=1e-10)

    def test_range_zero_to_two(self, rng):
        for _ in range(200):
            c = int(rng.integers(2, 5))
            s = torch.tensor(rng.normal(size=(1, c, int(rng.integers(3, 20)))))
            t = torch.tensor(rng.normal(size=(1, c, int(rng.integers(3, 20)))))
            v = float(feature_kd_loss(s, t))
            assert 0.0 <= v <= 2.0 + 1e-9

    def test_zero_feature_maps_to_unit_distance_with_warning(self, rng):
        s = torch.zeros(1, 3, 8, dtype=torch.float64)
        t = torch.tensor(rng.normal(size=(1, 3, 8)))
        with pytest.warns(UserWarning, match="zero-norm"):
            v = float(feature_kd_loss(s, t, _identity_lt(3)).detach())
        assert v == pytest.approx(1.0, rel=1e-9)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel"):
            feature_kd_loss(torch.zeros(1, 3, 8), torch.zeros(1, 4, 8))

    def test_length_mismatch_supported(self, rng):
        # the student trunk is shallower than the teacher's, lengths differ
        s = torch.tensor(rng.normal(size=(2, 4, 24)))
        t = torch.tensor(rng.normal(size=(2, 4, 12)))
        out = feature_kd_loss(s, t, _identity_lt(4))
        assert out.shape == (2,)
        assert torch.isfinite(out).all()


class TestLogitsKdLoss:
    def test_self_distillation_equals_entropy(self):
        z = torch.tensor([0.0, 0.0], dtype=torch.float64)
        v = float(logits_kd_loss(z, z, tau=1.0))
        assert v == pytest.approx(math.log(2.0), abs=1e-12)

    def test_self_case_entropy_random(self, rng):
        for _ in range(20):
            z = torch.tensor(rng.normal(size=5), dtype=torch.float64)
            tau = float(rng.uniform(0.5, 8.0))
            p = softmax(z / tau).numpy()
            entropy = float(-(p * np.log(p)).sum())
            assert float(logits_kd_loss(z, z, tau)) == pytest.approx(entropy, abs=1e-9)

    def test_huge_temperature_approaches_log_m(self):
        z_s = torch.tensor([3.0, -1.0, 0.5], dtype=torch.float64)
        z_t = torch.tensor([-2.0, 4.0, 1.0], dtype=torch.float64)
        v = float(logits_kd_loss(z_s, z_t, tau=1e6))
        assert v == pytest.approx(math.log(3.0), abs=1e-6)

    def test_scalar_oracle_tau_eight(self):
        z_s, z_t, tau = [1.0, 0.0], [0.0, 1.0], 8.0
        e_s = [math.exp(v / tau) for v in z_s]
        e_t = [math.exp(v / tau) for v in z_t]
        p1 = [e / sum(e_s) for e in e_s]
        p2 = [e / sum(e_t) for e in e_t]
        expected = -sum(a * math.log(b) for a, b in zip(p1, p2))
        got = float(logits_kd_loss(torch.tensor(z_s, dtype=torch.float64),
                                   torch.tensor(z_t, dtype=torch.float64), tau))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_directions_differ_and_swap(self, rng):
        z_s = torch.tensor(rng.normal(size=4), dtype=torch.float64)
        z_t = torch.tensor(rng.normal(size=4), dtype=torch.float64)
        a = float(logits_kd_loss(z_s, z_t, 2.0, direction="student_weights"))
        b = float(logits_kd_loss(z_t, z_s, 2.0, direction="teacher_weights"))
        assert a == pytest.approx(b, rel=1e-12)

    def test_invalid_arguments_rejected(self):
        z = torch.zeros(3)
        with pytest.raises(ValueError):
            logits_kd_loss(z, torch.zeros(4), 1.0)
        with pytest.raises(ValueError):
            logits_kd_loss(z, z, 0.0)
        with pytest.raises(ValueError):
            logits_kd_loss(z, z, 1.0, direction="sideways")


def _fake_output(rng, tasks=("GR", "IL"), batch=2, channels=3, m=4,
                 dtype=torch.float64, requires_grad=False):
    def leaf(*shape):
        return torch.tensor(rng.normal(size=shape), dtype=dtype,
                            requires_grad=requires_grad)
    return ForwardOutput(
        logits={t: leaf(batch, m) for t in tasks},
        common_feature=leaf(batch, channels, 8),
        comp_features={},
        teacher_features={t: torch.tensor(rng.normal(size=(batch, channels, 5)),
                                          dtype=dtype) for t in tasks},
        teacher_logits={t: torch.tensor(rng.normal(size=(batch, m)), dtype=dtype)
                        for t in tasks},
    )


def _lts(tasks, channels, rng):
    lts = {}
    for t in tasks:
        lt = torch.nn.Conv1d(channels, channels, 1, bias=False).double()
        with torch.no_grad():
            lt.weight.copy_(torch.tensor(rng.normal(size=(channels, channels, 1))))
        lts[t] = lt
    return lts


class TestWimuseTotalLoss:
    def test_reduces_to_multitask_ce_when_kd_disabled(self, rng):
        out = _fake_output(rng)
        labels = {t: torch.tensor([0, 1]) for t in out.logits}
        hyper = HyperParams.uniform(out.logits, lam=0.0, tau=1.0)
        total, parts = wimuse_total_loss(out, labels, hyper, _lts(out.logits, 3, rng),
                                         include_logits_kd=False)
        ces = {t: cross_entropy(softmax(out.logits[t]), labels[t]).mean()
               for t in out.logits}
        expected = float(multitask_ce(ces, hyper.omega))
        assert float(total.detach()) == pytest.approx(expected, rel=1e-12)
        assert float(parts["kd1"].detach()) == 0.0 and float(parts["kd2"].detach()) == 0.0

    def test_components_sum_to_total(self, rng):
        out = _fake_output(rng)
        labels = {t: torch.tensor([1, 3]) for t in out.logits}
        hyper = HyperParams.uniform(out.logits, lam=2.5, tau=4.0)
        total, parts = wimuse_total_loss(out, labels, hyper, _lts(out.logits, 3, rng))
        recombined = (float(parts["ce"].detach()) + float(parts["kd1"].detach())
                      + float(parts["kd2"].detach()))
        total = float(total.detach())
        assert abs(total - recombined) <= 1e-9 * max(abs(total), 1.0)

    def test_single_sample_equation_by_equation_oracle(self, rng):
        tasks = ("GR",)
        out = _fake_output(rng, tasks=tasks, batch=1, channels=2, m=3)
        labels = {"GR": torch.tensor([2])}
        lam, tau, w = 1.5, 2.0, 0.8
        hyper = HyperParams({"GR": w}, lam=lam, tau=tau)
        lts = _lts(tasks, 2, rng)
        total, _ = wimuse_total_loss(out, labels, hyper, lts)

        # oracle: evaluate each constituent definition independently in numpy
        z = out.logits["GR"].detach().numpy()[0]
        p = np.exp(z - z.max())
        p = p / p.sum()
        ce = -math.log(p[2])

        W = lts["GR"].weight.detach().numpy()[:, :, 0]
        s_pool = _pool10_oracle(out.common_feature.detach().numpy())
        t_pool = _pool10_oracle(out.teacher_features["GR"].detach().numpy())
        u = np.einsum("oc,bct->bot", W, s_pool)[0].reshape(-1)
        v = t_pool[0].reshape(-1)
        kd1 = np.linalg.norm(u / np.linalg.norm(u) - v / np.linalg.norm(v))

        zt = out.teacher_logits["GR"].detach().numpy()[0]
        p1 = np.exp(z / tau - (z / tau).max()); p1 /= p1.sum()
        p2 = np.exp(zt / tau - (zt / tau).max()); p2 /= p2.sum()
        kd2 = float(-(p1 * np.log(p2)).sum())

        expected = w * ce + lam * kd1 + kd2
        assert float(total.detach()) == pytest.approx(expected, rel=1e-10)

    def test_missing_teacher_outputs_rejected(self, rng):
        out = _fake_output(rng)
        out.teacher_logits.pop("GR")
        labels = {t: torch.tensor([0, 1]) for t in out.logits}
        hyper = HyperParams.uniform(out.logits)
        with pytest.raises(ValueError, match="teacher"):
            wimuse_total_loss(out, labels, hyper, _lts(out.logits, 3, rng))


class TestHyperParams:
    def test_invariants(self):
        with pytest.raises(ValueError):
            HyperParams({"a": 1.0}, tau=0.0)
        with pytest.raises(ValueError):
            HyperParams({"a": -1.0})
        with pytest.raises(ValueError):
            HyperParams({"a": 0.0, "b": 0.0})
        with pytest.raises(ValueError):
            HyperParams({"a": 1.0}, lam=-0.5)

    def test_uniform(self):
        h = HyperParams.uniform(("x", "y"), lam=8.0, tau=8.0)
        assert h.omega == {"x": 1.0, "y": 1.0}


class TestGradients:
    """Analytic (autograd) vs central finite differences, double precision."""

    def test_cross_entropy_through_softmax(self, rng):
        for _ in range(5):
            z = _leaf(rng, 3, 5)
            y = torch.tensor(rng.integers(0, 5, size=3))
            check_gradients(lambda: cross_entropy_from_logits(z, y).mean(), [z])

    def test_feature_kd(self, rng):
        for _ in range(5):
            s = _leaf(rng, 2, 3, 9)
            t = torch.tensor(rng.normal(size=(2, 3, 5)), dtype=torch.float64)
            lt = _lts(("t",), 3, rng)["t"]
            check_gradients(lambda: feature_kd_loss(s, t, lt).mean(), [s, lt.weight])

    def test_logits_kd(self, rng):
        for _ in range(5):
            z_s = _leaf(rng, 2, 4)
            z_t = torch.tensor(rng.normal(size=(2, 4)), dtype=torch.float64)
            tau = float(rng.uniform(0.5, 8.0))
            check_gradients(lambda: logits_kd_loss(z_s, z_t, tau).mean(), [z_s])

    def test_uncertainty_objective(self, rng):
        for _ in range(5):
            l = {k: torch.tensor(abs(rng.normal()) + 0.1, dtype=torch.float64,
                                 requires_grad=True) for k in ("a", "b")}
            s = {k: _leaf(rng) for k in ("a", "b")}
            leaves = list(l.values()) + list(s.values())
            check_gradients(lambda: uncertainty_weighted(l, s), leaves)

    def test_total_objective(self, rng):
        for _ in range(3):
            out = _fake_output(rng, requires_grad=True)
            labels = {t: torch.tensor(rng.integers(0, 4, size=2)) for t in out.logits}
            hyper = HyperParams.uniform(out.logits, lam=1.5, tau=3.0)
            lts = _lts(out.logits, 3, rng)
            for lt in lts.values():
                lt.weight.requires_grad_(True)
            leaves = [out.common_feature] + list(out.logits.values()) + \
                     [lt.weight for lt in lts.values()]
            check_gradients(
                lambda: wimuse_total_loss(out, labels, hyper, lts)[0], leaves)
