"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they pass.
The end-to-end criterion trains on the seeded synthetic dataset (6 gestures x
5 locations x 5 users, 20 samples per combination, 1 x 16 x 128) and is sized
for a small CPU box.
"""

import math
import os

import numpy as np
import pytest
import torch

from gradcheck import check_gradients
from test_losses import _fake_output, _lts

from wimuse import (
    AblationConfig,
    HyperParams,
    SynthConfig,
    TaskSpec,
    TrainConfig,
    build_model,
    count_multiadds,
    count_parameters,
    emit_report,
    evaluate,
    feature_kd_loss,
    load_checkpoint,
    logits_kd_loss,
    run_ablation,
    save_checkpoint,
    softmax,
    split_dataset,
    synth_dataset,
    train_mts,
    train_sts,
    uncertainty_weighted,
    wimuse_total_loss,
)
from wimuse.losses import cross_entropy, cross_entropy_from_logits
from wimuse.training import batch_indices

GR6 = TaskSpec.with_generic_names("GR", 6, "gesture")
IL16 = TaskSpec.with_generic_names("IL", 16, "location")
ARIL_GEOMETRY = (1, 52, 192)

ACCEPTANCE_SYNTH = SynthConfig(num_gestures=6, num_locations=5, num_users=5,
                               samples_per_combo=20, L=1, S=16, P=128,
                               noise_sigma=0.05, seed=7)
SPLIT_SEED = 1
HYPER3 = HyperParams.uniform(("GR", "IL", "UI"), lam=1.0, tau=1.0)

TEACHER_EPOCHS = {"GR": 6, "IL": 6, "UI": 12}
STUDENT_EPOCHS = 8
TREND_EPOCHS = 4
TREND_SEEDS = (0, 1, 2)


def _line(criterion, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


def _cfg(epochs, seed=0, **kwargs):
    return TrainConfig(epochs=epochs, batch_size=32, lr=1e-3, lr_decay_epochs=(),
                       seed=seed, hyper=HYPER3, **kwargs)


@pytest.fixture(scope="module")
def full_split():
    ds = synth_dataset(ACCEPTANCE_SYNTH)
    return split_dataset(ds, 0.8, seed=SPLIT_SEED)


@pytest.fixture(scope="module")
def teachers(full_split):
    train, test = full_split
    out = {}
    for task, epochs in TEACHER_EPOCHS.items():
        model, report = train_sts(task, train, test, _cfg(epochs))
        out[task] = (model, report)
    return out


@pytest.fixture(scope="module")
def wimuse_run(full_split, teachers):
    train, test = full_split
    teacher_models = {k: m for k, (m, _) in teachers.items()}
    digests_before = {k: m.parameter_digest() for k, m in teacher_models.items()}
    model, report = train_mts("WIMUSE", train, test, teacher_models,
                              _cfg(STUDENT_EPOCHS))
    digests_after = {k: m.parameter_digest() for k, m in teacher_models.items()}
    return {
        "model": model,
        "report": report,
        "teacher_digests_before": digests_before,
        "teacher_digests_after": digests_after,
    }


class TestCriterion1Parameters:
    def test_exact_parameter_reconciliation(self):
        expected = {
            ("STS", (GR6,)): 674566,
            ("STS", (IL16,)): 677136,
            ("NMTS", (GR6, IL16)): 563222,
            ("UMTS", (GR6, IL16)): 563222,
            ("KDMTS", (GR6, IL16)): 563222,
            ("KDMTS_RA", (GR6, IL16)): 662038,
            ("WIMUSE", (GR6, IL16)): 662038,
        }
        got = {key: count_parameters(build_model(key[0], ARIL_GEOMETRY, key[1], 0))
               for key in expected}
        ok = got == expected
        detail = ", ".join(f"{k[0]}({'+'.join(t.name for t in k[1])})={v}"
                           for k, v in got.items())
        _line("criterion 1 exact parameter counts", ok, detail)


class TestCriterion2Multiadds:
    def test_multiadd_reconciliation_within_one_percent(self):
        targets = {
            ("STS", (GR6,)): 285.56e6,
            ("NMTS", (GR6, IL16)): 298.20e6,
            ("WIMUSE", (GR6, IL16)): 411.45e6,
        }
        details, ok = [], True
        for (kind, tasks), target in targets.items():
            macs = count_multiadds(build_model(kind, ARIL_GEOMETRY, tasks, 0),
                                   (52, 192), batch=16)
            rel = abs(macs - target) / target
            ok &= rel < 0.01
            details.append(f"{kind}={macs / 1e6:.2f}M (target {target / 1e6:.2f}M, "
                           f"err {rel:.4%})")
        _line("criterion 2 multiply-adds within 1%", ok, "; ".join(details))


class TestCriterion3LossSuite:
    def test_loss_examples_and_ranges(self):
        rng = np.random.default_rng(0)
        # softmax / cross-entropy examples
        torch.testing.assert_close(softmax(torch.tensor([0.0, 0.0])),
                                   torch.tensor([0.5, 0.5]))
        p = softmax(torch.tensor([0.0, math.log(3.0)], dtype=torch.float64))
        torch.testing.assert_close(p, torch.tensor([0.25, 0.75], dtype=torch.float64))
        assert float(cross_entropy(torch.tensor([0.25, 0.75], dtype=torch.float64), 1)) \
            == pytest.approx(-math.log(0.75), rel=1e-12)
        # feature distillation stays within [0, 2] on 1000 random instances
        worst = 0.0
        for _ in range(1000):
            c = int(rng.integers(2, 6))
            s = torch.tensor(rng.normal(size=(1, c, int(rng.integers(3, 24)))))
            t = torch.tensor(rng.normal(size=(1, c, int(rng.integers(3, 24)))))
            v = float(feature_kd_loss(s, t))
            worst = max(worst, max(v - 2.0, -v))
            assert 0.0 <= v <= 2.0 + 1e-9
        # soft-logits self-distillation equals entropy within 1e-9
        max_err = 0.0
        for _ in range(100):
            z = torch.tensor(rng.normal(size=6), dtype=torch.float64)
            tau = float(rng.uniform(0.5, 8.0))
            pz = softmax(z / tau).numpy()
            entropy = float(-(pz * np.log(pz)).sum())
            max_err = max(max_err, abs(float(logits_kd_loss(z, z, tau)) - entropy))
        assert max_err <= 1e-9
        _line("criterion 3 loss unit suite", True,
              f"range margin {worst:.2e}, self-entropy err {max_err:.2e}")


class TestCriterion4Gradients:
    TOL = 1e-4
    INSTANCES = 20

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(1)
        for _ in range(self.INSTANCES):
            z = torch.tensor(rng.normal(size=(3, 5)), dtype=torch.float64,
                             requires_grad=True)
            y = torch.tensor(rng.integers(0, 5, size=3))
            check_gradients(lambda: cross_entropy_from_logits(z, y).mean(), [z], self.TOL)
        _line("criterion 4 cross-entropy gradient", True,
              f"{self.INSTANCES} instances <= {self.TOL}")

    def test_feature_kd_gradient(self):
        rng = np.random.default_rng(2)
        for _ in range(self.INSTANCES):
            s = torch.tensor(rng.normal(size=(2, 3, 9)), dtype=torch.float64,
                             requires_grad=True)
            t = torch.tensor(rng.normal(size=(2, 3, 5)), dtype=torch.float64)
            lt = _lts(("t",), 3, rng)["t"]
            lt.weight.requires_grad_(True)
            check_gradients(lambda: feature_kd_loss(s, t, lt).mean(), [s, lt.weight],
                            self.TOL)
        _line("criterion 4 feature-distillation gradient", True,
              f"{self.INSTANCES} instances <= {self.TOL}")

    def test_logits_kd_gradient(self):
        rng = np.random.default_rng(3)
        for _ in range(self.INSTANCES):
            z_s = torch.tensor(rng.normal(size=(2, 4)), dtype=torch.float64,
                               requires_grad=True)
            z_t = torch.tensor(rng.normal(size=(2, 4)), dtype=torch.float64)
            tau = float(rng.uniform(0.5, 8.0))
            check_gradients(lambda: logits_kd_loss(z_s, z_t, tau).mean(), [z_s], self.TOL)
        _line("criterion 4 soft-logits gradient", True,
              f"{self.INSTANCES} instances <= {self.TOL}")

    def test_uncertainty_gradient(self):
        rng = np.random.default_rng(4)
        for _ in range(self.INSTANCES):
            l = {k: torch.tensor(abs(rng.normal()) + 0.1, dtype=torch.float64,
                                 requires_grad=True) for k in ("a", "b")}
            s = {k: torch.tensor(rng.normal(), dtype=torch.float64,
                                 requires_grad=True) for k in ("a", "b")}
            check_gradients(lambda: uncertainty_weighted(l, s),
                            list(l.values()) + list(s.values()), self.TOL)
        _line("criterion 4 uncertainty objective gradient", True,
              f"{self.INSTANCES} instances <= {self.TOL}")

    def test_total_objective_gradient(self):
        rng = np.random.default_rng(5)
        for _ in range(self.INSTANCES):
            out = _fake_output(rng, requires_grad=True)
            labels = {t: torch.tensor(rng.integers(0, 4, size=2)) for t in out.logits}
            hyper = HyperParams.uniform(out.logits, lam=1.5, tau=3.0)
            lts = _lts(out.logits, 3, rng)
            for lt in lts.values():
                lt.weight.requires_grad_(True)
            leaves = [out.common_feature] + list(out.logits.values()) + \
                     [lt.weight for lt in lts.values()]
            check_gradients(lambda: wimuse_total_loss(out, labels, hyper, lts)[0],
                            leaves, self.TOL)
        _line("criterion 4 combined objective gradient", True,
              f"{self.INSTANCES} instances <= {self.TOL}")


class TestCriterion5Shapes:
    def _ladder(self, length, kernel, stride, padding):
        return (length + 2 * padding - kernel) // stride + 1

    def _expected_lengths(self, P, strides):
        n = self._ladder(self._ladder(P, 7, 2, 3), 3, 2, 1)
        low = n
        for s in strides:
            n = self._ladder(n, 3, s, 1)
        return low, n

    def _check_geometry(self, L, S, P, seed=0):
        gr = TaskSpec.with_generic_names("GR", 6, "g")
        il = TaskSpec.with_generic_names("IL", 16, "l")
        x = torch.randn(1, L, S, P)

        sts = build_model("STS", (L, S, P), (gr,), seed).eval()
        _, sts_len = self._expected_lengths(P, (1, 2, 1, 2, 1))
        out = sts(x)
        assert tuple(out.common_feature.shape[1:]) == (128 * L, sts_len)
        assert out.logits["GR"].shape[-1] == 6

        wim = build_model("WIMUSE", (L, S, P), (gr, il), seed).eval()
        low_len, mts_len = self._expected_lengths(P, (1, 2, 1))
        ra_len = self._ladder(low_len, 3, 2, 1)
        out = wim(x, include_teachers=False)
        assert tuple(out.common_feature.shape[1:]) == (128 * L, mts_len)
        for t in ("GR", "IL"):
            assert tuple(out.comp_features[t].shape[1:]) == (128 * L, ra_len)
        assert out.logits["IL"].shape[-1] == 16
        return sts_len, mts_len

    def test_paper_geometries_and_random(self):
        details = []
        for L, S, P in [(1, 52, 192), (3, 114, 1800), (3, 30, 1800)]:
            sts_len, mts_len = self._check_geometry(L, S, P)
            details.append(f"{L}x{S}x{P}: deep lengths {sts_len}/{mts_len}")
        rng = np.random.default_rng(99)
        for i in range(10):
            L = int(rng.integers(1, 4))
            S = int(rng.integers(2, 12))
            P = int(rng.integers(6, 40)) * 8
            self._check_geometry(L, S, P, seed=i)
        _line("criterion 5 shape contracts", True,
              "; ".join(details) + "; plus 10 random geometries")


class TestCriterion6FreezeDeterminism:
    def test_teacher_digests_unchanged_through_phase2(self, wimuse_run):
        ok = wimuse_run["teacher_digests_before"] == wimuse_run["teacher_digests_after"]
        _line("criterion 6 teacher freeze through phase 2", ok,
              "3 teacher digests identical before/after student training")

    def test_split_init_batch_order_reproducible(self, full_split):
        ds = synth_dataset(ACCEPTANCE_SYNTH)
        again = split_dataset(ds, 0.8, seed=SPLIT_SEED)
        ok = (again[0].sample_ids == full_split[0].sample_ids
              and again[1].sample_ids == full_split[1].sample_ids)

        init_a = build_model("WIMUSE", (1, 16, 128), ds.meta.tasks, seed=3)
        init_b = build_model("WIMUSE", (1, 16, 128), ds.meta.tasks, seed=3)
        ok &= init_a.parameter_digest() == init_b.parameter_digest()

        for a, b in zip(batch_indices(2400, 32, np.random.default_rng(5)),
                        batch_indices(2400, 32, np.random.default_rng(5))):
            ok &= bool(np.array_equal(a, b))
        _line("criterion 6 split/init/batch-order determinism", ok,
              "regenerated dataset, split, init, and batch schedule bit-identical")

    def test_checkpoint_round_trip_bit_exact(self, wimuse_run, full_split, tmp_path):
        model = wimuse_run["model"]
        path = save_checkpoint(model, tmp_path / "wimuse.ckpt")
        loaded = load_checkpoint(path)
        ok = loaded.parameter_digest() == model.parameter_digest()
        x = torch.from_numpy(
            full_split[1].amplitude_stack()[:8].reshape(8, 16, 128))
        with torch.no_grad():
            a = model.eval()(x, include_teachers=False)
            b = loaded.eval()(x, include_teachers=False)
        for t in a.logits:
            ok &= bool(torch.equal(a.logits[t], b.logits[t]))
        _line("criterion 6 checkpoint round-trip", ok,
              "digest and forward bit-identical after save/load")


class TestCriterion7SyntheticEndToEnd:
    def test_every_variant_overfits_64_samples(self, full_split):
        train, _ = full_split
        rng = np.random.default_rng(3)
        idx = sorted(int(i) for i in rng.choice(len(train), 64, replace=False))
        subset = train.subset(idx)
        cfg = TrainConfig(epochs=300, batch_size=8, lr=1e-3, lr_decay_epochs=(),
                          seed=0, hyper=HYPER3, early_stop_train_acc=1.0)

        results = {}
        sub_teachers = {}
        for task in ("GR", "IL", "UI"):
            model, report = train_sts(task, subset, subset, cfg)
            sub_teachers[task] = model
            results[f"STS-{task}"] = report
        for kind in ("NMTS", "UMTS", "KDMTS", "KDMTS_RA", "WIMUSE"):
            needs_kd = kind in ("KDMTS", "KDMTS_RA", "WIMUSE")
            _, report = train_mts(kind, subset, subset,
                                  sub_teachers if needs_kd else None, cfg)
            results[kind] = report

        ok = True
        details = []
        for name, report in results.items():
            reached = all(a >= 1.0 for a in report.rows[-1].train_acc.values())
            ok &= reached and len(report.rows) <= 300
            details.append(f"{name}:{len(report.rows)}ep")
            # declining-loss proxy on the same run
            key = next(iter(report.rows[-1].loss_components))
            ce = [r.loss_components[key]["ce"] for r in report.rows]
            k = min(10, max(1, len(ce) // 2))
            ok &= float(np.mean(ce[-k:])) < float(np.mean(ce[:k]))
        _line("criterion 7a all variants overfit 64 samples within 300 epochs",
              ok, " ".join(details))

    def test_full_run_accuracy_gates(self, teachers, wimuse_run):
        gates = {"GR": 0.70, "IL": 0.90, "UI": 0.90}
        ok = True
        details = []
        for task, (model, report) in teachers.items():
            acc = report.best_test_acc[task]
            ok &= acc >= gates[task]
            details.append(f"STS-{task}={acc:.3f}(>= {gates[task]})")
        for task, gate in gates.items():
            acc = wimuse_run["report"].best_test_acc[task]
            ok &= acc >= gate
            details.append(f"WIMUSE-{task}={acc:.3f}(>= {gate})")
        _line("criterion 7b full-run accuracy gates", ok, " ".join(details))

    def test_trend_table_three_seeds(self, full_split, teachers, tmp_path):
        ds = synth_dataset(ACCEPTANCE_SYNTH)
        cfg = AblationConfig(
            dataset=ds,
            variants=("NMTS", "WIMUSE"),
            seeds=TREND_SEEDS,
            train_ratio=0.8,
            split_seed=SPLIT_SEED,
            train=_cfg(TREND_EPOCHS),
        )
        result = run_ablation(cfg, {k: m for k, (m, _) in teachers.items()})
        paths = emit_report(tmp_path, experiment=result)
        ok = len(result.rows) == len(TREND_SEEDS) * 2 and all(p.is_file() for p in paths)
        print((tmp_path / "ablation.txt").read_text())
        summary = "; ".join(
            f"{agg['variant']}: " + " ".join(
                f"{t}={100 * agg[f'{t}_mean']:.1f}+-{100 * agg[f'{t}_std']:.1f}"
                for t in result.task_names)
            for agg in result.aggregate()
        )
        _line("criterion 7c NMTS-vs-WIMUSE trend over 3 seeds (reported, not gated)",
              ok, summary)


@pytest.mark.skipif(
    "WIMUSE_ARIL_DIR" not in os.environ,
    reason="optional hours-long reproduction; set WIMUSE_ARIL_DIR to the public "
           "dataset directory to run",
)
class TestCriterion8ArilReproduction:
    def test_published_two_task_accuracy(self, tmp_path):
        from wimuse import import_aril

        ds = import_aril(os.environ["WIMUSE_ARIL_DIR"])
        train, test = split_dataset(ds, 0.8, seed=0)
        epochs = int(os.environ.get("WIMUSE_ARIL_EPOCHS", "500"))
        decay = tuple(e for e in (100, 200, 300) if e < epochs)
        hyper = HyperParams.uniform(("GR", "IL"), lam=8.0, tau=8.0)
        cfg = TrainConfig(epochs=epochs, batch_size=8, lr=1e-3, lr_decay_epochs=decay,
                          seed=0, hyper=hyper, checkpoint_dir=tmp_path)

        teachers = {}
        for task in ("GR", "IL"):
            teachers[task], _ = train_sts(task, train, test, cfg)
        model, report = train_mts("WIMUSE", train, test, teachers, cfg)

        gr = report.best_test_acc["GR"]
        il = report.best_test_acc["IL"]
        ok = abs(gr - 0.9570) <= 0.02 and abs(il - 0.9916) <= 0.01
        _line("criterion 8 published two-task accuracy", ok,
              f"GR={gr:.4f} (target 0.9570 +- 0.02), IL={il:.4f} (target 0.9916 +- 0.01)")
