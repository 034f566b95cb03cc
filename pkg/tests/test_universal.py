import numpy as np
import pytest

from flowattack import io as flowio
from flowattack.attack import BoxConstraint, LossKind, PcfaConfig, pcfa_attack
from flowattack.core import (Image, PerturbMode, ShapeError, joint_l2_norm,
                             scale_bound)
from flowattack.evaluation import attack_strength
from flowattack.synthetic import make_pair, make_suite
from flowattack.universal import (DatasetManifest, UniversalTrainConfig,
                                  apply_universal, train_universal)


def joint_cfg(eps2=5e-3, seed=0, steps=20):
    return PcfaConfig(epsilon2=eps2, steps=steps, loss=LossKind.AEE,
                      box=BoxConstraint.CLIPPING, mode=PerturbMode.JOINT,
                      seed=seed)


class TestConfig:
    def test_cov_rejected(self):
        with pytest.raises(ValueError):
            UniversalTrainConfig(attack=PcfaConfig(epsilon2=1e-3,
                                                   box=BoxConstraint.COV))

    def test_positive_schedule(self):
        with pytest.raises(ValueError):
            UniversalTrainConfig(attack=joint_cfg(), epochs=0)


class TestApplyUniversal:
    def test_zero_perturbation_identity(self, small_pair):
        f1, f2, _ = small_pair
        from flowattack.core import Perturbation
        p = Perturbation.zeros(PerturbMode.JOINT, f1.data.shape)
        a1, a2 = apply_universal(p, f1, f2)
        assert np.array_equal(a1.data, f1.data)
        assert np.array_equal(a2.data, f2.data)

    def test_joint_equal_shift_where_unclipped(self, small_pair):
        f1, f2, _ = small_pair
        from flowattack.core import Perturbation
        rng = np.random.default_rng(0)
        d = rng.normal(0, 0.01, f1.data.shape)
        p = Perturbation(PerturbMode.JOINT, d)
        a1, a2 = apply_universal(p, f1, f2)
        raw1 = f1.data + d
        raw2 = f2.data + d
        free = ((raw1 > 0) & (raw1 < 1) & (raw2 > 0) & (raw2 < 1))
        assert np.allclose((a1.data - f1.data)[free], (a2.data - f2.data)[free],
                           atol=1e-15)

    def test_saturated_pixel_stays(self):
        ones = Image(np.ones((1, 4, 4)))
        from flowattack.core import Perturbation
        p = Perturbation(PerturbMode.JOINT, np.full((1, 4, 4), 0.3))
        a1, a2 = apply_universal(p, ones, ones)
        assert np.all(a1.data == 1.0)
        assert np.all(a2.data == 1.0)

    def test_size_mismatch_rejected(self, small_pair):
        f1, f2, _ = small_pair
        from flowattack.core import Perturbation
        p = Perturbation.zeros(PerturbMode.JOINT, (1, 8, 8))
        with pytest.raises(ShapeError):
            apply_universal(p, f1, f2)


class TestManifest:
    def test_file_parsing(self, tmp_path):
        img = np.full((1, 4, 4), 0.5)
        for name in ("a1.png", "a2.png", "b1.png", "b2.png"):
            flowio.write_image_png(tmp_path / name, img)
        flowio.write_flo(tmp_path / "gt.flo",
                         __import__("flowattack").FlowField(np.zeros((2, 4, 4))))
        manifest = tmp_path / "pairs.txt"
        manifest.write_text("# comment line\n"
                            "a1.png a2.png\n"
                            "b1.png b2.png gt.flo\n")
        data = DatasetManifest.from_file(manifest)
        pairs = data.load_pairs()
        assert len(pairs) == 2
        assert pairs[0][2] is None
        assert pairs[1][2] is not None

    def test_unreadable_pair_skipped_with_warning(self, tmp_path):
        img = np.full((1, 4, 4), 0.5)
        flowio.write_image_png(tmp_path / "ok1.png", img)
        flowio.write_image_png(tmp_path / "ok2.png", img)
        manifest = tmp_path / "pairs.txt"
        manifest.write_text("missing1.png missing2.png\nok1.png ok2.png\n")
        data = DatasetManifest.from_file(manifest)
        with pytest.warns(UserWarning):
            pairs = data.load_pairs()
        assert len(pairs) == 1

    def test_all_unreadable_is_error(self, tmp_path):
        manifest = tmp_path / "pairs.txt"
        manifest.write_text("gone1.png gone2.png\n")
        data = DatasetManifest.from_file(manifest)
        with pytest.warns(UserWarning):
            with pytest.raises(ValueError):
                data.load_pairs()

    def test_size_mismatch_is_error(self, tmp_path):
        flowio.write_image_png(tmp_path / "a1.png", np.full((1, 4, 4), 0.5))
        flowio.write_image_png(tmp_path / "a2.png", np.full((1, 4, 4), 0.5))
        flowio.write_image_png(tmp_path / "b1.png", np.full((1, 6, 6), 0.5))
        flowio.write_image_png(tmp_path / "b2.png", np.full((1, 6, 6), 0.5))
        manifest = tmp_path / "pairs.txt"
        manifest.write_text("a1.png a2.png\nb1.png b2.png\n")
        with pytest.raises(ShapeError):
            DatasetManifest.from_file(manifest).load_pairs()

    def test_bad_line_rejected(self, tmp_path):
        manifest = tmp_path / "pairs.txt"
        manifest.write_text("only_one_path.png\n")
        with pytest.raises(ValueError):
            DatasetManifest.from_file(manifest)


class TestTrainUniversal:
    def test_single_pair_matches_frame_specific(self, fast_estimator):
        """With one pair and the same total step budget, universal joint
        training optimizes the very same objective as the frame-specific
        joint attack, so their attack strengths must agree closely."""
        f1, f2, _ = make_pair(8, 48, 48)
        cfg = joint_cfg()
        specific = pcfa_attack(fast_estimator, f1, f2, cfg)
        zero = np.zeros((2, 48, 48))
        s_specific = attack_strength(specific.flow_adv, zero)

        data = DatasetManifest.from_pairs([(f1, f2)])
        pert = train_universal(fast_estimator, data, UniversalTrainConfig(
            attack=cfg, epochs=1, batch_size=1, steps_per_batch=20))
        a1, a2 = apply_universal(pert, f1, f2)
        s_universal = attack_strength(fast_estimator.estimate_flow(a1, a2), zero)
        assert abs(s_universal - s_specific) <= 0.05 * s_specific

    def test_zero_budget_returns_zero_perturbation(self, fast_estimator):
        suite = make_suite(2, seed=5, height=24, width=24)
        data = DatasetManifest.from_pairs([(a, b) for a, b, _ in suite])
        pert = train_universal(fast_estimator, data, UniversalTrainConfig(
            attack=joint_cfg(eps2=0.0), epochs=2, batch_size=2))
        assert joint_l2_norm(pert) <= 1e-6 * scale_bound(1.0, 24 * 24, 1)

    def test_norm_bound_holds(self, fast_estimator):
        suite = make_suite(3, seed=6, height=24, width=24)
        data = DatasetManifest.from_pairs([(a, b) for a, b, _ in suite])
        pert = train_universal(fast_estimator, data, UniversalTrainConfig(
            attack=joint_cfg(eps2=5e-3, seed=1), epochs=4, batch_size=2))
        assert joint_l2_norm(pert) <= 1.01 * scale_bound(5e-3, 24 * 24, 1)

    def test_shuffle_determinism(self, fast_estimator):
        suite = make_suite(3, seed=7, height=24, width=24)
        data = DatasetManifest.from_pairs([(a, b) for a, b, _ in suite])
        ucfg = UniversalTrainConfig(attack=joint_cfg(seed=9), epochs=3,
                                    batch_size=2)
        p1 = train_universal(fast_estimator, data, ucfg)
        p2 = train_universal(fast_estimator, data, ucfg)
        assert np.array_equal(p1.first, p2.first)

    def test_disjoint_mode_produces_two_fields(self, fast_estimator):
        suite = make_suite(2, seed=8, height=24, width=24)
        data = DatasetManifest.from_pairs([(a, b) for a, b, _ in suite])
        cfg = PcfaConfig(epsilon2=5e-3, steps=20, loss=LossKind.AEE,
                         box=BoxConstraint.CLIPPING, mode=PerturbMode.DISJOINT,
                         seed=2)
        pert = train_universal(fast_estimator, data, UniversalTrainConfig(
            attack=cfg, epochs=2, batch_size=2))
        assert pert.mode == PerturbMode.DISJOINT
        assert pert.second is not None
        assert joint_l2_norm(pert) <= 1.01 * scale_bound(5e-3, 24 * 24, 1)
