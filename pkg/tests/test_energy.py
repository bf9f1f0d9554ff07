import numpy as np
import pandas as pd
import pytest

from modules.energy import (DescentReport, EnergyConfig, PotentialCoeffs, certify_descent, evaluate_energy,
                            mixing_weights, random_unit_embeddings, theorem1_step)
from modules.errors import ContractError, DimensionError


def config(n, lam=1.0, eta=0.1, a=1.0, b=0.1):
    return EnergyConfig(PotentialCoeffs.uniform(n, a=a, b=b), lam=lam, eta=eta)


class TestCoefficients:
    def test_a_must_exceed_eight_b(self):
        with pytest.raises(ContractError):
            PotentialCoeffs.uniform(3, a=0.8, b=0.1)

    def test_b_must_be_positive(self):
        with pytest.raises(ContractError):
            PotentialCoeffs.uniform(3, a=1.0, b=0.0)

    def test_symmetry_required(self):
        a = np.array([[1.0, 1.0], [2.0, 1.0]])
        with pytest.raises(ContractError):
            PotentialCoeffs(a, np.full((2, 2), 0.1))

    def test_eta_and_lambda_ranges(self):
        coeffs = PotentialCoeffs.uniform(2)
        with pytest.raises(ContractError):
            EnergyConfig(coeffs, lam=0.0)
        with pytest.raises(ContractError):
            EnergyConfig(coeffs, eta=1.0)


class TestEvaluateEnergy:
    def test_identical_rows_at_anchor_is_zero(self):
        H = np.tile([0.6, 0.8], (4, 1))
        assert evaluate_energy(H, H, config(4)) == 0.0

    def test_single_particle_is_anchor_term(self, rng):
        h, ref = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        assert evaluate_energy(h, ref, config(1)) == pytest.approx(float(((h - ref) ** 2).sum()), abs=1e-15)

    def test_matches_double_loop(self, rng):
        H = random_unit_embeddings(3, 4, rng)
        ref = random_unit_embeddings(3, 4, rng)
        cfg = config(3, lam=0.5)
        expected = float(((H - ref) ** 2).sum())
        for i in range(3):
            for j in range(3):
                s = float(((H[i] - H[j]) ** 2).sum())
                expected += 0.5 * (1.0 * s - 0.1 * s * s)
        assert evaluate_energy(H, ref, cfg) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            evaluate_energy(rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), config(3))


class TestDescentStep:
    def test_identical_rows_are_a_fixed_point(self):
        H = np.tile([0.0, 0.6, 0.8], (5, 1))
        assert np.max(np.abs(theorem1_step(H, config(5)) - H)) <= 1e-14

    def test_small_eta_barely_moves(self, rng):
        H = random_unit_embeddings(6, 3, rng)
        assert np.max(np.abs(theorem1_step(H, config(6, eta=1e-6)) - H)) <= 1e-5

    def test_hand_example(self):
        H = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = theorem1_step(H, config(2, eta=0.5))
        h1 = 0.5 * H[0] + 0.5 * (1.0 * H[0] + 0.6 * H[1]) / 1.6
        h2 = 0.5 * H[1] + 0.5 * (0.6 * H[0] + 1.0 * H[1]) / 1.6
        np.testing.assert_allclose(out, [h1, h2], atol=1e-15)

    def test_mixing_rows_sum_to_one(self, rng):
        W = mixing_weights(random_unit_embeddings(8, 5, rng), config(8))
        assert np.all(W > 0)
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)

    def test_unnormalized_input_gives_contract_error(self):
        H = np.array([[10.0, 0.0], [-10.0, 0.0]])
        with pytest.raises(ContractError):
            theorem1_step(H, config(2))


class TestCertifyDescent:
    def test_identical_rows_keep_energy(self):
        report = certify_descent(np.tile([1.0, 0.0], (3, 1)), config(3), steps=5)
        assert len(report.energies) == 6
        np.testing.assert_allclose(report.energies, 0.0, atol=1e-14)

    def test_single_step_does_not_increase(self, rng):
        report = certify_descent(random_unit_embeddings(10, 4, rng), config(10), steps=1)
        assert report.energies[1] <= report.energies[0] + 1e-9

    def test_random_configs_descend(self):
        rng = np.random.default_rng(2024)
        worst = -np.inf
        for _ in range(100):
            n, d = int(rng.integers(2, 17)), int(rng.integers(1, 9))
            report = certify_descent(random_unit_embeddings(n, d, rng), config(n), steps=10)
            worst = max(worst, report.max_violation)
        assert worst <= 1e-9

    def test_steps_must_be_positive(self, rng):
        with pytest.raises(ContractError):
            certify_descent(random_unit_embeddings(3, 2, rng), config(3), steps=0)

    def test_report_csv(self, tmp_path):
        report = DescentReport(energies=[3.0, 2.5, 2.25], max_violation=-0.25)
        path = tmp_path / "descent.csv"
        report.write_csv(str(path))
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["step", "energy"]
        assert frame["energy"].tolist() == [3.0, 2.5, 2.25]
