import numpy as np
import pytest

from magloc.errors import DegenerateTrainingError
from magloc.gpr import (Fingerprint, KernelParams, build_grid, fit, predict,
                        predict_many, rbf_kernel, read_fingerprints_csv,
                        write_fingerprints_csv)
from magloc.magmap import DipoleSource, FieldModel, sample_field_many


def make_params(**kw):
    base = dict(lengthscale=1.0, signal_var=25.0, noise_var=0.04)
    base.update(kw)
    return KernelParams(**base)


class TestKernel:
    def test_zero_distance(self):
        params = make_params()
        p = np.array([1.0, 2.0, 3.0])
        assert rbf_kernel(p, p, params) == 25.0

    def test_one_lengthscale(self):
        params = make_params(lengthscale=0.7)
        a = np.zeros(3)
        b = np.array([0.7, 0.0, 0.0])
        np.testing.assert_allclose(rbf_kernel(a, b, params),
                                   25.0 * np.exp(-0.5), rtol=1e-12)

    def test_symmetry(self, rng):
        params = make_params(lengthscale=0.9)
        for _ in range(100):
            a, b = rng.normal(size=3), rng.normal(size=3)
            assert rbf_kernel(a, b, params) == rbf_kernel(b, a, params)


class TestFit:
    def test_single_point_shrinkage(self):
        # 1x1 closed form: mean + signal_var/(signal_var+noise_var)*(B - mean).
        params = make_params(signal_var=4.0, noise_var=1.0)
        fp = Fingerprint(np.zeros(3), np.array([10.0, -2.0, 6.0]))
        model = fit([fp], params)
        expected = model.mean + 4.0 / 5.0 * (fp.field - model.mean)
        np.testing.assert_allclose(predict(model, fp.position), expected,
                                   atol=1e-12)

    def test_constant_fields_give_zero_weights(self, rng):
        params = make_params()
        field = np.array([30.0, -10.0, 5.0])
        fps = [Fingerprint(rng.uniform(0, 3, 3), field.copy()) for _ in range(6)]
        model = fit(fps, params)
        np.testing.assert_allclose(model.alpha, 0.0, atol=1e-12)
        np.testing.assert_allclose(predict(model, np.array([9.0, 9.0, 9.0])),
                                   field, atol=1e-12)

    def test_predictions_match_dense_solve(self, rng):
        # Independent dense solve of the same linear system.
        params = make_params(lengthscale=0.8, noise_var=0.1)
        pos = rng.uniform(0, 2, size=(5, 3))
        fields = rng.normal(size=(5, 3)) * 10
        fps = [Fingerprint(p, b) for p, b in zip(pos, fields)]
        model = fit(fps, params)

        k = np.empty((5, 5))
        for i in range(5):
            for j in range(5):
                k[i, j] = rbf_kernel(pos[i], pos[j], params)
        k += params.noise_var * np.eye(5)
        mean = fields.mean(axis=0)
        alpha = np.linalg.solve(k, fields - mean)
        for i in range(5):
            expected = mean + k[i] @ alpha - params.noise_var * alpha[i]
            np.testing.assert_allclose(predict(model, pos[i]), expected, atol=1e-8)

    def test_duplicate_positions_rejected(self):
        p = np.array([1.0, 1.0, 0.0])
        fps = [Fingerprint(p, np.zeros(3)), Fingerprint(p.copy(), np.ones(3))]
        with pytest.raises(DegenerateTrainingError):
            fit(fps, make_params())

    def test_empty_rejected(self):
        with pytest.raises(DegenerateTrainingError):
            fit([], make_params())

    def test_training_cap(self, rng):
        fps = [Fingerprint(rng.normal(size=3), np.zeros(3)) for _ in range(5001)]
        with pytest.raises(DegenerateTrainingError):
            fit(fps, make_params())


class TestPredict:
    def test_prior_reversion_far_away(self, rng):
        params = make_params()
        fps = [Fingerprint(rng.uniform(0, 1, 3), rng.normal(size=3) * 5 + 30)
               for _ in range(8)]
        model = fit(fps, params)
        far = np.array([100.0 * params.lengthscale, 0.0, 0.0])
        np.testing.assert_allclose(predict(model, far), model.mean, atol=1e-6)

    def test_noise_free_interpolation(self, rng):
        params = make_params(noise_var=0.0)
        pos = rng.uniform(0, 3, size=(30, 3))
        fields = rng.normal(size=(30, 3)) * 8 + 40
        model = fit([Fingerprint(p, b) for p, b in zip(pos, fields)], params)
        preds = predict_many(model, pos)
        np.testing.assert_allclose(preds, fields, atol=1e-8)

    def test_translation_invariance(self, rng):
        params = make_params(lengthscale=0.6)
        pos = rng.uniform(0, 2, size=(10, 3))
        fields = rng.normal(size=(10, 3)) * 5
        shift = np.array([13.0, -4.0, 2.0])
        m1 = fit([Fingerprint(p, b) for p, b in zip(pos, fields)], params)
        m2 = fit([Fingerprint(p + shift, b) for p, b in zip(pos, fields)], params)
        q = rng.uniform(0, 2, size=3)
        np.testing.assert_allclose(predict(m1, q), predict(m2, q + shift),
                                   atol=1e-9)

    def test_constant_offset_absorbed_by_mean(self, rng):
        params = make_params()
        pos = rng.uniform(0, 2, size=(12, 3))
        fields = rng.normal(size=(12, 3)) * 4
        offset = np.array([7.0, -3.0, 11.0])
        m1 = fit([Fingerprint(p, b) for p, b in zip(pos, fields)], params)
        m2 = fit([Fingerprint(p, b + offset) for p, b in zip(pos, fields)], params)
        q = rng.uniform(-1, 3, size=3)
        np.testing.assert_allclose(predict(m2, q), predict(m1, q) + offset,
                                   atol=1e-9)

    def test_holdout_rmse_on_dipole_field(self, rng):
        # Field from a known dipole model, noisy training set, held-out RMSE
        # within 3 sigma of the injected noise.
        sigma = 0.2
        model_field = FieldModel(
            np.array([20.0, 5.0, -40.0]),
            [DipoleSource(np.array([1.5, 1.5, -1.2]), np.array([40.0, -60.0, 90.0]))])
        xs = np.arange(0.0, 3.01, 0.25)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        pos = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=-1)
        truth = sample_field_many(model_field, pos)
        noisy = truth + rng.normal(0, sigma, size=truth.shape)
        fps = [Fingerprint(p, b) for p, b in zip(pos, noisy)]
        gp = fit(fps, make_params(lengthscale=0.5, noise_var=sigma**2))
        held = np.column_stack([rng.uniform(0.3, 2.7, 60),
                                rng.uniform(0.3, 2.7, 60), np.zeros(60)])
        pred = predict_many(gp, held)
        ref = sample_field_many(model_field, held)
        rmse = np.sqrt(np.mean((pred - ref)**2))
        assert rmse <= 3.0 * sigma


class TestBuildGrid:
    def test_zero_weights_give_uniform_map(self, rng):
        field = np.array([25.0, 0.0, -40.0])
        fps = [Fingerprint(rng.uniform(0, 2, 3), field.copy()) for _ in range(5)]
        model = fit(fps, make_params())
        grid = build_grid(model, (0.0, 0.0), 0.5, 4, 4)
        for i in range(4):
            for j in range(4):
                np.testing.assert_allclose(grid.values[i, j], field, atol=1e-10)

    def test_nodes_match_pointwise_predictions(self, rng):
        pos = rng.uniform(0, 2, size=(10, 3))
        fields = rng.normal(size=(10, 3)) * 6 + 30
        model = fit([Fingerprint(p, b) for p, b in zip(pos, fields)],
                    make_params())
        grid = build_grid(model, (0.2, 0.1), 0.4, 3, 3, plane_height=0.0)
        for i in range(3):
            for j in range(3):
                np.testing.assert_allclose(
                    grid.values[i, j], predict(model, grid.node_position(i, j)),
                    atol=1e-12)

    def test_save_load_round_trip(self, tmp_path, rng):
        from magloc.magmap import load_map, save_map
        pos = rng.uniform(0, 2, size=(6, 3))
        model = fit([Fingerprint(p, rng.normal(size=3) * 5 + 20) for p in pos],
                    make_params())
        grid = build_grid(model, (0.0, 0.0), 0.5, 5, 4)
        save_map(grid, tmp_path / "g.mag")
        loaded = load_map(tmp_path / "g.mag")
        assert np.array_equal(loaded.values, grid.values)


class TestFingerprintCsv:
    def test_round_trip(self, tmp_path, rng):
        fps = [Fingerprint(rng.normal(size=3), rng.normal(size=3) * 30)
               for _ in range(10)]
        path = tmp_path / "fp.csv"
        write_fingerprints_csv(fps, path)
        loaded = read_fingerprints_csv(path)
        assert len(loaded) == 10
        for a, b in zip(fps, loaded):
            assert np.array_equal(a.position, b.position)
            assert np.array_equal(a.field, b.field)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "fp.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DegenerateTrainingError):
            read_fingerprints_csv(path)
