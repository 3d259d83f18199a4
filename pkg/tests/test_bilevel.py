import math

import numpy as np
import pytest

from biasadapt.bilevel import (
    LowerOptimizer,
    TrainConfig,
    TrainingDiverged,
    _theta_phi_arrays,
    lower_loss,
    lower_step,
    omega_grad_closed_form,
    omega_step,
    schedule_rates,
    train,
    upper_loss,
    write_trace_csv,
)
from biasadapt.data import Dataset, one_hot, synth_gaussian_mixture
from biasadapt.model import copy_state, forward_train, init_model
from biasadapt.numcore import child_seeds, log_softmax, make_rng, relative_diff
from biasadapt.pseudo import PseudoBatch, assign_pseudo_labels, augment
from biasadapt.testing import (
    closed_form_hypergrad,
    fd_hypergrad,
    make_small_problem,
    unrolled_hypergrad,
)


def flat(arrays):
    return np.concatenate([a.ravel() for a in arrays])


class TestSchedules:
    def test_theorem_schedule_values(self):
        cfg = TrainConfig(schedule="theorem_f", c1=1.0, c2=1.0)
        assert schedule_rates(cfg, 4) == (0.25, 0.5)
        assert schedule_rates(cfg, 1) == (1.0, 1.0)

    def test_constant_schedule(self):
        cfg = TrainConfig(alpha=0.3, eta=0.01)
        for t in (1, 10, 1000):
            assert schedule_rates(cfg, t) == (0.3, 0.01)

    def test_iteration_must_be_positive(self):
        with pytest.raises(ValueError, match="iteration"):
            schedule_rates(TrainConfig(), 0)


class TestLowerLoss:
    def test_zero_head_matches_plain_pseudo_labeling_loss(self):
        problem = make_small_problem(make_rng(0))
        state = copy_state(problem.state)
        state.omega_w2[...] = 0.0
        state.omega_b2[...] = 0.0
        res = lower_loss(problem.x_l, problem.y_l, problem.pseudo, state, problem.norm)

        from biasadapt.bilevel import _plain_lower_loss

        plain = _plain_lower_loss(problem.x_l, problem.y_l, problem.pseudo, state)
        assert res.loss == plain.loss
        assert np.array_equal(res.grad_phi_w, plain.grad_phi_w)

    def test_gradients_fd_on_spec_instance(self):
        from biasadapt.testing import lower_fd_errors

        problem = make_small_problem(
            make_rng(1), input_dim=3, feature_dim=3, num_classes=3, attractor_hidden=4
        )
        errs = lower_fd_errors(problem)
        assert max(errs.values()) < 1e-6

    def test_empty_labeled_batch_rejected(self):
        problem = make_small_problem(make_rng(2))
        with pytest.raises(ValueError, match="labeled"):
            lower_loss(np.zeros((0, 3)), np.zeros((0, 3)), None, problem.state, problem.norm)


class TestLowerStep:
    def test_alpha_zero_no_change(self):
        problem = make_small_problem(make_rng(3))
        work = copy_state(problem.state)
        res = lower_loss(problem.x_l, problem.y_l, problem.pseudo, work, problem.norm)
        before = flat(_theta_phi_arrays(work)).copy()
        lower_step(work, res, 0.0, LowerOptimizer("sgd", _theta_phi_arrays(work)))
        assert np.array_equal(flat(_theta_phi_arrays(work)), before)

    def test_zero_gradients_no_change(self):
        problem = make_small_problem(make_rng(4))
        work = copy_state(problem.state)
        res = lower_loss(problem.x_l, problem.y_l, problem.pseudo, work, problem.norm)
        for pair in res.grads_theta:
            pair[0][...] = 0.0
            pair[1][...] = 0.0
        res.grad_phi_w[...] = 0.0
        res.grad_phi_b[...] = 0.0
        before = flat(_theta_phi_arrays(work)).copy()
        for kind in ("sgd", "adam"):
            lower_step(work, res, 0.1, LowerOptimizer(kind, _theta_phi_arrays(work)))
            assert np.array_equal(flat(_theta_phi_arrays(work)), before)

    def test_sgd_step_hand_arithmetic(self):
        problem = make_small_problem(make_rng(5))
        work = copy_state(problem.state)
        res = lower_loss(problem.x_l, problem.y_l, problem.pseudo, work, problem.norm)
        expected_w = work.phi_w - 0.05 * res.grad_phi_w
        expected_t0 = work.theta[0][0] - 0.05 * res.grads_theta[0][0]
        lower_step(work, res, 0.05, LowerOptimizer("sgd", _theta_phi_arrays(work)))
        assert np.array_equal(work.phi_w, expected_w)
        assert np.array_equal(work.theta[0][0], expected_t0)
        assert np.array_equal(work.omega_w2, problem.state.omega_w2)

    def test_adam_scalar_reference(self):
        p = np.array([1.0])
        opt = LowerOptimizer("adam", [p])
        g = np.array([0.5])
        opt.step([p], [g], 0.1)
        m = 0.1 * 0.5
        v = 0.001 * 0.25
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        expected = 1.0 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
        assert abs(p[0] - expected) < 1e-15


class TestUpperLoss:
    def test_perfect_prediction_near_zero(self):
        state = init_model([2, 2], 2, 2, make_rng(6))
        state.theta[0] = (np.eye(2), np.zeros(2))
        state.phi_w = np.array([[60.0, -60.0], [-60.0, 60.0]])
        state.phi_b = np.zeros(2)
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        y = one_hot(np.array([0, 1, 0, 1]), 2)
        loss, _, _ = upper_loss(x, y, state)
        assert abs(loss) < 1e-9

    def test_permutation_invariance(self):
        problem = make_small_problem(make_rng(7))
        loss_a, (vw_a, vb_a), _ = upper_loss(problem.bal_x, problem.bal_y, problem.state)
        perm = make_rng(8).permutation(problem.bal_x.shape[0])
        loss_b, (vw_b, vb_b), _ = upper_loss(
            problem.bal_x[perm], problem.bal_y[perm], problem.state
        )
        assert abs(loss_a - loss_b) < 1e-12
        assert np.max(np.abs(vw_a - vw_b)) < 1e-12

    def test_gradient_fd(self):
        from biasadapt.testing import upper_fd_error

        assert upper_fd_error(make_small_problem(make_rng(9))) < 1e-6


class TestOmegaStep:
    def test_eta_zero_no_change(self):
        problem = make_small_problem(make_rng(10))
        work = copy_state(problem.state)
        opt = LowerOptimizer("sgd", _theta_phi_arrays(work))
        res = lower_loss(problem.x_l, problem.y_l, problem.pseudo, work, problem.norm)
        cache = lower_step(work, res, problem.alpha, opt)
        _, upper_grad, _ = upper_loss(problem.bal_x, problem.bal_y, work)
        before = flat(work.omega_arrays()).copy()
        omega_step(work, cache, upper_grad, eta=0.0)
        assert np.array_equal(flat(work.omega_arrays()), before)

    def test_zero_upper_gradient_no_change(self):
        problem = make_small_problem(make_rng(11))
        work = copy_state(problem.state)
        opt = LowerOptimizer("sgd", _theta_phi_arrays(work))
        res = lower_loss(problem.x_l, problem.y_l, problem.pseudo, work, problem.norm)
        cache = lower_step(work, res, problem.alpha, opt)
        zero_grad = (np.zeros_like(work.phi_w), np.zeros_like(work.phi_b))
        before = flat(work.omega_arrays()).copy()
        hyper = omega_step(work, cache, zero_grad, eta=0.7)
        assert np.array_equal(flat(work.omega_arrays()), before)
        assert all(np.all(h == 0.0) for h in hyper)

    def test_stale_cache_rejected(self):
        problem = make_small_problem(make_rng(12))
        work = copy_state(problem.state)
        opt = LowerOptimizer("sgd", _theta_phi_arrays(work))
        res = lower_loss(problem.x_l, problem.y_l, problem.pseudo, work, problem.norm)
        cache = lower_step(work, res, problem.alpha, opt)
        res2 = lower_loss(problem.x_l, problem.y_l, problem.pseudo, work, problem.norm)
        lower_step(work, res2, problem.alpha, opt)
        _, upper_grad, _ = upper_loss(problem.bal_x, problem.bal_y, work)
        with pytest.raises(ValueError, match="stale"):
            omega_step(work, cache, upper_grad, eta=0.1)

    def test_theta_bitwise_unchanged_by_head_step(self):
        problem = make_small_problem(make_rng(13))
        work = copy_state(problem.state)
        opt = LowerOptimizer("sgd", _theta_phi_arrays(work))
        res = lower_loss(problem.x_l, problem.y_l, problem.pseudo, work, problem.norm)
        cache = lower_step(work, res, problem.alpha, opt)
        theta_bits = [(w.copy(), b.copy()) for w, b in work.theta]
        _, upper_grad, _ = upper_loss(problem.bal_x, problem.bal_y, work)
        omega_step(work, cache, upper_grad, eta=2.0)
        for (w, b), (w0, b0) in zip(work.theta, theta_bits):
            assert np.array_equal(w, w0) and np.array_equal(b, b0)


class TestClosedFormOracle:
    def test_matches_unrolled_over_random_instances(self):
        rng = make_rng(14)
        worst = 0.0
        for _ in range(30):
            problem = make_small_problem(
                rng,
                input_dim=int(rng.integers(2, 5)),
                feature_dim=int(rng.integers(2, 5)),
                num_classes=int(rng.integers(2, 5)),
                attractor_hidden=int(rng.integers(1, 5)),
                n_labeled=int(rng.integers(1, 7)),
                n_unlabeled=int(rng.integers(0, 7)),
            )
            a = flat(unrolled_hypergrad(problem))
            b = flat(closed_form_hypergrad(problem))
            worst = max(worst, relative_diff(a, b))
        assert worst < 1e-6

    def test_composite_fd(self):
        rng = make_rng(15)
        worst = 0.0
        for _ in range(3):
            problem = make_small_problem(rng)
            a = flat(unrolled_hypergrad(problem))
            c = flat(fd_hypergrad(problem))
            worst = max(worst, relative_diff(a, c))
        assert worst < 1e-5

    def test_single_sample_hand_derivation(self):
        # d=1 feature, K=2, H=1, one labeled sample, one balanced sample;
        # every quantity below is scalar arithmetic
        state = init_model([1, 1], 2, 1, make_rng(16))
        tw, tb = 0.8, 0.1
        w1_, w2_ = 1.2, -0.7
        b1_, b2_ = 0.2, -0.1
        v1, v2 = 0.9, 0.4
        c_ = 0.3
        q1, q2 = 0.6, -0.5
        r1, r2 = 0.05, -0.15
        state.theta[0] = (np.array([[tw]]), np.array([tb]))
        state.phi_w = np.array([[w1_, w2_]])
        state.phi_b = np.array([b1_, b2_])
        state.omega_w1 = np.array([[v1], [v2]])
        state.omega_b1 = np.array([c_])
        state.omega_w2 = np.array([[q1, q2]])
        state.omega_b2 = np.array([r1, r2])
        alpha = 0.05
        x = np.array([[1.0]])
        y = np.array([[1.0, 0.0]])
        bal_x = np.array([[1.0]])
        bal_y = np.array([[0.0, 1.0]])

        # lower forward
        z = tw * 1.0 + tb
        s1, s2 = z * w1_ + b1_, z * w2_ + b2_
        u1 = math.exp(s1) / (math.exp(s1) + math.exp(s2))
        u2 = 1.0 - u1
        h = u1 * v1 + u2 * v2 + c_
        a_ = max(h, 0.0)
        gate = 1.0 if h > 0 else 0.0
        t1, t2 = s1 + a_ * q1 + r1, s2 + a_ * q2 + r2
        p1 = math.exp(t1) / (math.exp(t1) + math.exp(t2))
        p2 = 1.0 - p1
        xi1, xi2 = p1 - 1.0, p2 - 0.0

        # sgd step on theta and phi (single sample, coeff 1)
        dz = xi1 * w1_ + xi2 * w2_
        tw_p = tw - alpha * dz * 1.0
        tb_p = tb - alpha * dz
        w1p = w1_ - alpha * z * xi1
        w2p = w2_ - alpha * z * xi2
        b1p = b1_ - alpha * xi1
        b2p = b2_ - alpha * xi2

        # balanced gradient at the stepped parameters
        zb = tw_p * 1.0 + tb_p
        sb1, sb2 = zb * w1p + b1p, zb * w2p + b2p
        pb1 = math.exp(sb1) / (math.exp(sb1) + math.exp(sb2))
        pb2 = 1.0 - pb1
        xib1, xib2 = pb1 - 0.0, pb2 - 1.0
        vw1, vw2 = zb * xib1, zb * xib2  # d/dphi_w
        vb1, vb2 = xib1, xib2

        # closed form: r = V_w^T z + v_b, G = (diag(p) - p p^T) r
        rr1 = vw1 * z + vb1
        rr2 = vw2 * z + vb2
        g1 = p1 * (1 - p1) * rr1 - p1 * p2 * rr2
        g2 = -p1 * p2 * rr1 + p2 * (1 - p2) * rr2

        expected_w1 = -alpha * gate * np.array([[u1], [u2]]) * (g1 * q1 + g2 * q2)
        expected_b1 = -alpha * gate * np.array([g1 * q1 + g2 * q2])
        expected_w2 = -alpha * a_ * np.array([[g1, g2]])
        expected_b2 = -alpha * np.array([g1, g2])

        got = omega_grad_closed_form(
            x, y, None, bal_x, bal_y, state, "softmax_input", alpha
        )
        np.testing.assert_allclose(got[0], expected_w1, rtol=1e-12)
        np.testing.assert_allclose(got[1], expected_b1, rtol=1e-12)
        np.testing.assert_allclose(got[2], expected_w2, rtol=1e-12)
        np.testing.assert_allclose(got[3], expected_b2, rtol=1e-12)

        unrolled = unrolled_hypergrad(
            type(
                "P",
                (),
                dict(
                    state=state,
                    norm="softmax_input",
                    alpha=alpha,
                    x_l=x,
                    y_l=y,
                    pseudo=None,
                    bal_x=bal_x,
                    bal_y=bal_y,
                ),
            )()
        )
        assert relative_diff(flat(unrolled), flat(got)) < 1e-12

    def test_update_moves_head_output_along_g(self):
        # per-sample: applying the update from sample i alone moves the head
        # output for sample i in the direction of G_i (first order in eta)
        rng = make_rng(17)
        for _ in range(10):
            problem = make_small_problem(rng, n_labeled=1, n_unlabeled=0)
            state = problem.state
            hyper = closed_form_hypergrad(problem)

            work = copy_state(state)
            res = lower_loss(problem.x_l, problem.y_l, None, work, problem.norm)
            from biasadapt.bilevel import apply_sgd_theta_phi

            apply_sgd_theta_phi(work, res, problem.alpha)
            _, (v_w, v_b), _ = upper_loss(problem.bal_x, problem.bal_y, work)
            ui = res.unroll
            p_i = ui.p[0]
            jac = np.diag(p_i) - np.outer(p_i, p_i)
            g_i = jac @ (v_w.T @ ui.z[0] + v_b)

            eta = 1e-4
            before, _ = forward_train(problem.x_l, state, problem.norm)
            stepped = copy_state(state)
            for arr, h in zip(stepped.omega_arrays(), hyper):
                arr -= eta * h
            after, _ = forward_train(problem.x_l, stepped, problem.norm)
            delta_change = (after - before)[0] - 0.0  # s unchanged, only head moved
            assert float(g_i @ delta_change) >= -1e-12

    def test_masked_samples_do_not_contribute(self):
        problem = make_small_problem(make_rng(18), mask_some=False)
        pseudo = problem.pseudo
        masked = PseudoBatch(pseudo.x_weak, pseudo.x_strong, pseudo.y_hat, np.zeros(len(pseudo)))
        with_masked = omega_grad_closed_form(
            problem.x_l, problem.y_l, masked,
            problem.bal_x, problem.bal_y, problem.state, problem.norm, problem.alpha,
        )
        without = omega_grad_closed_form(
            problem.x_l, problem.y_l, None,
            problem.bal_x, problem.bal_y, problem.state, problem.norm, problem.alpha,
        )
        for a, b in zip(with_masked, without):
            assert np.array_equal(a, b)


def desk_datasets(seed=0, k=3, n_l=30, n_u=60):
    rng = make_rng(seed)
    counts = np.array([n_l // k] * k) + np.array([2, 1, 0])
    d_l = synth_gaussian_mixture(k, 4, 3.0, counts, rng)
    d_u_full = synth_gaussian_mixture(k, 4, 3.0, [n_u // k] * k, rng)
    d_u = Dataset(
        d_u_full.features, np.full(len(d_u_full), -1), d_u_full.true_labels, k
    )
    return d_l, d_u


def quick_config(mode="l2ac", iters=40, **kw):
    base = dict(
        mode=mode,
        iters=iters,
        alpha=0.05,
        eta=0.5,
        batch_n=12,
        batch_m=12,
        balanced_n=6,
        extractor_hidden=(8,),
        feature_dim=4,
        attractor_hidden=8,
        seed=123,
        sigma_weak=0.1,
        sigma_strong=0.6,
        tau=0.6,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_zero_iters_returns_initial_state(self):
        d_l, d_u = desk_datasets()
        state, traces = train(quick_config(iters=0), d_l, d_u)
        assert traces == []
        assert state.step_count == 0

    @pytest.mark.parametrize("mode", ["l2ac", "baseline", "plain_attractor", "single_level"])
    def test_deterministic_given_seed(self, mode):
        d_l, d_u = desk_datasets()
        s1, t1 = train(quick_config(mode=mode), d_l, d_u)
        s2, t2 = train(quick_config(mode=mode), d_l, d_u)
        assert len(t1) == len(t2)
        for a, b in zip(t1, t2):
            assert a.lower_loss == b.lower_loss
            assert a.grad_norm_phi == b.grad_norm_phi
        assert np.array_equal(s1.phi_w, s2.phi_w)
        assert np.array_equal(s1.omega_w2, s2.omega_w2)

    @pytest.mark.parametrize("optimizer", ["sgd", "adam"])
    def test_all_modes_run_both_optimizers(self, optimizer):
        d_l, d_u = desk_datasets()
        for mode in ("l2ac", "baseline", "plain_attractor", "single_level"):
            state, traces = train(
                quick_config(mode=mode, iters=10, lower_optimizer=optimizer), d_l, d_u
            )
            assert len(traces) == 10
            assert all(math.isfinite(t.lower_loss) for t in traces)

    def test_trainer_never_reads_unlabeled_truth(self):
        d_l, d_u = desk_datasets()
        poisoned = Dataset(
            d_u.features,
            np.full(len(d_u), -1),
            np.zeros(len(d_u), dtype=np.int64),  # wrong on purpose
            d_u.num_classes,
        )
        _, t1 = train(quick_config(), d_l, d_u)
        _, t2 = train(quick_config(), d_l, poisoned)
        for a, b in zip(t1, t2):
            assert a.lower_loss == b.lower_loss and a.upper_loss == b.upper_loss

    def test_divergence_aborts_with_traces(self):
        d_l, d_u = desk_datasets()
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as excinfo:
            train(quick_config(alpha=1e6, iters=400), d_l, d_u)
        assert len(excinfo.value.traces) >= 1

    def test_theorem_schedule_runs(self):
        d_l, d_u = desk_datasets()
        _, traces = train(
            quick_config(schedule="theorem_f", c1=0.5, c2=0.1, iters=10), d_l, d_u
        )
        assert len(traces) == 10

    def test_no_unlabeled_data_supported(self):
        d_l, _ = desk_datasets()
        _, traces = train(quick_config(mode="baseline", iters=10), d_l, None)
        assert len(traces) == 10

    def test_sharpen_mode_and_l2_norm_run(self):
        d_l, d_u = desk_datasets()
        _, traces = train(
            quick_config(
                iters=15,
                pseudo_mode="sharpen",
                sharpen_temperature=0.5,
                attractor_norm="l2_input",
                pseudo_source="biased",
            ),
            d_l,
            d_u,
        )
        assert all(math.isfinite(t.lower_loss) for t in traces)

    def test_eval_hook_cadence(self):
        d_l, d_u = desk_datasets()
        seen = []
        train(
            quick_config(iters=20),
            d_l,
            d_u,
            eval_hook=lambda it, st: seen.append(it),
            eval_interval=5,
        )
        assert seen == [5, 10, 15, 20]

    def test_eval_cadence_does_not_perturb_training(self):
        d_l, d_u = desk_datasets()
        _, t1 = train(quick_config(), d_l, d_u, eval_hook=lambda i, s: None, eval_interval=3)
        _, t2 = train(quick_config(), d_l, d_u)
        for a, b in zip(t1, t2):
            assert a.lower_loss == b.lower_loss


class TestBaselineDifferential:
    def test_baseline_identical_to_attractor_free_build(self):
        """mode=baseline must produce bitwise the traces of a reference loop
        with no attractor code anywhere in loss, gradients, or updates."""
        d_l, d_u = desk_datasets()
        config = quick_config(mode="baseline", iters=25)
        _, traces = train(config, d_l, d_u)

        k = d_l.num_classes
        seeds = child_seeds(config.seed, 3)
        init_rng, batch_rng, aug_rng = (make_rng(s) for s in seeds)
        dims = [d_l.dim, *config.extractor_hidden, config.feature_dim]
        state = init_model(dims, k, config.attractor_hidden, init_rng)
        x_all = d_l.features
        y_all = one_hot(d_l.labels, k)

        from biasadapt.model import (
            classifier_scores,
            ema_update,
            features_backward,
            features_with_cache,
        )

        ref = []
        for t in range(1, config.iters + 1):
            l_idx = batch_rng.choice(len(d_l), size=config.batch_n, replace=False)
            u_idx = batch_rng.choice(len(d_u), size=config.batch_m, replace=False)
            x_weak, x_strong = augment(
                d_u.features[u_idx], config.sigma_weak, config.sigma_strong, aug_rng
            )
            z_w, _ = features_with_cache(x_weak, state.theta)
            logits_weak = classifier_scores(z_w, state.phi_w, state.phi_b)
            y_hat, lam = assign_pseudo_labels(logits_weak, config.tau, config.lambda_u)

            n, m = config.batch_n, config.batch_m
            x = np.vstack([x_all[l_idx], x_strong])
            targets = np.vstack([y_all[l_idx], y_hat])
            coeff = np.concatenate([np.full(n, 1.0 / n), lam / m])
            z, cache = features_with_cache(x, state.theta)
            s = classifier_scores(z, state.phi_w, state.phi_b)
            logp = log_softmax(s)
            p = np.exp(logp)
            loss = float((coeff * -(targets * logp).sum(axis=1)).sum())
            d_logits = coeff[:, None] * (p - targets)
            g_w = z.T @ d_logits
            g_b = d_logits.sum(axis=0)
            d_z = d_logits @ state.phi_w.T
            g_theta, _ = features_backward(cache, state.theta, d_z)

            for (w, b), (gw, gb) in zip(state.theta, g_theta):
                w -= config.alpha * gw
                b -= config.alpha * gb
            state.phi_w -= config.alpha * g_w
            state.phi_b -= config.alpha * g_b
            ema_update(state, config.ema_decay)
            ref.append(loss)

        assert len(ref) == len(traces)
        for got, want in zip(traces, ref):
            assert got.lower_loss == want
            assert math.isnan(got.upper_loss)
            assert got.grad_norm_omega == 0.0


class TestTraceCsv:
    def test_round_trip_columns(self, tmp_path):
        d_l, d_u = desk_datasets()
        _, traces = train(quick_config(iters=5), d_l, d_u)
        path = tmp_path / "trace.csv"
        write_trace_csv(traces, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,lower_loss,upper_loss,grad_norm_theta,grad_norm_phi,grad_norm_omega"
        assert len(lines) == 6

    def test_timing_columns_opt_in(self, tmp_path):
        d_l, d_u = desk_datasets()
        _, traces = train(quick_config(iters=3), d_l, d_u)
        path = tmp_path / "trace.csv"
        write_trace_csv(traces, path, include_timings=True)
        assert "second_order_seconds" in path.read_text().splitlines()[0]

    def test_byte_identical_across_runs(self, tmp_path):
        d_l, d_u = desk_datasets()
        _, t1 = train(quick_config(iters=8), d_l, d_u)
        _, t2 = train(quick_config(iters=8), d_l, d_u)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_trace_csv(t1, p1)
        write_trace_csv(t2, p2)
        assert p1.read_bytes() == p2.read_bytes()
