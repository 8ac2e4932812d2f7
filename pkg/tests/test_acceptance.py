"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line (printed in the terminal summary) before
asserting, so a failing criterion still reports its measured values.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from slateope.abstraction import TabularEncoder, TrainConfig, latent_weights, train_abstraction_path
from slateope.core import substream
from slateope.estimators import estimate_ips, estimate_lips, estimate_nae
from slateope.harness import (
    ExperimentConfig,
    gradcheck_suite,
    mse_from,
    oracle_best_beta,
    run_experiment,
    sign_test,
    squared_errors,
)
from slateope.synthenv import EnvConfig, build_env, generate_logs, make_policies
from slateope.verification import (
    bias_residual,
    default_instance,
    grouping_encoder,
    mse_gain,
    random_encoders,
    random_rewards,
    unbiasedness_residuals,
    variance_gap,
    weight_identity_residual,
)

ACCEPTANCE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.json"
EXACT = 1e-10


@pytest.fixture(scope="module")
def inst():
    inst = default_instance(0)
    assert inst.space.slot_sizes == (3, 3) and len(inst.env.contexts) == 1
    return inst


@pytest.fixture(scope="module")
def generic(inst):
    return inst.with_rewards(random_rewards(inst, substream(0, "acceptance", "rewards")))


def test_criterion_1_exact_unbiasedness(inst, record):
    start = time.perf_counter()
    res = unbiasedness_residuals(inst, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(res.values())
    passed = worst < EXACT and elapsed < 5.0 and len(res) == 7
    record(1, passed, f"max residual {worst:.2e} over {sorted(res)} in {elapsed:.2f}s (tol 1e-10, < 5 s)")
    assert passed


def test_criterion_2_bias_formula(generic, record):
    residuals, biases = [], []
    for enc in random_encoders(generic, 20, 3, seed=0):
        bias, _, res = bias_residual(generic, enc)
        residuals.append(res)
        biases.append(abs(bias))
    passed = len(residuals) == 20 and max(residuals) < EXACT
    record(2, passed, f"max residual {max(residuals):.2e} over 20 encoders (|bias| up to {max(biases):.3f}); tol 1e-10")
    assert passed


def test_criterion_3_variance_and_mse_gain(inst, generic, record):
    gap, rhs = variance_gap(inst, grouping_encoder(inst), sigma=0.1)
    var_res = abs(gap - rhs)
    mse_res = max(abs(d - f) for d, f in (mse_gain(generic, e, 7, 0.1) for e in random_encoders(generic, 20, 3, 1)))
    passed = var_res < EXACT and mse_res < 1e-8 and gap > 0
    record(3, passed, f"variance residual {var_res:.2e} (gap {gap:.4f}, tol 1e-10); MSE-gain residual {mse_res:.2e} (tol 1e-8)")
    assert passed


def test_criterion_4_latent_weight_identity(generic, record):
    encoders = random_encoders(generic, 20, 3, seed=2) + random_encoders(generic, 5, 7, seed=3)
    worst = max(weight_identity_residual(generic, e) for e in encoders)
    passed = worst < EXACT
    record(4, passed, f"max residual {worst:.2e} over {len(encoders)} encoders; tol 1e-10")
    assert passed


def test_criterion_5_gradients(record):
    errors = gradcheck_suite(n_networks=20, seed=0)
    main = {k: v for k, v in errors.items() if k != "entrywise"}
    passed = all(v < 1e-4 for v in main.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in main.items())
    entry = ", ".join(f"{k} {v:.1e}" for k, v in errors["entrywise"].items())
    record(5, passed, f"norm-wise relative error {detail} (tol 1e-4); entry-wise {entry}")
    assert passed


def test_criterion_6_beta_limits(record):
    env = build_env(EnvConfig(n_slots=2, slot_size=3, context_dim=3, seed=0))
    logging, target = make_policies(env)
    data = generate_logs(env, logging, 512, substream(0, "acceptance", "limits"))

    uniform = TabularEncoder.uniform(env.space, 5)
    w_uni, _ = latent_weights(uniform, target, logging, data.x, np.zeros(len(data), int), mode="exact")
    lips_uni = estimate_lips(data, target, uniform, logging, rng=substream(0, "acceptance", "z_uni"), mode="exact")
    uni_res = max(float(np.max(np.abs(w_uni - 1))), abs(lips_uni.value - estimate_nae(data).value))

    ident = TabularEncoder.identity(env.space)
    lips_id = estimate_lips(data, target, ident, logging, rng=substream(0, "acceptance", "z_id"), mode="exact")
    id_res = float(np.max(np.abs(lips_id.terms - estimate_ips(data, target).terms)))

    # at lr=1e-2 Adam keeps jittering around the uniform optimum (max|w-1| about 0.14)
    cfg = TrainConfig(n_latent=9, hidden=16, lr=1e-3, batch_size=64, betas=(1e6,), pretrain_epochs=50,
                      finetune_epochs=200)
    trained = train_abstraction_path(data, cfg, lambda tag: substream(0, "acceptance", "train", str(tag)),
                                     space=env.space)[1e6]
    z = np.tile(np.arange(9), len(data))
    w_tr, _ = latent_weights(trained, target, logging, np.repeat(data.x, 9, axis=0), z, mode="exact")
    train_dev = float(np.max(np.abs(w_tr - 1)))

    passed = uni_res < 1e-12 and id_res < 1e-12 and train_dev < 0.1
    record(6, passed, f"uniform-encoder deviation {uni_res:.1e}; identity vs IPS {id_res:.1e}; "
                      f"trained beta=1e6 max|w-1| {train_dev:.2e} (tol 0.1)")
    assert passed


@pytest.fixture(scope="module")
def experiment():
    config = ExperimentConfig.from_json(ACCEPTANCE_CONFIG, base=ExperimentConfig.profile("paper"))
    start = time.perf_counter()
    result = run_experiment(config)
    return result, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_7_ordering(experiment, record):
    result, elapsed = experiment
    beta, best = oracle_best_beta(result)
    ips, pi = result.row("ips"), result.row("pi")
    vs_ips = sign_test(squared_errors(best), squared_errors(ips))
    vs_pi = sign_test(squared_errors(best), squared_errors(pi))
    passed = (best.nmse < ips.nmse and best.nmse < pi.nmse and vs_ips["p_value"] < 0.05 and vs_pi["p_value"] < 0.05
              and elapsed < 1800)
    record(7, passed, f"nMSE LIPS(best beta={beta:g}) {best.nmse:.4f}, IPS {ips.nmse:.4f}, PI {pi.nmse:.4f}; "
                      f"sign test vs IPS {vs_ips['wins']}-{vs_ips['losses']} p={vs_ips['p_value']:.3g}, "
                      f"vs PI {vs_pi['wins']}-{vs_pi['losses']} p={vs_pi['p_value']:.3g}; runtime {elapsed / 60:.1f} min")
    assert passed


@pytest.mark.slow
def test_criterion_8_slope(experiment, record):
    result, _ = experiment
    beta, best = oracle_best_beta(result)
    chosen = result.row("lips")
    picks = [t["slope"]["selected_beta"] for point in result.seeds for t in point["trials"]]
    ratio = chosen.nmse / best.nmse
    passed = ratio <= 3.0
    counts = {b: picks.count(b) for b in sorted(set(picks))}
    record(8, passed, f"SLOPE nMSE {chosen.nmse:.4f} vs oracle beta={beta:g} {best.nmse:.4f} (ratio {ratio:.2f}, "
                      f"limit 3); picks {counts}")
    assert passed


@pytest.mark.slow
def test_criterion_9_mse_identity(experiment, record):
    result, _ = experiment
    worst = max(r.identity_residual() for r in result.rows)
    table = abs(mse_from(0.5, 0.2) - 0.45)
    passed = worst <= 1e-12 and table <= 1e-12
    record(9, passed, f"max identity residual {worst:.1e} over {len(result.rows)} rows; 0.5^2 + 0.2 -> "
                      f"{mse_from(0.5, 0.2):.15g}; tol 1e-12")
    assert passed
