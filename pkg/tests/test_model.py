"""Network composition: experts, dual gate, towers, ablation variants."""

import numpy as np
import pytest

from cadts.errors import ConfigError
from cadts.model import (
    VARIANTS,
    CadModel,
    ModelConfig,
    build_model,
    expert_embeddings,
    expert_forward,
    gate_weights,
    model_forward,
)
from cadts.numcore import Tape, square, tmean, tsum, mul, Tensor

from _gradcheck import TOLERANCE, central_diff, max_rel_err


def tiny_config(**kw):
    base = dict(l=6, h=1, experts=3, kernels=4, epsilon=0.7, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def naive_forward(model: CadModel, window: np.ndarray) -> np.ndarray:
    """Plain-numpy re-composition, expert embeddings recomputed per metric."""
    cfg = model.config
    gates, towers = model.gates, model.towers

    def embed(ex):
        if ex.kernels is None:
            flat = window.reshape(-1)
        else:
            flat = np.maximum(window @ ex.kernels.data.T, 0.0).reshape(-1)
        hid = np.maximum(flat @ ex.ff1_w.data + ex.ff1_b.data, 0.0)
        return hid @ ex.ff2_w.data + ex.ff2_b.data

    preds = []
    for k in range(model.n_metrics):
        embeds = [embed(ex) for ex in model.experts]  # recomputed per metric
        if cfg.variant == "no_gate":
            mixed = np.mean(embeds, axis=0)
        else:
            gate_in = window.reshape(-1) if cfg.variant == "no_selection" else window[k]
            logits = np.zeros(cfg.experts)
            if gates.shared is not None and gates.personalized is not None:
                logits = cfg.epsilon * (gate_in @ gates.shared.data) + (
                    1.0 - cfg.epsilon
                ) * (gate_in @ gates.personalized.data[k])
            elif gates.shared is not None:
                logits = gate_in @ gates.shared.data
            else:
                logits = gate_in @ gates.personalized.data[k]
            e = np.exp(logits - logits.max())
            weights = e / e.sum()
            mixed = sum(weights[m] * embeds[m] for m in range(cfg.experts))
        hid = np.maximum(mixed @ towers.w1.data[k] + towers.b1.data[k, 0], 0.0)
        preds.append(float(hid @ towers.w2.data[k, :, 0] + towers.b2.data[k, 0, 0]))
    return np.array(preds)


# --- experts ------------------------------------------------------------------


def test_expert_embedding_has_width_128():
    model = build_model(ModelConfig(l=16, dtype="float64"), n_metrics=7, rng_seed=0)
    window = np.random.default_rng(0).normal(size=(7, 16))
    assert expert_forward(model.experts[0], window).shape == (128,)


def test_expert_forward_deterministic_in_eval():
    model = build_model(tiny_config(), n_metrics=4, rng_seed=1)
    window = np.random.default_rng(1).normal(size=(4, 6))
    first = expert_forward(model.experts[1], window).data
    second = expert_forward(model.experts[1], window).data
    assert np.array_equal(first, second)


def test_expert_gradient_wrt_kernels():
    model = build_model(tiny_config(embed_dim=16), n_metrics=3, rng_seed=2)
    expert = model.experts[0]
    window = np.random.default_rng(2).normal(size=(3, 6))
    readout = Tensor(np.random.default_rng(3).normal(size=(16,)))
    params = [expert.kernels, expert.ff1_w, expert.ff1_b, expert.ff2_w, expert.ff2_b]

    def forward():
        return tsum(mul(expert_forward(expert, window), readout))

    with Tape() as tape:
        tape.watch(*params)
        loss = forward()
    analytic = tape.grad(loss, params)
    numeric = central_diff(lambda: forward().item(), params)
    assert max_rel_err(analytic, numeric) < TOLERANCE


def test_expert_embeddings_batch_matches_single_windows():
    model = build_model(tiny_config(embed_dim=16), n_metrics=3, rng_seed=18)
    windows = np.random.default_rng(18).normal(size=(7, 3, 6))
    stacked = expert_embeddings(model, windows)
    assert stacked.shape == (7, 3, 16)
    for i in (0, 3, 6):
        for m, expert in enumerate(model.experts):
            np.testing.assert_allclose(
                stacked[i, m], expert_forward(expert, windows[i]).data, atol=1e-12
            )


def test_expert_rejects_wrong_window_shape():
    model = build_model(tiny_config(), n_metrics=4, rng_seed=0)
    with pytest.raises(ValueError, match="shape"):
        expert_forward(model.experts[0], np.zeros((4, 5)))


# --- gates --------------------------------------------------------------------


def test_gate_weights_on_simplex():
    model = build_model(tiny_config(), n_metrics=5, rng_seed=3)
    rng = np.random.default_rng(4)
    for k in range(5):
        for _ in range(10):
            w = gate_weights(model.gates, rng.normal(scale=10.0, size=6), k)
            assert w.shape == (3,)
            assert np.all(w > 0)
            assert abs(w.sum() - 1.0) < 1e-9


def test_gate_epsilon_one_uses_shared_only():
    model = build_model(tiny_config(epsilon=1.0), n_metrics=4, rng_seed=5)
    rng = np.random.default_rng(5)
    w = rng.normal(size=6)
    got = gate_weights(model.gates, w, 2)
    logits = w @ model.gates.shared.data
    e = np.exp(logits - logits.max())
    assert np.array_equal(got, e / e.sum())


def test_gate_identical_matrices_collapse_to_shared():
    model = build_model(tiny_config(epsilon=0.8), n_metrics=4, rng_seed=6)
    shared = model.gates.shared.data
    model.gates.personalized.data[:] = shared[None]
    rng = np.random.default_rng(6)
    for k in range(4):
        w = rng.normal(size=6)
        got = gate_weights(model.gates, w, k)
        logits = w @ shared
        e = np.exp(logits - logits.max())
        np.testing.assert_allclose(got, e / e.sum(), rtol=1e-12)


def test_gate_index_out_of_range():
    model = build_model(tiny_config(), n_metrics=4, rng_seed=0)
    with pytest.raises(IndexError, match="out of range"):
        gate_weights(model.gates, np.zeros(6), 4)


# --- model forward ------------------------------------------------------------


def test_model_forward_output_length_k():
    for k in (1, 3, 9):
        model = build_model(tiny_config(), n_metrics=k, rng_seed=7)
        window = np.random.default_rng(7).normal(size=(k, 6))
        assert model_forward(model, window).shape == (k,)


def test_single_expert_forces_unit_gate():
    model = build_model(tiny_config(experts=1), n_metrics=3, rng_seed=8)
    window = np.random.default_rng(8).normal(size=(3, 6))
    assert np.array_equal(gate_weights(model.gates, window[0], 0), [1.0])
    # prediction reduces to Tower_k(f_1(w)) directly
    embed = expert_forward(model.experts[0], window).data
    towers = model.towers
    for k in range(3):
        hid = np.maximum(embed @ towers.w1.data[k] + towers.b1.data[k, 0], 0.0)
        want = hid @ towers.w2.data[k, :, 0] + towers.b2.data[k, 0, 0]
        got = model_forward(model, window).data[k]
        assert got == pytest.approx(want, rel=1e-12)


def test_gate_gradients_match_finite_differences():
    model = build_model(
        ModelConfig(l=4, h=1, experts=2, kernels=3, epsilon=0.7, dtype="float64"),
        n_metrics=3,
        rng_seed=9,
    )
    rng = np.random.default_rng(9)
    window = rng.normal(size=(3, 4))
    target = Tensor(rng.normal(size=(3,)))
    params = [model.gates.shared, model.gates.personalized]

    def forward():
        pred = model_forward(model, window)
        return tmean(square(pred - target))

    with Tape() as tape:
        tape.watch(*params)
        loss = forward()
    analytic = tape.grad(loss, params)
    numeric = central_diff(lambda: forward().item(), params)
    assert max_rel_err(analytic, numeric) < TOLERANCE


def test_forward_rejects_bad_shapes():
    model = build_model(tiny_config(), n_metrics=4, rng_seed=0)
    with pytest.raises(ValueError, match="shape"):
        model_forward(model, np.zeros((4, 7)))
    with pytest.raises(ValueError, match="shape"):
        model.forward_batch(np.zeros((2, 3, 6)))
    with pytest.raises(ValueError, match="mode"):
        model.forward_batch(np.zeros((2, 4, 6)), mode="predict")
    with pytest.raises(ValueError, match="rng"):
        model.forward_batch(np.zeros((2, 4, 6)), mode="train")


# --- build_model / variants ---------------------------------------------------


def test_parameter_census_full_variant():
    k, l, m, n, w, hid = 38, 16, 5, 16, 128, 32
    model = build_model(
        ModelConfig(l=l, h=3, experts=m, kernels=n, epsilon=0.7), n_metrics=k
    )
    expert = n * l + (k * n * w + w) + (w * w + w)
    gates = l * m + k * l * m
    towers = k * (w * hid + hid + hid * 1 + 1)
    assert model.n_parameters() == m * expert + gates + towers == 634838


def test_parameter_census_other_variants():
    k, l, m, n, w, hid = 5, 6, 3, 4, 16, 8
    cfg = dict(l=l, h=1, experts=m, kernels=n, epsilon=0.7, embed_dim=w, tower_hidden=hid)
    towers = k * (w * hid + hid + hid + 1)
    conv_expert = n * l + (k * n * w + w) + (w * w + w)
    counts = {
        "no_gate": m * conv_expert + towers,
        "no_sgate": m * conv_expert + k * l * m + towers,
        "no_pgate": m * conv_expert + l * m + towers,
        "no_selection": m * conv_expert + (k * l * m + k * k * l * m) + towers,
        "no_conv": m * ((k * l * w + w) + (w * w + w)) + (l * m + k * l * m) + towers,
        "single_task": k * (n * l + (n * w + w) + (w * w + w)) + towers,
    }
    for variant, want in counts.items():
        model = build_model(ModelConfig(variant=variant, **cfg), n_metrics=k)
        assert model.n_parameters() == want, variant


def test_invalid_config_lists_offending_fields():
    with pytest.raises(ConfigError, match="epsilon"):
        build_model(ModelConfig(epsilon=0.3), n_metrics=2)
    with pytest.raises(ConfigError) as err:
        build_model(ModelConfig(l=0, experts=0), n_metrics=2)
    assert "l=0" in str(err.value) and "experts=0" in str(err.value)
    with pytest.raises(ConfigError, match="variant"):
        build_model(ModelConfig(variant="mystery"), n_metrics=2)


def test_pgate_and_sgate_agree_when_matrices_equal():
    cfg_s = tiny_config(variant="no_sgate")
    cfg_p = tiny_config(variant="no_pgate")
    a = build_model(cfg_s, n_metrics=4, rng_seed=10)
    b = build_model(cfg_p, n_metrics=4, rng_seed=10)
    # align everything: same experts/towers, personalized rows := shared matrix
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        if pa.shape == pb.shape:
            pa.data[:] = pb.data
    a.gates.personalized.data[:] = b.gates.shared.data[None]
    windows = np.random.default_rng(10).normal(size=(5, 4, 6))
    np.testing.assert_allclose(
        a.forward_batch(windows).data, b.forward_batch(windows).data, atol=1e-12
    )


def test_single_task_isolates_metrics():
    model = build_model(tiny_config(variant="single_task"), n_metrics=4, rng_seed=11)
    rng = np.random.default_rng(11)
    window = rng.normal(size=(4, 6))
    base = model_forward(model, window).data
    perturbed = window.copy()
    perturbed[1] += rng.normal(scale=5.0, size=6)
    after = model_forward(model, perturbed).data
    assert np.array_equal(base[[0, 2, 3]], after[[0, 2, 3]])
    assert base[1] != after[1]


def test_full_variant_has_inter_metric_dependency():
    model = build_model(tiny_config(), n_metrics=4, rng_seed=12)
    rng = np.random.default_rng(12)
    window = rng.normal(size=(4, 6))
    base = model_forward(model, window).data
    perturbed = window.copy()
    perturbed[1] += rng.normal(scale=5.0, size=6)
    after = model_forward(model, perturbed).data
    assert np.all(base[[0, 2, 3]] != after[[0, 2, 3]])


def test_eval_forward_is_pure():
    for variant in VARIANTS:
        model = build_model(tiny_config(variant=variant), n_metrics=3, rng_seed=13)
        windows = np.random.default_rng(13).normal(size=(4, 3, 6))
        assert np.array_equal(
            model.forward_batch(windows).data, model.forward_batch(windows).data
        ), variant


def test_train_mode_dropout_changes_outputs_eval_does_not():
    model = build_model(tiny_config(), n_metrics=3, rng_seed=14)
    windows = np.random.default_rng(14).normal(size=(4, 3, 6))
    train_a = model.forward_batch(windows, mode="train", rng=np.random.default_rng(1)).data
    train_b = model.forward_batch(windows, mode="train", rng=np.random.default_rng(2)).data
    assert not np.array_equal(train_a, train_b)
    eval_out = model.forward_batch(windows).data
    assert np.array_equal(eval_out, model.forward_batch(windows).data)


@pytest.mark.parametrize("variant", [v for v in VARIANTS if v != "single_task"])
def test_vectorized_forward_matches_per_metric_recompute(variant):
    """Sharing expert outputs across metrics == recomputing them per metric."""
    model = build_model(tiny_config(variant=variant), n_metrics=5, rng_seed=15)
    rng = np.random.default_rng(15)
    windows = rng.normal(size=(3, 5, 6))
    got = model.forward_batch(windows).data
    want = np.stack([naive_forward(model, w) for w in windows])
    np.testing.assert_allclose(got, want, atol=1e-10)


@pytest.mark.parametrize("variant", ["full", "no_selection", "no_sgate", "no_pgate"])
def test_gate_outputs_on_simplex_for_all_gated_variants(variant):
    model = build_model(tiny_config(variant=variant), n_metrics=4, rng_seed=17)
    rng = np.random.default_rng(17)
    windows = rng.normal(scale=5.0, size=(6, 4, 6))
    gate = model._gate_weights_batch(Tensor(windows), 6).data
    assert gate.shape[-1] == model.config.experts
    assert np.all(gate > 0)
    np.testing.assert_allclose(gate.sum(axis=-1), 1.0, atol=1e-9)


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_stays_finite_on_extreme_inputs(variant):
    model = build_model(tiny_config(variant=variant), n_metrics=3, rng_seed=19)
    rng = np.random.default_rng(19)
    windows = rng.normal(scale=1e3, size=(4, 3, 6))
    out = model.forward_batch(windows).data
    assert np.isfinite(out).all()


@pytest.mark.parametrize("variant", VARIANTS)
def test_no_dead_wiring(variant):
    """Every parameter picks up a nonzero gradient on some random batch."""
    model = build_model(tiny_config(variant=variant), n_metrics=5, rng_seed=16)
    rng = np.random.default_rng(16)
    windows = rng.normal(size=(8, 5, 6))
    target = Tensor(rng.normal(size=(8, 5)))
    names = [name for name, _ in model.named_parameters()]
    params = model.parameters()
    with Tape() as tape:
        tape.watch(*params)
        pred = model.forward_batch(windows, mode="train", rng=rng)
        loss = tmean(square(pred - target))
    grads = tape.grad(loss, params)
    for name, grad in zip(names, grads):
        assert np.any(grad.data != 0.0), f"{variant}: no gradient reaches {name}"
