"""Policy tests: token layout, causality, the loss stack, and sampling."""

import numpy as np
import pytest

from vqpolicy.autograd import Tensor, finite_diff_check
from vqpolicy.policy import (
    PolicyConfig,
    PolicyNet,
    _masked_pick,
    build_deadcode_mask,
    code_loss,
    focal_loss,
    offset_loss,
    sample_action,
    total_loss,
)
from vqpolicy.rng import SeededRng


def make_net(
    obs_dim=4,
    obs_window=3,
    goal_window=0,
    embed=8,
    layers=2,
    heads=2,
    k=3,
    num_q=2,
    chunk_len=1,
    act_dim=2,
    autoregressive=False,
    seed=0,
):
    cfg = PolicyConfig(
        obs_dim=obs_dim,
        act_dim=act_dim,
        obs_window=obs_window,
        goal_window=goal_window,
        chunk_len=chunk_len,
        embed_dim=embed,
        layers=layers,
        heads=heads,
        num_quantizers=num_q,
        codebook_size=k,
        autoregressive=autoregressive,
    )
    return PolicyNet(cfg, SeededRng(seed))


# -- token layout ------------------------------------------------------------------


def test_unconditional_sequence_length_is_the_obs_window():
    net = make_net(obs_window=3)
    tokens = net.tokenize(SeededRng(1).normal((1, 3, 4)), None)
    assert tokens.shape == (1, 3, 8)


def test_goal_tokens_come_first_and_extend_the_sequence():
    net = make_net(obs_window=3, goal_window=2)
    rng = SeededRng(2)
    obs = rng.normal((1, 3, 4))
    goal = rng.normal((1, 2, 4))
    tokens = net.tokenize(obs, goal)
    assert tokens.shape == (1, 5, 8)
    goal_only = net.goal_embed(Tensor(goal)).data + net.wpe.data[:2]
    assert np.allclose(tokens.data[:, :2, :], goal_only, atol=1e-6)


def test_permuting_goal_frames_changes_the_output():
    net = make_net(obs_window=3, goal_window=2)
    rng = SeededRng(3)
    obs = rng.normal((1, 3, 4))
    goal = rng.normal((1, 2, 4))
    base = net.features(obs, goal).data[:, -1, :]
    swapped = net.features(obs, goal[:, ::-1]).data[:, -1, :]
    assert not np.allclose(base, swapped, atol=1e-7)


def test_window_length_validation():
    net = make_net(obs_window=3, goal_window=2)
    rng = SeededRng(4)
    with pytest.raises(ValueError, match="observation frames"):
        net.tokenize(rng.normal((1, 4, 4)), rng.normal((1, 2, 4)))
    with pytest.raises(ValueError, match="goal frames"):
        net.tokenize(rng.normal((1, 3, 4)), rng.normal((1, 1, 4)))
    with pytest.raises(ValueError, match="goal missing"):
        net.tokenize(rng.normal((1, 3, 4)), None)
    unconditional = make_net(obs_window=3)
    with pytest.raises(ValueError, match="without goal"):
        unconditional.tokenize(rng.normal((1, 3, 4)), rng.normal((1, 2, 4)))


# -- trunk behavior -----------------------------------------------------------------


def test_zero_initialized_heads_give_uniform_codes_and_zero_offset():
    net = make_net(k=5)
    logits, offset = net.predict(SeededRng(5).normal((2, 3, 4)))
    for lg in logits:
        assert np.array_equal(lg.data, np.zeros_like(lg.data))
    assert np.array_equal(offset.data, np.zeros_like(offset.data))


def test_causality_is_exact():
    net = make_net(obs_window=6, layers=2)
    rng = SeededRng(6)
    obs = rng.normal((1, 6, 4))
    base = net.features(obs).data
    for t in range(1, 6):
        poked = obs.copy()
        poked[0, t] += 1.5
        feat = net.features(poked).data
        assert np.array_equal(feat[:, :t, :], base[:, :t, :])
        assert not np.allclose(feat[:, t, :], base[:, t, :])


def test_autoregressive_secondary_logits_depend_on_the_primary_code():
    net = make_net(autoregressive=True, k=4)
    obs = SeededRng(7).normal((1, 3, 4))
    a, _ = net.predict(obs, teacher_codes=np.array([[0, 0]]))
    b, _ = net.predict(obs, teacher_codes=np.array([[1, 0]]))
    assert np.array_equal(a[0].data, b[0].data)
    assert not np.allclose(a[1].data, b[1].data, atol=1e-7)


def test_autoregressive_predict_requires_teacher_codes():
    net = make_net(autoregressive=True)
    with pytest.raises(ValueError, match="earlier-layer codes"):
        net.predict(SeededRng(8).normal((1, 3, 4)))


def test_forward_call_counter_counts_trunk_evaluations():
    net = make_net()
    obs = SeededRng(9).normal((1, 3, 4))
    assert net.forward_calls == 0
    net.predict(obs)
    net.predict(obs)
    assert net.forward_calls == 2
    sample_action(net, obs[0], None, SeededRng(10), temperature=1.0)
    assert net.forward_calls == 3


# -- focal loss ---------------------------------------------------------------------


def test_focal_loss_on_uniform_logits_at_gamma_zero_is_log_k():
    logits = Tensor(np.zeros((1, 4), dtype=np.float32))
    value = focal_loss(logits, np.array([2]), gamma=0.0).item()
    assert value == pytest.approx(np.log(4.0), abs=1e-6)


def test_focal_loss_vanishes_when_the_target_is_certain():
    logits = Tensor(np.array([[40.0, 0.0, 0.0]], dtype=np.float32))
    for gamma in (0.0, 0.5, 2.0):
        assert focal_loss(logits, np.array([0]), gamma).item() == pytest.approx(0.0, abs=1e-12)


def test_focal_loss_half_confidence_gamma_two():
    logits = Tensor(np.array([[1.0, 1.0]], dtype=np.float32))
    value = focal_loss(logits, np.array([0]), gamma=2.0).item()
    assert value == pytest.approx(0.25 * np.log(2.0), abs=1e-6)


def test_focal_loss_at_gamma_zero_equals_cross_entropy():
    rng = SeededRng(11)
    for _ in range(1000):
        k = int(rng.integers(7)) + 2
        b = int(rng.integers(4)) + 1
        z = rng.normal((b, k), std=3.0)
        targets = np.array([int(rng.integers(k)) for _ in range(b)])
        z64 = z.astype(np.float64)
        z64 -= z64.max(axis=1, keepdims=True)
        log_p = z64 - np.log(np.exp(z64).sum(axis=1, keepdims=True))
        expected = -log_p[np.arange(b), targets].mean()
        got = focal_loss(Tensor(z), targets, gamma=0.0).item()
        assert got == pytest.approx(expected, abs=1e-6)


def test_focal_loss_gradient_matches_finite_differences():
    rng = SeededRng(12)
    for gamma in (0.0, 0.5, 2.0):
        z = Tensor(rng.normal((3, 5)), requires_grad=True)
        targets = np.array([0, 3, 2])
        report = finite_diff_check(lambda: focal_loss(z, targets, gamma), [z])
        assert report.passed, f"gamma={gamma}: {report}"


def test_focal_loss_validates_targets():
    logits = Tensor(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="out of range"):
        focal_loss(logits, np.array([0, 3]), gamma=1.0)
    with pytest.raises(ValueError, match="one class index per row"):
        focal_loss(logits, np.array([0]), gamma=1.0)
    with pytest.raises(ValueError, match="non-negative"):
        focal_loss(logits, np.array([0, 1]), gamma=-1.0)


# -- loss composition ----------------------------------------------------------------


def test_code_loss_weights_secondary_layers():
    rng = SeededRng(13)
    logits = [Tensor(rng.normal((4, 5))) for _ in range(3)]
    labels = np.array([[0, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 0]])
    primary = focal_loss(logits[0], labels[:, 0], gamma=2.0).item()
    secondary = sum(
        focal_loss(logits[i], labels[:, i], gamma=2.0).item() for i in (1, 2)
    )
    for beta in (0.0, 0.1, 0.5, 1.0):
        got = code_loss(logits, labels, secondary_weight=beta, gamma=2.0).item()
        assert got == pytest.approx(primary + beta * secondary, abs=1e-6)


def test_offset_loss_zeroes_when_offset_closes_the_gap():
    rng = SeededRng(14)
    chunks = rng.normal((3, 1, 2))
    decoded = rng.normal((3, 1, 2))
    gap = Tensor(chunks - decoded)
    assert offset_loss(gap, chunks, decoded).item() == pytest.approx(0.0, abs=1e-7)
    zero = Tensor(np.zeros_like(chunks))
    expected = np.abs(chunks - decoded).mean()
    assert offset_loss(zero, chunks, decoded).item() == pytest.approx(expected, abs=1e-6)


def test_offset_loss_gradient_is_the_sign_pattern():
    chunks = np.array([[[0.5, -0.5]]], dtype=np.float32)
    decoded = np.array([[[0.1, 0.1]]], dtype=np.float32)
    offset = Tensor(np.array([[[0.6, -0.2]]], dtype=np.float32), requires_grad=True)
    loss = offset_loss(offset, chunks, decoded)
    loss.backward()
    # residual = decoded + offset - chunks = (0.2, 0.4); grad = sign / count
    assert np.allclose(offset.grad, np.array([[[0.5, 0.5]]]), atol=1e-7)
    report = finite_diff_check(lambda: offset_loss(offset, chunks, decoded), [offset])
    assert report.passed, report


def test_total_loss_is_code_plus_weighted_offset():
    rng = SeededRng(15)
    net = make_net(k=4, num_q=2, chunk_len=2)
    obs = rng.normal((3, 3, 4))
    labels = np.array([[0, 1], [2, 3], [1, 0]])
    chunks = rng.normal((3, 2, 2))
    decoded = rng.normal((3, 2, 2))
    logits, offset = net.predict(obs)
    for weight in (0.0, 0.5, 1.0):
        graph, parts = total_loss(
            logits, offset, labels, chunks, decoded,
            secondary_weight=0.5, gamma=2.0, offset_weight=weight,
        )
        assert parts["total_loss"] == pytest.approx(
            parts["code_loss"] + weight * parts["offset_loss"], abs=1e-9
        )
        assert graph.item() == pytest.approx(parts["total_loss"], abs=1e-6)
        if weight == 0.0:
            code_only = code_loss(logits, labels, 0.5, 2.0).item()
            assert parts["total_loss"] == pytest.approx(code_only, abs=1e-9)


def test_five_step_overfit_decreases_the_loss_monotonically():
    from vqpolicy.optim import AdamW

    rng = SeededRng(16)
    net = make_net(k=4, num_q=2, seed=17)
    obs = rng.normal((8, 3, 4))
    labels = np.stack([rng.integers(4, size=8), rng.integers(4, size=8)], axis=1)
    chunks = rng.normal((8, 1, 2), std=0.3)
    decoded = np.zeros_like(chunks)
    opt = AdamW(net.params(), lr=3e-4)
    history = []
    for _ in range(5):
        logits, offset = net.predict(obs)
        graph, parts = total_loss(
            logits, offset, labels, chunks, decoded,
            secondary_weight=0.5, gamma=2.0, offset_weight=1.0,
        )
        opt.zero_grad()
        graph.backward()
        opt.step()
        history.append(parts["total_loss"])
    assert all(b < a for a, b in zip(history, history[1:])), history


def test_total_loss_gradients_pass_finite_differences_on_a_toy_trunk():
    rng = SeededRng(18)
    net = make_net(obs_window=3, goal_window=2, embed=8, layers=2, heads=2, k=3, seed=19)
    obs = rng.normal((2, 3, 4))
    goal = rng.normal((2, 2, 4))
    labels = np.array([[0, 2], [1, 1]])
    chunks = rng.normal((2, 1, 2), std=0.5)
    decoded = rng.normal((2, 1, 2), std=0.1)

    def f():
        logits, offset = net.predict(obs, goal)
        graph, _ = total_loss(
            logits, offset, labels, chunks, decoded,
            secondary_weight=0.5, gamma=2.0, offset_weight=1.0,
        )
        return graph

    report = finite_diff_check(f, net.params())
    assert report.passed, report


# -- sampling -----------------------------------------------------------------------


def test_masked_pick_temperature_zero_is_argmax():
    logits = np.array([0.3, 2.0, -1.0, 2.0])
    assert _masked_pick(logits, None, 0.0, SeededRng(20)) == 1


def test_masked_pick_is_invariant_to_constant_logit_shifts():
    rng = SeededRng(21)
    for _ in range(50):
        logits = rng.normal((6,))
        assert _masked_pick(logits, None, 0.0, SeededRng(0)) == _masked_pick(
            logits + 12.5, None, 0.0, SeededRng(0)
        )


def test_masked_pick_matches_softmax_within_tv_over_100k_draws():
    logits = np.array([1.2, -0.4, 0.0, 2.1, 0.7, -1.5, 0.3, 1.0])
    temperature = 0.8
    z = logits.astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    rng = SeededRng(22)
    counts = np.zeros(len(logits))
    draws = 100_000
    for _ in range(draws):
        counts[_masked_pick(logits, None, temperature, rng)] += 1
    tv = 0.5 * np.abs(counts / draws - p).sum()
    assert tv <= 0.01, tv


def test_mask_with_single_combination_forces_that_tuple():
    net = make_net(k=3, num_q=2)
    mask = np.zeros((3, 3), dtype=bool)
    mask[2, 1] = True
    obs = SeededRng(23).normal((3, 4))
    rng = SeededRng(24)
    for _ in range(25):
        codes, _ = sample_action(net, obs, None, rng, temperature=1.0, mask=mask)
        assert codes.tolist() == [2, 1]


def test_full_mask_leaves_sampling_untouched():
    net = make_net(k=3, num_q=2)
    obs = SeededRng(25).normal((3, 4))
    full = np.ones((3, 3), dtype=bool)
    a = [sample_action(net, obs, None, SeededRng(26), 1.0, mask=full)[0] for _ in range(20)]
    b = [sample_action(net, obs, None, SeededRng(26), 1.0, mask=None)[0] for _ in range(20)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_empty_mask_warns_and_falls_back_to_unmasked():
    net = make_net(k=3, num_q=2)
    obs = SeededRng(27).normal((3, 4))
    empty = np.zeros((3, 3), dtype=bool)
    with pytest.warns(UserWarning, match="removed all probability mass"):
        codes, _ = sample_action(net, obs, None, SeededRng(28), 1.0, mask=empty)
    assert codes.shape == (2,)


def test_masked_samples_stay_inside_the_observed_set():
    net = make_net(k=4, num_q=2)
    observed = np.array([[0, 1], [2, 3], [3, 0]])
    mask = build_deadcode_mask(observed, (4, 4))
    allowed = {tuple(row) for row in observed}
    obs = SeededRng(29).normal((3, 4))
    rng = SeededRng(30)
    for _ in range(500):
        codes, _ = sample_action(net, obs, None, rng, temperature=1.0, mask=mask)
        assert tuple(codes) in allowed


def test_build_deadcode_mask_marks_exactly_the_observed_tuples():
    mask = build_deadcode_mask(np.array([[1, 2]]), (3, 4))
    assert mask.sum() == 1
    assert mask[1, 2]
    full = build_deadcode_mask(
        np.array([[i, j] for i in range(2) for j in range(2)]), (2, 2)
    )
    assert full.all()
    with pytest.raises(ValueError, match="number of layers"):
        build_deadcode_mask(np.array([[0, 1, 2]]), (3, 3))


def test_two_mode_policy_samples_both_primary_codes(two_mode_policy):
    run = two_mode_policy
    obs = run.windows.obs[0]
    rng = SeededRng(31)
    counts = {}
    for _ in range(200):
        codes, _ = sample_action(run.net, obs, None, rng, temperature=1.0, mask=run.mask)
        counts[codes[0]] = counts.get(codes[0], 0) + 1
    top_two = sorted(counts.values(), reverse=True)[:2]
    assert len(top_two) == 2, counts
    assert min(top_two) >= 0.2 * 200, counts


def test_two_mode_policy_offsets_recover_the_mode_actions(two_mode_policy):
    from vqpolicy.data import denormalize

    run = two_mode_policy
    obs = run.windows.obs[0]
    rng = SeededRng(32)
    seen = []
    for _ in range(40):
        codes, offset = sample_action(run.net, obs, None, rng, temperature=1.0, mask=run.mask)
        chunk = run.quantizer.decode_codes(codes)[0] + offset
        seen.append(denormalize(chunk, run.stats)[0])
    seen = np.array(seen)
    for mode in [(0.08, 0.08), (-0.08, -0.08)]:
        dists = np.abs(seen - np.asarray(mode)).sum(axis=1)
        assert dists.min() < 0.02, (mode, seen[:5])
