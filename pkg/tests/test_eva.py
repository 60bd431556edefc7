import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evabench.eva import (
    LinearLayerNorm,
    eva_shared_coefficient,
    fault_injection,
    group_coefficients,
    group_summaries,
    ideal_eva,
    practical_eva,
    practical_eva_flops,
    practical_eva_peak_bytes,
    scatterbrain,
)
from evabench.exact import AttentionInstance, random_instance, softmax_attention
from evabench.features import RFConfig, performer_attention
from evabench.partition import PartitionSpec, build_partition

seeds = st.integers(0, 2**32)
DET = RFConfig(S=1, mode="deterministic-mean")


def in_hull(Y, V, tol):
    return np.all(Y >= V.min(axis=0) - tol) and np.all(Y <= V.max(axis=0) + tol)


def scalar_eva(Q, K, V, Kb, C):
    """Block-local exact terms plus one pooled surrogate per contiguous group,
    with the group coefficient taken at the direction mean(q) + mean(k)."""
    N = len(Q)
    out = []
    groups = [list(g) for g in np.array_split(np.arange(N), C)]
    summaries = []
    for g in groups:
        kt = sum(K[m] for m in g) / len(g)
        qt = sum(Q[m] for m in g) / len(g)
        w = qt + kt
        a = [math.exp(w * K[m] - K[m] ** 2 / 2) for m in g]
        beta = sum(ai * V[m] for ai, m in zip(a, g)) / sum(a)
        summaries.append((kt, beta))
    for n in range(N):
        lo = (n // Kb) * Kb
        num = den = 0.0
        for m in range(lo, min(lo + Kb, N)):
            e = math.exp(Q[n] * K[m])
            num += e * V[m]
            den += e
        for kt, beta in summaries:
            e = math.exp(Q[n] * kt)
            num += e * beta
            den += e
        out.append(num / den)
    return np.array(out)


def test_practical_matches_scalar_transcription():
    rng = np.random.default_rng(0)
    Q, K, V = rng.standard_normal((3, 4))
    inst = AttentionInstance(Q[:, None], K[:, None], V[:, None], logit_scale=1.0)
    got = practical_eva(inst, build_partition(4, 4, 2, 2), DET).output[:, 0]
    assert np.allclose(got, scalar_eva(Q, K, V, 2, 2), rtol=0, atol=1e-13)


def test_practical_full_block_is_softmax():
    inst = random_instance(1, 12, d=4)
    rep = practical_eva(inst, build_partition(12, 12, 12, 0), RFConfig(S=1))
    assert np.max(np.abs(rep.output - softmax_attention(inst))) <= 1e-12
    assert rep.group_betas.shape == (0, 4)


def test_identical_keys_and_values():
    inst = random_instance(2, 10, d=3)
    inst = inst.replace(K=np.broadcast_to(inst.K[0], (10, 3)), V=np.broadcast_to(inst.V[0], (10, 3)))
    out = practical_eva(inst, build_partition(10, 10, 3, 2), RFConfig(S=1, seed=3)).output
    assert np.allclose(out, inst.V[0], rtol=0, atol=1e-15)


def test_group_summaries():
    inst = AttentionInstance(np.ones((2, 2)), [[0.0, 2.0], [2.0, 0.0]], np.ones((2, 2)), logit_scale=1.0)
    s = group_summaries(inst, build_partition(2, 2, 0, 1))
    assert np.allclose(s.k_tilde, [[1.0, 1.0]])
    same = random_instance(3, 4, d=3)
    same = same.replace(K=np.broadcast_to(same.K[1], (4, 3)))
    s = group_summaries(same, build_partition(4, 4, 0, 2))
    assert np.allclose(s.k_tilde, same.k_scaled[1])


def test_layernorm_sigma():
    inst = random_instance(4, 6, d=4)
    s = group_summaries(inst, build_partition(6, 6, 0, 2), LinearLayerNorm(np.eye(4)))
    for c, idx in enumerate(np.array_split(np.arange(6), 2)):
        x = inst.k_scaled[idx].mean(axis=0)
        ref = (x - x.mean()) / math.sqrt(x.var() + 1e-5)
        assert np.allclose(s.k_tilde[c], ref, atol=1e-14)
    assert np.allclose(s.k_tilde.mean(axis=1), 0, atol=1e-14)
    with pytest.raises(ValueError):
        group_summaries(inst, build_partition(6, 6, 0, 2), "relu")


def test_group_coefficients():
    inst = random_instance(5, 6, d=3)
    part = build_partition(6, 6, 0, 3)
    flat = inst.replace(V=np.broadcast_to(inst.V[0], (6, 3)))
    betas, omegas = group_coefficients(flat, part, group_summaries(flat, part), RFConfig(S=1, seed=1))
    assert np.allclose(betas, inst.V[0], atol=1e-15) and omegas.shape == (3, 3)
    single = build_partition(6, 6, 0, 6)
    betas, _ = group_coefficients(inst, single, group_summaries(inst, single), RFConfig(S=1, seed=1))
    assert np.allclose(betas, inst.V, atol=1e-15)
    summ = group_summaries(inst, part)
    a = group_coefficients(inst, part, summ, RFConfig(S=1, seed=1, mode="deterministic-mean"))[0]
    b = group_coefficients(inst, part, summ, RFConfig(S=1, seed=2, mode="deterministic-mean"))[0]
    assert np.array_equal(a, b)
    # each coefficient is a convex combination of its group's values
    betas, _ = group_coefficients(inst, part, summ, RFConfig(S=1, seed=4))
    for c, idx in enumerate(part.P_sets):
        assert in_hull(betas[c:c + 1], inst.V[idx], 1e-15)
    with pytest.raises(ValueError):
        group_coefficients(inst, part, summ, RFConfig(S=1), proposal="k")


@given(seeds)
def test_ideal_limits(seed):
    inst = random_instance(seed, 10, 8, d=4, dv=3)
    Y = softmax_attention(inst)
    cfg = RFConfig(S=6, seed=seed)
    assert np.max(np.abs(ideal_eva(inst, PartitionSpec(10, 8, 8, 0), cfg).output - Y)) <= 1e-12
    rfa = performer_attention(inst, cfg).output
    assert np.max(np.abs(ideal_eva(inst, PartitionSpec(10, 8, 0, 1), cfg).output - rfa)) <= 1e-12
    assert np.max(np.abs(ideal_eva(inst, PartitionSpec(10, 8, 0, 8), cfg).output - Y)) <= 1e-12


def test_ideal_rejects_overlap_and_unknown_convention():
    inst = random_instance(6, 8, d=2)
    with pytest.raises(ValueError):
        ideal_eva(inst, build_partition(8, 8, 4, 2), RFConfig(S=2))
    with pytest.raises(ValueError):
        ideal_eva(inst, build_partition(8, 8, 4, 2, False), RFConfig(S=2), coefficients="exact")


def test_ideal_reports_exact_normalizer():
    inst = random_instance(7, 6, d=3)
    rep = ideal_eva(inst, build_partition(6, 6, 2, 2, False), RFConfig(S=3, seed=1))
    assert np.allclose(rep.Z_estimates, np.exp(inst.logits()).sum(axis=1), rtol=1e-14)


@given(seeds, st.booleans(), st.sampled_from(["sample", "deterministic-mean"]), st.sampled_from(["qk", "q", "zero"]))
def test_convexity(seed, full, mode, proposal):
    inst = random_instance(seed, 20, d=3, dv=2, unit_norm=seed % 2 == 0)
    cfg = RFConfig(S=1, seed=seed, mode=mode)
    rep = practical_eva(inst, PartitionSpec(20, 20, 6, 3, full), cfg, proposal=proposal)
    assert in_hull(rep.output, inst.V, 1e-10)
    assert np.all(rep.Z_estimates > 0)
    ideal = ideal_eva(inst, PartitionSpec(20, 20, 6, 3, False), RFConfig(S=2, seed=seed))
    assert in_hull(ideal.output, inst.V, 1e-10)


def test_deterministic_mean_is_seed_free():
    inst = random_instance(8, 24, d=4)
    for full in (True, False):
        part = PartitionSpec(24, 24, 6, 4, full)
        a = practical_eva(inst, part, RFConfig(S=1, seed=1, mode="deterministic-mean")).output
        b = practical_eva(inst, part, RFConfig(S=1, seed=2, mode="deterministic-mean")).output
        assert np.array_equal(a, b)


def test_sampling_is_seeded():
    inst = random_instance(9, 24, d=4)
    part = build_partition(24, 24, 6, 4)
    a = practical_eva(inst, part, RFConfig(S=1, seed=1)).output
    assert np.array_equal(a, practical_eva(inst, part, RFConfig(S=1, seed=1)).output)
    assert not np.array_equal(a, practical_eva(inst, part, RFConfig(S=1, seed=2)).output)


def test_local_bias_hook():
    inst = random_instance(10, 8, d=3)
    part = build_partition(8, 8, 4, 2)
    base = practical_eva(inst, part, RFConfig(S=1)).output
    assert np.array_equal(base, practical_eva(inst, part, RFConfig(S=1), local_bias=np.zeros((4, 4))).output)
    assert not np.allclose(base, practical_eva(inst, part, RFConfig(S=1), local_bias=np.eye(4)).output)


def test_cross_attention_shapes():
    inst = random_instance(11, 6, 12, d=3, dv=2)
    rep = practical_eva(inst, build_partition(6, 12, 4, 3), RFConfig(S=1))
    assert rep.output.shape == (6, 2) and in_hull(rep.output, inst.V, 1e-12)


def test_fault_hook_changes_output_and_resets():
    inst = random_instance(12, 8, d=3)
    part = build_partition(8, 8, 2, 2)
    base = practical_eva(inst, part, DET).output
    with fault_injection("group_term_sign"):
        assert not np.allclose(base, practical_eva(inst, part, DET).output)
    assert np.array_equal(base, practical_eva(inst, part, DET).output)
    with pytest.raises(ValueError):
        with fault_injection("nope"):
            pass


def test_counters_exactly_linear_in_length():
    Ns = [512, 1024, 1536, 2048, 2560]
    for counter in (practical_eva_flops, practical_eva_peak_bytes):
        f = [counter(PartitionSpec(N, N, 64, 32), 32) for N in Ns]
        assert len({b - a for a, b in zip(f, f[1:])}) == 1
    inst = random_instance(13, 64, d=8)
    rep = practical_eva(inst, build_partition(64, 64, 8, 4), RFConfig(S=1))
    assert rep.flop_estimate == practical_eva_flops(build_partition(64, 64, 8, 4), 8)


def test_scatterbrain_limits():
    inst = random_instance(14, 10, d=3)
    cfg = RFConfig(S=8, seed=2)
    full = [np.arange(10)] * 10
    empty = [np.array([], dtype=int)] * 10
    assert np.max(np.abs(scatterbrain(inst, full, cfg).output - softmax_attention(inst))) <= 1e-12
    assert np.max(np.abs(scatterbrain(inst, empty, cfg).output - performer_attention(inst, cfg).output)) <= 1e-12
    with pytest.raises(ValueError):
        scatterbrain(inst, full[:3], cfg)
    with pytest.raises(ValueError):
        scatterbrain(inst, full, RFConfig(S=2, proposal_mean=np.ones(3)))


@given(seeds)
def test_scatterbrain_is_shared_coefficient_eva(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 12, d=3, dv=2)
    cfg = RFConfig(S=6, seed=seed)
    E = [np.sort(rng.choice(12, size=rng.integers(0, 6), replace=False)) for _ in range(12)]
    ref = scatterbrain(inst, E, cfg).output
    for beta in (None, np.zeros(2), rng.standard_normal(2)):
        assert np.max(np.abs(eva_shared_coefficient(inst, E, cfg, beta).output - ref)) <= 1e-10


def test_error_reduction_on_a_few_instances():
    wins = 0
    for i in range(10):
        inst = random_instance(i, 128, d=16)
        Y = softmax_attention(inst)
        eva = ideal_eva(inst, PartitionSpec(128, 128, 8, 8, False), DET, "single-sample").output
        rfa = performer_attention(inst, RFConfig(S=16, seed=i)).output
        wins += np.mean((eva - Y) ** 2) < np.mean((rfa - Y) ** 2)
    assert wins >= 8
