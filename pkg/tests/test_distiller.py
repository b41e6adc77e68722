import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import cncl_brute_force, kl_brute_force, negatives_by_enumeration

from caedfkd.distiller import (
    CNCLConfig,
    ContrastivePairSet,
    ScheduleState,
    augment_batch,
    build_pairs,
    cncl_loss,
    cosine_lr,
    kl_distill_loss,
    pair_layout,
    student_step,
)
from caedfkd.embedding_space import cend_diffuse, default_sources, make_categories, init_embedding_space, StubProvider
from caedfkd.embedding_space import orthonormal_projection
from caedfkd.errors import ConfigError
from caedfkd.nets import Generator, StudentCNN, TeacherCNN, param_digest
from caedfkd.synth_generator import MemoryBank, SyntheticBatch


def _pairs(a, p, n):
    k, m = n.shape[:2]
    return ContrastivePairSet(torch.as_tensor(a), torch.as_tensor(p), torch.as_tensor(n),
                              torch.zeros(k, m, dtype=torch.long), torch.zeros(k, m, dtype=torch.long))


# ---------------------------------------------------------------- L_KL


def test_kl_examples():
    t = torch.log(torch.tensor([[0.75, 0.25]]))
    s = torch.log(torch.tensor([[0.5, 0.5]]))
    assert kl_distill_loss(s, t, 1.0).item() == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-6)
    assert kl_distill_loss(s, t, 1.0).item() == pytest.approx(0.130812, abs=1e-6)
    assert kl_distill_loss(t, t, 4.0).item() == 0.0
    with pytest.raises(ConfigError):
        kl_distill_loss(torch.zeros(1, 2), torch.zeros(1, 3))
    with pytest.raises(ConfigError):
        kl_distill_loss(s, t, 0.0)


@given(arrays(np.float64, (4, 5), elements=st.floats(-8, 8)),
       arrays(np.float64, (4, 5), elements=st.floats(-8, 8)),
       st.floats(0.5, 8.0), st.floats(-100, 100))
def test_kl_oracle_and_shift_invariance(s, t, temp, c):
    st_, tt = torch.from_numpy(s), torch.from_numpy(t)
    val = kl_distill_loss(st_, tt, temp).item()
    assert val == pytest.approx(kl_brute_force(s, t, temp), rel=1e-7, abs=1e-9)
    assert kl_distill_loss(st_ + c, tt + c, temp).item() == pytest.approx(val, rel=1e-6, abs=1e-8)
    assert val >= -1e-12


# ---------------------------------------------------------------- pairs


def test_pair_counts_k2_n4():
    pos, neg, neg_cat, neg_prov = pair_layout(2, 4)
    assert pos.shape == (2, 4) and neg.shape == (2, 5)
    assert neg_cat.tolist() == [[1] * 5, [0] * 5]
    assert neg_prov.tolist()[0] == [0, 1, 2, 3, 4]
    _, literal, _, _ = pair_layout(2, 4, anchor_negatives=False)
    assert literal.shape == (2, 4)
    with pytest.raises(ConfigError, match="contrastive training requires >= 2 categories"):
        pair_layout(1, 4)


@given(st.integers(2, 6), st.integers(1, 5), st.booleans())
def test_pair_layout_matches_enumeration(k, n, with_anchors):
    pos, neg, neg_cat, neg_prov = pair_layout(k, n, with_anchors)
    expected = negatives_by_enumeration(k, n, with_anchors)
    for c in range(k):
        assert list(zip(neg_cat[c].tolist(), neg_prov[c].tolist())) == expected[c]
        # row indices point at the right stacked rows
        for (oc, prov), row in zip(expected[c], neg[c]):
            assert row == (oc if prov == 0 else k + oc * n + prov - 1)
        assert pos[c].tolist() == [k + c * n + j for j in range(n)]


def test_build_pairs_shapes_and_gradients():
    torch.manual_seed(0)
    space = init_embedding_space(make_categories(["a", "b", "c"]), StubProvider(0, 16), "name")
    d = cend_diffuse(space, default_sources(4, 0.1), 0)
    gen, student = Generator(8, 4), StudentCNN(3, 12)
    buffers = {k: v.clone() for k, v in student.state_dict().items() if "running" in k or "tracked" in k}
    pairs = build_pairs(gen, d, orthonormal_projection(16, 8, 0), student)
    assert all(torch.equal(student.state_dict()[k], v) for k, v in buffers.items())
    assert student.body[0][1].momentum == 0.1
    assert pairs.anchors.shape == (3, 12)
    assert pairs.positives.shape == (3, 4, 12)
    assert pairs.negatives.shape == (3, 10, 12)
    cncl_loss(pairs, 0.1).backward()
    assert all(p.grad is None for p in gen.parameters())
    assert student.head[0].weight.grad is not None


# ---------------------------------------------------------------- L_cncl


def test_cncl_uniform_case():
    ones = np.ones(3)
    loss = cncl_loss(_pairs(np.tile(ones, (2, 1)), np.tile(ones, (2, 4, 1)), np.tile(ones, (2, 4, 1))), 0.1)
    assert loss.item() == pytest.approx(4 * math.log(8), abs=1e-6)
    assert 4 * math.log(8) == pytest.approx(8.317766, abs=1e-6)


def test_cncl_two_point_case():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = a[:, None, :].copy()
    n = -a[:, None, :]
    loss = cncl_loss(_pairs(a, p, n), 0.5).item()
    assert loss == pytest.approx(math.log(1 + math.exp(-4)), abs=1e-9)
    assert loss == pytest.approx(0.018150, abs=1e-6)


@given(st.integers(2, 5), st.integers(1, 5), st.integers(1, 8), st.integers(1, 12),
       st.floats(0.05, 2.0), st.integers(0, 2**31 - 1))
def test_cncl_matches_brute_force(k, n, f, m, tau, seed):
    g = np.random.default_rng(seed)
    a, p, neg = g.standard_normal((k, f)), g.standard_normal((k, n, f)), g.standard_normal((k, m, f))
    assert cncl_loss(_pairs(a, p, neg), tau).item() == pytest.approx(cncl_brute_force(a, p, neg, tau), abs=1e-6)


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_cncl_scale_invariant(seed, scale):
    g = np.random.default_rng(seed)
    a, p, n = g.standard_normal((3, 4)), g.standard_normal((3, 2, 4)), g.standard_normal((3, 5, 4))
    base = cncl_loss(_pairs(a, p, n), 0.2).item()
    assert cncl_loss(_pairs(a * scale, p * scale, n), 0.2).item() == pytest.approx(base, rel=1e-9)


def test_cncl_errors():
    a = np.zeros((2, 3))
    with pytest.raises(ConfigError, match="zero-norm"):
        cncl_loss(_pairs(a, np.ones((2, 1, 3)), np.ones((2, 1, 3))), 0.1)
    with pytest.raises(ConfigError, match="student.tau must be > 0"):
        cncl_loss(_pairs(np.ones((2, 3)), np.ones((2, 1, 3)), np.ones((2, 1, 3))), 0.0)
    with pytest.raises(ConfigError, match="student.tau must be > 0"):
        CNCLConfig(tau=0.0)


# ---------------------------------------------------------------- step


def _bank(n=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    bank = MemoryBank(64)
    bank.write(SyntheticBatch(torch.rand(n, 3, 32, 32, generator=g) * 2 - 1, torch.arange(n) % 3,
                              torch.zeros(n, dtype=torch.long)))
    return bank


def test_student_step_alpha_zero_and_isolation():
    torch.manual_seed(0)
    teacher, student = TeacherCNN(3).freeze(), StudentCNN(3, 8)
    opt = torch.optim.SGD(student.parameters(), lr=0.1)
    t0 = param_digest(teacher)
    out = student_step(student, teacher, _bank(), opt, sample_seed=1, batch_size=8, alpha=0.0, lr=0.05)
    assert out.total == out.l_kl and out.l_cncl == 0.0
    assert out.lr == 0.05
    assert param_digest(teacher) == t0


def test_student_step_with_pairs_leaves_generator():
    torch.manual_seed(0)
    space = init_embedding_space(make_categories(["a", "b", "c"]), StubProvider(0, 16), "name")
    teacher, student, gen = TeacherCNN(3).freeze(), StudentCNN(3, 8), Generator(8, 4)
    d = cend_diffuse(space, default_sources(2, 0.1), 0)
    opt = torch.optim.SGD(student.parameters(), lr=0.1)
    g0, s0 = param_digest(gen), param_digest(student)
    out = student_step(student, teacher, _bank(), opt, sample_seed=1, batch_size=8, generator=gen, diffused=d,
                       projection=orthonormal_projection(16, 8, 0), alpha=0.5, augment=True)
    assert param_digest(gen) == g0 and param_digest(student) != s0
    assert out.total == pytest.approx(out.l_kl + 0.5 * out.l_cncl, rel=1e-5)


def test_augment_batch():
    x = torch.rand(6, 3, 32, 32)
    assert torch.equal(augment_batch(x, 0, shift=0, flip=False), x)
    a = augment_batch(x, [1, 2])
    assert a.shape == x.shape and torch.equal(a, augment_batch(x, [1, 2]))
    flipped = augment_batch(x, 3, shift=0)
    for i in range(6):
        assert torch.equal(flipped[i], x[i]) or torch.equal(flipped[i], x[i].flip(2))
    with pytest.raises(ConfigError):
        augment_batch(x, 0, shift=-1)


# ---------------------------------------------------------------- schedule


def test_cosine_examples():
    assert cosine_lr(ScheduleState(0.1, 0.0, 0, 100)) == pytest.approx(0.1)
    assert cosine_lr(ScheduleState(0.1, 0.01, 100, 100)) == pytest.approx(0.01)
    assert cosine_lr(ScheduleState(0.1, 0.0, 50, 100)) == pytest.approx(0.05)
    with pytest.raises(ConfigError):
        ScheduleState(0.1, 0.2, 0, 10)
    with pytest.raises(ConfigError):
        ScheduleState(0.1, 0.0, 11, 10)


@given(st.floats(1e-4, 1.0), st.floats(0, 1), st.integers(1, 1000))
def test_cosine_monotone_and_bounded(base, frac, horizon):
    lo = base * frac
    values = [cosine_lr(ScheduleState(base, lo, t, horizon)) for t in range(horizon + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
    assert all(lo - 1e-15 <= v <= base + 1e-15 for v in values)
