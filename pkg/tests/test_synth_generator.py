import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caedfkd.embedding_space import cend_diffuse, default_sources, orthonormal_projection
from caedfkd.errors import ConfigError, TrainingError
from caedfkd.nets import Generator, StudentCNN, TeacherCNN, bn_running_stats, param_digest
from caedfkd.synth_generator import (
    ANCHOR,
    GAUSSIAN,
    MemoryBank,
    SyntheticBatch,
    adv_loss,
    bn_loss,
    ce_loss,
    cend_batch,
    gaussian_batch,
    generator_objective,
    generator_step,
    memory_sample,
    memory_write,
)

logit_rows = arrays(np.float64, (3, 4), elements=st.floats(-6, 6))


def _kl_rows(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))


# ---------------------------------------------------------------- L_CE


def test_ce_examples():
    assert ce_loss(torch.tensor([[2.0, 0.0]]), torch.tensor([0])).item() == pytest.approx(
        -math.log(math.exp(2) / (math.exp(2) + 1)), abs=1e-6)
    assert ce_loss(torch.tensor([[2.0, 0.0]]), torch.tensor([0])).item() == pytest.approx(0.126928, abs=1e-6)
    assert ce_loss(torch.zeros(5, 10), torch.arange(5)).item() == pytest.approx(math.log(10), abs=1e-6)
    assert ce_loss(torch.tensor([[50.0, 0.0, 0.0]]), torch.tensor([0])).item() < 1e-12
    with pytest.raises(ConfigError):
        ce_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


# ---------------------------------------------------------------- L_BN


def test_bn_examples():
    one = [(torch.tensor([1.0]), torch.tensor([2.0]))]
    running = [(torch.tensor([0.0]), torch.tensor([2.0]))]
    assert bn_loss(one, running).item() == pytest.approx(1.0)
    assert bn_loss(running, running).item() == 0.0
    with pytest.raises(ConfigError):
        bn_loss(one, running * 2)
    with pytest.raises(ConfigError):
        bn_loss([(torch.zeros(2), torch.zeros(2))], running)


@given(st.integers(1, 3), st.integers(1, 5), st.integers(0, 10_000))
def test_bn_quadratic_homogeneity(layers, width, seed):
    g = torch.Generator().manual_seed(seed)
    run = [(torch.randn(width, generator=g), torch.rand(width, generator=g) + 0.5) for _ in range(layers)]
    d = [(torch.randn(width, generator=g), torch.randn(width, generator=g)) for _ in range(layers)]
    one = bn_loss([(m + dm, v + dv) for (m, v), (dm, dv) in zip(run, d)], run)
    two = bn_loss([(m + 2 * dm, v + 2 * dv) for (m, v), (dm, dv) in zip(run, d)], run)
    assert two.item() == pytest.approx(4 * one.item(), rel=1e-5, abs=1e-6)
    assert one.item() >= 0


# ---------------------------------------------------------------- L_adv


def test_adv_examples():
    t = torch.log(torch.tensor([[0.75, 0.25]]))
    s = torch.log(torch.tensor([[0.5, 0.5]]))
    expected = -_kl_rows([0.75, 0.25], [0.5, 0.5])
    assert expected == pytest.approx(-0.130812, abs=1e-6)
    assert adv_loss(s, t).item() == pytest.approx(expected, abs=1e-6)
    assert adv_loss(t, t).item() == 0.0
    with pytest.raises(ConfigError):
        adv_loss(torch.zeros(2, 3), torch.zeros(2, 4))


@given(logit_rows, logit_rows)
def test_adv_non_positive_and_oracle(s, t):
    s, t = torch.from_numpy(s), torch.from_numpy(t)
    val = adv_loss(s, t).item()
    assert val <= 1e-12
    ps, pt = torch.softmax(s, 1).numpy(), torch.softmax(t, 1).numpy()
    oracle = -np.mean([_kl_rows(a, b) for a, b in zip(pt, ps)])
    assert val == pytest.approx(oracle, abs=1e-9)


@given(logit_rows, logit_rows)
def test_agree_mask_only_drops_disagreeing_rows(s, t):
    s, t = torch.from_numpy(s), torch.from_numpy(t)
    masked = adv_loss(s, t, agree_mask=True).item()
    plain = adv_loss(s, t).item()
    assert plain - 1e-12 <= masked <= 1e-12
    if bool((s.argmax(1) == t.argmax(1)).all()):
        assert masked == pytest.approx(plain, abs=1e-12)


# ---------------------------------------------------------------- inputs


def test_cend_batch_layout(space10):
    d = cend_diffuse(space10, default_sources(4, 0.1), 0, 0)
    proj = orthonormal_projection(64, 32, 0)
    full = cend_batch(d, proj)
    assert full.embeddings.shape == (50, 32)
    assert full.labels.tolist() == list(range(10)) * 5
    assert full.provenance.tolist() == [ANCHOR] * 10 + [1] * 10 + [2] * 10 + [3] * 10 + [4] * 10
    part0 = cend_batch(d, proj, n_per_step=2, step=0)
    part1 = cend_batch(d, proj, n_per_step=2, step=1)
    assert sorted(set(part0.provenance[10:].tolist()) | set(part1.provenance[10:].tolist())) == [1, 2, 3, 4]
    with pytest.raises(ConfigError):
        cend_batch(d, proj, n_per_step=5)


def test_gaussian_batch():
    b = gaussian_batch(10, 5, 64, 0, 3)
    assert b.embeddings.shape == (50, 64)
    assert (b.provenance == GAUSSIAN).all()
    assert torch.equal(b.embeddings, gaussian_batch(10, 5, 64, 0, 3).embeddings)
    assert not torch.equal(b.embeddings, gaussian_batch(10, 5, 64, 0, 4).embeddings)


# ---------------------------------------------------------------- memory bank


def _batch(n, start, step=0):
    imgs = torch.arange(start, start + n, dtype=torch.float32).view(n, 1, 1, 1).expand(n, 3, 32, 32).clone()
    return SyntheticBatch(imgs, torch.arange(n) % 3, torch.zeros(n, dtype=torch.long), step)


def test_bank_fifo_eviction():
    bank = MemoryBank(capacity=2)
    for i in range(3):
        memory_write(bank, _batch(1, i, step=i))
    c = bank.contents()
    assert c.images[:, 0, 0, 0].tolist() == [1.0, 2.0]
    assert c.step.tolist() == [1, 2]
    assert bank.written == 3 and len(bank) == 2


def test_bank_sampling():
    bank = MemoryBank(capacity=8)
    with pytest.raises(ConfigError):
        memory_sample(bank, 4, 0)
    memory_write(bank, _batch(3, 0))
    a = memory_sample(bank, 10, 5)
    b = memory_sample(bank, 10, 5)
    assert len(a) == 10
    assert torch.equal(a.images, b.images)
    assert set(a.images[:, 0, 0, 0].tolist()) <= {0.0, 1.0, 2.0}
    before = bank.contents().images.clone()
    memory_sample(bank, 4, 1)
    assert torch.equal(bank.contents().images, before)


@given(st.integers(1, 10), st.lists(st.integers(1, 7), min_size=1, max_size=8))
def test_bank_matches_deque_model(capacity, sizes):
    from collections import deque

    bank = MemoryBank(capacity=capacity)
    model = deque(maxlen=capacity)
    start = 0
    for n in sizes:
        memory_write(bank, _batch(n, start))
        model.extend(range(start, start + n))
        start += n
    assert bank.contents().images[:, 0, 0, 0].tolist() == [float(v) for v in model]


# ---------------------------------------------------------------- step


@pytest.fixture
def trio():
    torch.manual_seed(0)
    teacher = TeacherCNN(10).freeze()
    student = StudentCNN(10, 16)
    generator = Generator(32, 8)
    return teacher, student, generator


def test_generator_step_isolation(trio, space10):
    teacher, student, generator = trio
    d = cend_diffuse(space10, default_sources(2, 0.1), 0, 0)
    inputs = cend_batch(d, orthonormal_projection(64, 32, 0))
    opt = torch.optim.Adam(generator.parameters(), lr=1e-3)
    bank = MemoryBank(64)
    digests = param_digest(teacher), param_digest(student), param_digest(generator)
    student.train()
    out = generator_step(generator, teacher, student, inputs, opt, bn_running_stats(teacher), bank=bank, step=4)
    assert param_digest(teacher) == digests[0]
    assert param_digest(student) == digests[1]
    assert param_digest(generator) != digests[2]
    assert student.training and all(p.requires_grad for p in student.parameters())
    assert len(bank) == 30 and (bank.contents().step == 4).all()
    assert out.total == pytest.approx(out.l_ce + out.l_bn + out.l_adv, rel=1e-5, abs=1e-6)
    assert out.l_ce >= 0 and out.l_bn >= 0 and out.l_adv <= 0


def test_zero_lambdas_give_ce(trio, space10):
    teacher, student, generator = trio
    d = cend_diffuse(space10, default_sources(2, 0.1), 0, 0)
    inputs = cend_batch(d, orthonormal_projection(64, 32, 0))
    opt = torch.optim.Adam(generator.parameters(), lr=1e-3)
    out = generator_step(generator, teacher, student, inputs, opt, bn_running_stats(teacher),
                         lambda_bn=0.0, lambda_adv=0.0)
    assert out.total == out.l_ce


@given(st.floats(0, 5), st.floats(0, 5))
def test_objective_linear_in_lambdas(lam_bn, lam_adv):
    torch.manual_seed(0)
    teacher, student, generator = TeacherCNN(3).freeze(), StudentCNN(3, 8), Generator(8, 4)
    inputs = gaussian_batch(3, 2, 8, 0, 0)
    running = bn_running_stats(teacher)
    with torch.no_grad():
        total, (ce, bn, adv), _ = generator_objective(generator, teacher, student, inputs, running, lam_bn, lam_adv)
    assert total.item() == pytest.approx(ce.item() + lam_bn * bn.item() + lam_adv * adv.item(), rel=1e-5, abs=1e-5)


def test_unfrozen_teacher_rejected(trio):
    _, student, generator = trio
    teacher = TeacherCNN(10)
    opt = torch.optim.Adam(generator.parameters())
    with pytest.raises(TrainingError, match="frozen"):
        generator_step(generator, teacher, student, gaussian_batch(10, 1, 32, 0, 0), opt, bn_running_stats(teacher))


def test_non_finite_loss_aborts(trio):
    teacher, student, generator = trio
    with torch.no_grad():
        generator.fc.weight.fill_(float("nan"))
    opt = torch.optim.Adam(generator.parameters())
    with pytest.raises(TrainingError, match="non-finite"):
        generator_step(generator, teacher, student, gaussian_batch(10, 1, 32, 0, 0), opt, bn_running_stats(teacher))
