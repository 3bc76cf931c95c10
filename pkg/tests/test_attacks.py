import numpy as np
import pytest
import torch
import torch.nn.functional as F

from attacks import (
    AttackSpec, attack_targets, batch_attack, bim, fgsm, linf_norms, load_adversarial, pgd, save_adversarial,
    uniform_noise,
)
from errors import InvalidInputError
from model_zoo import ClassifierSpec, build, predict_logits

EPS = 8 / 255
ALPHA = 2 / 255


@pytest.fixture
def batch():
    generator = torch.Generator().manual_seed(0)
    x = torch.rand(16, 3, 16, 16, generator=generator)
    y = torch.randint(0, 4, (16,), generator=generator)
    return x, y


@pytest.fixture
def large_batch():
    generator = torch.Generator().manual_seed(1)
    x = torch.rand(1000, 3, 16, 16, generator=generator)
    y = torch.randint(0, 4, (1000,), generator=generator)
    return x, y


def test_fgsm_forces_single_full_step():
    spec = AttackSpec("fgsm", epsilon=EPS, alpha=ALPHA, steps=10)
    assert (spec.method, spec.steps, spec.alpha) == ("FGSM", 1, EPS)
    assert spec.random_start is False


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        AttackSpec("PGD", epsilon=EPS, alpha=2 * EPS)
    with pytest.raises(InvalidInputError):
        AttackSpec("PGD", steps=0)
    with pytest.raises(InvalidInputError):
        AttackSpec("CW")


@pytest.mark.parametrize("method", ["FGSM", "BIM", "PGD"])
@pytest.mark.parametrize("targeted", [False, True])
def test_output_stays_in_ball_and_box(method, targeted, large_batch, tiny_model):
    x, y = large_batch
    spec = AttackSpec(method, epsilon=EPS, alpha=ALPHA, steps=5, targeted=targeted)
    adv, norms = batch_attack(tiny_model(), x, y, spec)
    assert adv.shape == x.shape
    assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0
    assert float(norms.max()) <= EPS + 1e-6
    assert len(norms) == 1000


def test_single_step_bim_and_pgd_equal_fgsm(batch, tiny_model):
    x, y = batch
    model = tiny_model()
    reference = fgsm(model, x, y, AttackSpec("FGSM", epsilon=EPS))
    one_step = dict(epsilon=EPS, alpha=EPS, steps=1, random_start=False)
    assert torch.equal(bim(model, x, y, AttackSpec("BIM", **one_step)), reference)
    assert torch.equal(pgd(model, x, y, AttackSpec("PGD", **one_step)), reference)


def test_pgd_without_random_start_equals_bim(batch, tiny_model):
    x, y = batch
    model = tiny_model()
    kwargs = dict(epsilon=EPS, alpha=ALPHA, steps=4, random_start=False)
    assert torch.equal(pgd(model, x, y, AttackSpec("PGD", **kwargs)), bim(model, x, y, AttackSpec("BIM", **kwargs)))


def test_pgd_is_seeded(batch, tiny_model):
    x, y = batch
    model = tiny_model()
    spec = AttackSpec("PGD", epsilon=EPS, alpha=ALPHA, steps=3, seed=4)
    assert torch.equal(pgd(model, x, y, spec), pgd(model, x, y, spec))


def test_zero_gradient_leaves_input_unchanged():
    model = build(ClassifierSpec("linear", 4, (3, 8, 8)))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    x = torch.rand(5, 3, 8, 8)
    y = torch.tensor([0, 1, 2, 3, 0])
    # W = 0 zeroes the input gradient
    for method in ("FGSM", "BIM"):
        assert torch.equal(batch_attack(model, x, y, AttackSpec(method, epsilon=EPS, alpha=ALPHA))[0], x)


@pytest.mark.parametrize("seed", range(50))
def test_fgsm_hits_worst_vertex_of_logistic_model(seed):
    generator = torch.Generator().manual_seed(seed)
    d = int(torch.randint(2, 9, (1,), generator=generator))
    model = build(ClassifierSpec("linear", 2, (1, 1, d), seed=seed)).double()
    # interior point, so every vertex of the ε-ball is feasible
    x = 0.2 + 0.6 * torch.rand(1, 1, 1, d, generator=generator, dtype=torch.float64)
    y = torch.randint(0, 2, (1,), generator=generator)
    eps = 0.05
    adv = fgsm(model, x, y, AttackSpec("FGSM", epsilon=eps))

    vertices = torch.cartesian_prod(*[torch.tensor([-eps, eps], dtype=torch.float64)] * d)
    candidates = x + vertices.view(-1, 1, 1, d)
    with torch.no_grad():
        brute = F.cross_entropy(model(candidates), y.expand(len(candidates)), reduction="none").max().item()
        achieved = F.cross_entropy(model(adv), y).item()
    assert achieved == pytest.approx(brute, abs=1e-9)

    targeted = AttackSpec("FGSM", epsilon=eps, targeted=True)
    targets = attack_targets(y, targeted, 2)
    toward = fgsm(model, x, y, targeted)
    with torch.no_grad():
        assert F.cross_entropy(model(toward), targets).item() < F.cross_entropy(model(x), targets).item()


def test_targeted_attack_lowers_target_loss(batch, tiny_model):
    x, y = batch
    model = tiny_model()
    spec = AttackSpec("BIM", epsilon=EPS, alpha=ALPHA, steps=10, targeted=True)
    targets = attack_targets(y, spec, 4)
    before = F.cross_entropy(predict_logits(model, x), targets).item()
    adv, _ = batch_attack(model, x, y, spec)
    after = F.cross_entropy(predict_logits(model, adv), targets).item()
    assert after < before


def test_untargeted_attack_raises_true_loss(batch, tiny_model):
    x, y = batch
    model = tiny_model()
    before = F.cross_entropy(predict_logits(model, x), y).item()
    adv, _ = batch_attack(model, x, y, AttackSpec("PGD", epsilon=EPS, alpha=ALPHA, steps=10))
    assert F.cross_entropy(predict_logits(model, adv), y).item() > before


def test_default_target_is_next_class():
    spec = AttackSpec("PGD", targeted=True)
    assert attack_targets(torch.tensor([0, 1, 3]), spec, 4).tolist() == [1, 2, 0]
    fixed = AttackSpec("PGD", targeted=True, target_class=2)
    assert attack_targets(torch.tensor([0, 1, 3]), fixed, 4).tolist() == [2, 2, 2]


def test_out_of_range_input_rejected(tiny_model):
    with pytest.raises(InvalidInputError):
        fgsm(tiny_model(), torch.full((1, 3, 16, 16), 1.5), torch.tensor([0]), AttackSpec("FGSM"))


def test_uniform_noise_within_budget():
    x = torch.rand(10, 3, 8, 8)
    noisy = uniform_noise(x, EPS, seed=1)
    assert float(linf_norms(x, noisy).max()) <= EPS + 1e-7
    assert torch.equal(noisy, uniform_noise(x, EPS, seed=1))


def test_adversarial_blob_round_trip(tmp_path, batch, tiny_model):
    x, y = batch
    spec = AttackSpec("PGD", epsilon=EPS, alpha=ALPHA, steps=2)
    adv, _ = batch_attack(tiny_model(), x, y, spec)
    path = save_adversarial(tmp_path / "adv" / "pgd.bin", adv, spec, "desk", seed=0)
    loaded, sidecar = load_adversarial(path)
    assert torch.equal(loaded, adv.float())
    assert AttackSpec(**sidecar["spec"]) == spec
    assert sidecar["source_dataset"] == "desk"
    assert np.isclose(sidecar["spec"]["epsilon"], EPS)


@pytest.mark.parametrize("method", ["BIM", "PGD"])
@pytest.mark.parametrize("seed", range(20))
def test_iterative_attacks_reach_worst_vertex_of_logistic_model(method, seed):
    generator = torch.Generator().manual_seed(100 + seed)
    d = int(torch.randint(2, 9, (1,), generator=generator))
    model = build(ClassifierSpec("linear", 2, (1, 1, d), seed=seed)).double()
    x = 0.2 + 0.6 * torch.rand(1, 1, 1, d, generator=generator, dtype=torch.float64)
    y = torch.randint(0, 2, (1,), generator=generator)
    eps = 0.05
    # 10 steps of ε/4 cross the whole ball from any start
    adv = batch_attack(model, x, y, AttackSpec(method, epsilon=eps, alpha=eps / 4, steps=10, seed=seed))[0]

    vertices = torch.cartesian_prod(*[torch.tensor([-eps, eps], dtype=torch.float64)] * d)
    candidates = x + vertices.view(-1, 1, 1, d)
    with torch.no_grad():
        brute = F.cross_entropy(model(candidates), y.expand(len(candidates)), reduction="none").max().item()
        achieved = F.cross_entropy(model(adv), y).item()
    assert achieved == pytest.approx(brute, abs=1e-9)


def test_pgd_start_does_not_depend_on_chunking():
    model = build(ClassifierSpec("linear", 4, (3, 8, 8)))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    x = 0.2 + 0.6 * torch.rand(10, 3, 8, 8)
    y = torch.zeros(10, dtype=torch.long)
    spec = AttackSpec("PGD", epsilon=EPS, alpha=ALPHA, steps=2, seed=5)
    # zero gradient: the output is the random start itself
    whole, _ = batch_attack(model, x, y, spec)
    chunked, _ = batch_attack(model, x, y, spec, chunk_size=3)
    assert torch.equal(whole, chunked)
    assert torch.equal(whole, pgd(model, x, y, spec))
    assert not torch.equal(whole[:3] - x[:3], whole[3:6] - x[3:6])
