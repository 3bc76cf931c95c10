import pytest
import torch
import torch.nn.functional as F

from errors import ChecksumError, InvalidInputError, RegistryError
from model_zoo import (
    TORCHVISION_ARCHS, ClassifierSpec, LossSpec, build, input_gradient, load, predict_labels, predict_logits,
    read_header, registered_architectures, save,
)


def test_registry_lists_builtin_architectures():
    expected = {
        "linear", "convnet-s", "vgg-tiny", "resnet-tiny-18", "resnet-tiny-34",
        "alexnet", "wrn-16", "resnet-18", "resnet-34", "vgg-16", "vgg-19",
    }
    assert expected <= set(registered_architectures())


def test_unknown_architecture_is_a_registry_error():
    with pytest.raises(RegistryError):
        ClassifierSpec("alexnet-9000", 10)


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        ClassifierSpec("linear", 1)
    with pytest.raises(InvalidInputError):
        ClassifierSpec("linear", 4, (32, 32))


@pytest.mark.parametrize("arch", ["linear", "convnet-s", "vgg-tiny", "resnet-tiny-18", "resnet-tiny-34", "alexnet", "wrn-16"])
def test_logits_shape(arch, tiny_model):
    model = tiny_model(arch)
    assert predict_logits(model, torch.rand(5, 3, 16, 16)).shape == (5, 4)


@pytest.mark.parametrize("arch", ["resnet-18", "resnet-34"])
def test_torchvision_resnets_take_small_images(arch, tiny_model):
    assert predict_logits(tiny_model(arch, shape=(3, 32, 32)), torch.rand(2, 3, 32, 32)).shape == (2, 4)


@pytest.mark.slow
@pytest.mark.parametrize("arch", ["vgg-16", "vgg-19"])
def test_torchvision_vggs_take_small_images(arch, tiny_model):
    assert predict_logits(tiny_model(arch, shape=(3, 32, 32)), torch.rand(2, 3, 32, 32)).shape == (2, 4)


def test_torchvision_archs_need_rgb():
    with pytest.raises(InvalidInputError):
        build(ClassifierSpec("resnet-18", 4, (1, 32, 32)))


def test_target_and_substitute_differ_by_spec_alone(tiny_model):
    target, substitute = tiny_model("alexnet"), tiny_model("wrn-16")
    x = torch.rand(3, 3, 16, 16)
    assert predict_logits(target, x).shape == predict_logits(substitute, x).shape
    assert type(target.net) is not type(substitute.net)


def test_build_is_deterministic(tiny_model):
    spec = ClassifierSpec("convnet-s", 4, (3, 16, 16), seed=3)
    a, b = build(spec), build(spec)
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    c = tiny_model(seed=4)
    assert not all(torch.equal(pa, pc) for pa, pc in zip(a.state_dict().values(), c.state_dict().values()))


def test_build_leaves_global_rng_alone(tiny_model):
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    tiny_model(seed=99)
    assert torch.equal(torch.rand(3), expected)


def test_prediction_restores_training_mode(tiny_model):
    model = tiny_model()
    model.train()
    predict_labels(model, torch.rand(2, 3, 16, 16))
    assert model.training


def test_wrong_batch_shape_rejected(tiny_model):
    with pytest.raises(InvalidInputError):
        predict_logits(tiny_model(), torch.rand(2, 3, 8, 8))


FAST_ARCHS = ["linear", "convnet-s", "vgg-tiny", "resnet-tiny-18", "resnet-tiny-34", "alexnet", "wrn-16"]


def test_gradient_checks_cover_every_architecture():
    assert set(FAST_ARCHS) | set(TORCHVISION_ARCHS) == set(registered_architectures())


def _check_input_gradient(model, shape):
    model = model.double().eval()
    x = torch.rand(2, *shape, dtype=torch.float64)
    labels = torch.tensor([1, 3])
    grad = input_gradient(model, x, LossSpec(labels))

    def loss(z):
        with torch.no_grad():
            return F.cross_entropy(model(z), labels, reduction="sum").item()

    generator = torch.Generator().manual_seed(0)
    flat = torch.randperm(x.numel(), generator=generator)[:10]
    h = 1e-6
    for index in flat.tolist():
        bump = torch.zeros(x.numel(), dtype=torch.float64)
        bump[index] = h
        bump = bump.view_as(x)
        numeric = (loss(x + bump) - loss(x - bump)) / (2 * h)
        analytic = grad.flatten()[index].item()
        assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(analytic))


@pytest.mark.parametrize("arch", FAST_ARCHS)
def test_input_gradient_matches_finite_differences(arch, tiny_model):
    _check_input_gradient(tiny_model(arch), (3, 16, 16))


@pytest.mark.slow
@pytest.mark.parametrize("arch", sorted(TORCHVISION_ARCHS))
def test_full_size_input_gradient_matches_finite_differences(arch, tiny_model):
    _check_input_gradient(tiny_model(arch, shape=(3, 32, 32)), (3, 32, 32))


def test_linear_input_gradient_closed_form(tiny_model):
    model = tiny_model("linear").double()
    x = torch.rand(3, 3, 16, 16, dtype=torch.float64)
    labels = torch.tensor([0, 2, 3])
    grad = input_gradient(model, x, LossSpec(labels))
    layer = model.net[1]
    probs = F.softmax(layer(x.flatten(1)), dim=1)
    expected = (probs - F.one_hot(labels, 4).double()) @ layer.weight
    assert torch.allclose(grad.flatten(1), expected, atol=1e-10)


def test_constant_loss_has_zero_gradient(tiny_model):
    x = torch.rand(2, 3, 16, 16)
    assert torch.count_nonzero(input_gradient(tiny_model(), x, LossSpec(kind="constant"))) == 0


def test_input_gradient_leaves_parameters_alone(tiny_model):
    model = tiny_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    input_gradient(model, torch.rand(4, 3, 16, 16), LossSpec(torch.tensor([0, 1, 2, 3])))
    assert all(p.grad is None for p in model.parameters())
    for key, value in model.state_dict().items():
        assert torch.equal(value, before[key])


def test_checkpoint_round_trip(tmp_path, tiny_model):
    model = tiny_model("resnet-tiny-18")
    model.metadata["epochs"] = 3
    path = save(model, tmp_path / "m.ckpt", {"note": "round trip"})
    loaded = load(path)
    assert loaded.spec == model.spec
    assert loaded.metadata == {"epochs": 3, "note": "round trip"}
    x = torch.rand(4, 3, 16, 16)
    assert torch.equal(predict_logits(loaded, x), predict_logits(model, x))
    header, _ = read_header(path)
    assert header["spec"]["arch_id"] == "resnet-tiny-18"


def test_double_checkpoint_loads_as_double(tmp_path, tiny_model):
    model = tiny_model("linear").double()
    loaded = load(save(model, tmp_path / "d.ckpt"))
    assert next(loaded.parameters()).dtype == torch.float64


def test_truncated_checkpoint_fails_checksum(tmp_path, tiny_model):
    path = save(tiny_model(), tmp_path / "m.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(ChecksumError):
        load(path)


def test_corrupted_checkpoint_fails_checksum(tmp_path, tiny_model):
    path = save(tiny_model(), tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load(path)


def test_non_checkpoint_file_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ChecksumError):
        load(path)
