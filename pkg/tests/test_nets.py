import numpy as np
import pytest
import torch

from ssl_cr.configuration import TaskMode
from ssl_cr.errors import ArgumentError, ConfigurationError
from ssl_cr.nets import (
    Encoder,
    FreezeSpec,
    RspHead,
    RspNetwork,
    TaskHead,
    apply_freeze,
    build_task_model,
    clone_and_freeze,
    encode,
    rsp_forward,
    set_train_mode,
    task_forward,
)
from ssl_cr.ssl_pretrain import rsp_loss
from ssl_cr.utils import named_checksum


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_rsp_head_dimension_chain():
    head = RspHead()
    h = [torch.randn(4, 512) for _ in range(3)]
    assert head.pair_features(*h).shape == (4, 768)
    assert head(*h).shape == (4, 6)


def test_rsp_head_rejects_wrong_feature_width():
    head = RspHead()
    with pytest.raises(ArgumentError):
        head(torch.randn(2, 256), torch.randn(2, 512), torch.randn(2, 512))


def test_rsp_network_forward():
    model = RspNetwork()
    assert model(torch.rand(2, 3, 3, 32, 32)).shape == (2, 6)
    with pytest.raises(ArgumentError):
        model(torch.rand(2, 3, 32, 32))
    patches = tuple(torch.rand(3, 32, 32) for _ in range(3))
    assert rsp_forward(model.eval(), patches).shape == (1, 6)


def test_rsp_forward_rejects_mixed_sizes():
    model = RspNetwork().eval()
    with pytest.raises(ArgumentError):
        rsp_forward(model, (torch.rand(3, 32, 32), torch.rand(3, 32, 32), torch.rand(3, 16, 16)))


def test_encode_checks_input_shape():
    encoder = Encoder().eval()
    assert encode(encoder, torch.rand(3, 32, 32)).shape == (1, 512)
    with pytest.raises(ArgumentError):
        encode(encoder, torch.rand(1, 1, 32, 32))
    with pytest.raises(ArgumentError):
        encode(encoder, torch.rand(1, 3, 32, 32), patch_size=64)


def test_resnet_encoder_width():
    encoder = Encoder("resnet18").eval()
    assert encoder(torch.rand(1, 3, 32, 32)).shape == (1, 512)
    with pytest.raises(ConfigurationError):
        Encoder("vgg")


def test_rsp_head_gradients_match_central_differences():
    head = RspHead().double()
    h = [torch.randn(5, 512, dtype=torch.float64) for _ in range(3)]
    y = torch.tensor([0, 1, 2, 3, 5])

    def loss() -> torch.Tensor:
        return rsp_loss(head(*h), y)

    head.zero_grad()
    loss().backward()
    params = [p for p in head.parameters()]
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(120):
        param = params[int(rng.integers(len(params)))]
        index = tuple(int(rng.integers(s)) for s in param.shape)
        analytic = float(param.grad[index])
        with torch.no_grad():
            original = float(param[index])
            param[index] = original + eps
            plus = float(loss())
            param[index] = original - eps
            minus = float(loss())
            param[index] = original
        numeric = (plus - minus) / (2 * eps)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7


def test_regression_head_outputs_unit_interval():
    head = TaskHead(TaskMode.REGRESSION, 512, 1)
    out = head(torch.randn(7, 512) * 10)
    assert out.shape == (7,)
    assert (out >= 0).all() and (out <= 1).all()
    with pytest.raises(ConfigurationError):
        TaskHead(TaskMode.REGRESSION, 512, 2)
    with pytest.raises(ConfigurationError):
        head(torch.randn(2, 768))


def test_task_model_pathways():
    plain = build_task_model(Encoder(), TaskMode.CLASSIFICATION, 3)
    assert plain.feature_dim == 512
    rsp_head = RspHead()
    rsp = build_task_model(Encoder(), TaskMode.CLASSIFICATION, 3, rsp_head=rsp_head)
    assert rsp.feature_dim == 768
    assert rsp.adapter.pairwise is rsp_head.pairwise
    probs = task_forward(rsp.eval(), torch.rand(4, 3, 32, 32))
    assert probs.shape == (4, 3)
    assert torch.allclose(probs.sum(dim=1), torch.ones(4))


def test_student_spec_trains_only_the_head():
    model = build_task_model(Encoder(), TaskMode.REGRESSION, 1, rsp_head=RspHead())
    apply_freeze(model, FreezeSpec.student_consistency(model))
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    assert trainable and all(n.startswith("head.") for n in trainable)

    backbone = named_checksum(model, "encoder.")
    adapter = named_checksum(model, "adapter.")
    head = named_checksum(model, "head.")
    running_mean = model.encoder.body[0][1].running_mean.clone()
    set_train_mode(model)
    optimizer = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.1)
    loss = ((model(torch.rand(4, 3, 32, 32)) - 0.3) ** 2).mean()
    loss.backward()
    optimizer.step()
    assert named_checksum(model, "encoder.") == backbone
    assert named_checksum(model, "adapter.") == adapter
    assert named_checksum(model, "head.") != head
    assert torch.equal(model.encoder.body[0][1].running_mean, running_mean)


def test_apply_freeze_requires_full_coverage():
    model = build_task_model(Encoder(), TaskMode.REGRESSION, 1)
    with pytest.raises(ConfigurationError):
        apply_freeze(model, FreezeSpec({"head.fc.weight": True}))


def test_zero_weights_give_a_zero_feature():
    encoder = Encoder()
    with torch.no_grad():
        for param in encoder.parameters():
            param.zero_()
    features = encode(encoder.eval(), torch.rand(3, 3, 32, 32))
    assert features.shape == (3, 512)
    assert torch.equal(features, torch.zeros_like(features))


def test_classifier_probabilities_are_normalized():
    model = build_task_model(Encoder(), TaskMode.CLASSIFICATION, 4).eval()
    with torch.no_grad():
        for _ in range(4):
            probs = task_forward(model, torch.randn(250, 3, 32, 32))
            assert ((probs >= 0) & (probs <= 1)).all()
            assert torch.max(torch.abs(probs.sum(dim=1) - 1)).item() <= 1e-6


def test_zero_final_layer_gives_uniform_probabilities():
    model = build_task_model(Encoder(), TaskMode.CLASSIFICATION, 5).eval()
    with torch.no_grad():
        model.head.fc.weight.zero_()
        model.head.fc.bias.zero_()
        probs = task_forward(model, torch.rand(2, 3, 32, 32))
    assert torch.allclose(probs, torch.full((2, 5), 0.2))


def test_frozen_teacher_is_untouched_by_student_steps():
    student = build_task_model(Encoder(), TaskMode.CLASSIFICATION, 3)
    teacher = clone_and_freeze(student, FreezeSpec.frozen(student)).eval()
    created = {name: tensor.clone() for name, tensor in teacher.state_dict().items()}
    for name, tensor in student.state_dict().items():
        assert torch.equal(created[name], tensor)
    optimizer = torch.optim.SGD(student.parameters(), lr=0.1, momentum=0.9)
    student.train()
    for _ in range(10):
        x = torch.rand(4, 3, 32, 32)
        with torch.no_grad():
            targets = task_forward(teacher, x).argmax(dim=1)
        optimizer.zero_grad()
        torch.nn.functional.cross_entropy(student(x), targets).backward()
        optimizer.step()
    assert not any(p.requires_grad for p in teacher.parameters())
    for name, tensor in teacher.state_dict().items():
        assert torch.equal(created[name], tensor)


def test_all_trainable_step_changes_every_parameter():
    model = build_task_model(Encoder(), TaskMode.CLASSIFICATION, 3, rsp_head=RspHead())
    apply_freeze(model, FreezeSpec.all_trainable(model))
    before = {name: p.detach().clone() for name, p in model.named_parameters()}
    optimizer = torch.optim.SGD(model.parameters(), lr=0.1)
    # running statistics keep conv biases in the gradient path
    model.eval()
    torch.nn.functional.cross_entropy(model(torch.rand(6, 3, 32, 32)), torch.tensor([0, 1, 2, 0, 1, 2])).backward()
    optimizer.step()
    for name, param in model.named_parameters():
        assert param.grad is not None and param.grad.abs().sum() > 0, name
        assert not torch.equal(before[name], param.detach()), name
