import numpy as np
import pytest

from wccnet.controlnet import (
    CompatibilityError,
    ControlledPredictor,
    branch_offsets,
    controlled_forward,
    embed_prior,
    identity_self_test,
    init_from_backbone,
    load_branch,
    save_branch,
    train_controlnet,
)
from wccnet.diffusion import desk_schedule, training_loss
from wccnet.errors import IntegrityError, ParameterError, ShapeError
from wccnet.network import autograd as ag
from wccnet.network.params import adam_step
from wccnet.network.unet import UNetConfig, encoder_param_names, init_unet, time_embedding, unet_forward
from wccnet.phantom import generate_phantom, random_phantom_spec, simulate_low_dose
from wccnet.training import PatchDataset, TrainHyper
from wccnet.wavelet import SubbandSelector

from gradcheck import numeric_grad

TINY = UNetConfig(base_channels=4, levels=2, temb_dim=8, groups=2)
T = 20


def make_branch(seed=0, inject_middle=False):
    backbone = init_unet(TINY, seed=seed)
    return backbone, init_from_backbone(backbone, TINY, inject_middle=inject_middle, seed=seed)


def random_inputs(rng, n=8):
    x = rng.standard_normal((1, 1, n, n, n))
    y = rng.standard_normal((1, 1, n, n, n))
    c = rng.standard_normal((1, 1, n // 2, n // 2, n // 2))
    return x, np.array([int(rng.integers(1, T + 1))]), y, c


def backbone_eps(backbone, x, t, y):
    with ag.no_grad():
        return unet_forward(backbone, TINY, x, time_embedding(backbone, t, T, TINY.temb_dim), y)[0].data


def controlled(backbone, branch, x, t, y, c):
    with ag.no_grad():
        return controlled_forward(backbone, branch, x, t, y, c, T).data


def perturb_zero_convs(branch, rng, scale=0.1):
    for name in branch.zero_conv_names():
        branch.phi.set_value(name, scale * rng.standard_normal(branch.phi[name].shape))


def test_init_zero_convs_and_encoder_copy():
    backbone, branch = make_branch(inject_middle=True)
    for name in branch.zero_conv_names():
        assert not np.any(branch.phi[name])
    for name in encoder_param_names(TINY, backbone, include_mid=True):
        assert branch.phi[name].tobytes() == backbone[name].tobytes()
        assert branch.phi[name] is not backbone[name]
    assert all(e.trainable for e in branch.phi.entries.values())
    assert not any(e.trainable for e in backbone.entries.values())
    assert branch.backbone_checksum == backbone.checksum()


def test_mutating_copy_leaves_backbone_untouched():
    backbone, branch = make_branch()
    before = backbone.checksum()
    name = encoder_param_names(TINY, backbone)[0]
    branch.phi.set_value(name, branch.phi[name] + 1.0)
    branch.phi[name][...] = 7.0
    assert backbone.checksum() == before


def test_incompatible_backbone_rejected():
    backbone = init_unet(UNetConfig(base_channels=8, levels=2, temb_dim=8, groups=2))
    with pytest.raises(CompatibilityError):
        init_from_backbone(backbone, TINY)
    with pytest.raises(CompatibilityError):
        init_from_backbone(init_unet(TINY), UNetConfig(base_channels=4, levels=3, temb_dim=8, groups=2))


def test_embed_prior_shapes_and_linearity():
    _, branch = make_branch()
    out = embed_prior(branch, np.zeros((1, 1, 8, 8, 8)))
    assert out.shape == (1, 4, 16, 16, 16)
    assert not np.any(out.data)
    with pytest.raises(ShapeError):
        embed_prior(branch, np.zeros((1, 2, 8, 8, 8)))
    backbone, branch = make_branch()
    rng = np.random.default_rng(0)
    x, t, y, _ = random_inputs(rng)
    with pytest.raises(ShapeError):
        controlled_forward(backbone, branch, x, t, y, np.zeros((1, 1, 8, 8, 8)), T)


def test_embed_prior_gradient_matches_finite_differences():
    _, branch = make_branch()
    c = np.random.default_rng(5).standard_normal((1, 1, 2, 2, 2))
    r = np.random.default_rng(6).standard_normal((1, 4, 4, 4, 4))

    def loss():
        return ag.total(ag.mul(embed_prior(branch, c), ag.const(r)))

    branch.phi.zero_grad()
    ag.backward(loss())
    w = branch.phi.entries["embed.w"]
    analytic = w.grad.copy()

    def f(arrs):
        branch.phi.set_value("embed.w", arrs[0])
        with ag.no_grad():
            return float(loss().data)

    numeric = numeric_grad(f, [w.value.copy()], 0)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("inject_middle", [False, True])
def test_identity_at_init_is_exact(inject_middle):
    backbone, branch = make_branch(inject_middle=inject_middle)
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, t, y, c = random_inputs(rng)
        assert np.array_equal(controlled(backbone, branch, x, t, y, c), backbone_eps(backbone, x, t, y))
    assert identity_self_test(backbone, branch, T, 8, trials=3) == 0.0


def test_identity_holds_after_branch_encoder_changes():
    """Only the zero convs gate the branch: arbitrary encoder weights keep identity."""
    backbone, branch = make_branch()
    rng = np.random.default_rng(2)
    for name in encoder_param_names(TINY, backbone) + ["embed.w"]:
        branch.phi.set_value(name, rng.standard_normal(branch.phi[name].shape))
    x, t, y, c = random_inputs(rng)
    assert np.array_equal(controlled(backbone, branch, x, t, y, c), backbone_eps(backbone, x, t, y))


@pytest.mark.parametrize("name", ["zero0.w", "zero1.w", "zero0.b", "zero1.b", "zero_mid.w"])
def test_any_zero_conv_update_changes_output(name):
    backbone, branch = make_branch(inject_middle=True)
    rng = np.random.default_rng(3)
    x, t, y, c = random_inputs(rng)
    base = controlled(backbone, branch, x, t, y, c)
    for scale in (1e-6, 1e-3, 1.0):
        branch.phi.set_value(name, scale * rng.standard_normal(branch.phi[name].shape))
        assert not np.array_equal(controlled(backbone, branch, x, t, y, c), base)


def test_prior_sensitivity_after_perturbation():
    backbone, branch = make_branch()
    rng = np.random.default_rng(4)
    perturb_zero_convs(branch, rng)
    x, t, y, c = random_inputs(rng)
    with_prior = controlled(backbone, branch, x, t, y, c)
    assert not np.allclose(with_prior, controlled(backbone, branch, x, t, y, np.zeros_like(c)))


def test_residual_locality_restores_backbone_bitwise():
    backbone, branch = make_branch()
    rng = np.random.default_rng(5)
    perturb_zero_convs(branch, rng)
    branch.reset_zero_convs()
    x, t, y, c = random_inputs(rng)
    assert np.array_equal(controlled(backbone, branch, x, t, y, c), backbone_eps(backbone, x, t, y))


def test_gradient_reaches_zero_convs_but_not_backbone():
    backbone, branch = make_branch()
    rng = np.random.default_rng(6)
    x0, _, y, c = random_inputs(rng)
    pred = ControlledPredictor(backbone, branch, T)
    training_loss(pred, x0, y, c, np.array([5]), rng.standard_normal(x0.shape), desk_schedule(T))
    assert np.any(branch.phi.entries["zero0.w"].grad)
    assert all(e.grad is None for e in backbone.entries.values())
    adam_step(branch.phi, lr=1e-3)
    assert np.any(branch.phi["zero0.w"])
    # the stem gate sees gradient only once the level gates are nonzero
    assert not np.any(branch.phi["zero_in.w"])
    training_loss(pred, x0, y, c, np.array([5]), rng.standard_normal(x0.shape), desk_schedule(T))
    adam_step(branch.phi, lr=1e-3)
    assert np.any(branch.phi["zero_in.w"])


def test_branch_offsets_shapes():
    backbone, branch = make_branch(inject_middle=True)
    x, t, y, c = random_inputs(np.random.default_rng(7))
    offsets, mid = branch_offsets(branch, x, t, y, c, T)
    assert [o.shape for o in offsets] == [(1, 4, 8, 8, 8), (1, 8, 4, 4, 4)]
    assert mid.shape == (1, 8, 4, 4, 4)
    with pytest.raises(ParameterError):
        ControlledPredictor(backbone, branch, T)(x, t, y)


def tiny_dataset(n=2, dims=(8, 8, 8)):
    clean, low = [], []
    for s in range(n):
        vol = generate_phantom(random_phantom_spec(dims, s, blur_sigma=1.0))
        clean.append(vol)
        low.append(simulate_low_dose(vol, 0.05, 200, s))
    return PatchDataset(clean, low, 8, SubbandSelector("LLL"))


def test_training_keeps_backbone_and_learns():
    backbone, branch = make_branch()
    before = backbone.checksum()
    hyper = TrainHyper(steps=40, batch_size=2, lr=1e-3, seed=0, log_every=0)
    losses = train_controlnet(backbone, branch, tiny_dataset(), desk_schedule(T), hyper, check_every=5)
    assert len(losses) == 40 and backbone.checksum() == before
    assert any(np.any(branch.phi[n]) for n in branch.zero_conv_names())


def test_zero_step_training_keeps_identity():
    backbone, branch = make_branch()
    train_controlnet(backbone, branch, tiny_dataset(), desk_schedule(T), TrainHyper(steps=0, log_every=0))
    assert identity_self_test(backbone, branch, T, 8, trials=2) == 0.0


def test_backbone_mutation_is_detected():
    backbone, branch = make_branch()
    backbone.set_value("out.b", backbone["out.b"] + 1e-12)
    with pytest.raises(IntegrityError):
        train_controlnet(backbone, branch, tiny_dataset(), desk_schedule(T), TrainHyper(steps=1, log_every=0))


def test_unfrozen_backbone_is_rejected():
    backbone, branch = make_branch()
    backbone.entries["out.b"].trainable = True
    with pytest.raises(IntegrityError):
        train_controlnet(backbone, branch, tiny_dataset(), desk_schedule(T), TrainHyper(steps=1, log_every=0))


def test_branch_checkpoint_round_trip(tmp_path):
    backbone, branch = make_branch(inject_middle=True)
    perturb_zero_convs(branch, np.random.default_rng(8))
    path = tmp_path / "branch.vxc"
    save_branch(branch, desk_schedule(T), path)
    loaded, ckpt = load_branch(path, backbone)
    assert ckpt.kind == "branch" and loaded.inject_middle
    assert loaded.phi.checksum() == branch.phi.checksum()
    x, t, y, c = random_inputs(np.random.default_rng(9))
    assert np.array_equal(controlled(backbone, loaded, x, t, y, c), controlled(backbone, branch, x, t, y, c))
    other = init_unet(TINY, seed=1)
    with pytest.raises(IntegrityError):
        load_branch(path, other)
