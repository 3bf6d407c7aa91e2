import math

import numpy as np
import pytest
import torch

from diva.core import (
    AdversarialDecoder, DivA, InputShapeError, ModelConfig, NonFiniteInputError, adversarial_decode, slot_softmax,
)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return DivA().eval()


@pytest.fixture(scope="module")
def adversary():
    torch.manual_seed(1)
    return AdversarialDecoder().eval()


def _rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("size", [(128, 128), (128, 224)])
def test_encode_features_keeps_resolution(model, size):
    with torch.no_grad():
        feats = model.encode_features(_rand(1, 3, *size))
    assert feats.shape == (1, *size, 48)
    assert torch.isfinite(feats).all()


def test_zero_weights_give_positional_embedding():
    m = DivA(ModelConfig.tiny())
    with torch.no_grad():
        for conv in m.encoder.convs:
            conv.weight.zero_()
            conv.bias.zero_()
        feats = m.encode_features(torch.zeros(1, 3, 12, 16))
        pos = m.encoder.pos(12, 16).permute(1, 2, 0)
    assert torch.equal(feats[0], pos)


def test_init_slots_degenerate_sigma_returns_mean(model):
    m = DivA(ModelConfig.tiny())
    with torch.no_grad():
        m.attention.log_sigma.fill_(-math.inf)
        slots = m.init_slots(5, 2, torch.Generator().manual_seed(0))
    assert torch.equal(slots, m.attention.mu.detach().expand(2, 5, 8))


def test_init_slots_deterministic(model):
    a = model.init_slots(4, 1, torch.Generator().manual_seed(7))
    b = model.init_slots(4, 1, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)


@pytest.mark.parametrize("n", [1, 4, 6, 8])
def test_init_slots_any_count(model, n):
    slots = model.init_slots(n, 1, torch.Generator().manual_seed(0))
    assert slots.shape == (1, n, 48) and torch.isfinite(slots).all()


def test_init_slots_rejects_zero(model):
    with pytest.raises(ValueError):
        model.init_slots(0)


def test_single_slot_attention_is_uniform_mean():
    torch.manual_seed(3)
    m = DivA(ModelConfig.tiny()).double()
    feats = m.encode_features(_rand(1, 3, 8, 8).double())
    slots = m.init_slots(1, 1, torch.Generator().manual_seed(0)).double()
    with torch.no_grad():
        new, attn = m.attention_step(slots, feats, return_attn=True)
        assert torch.equal(attn, torch.ones_like(attn))
        keys, values = m.attention.keys_values(feats)
        att = m.attention
        expected = att.gru(values.mean(1), slots[0])
        expected = expected + att.mlp(att.norm_mlp(expected))
    torch.testing.assert_close(new[0], expected, rtol=1e-12, atol=1e-12)


def test_attention_normalized_over_slots(model):
    with torch.no_grad():
        feats = model.encode_features(_rand(1, 3, 128, 128))
        slots = model.init_slots(4, 1, torch.Generator().manual_seed(0))
        new, attn = model.attention_step(slots, feats, return_attn=True)
    assert new.shape == (1, 4, 48)
    assert (attn.sum(1) - 1).abs().max() <= 1e-6


def test_attention_step_permutation_equivariant(model):
    with torch.no_grad():
        feats = model.encode_features(_rand(2, 3, 32, 32))
        slots = model.init_slots(5, 2, torch.Generator().manual_seed(0))
        perm = torch.tensor([3, 0, 4, 1, 2])
        a = model.attention_step(slots, feats)
        b = model.attention_step(slots[:, perm], feats)
    assert torch.equal(a[:, perm], b)


def test_bind_default_is_three_steps(model):
    flow = _rand(1, 3, 32, 32)
    with torch.no_grad():
        bound = model.bind(flow, 4, generator=torch.Generator().manual_seed(5))
        feats = model.encode_features(flow)
        s = model.init_slots(4, 1, torch.Generator().manual_seed(5))
        for _ in range(3):
            s = model.attention_step(s, feats)
    assert torch.equal(bound, s)


def test_bind_single_iteration_from_supplied_slots(model):
    flow = _rand(1, 3, 32, 32)
    init = model.init_slots(2, 1, torch.Generator().manual_seed(1))
    with torch.no_grad():
        before = model.iteration_count
        bound = model.bind(flow, iters=1, init=init)
        assert model.iteration_count - before == 1
        expected = model.attention_step(init, model.encode_features(flow))
    assert torch.equal(bound, expected)


def test_bind_deterministic(model):
    flow = _rand(1, 3, 32, 32)
    with torch.no_grad():
        a = model.bind(flow, 3, generator=torch.Generator().manual_seed(2))
        b = model.bind(flow, 3, generator=torch.Generator().manual_seed(2))
    assert torch.equal(a, b)


def test_implicit_bind_matches_forward_values_and_blocks_early_gradients():
    torch.manual_seed(0)
    m = DivA(ModelConfig.tiny()).double()
    flow = _rand(1, 3, 8, 8).double()
    full = m.bind(flow, 2, generator=torch.Generator().manual_seed(0))
    imp = m.bind(flow, 2, generator=torch.Generator().manual_seed(0), implicit=True)
    torch.testing.assert_close(full, imp, rtol=0, atol=1e-12)
    imp.sum().backward()
    # the initial-slot parameters only act before the barrier
    assert m.attention.mu.grad is None and m.attention.log_sigma.grad is None
    assert m.attention.to_q.weight.grad is not None


def test_condition_pyramid_shapes(model):
    with torch.no_grad():
        pyr = model.encode_condition(_rand(1, 3, 128, 128))
    assert len(pyr) == 5
    assert all(p.shape == (1, 24, 128, 128) for p in pyr)


def test_zero_image_zero_bias_gives_zero_pyramid():
    m = DivA()
    with torch.no_grad():
        for conv in m.condition.convs:
            conv.bias.zero_()
        pyr = m.encode_condition(torch.zeros(1, 3, 32, 32))
    assert all(torch.count_nonzero(p) == 0 for p in pyr)


def test_condition_receptive_field(model):
    img = _rand(1, 3, 40, 40)
    other = img.clone()
    py, px = 17, 23
    other[0, :, py, px] += 0.5
    with torch.no_grad():
        a = model.encode_condition(img)
        b = model.encode_condition(other)
    # level j (1-based) has radius 2 + (j - 1) from kernel sizes 5,3,3,3,3
    for j, (la, lb) in enumerate(zip(a, b), start=1):
        radius = 2 + (j - 1)
        differs = (la != lb).any(1)[0]
        ys, xs = torch.nonzero(differs, as_tuple=True)
        assert len(ys) > 0
        assert (ys - py).abs().max() <= radius and (xs - px).abs().max() <= radius


def test_decode_slot_shapes_and_purity(model):
    image = _rand(1, 3, 128, 128)
    slots = model.init_slots(2, 1, torch.Generator().manual_seed(0))
    with torch.no_grad():
        pyr = model.encode_condition(image)
        f1, l1 = model.decode_slot(slots[:, :1], pyr)
        f2, l2 = model.decode_slot(slots[:, :1], pyr)
        g, _ = model.decode_slot(slots[:, 1:], pyr)
    assert f1.shape == (1, 1, 3, 128, 128) and l1.shape == (1, 1, 1, 128, 128)
    assert torch.equal(f1, f2) and torch.equal(l1, l2)
    assert not torch.equal(f1, g)


def test_compose_single_slot():
    flows = _rand(1, 1, 3, 4, 4)
    masks, recon = DivA.compose(flows, torch.randn(1, 1, 1, 4, 4))
    assert torch.equal(masks, torch.ones(1, 1, 4, 4))
    assert torch.equal(recon, flows[:, 0])


def test_compose_equal_logits_uniform():
    masks, _ = DivA.compose(_rand(2, 5, 3, 4, 4), torch.zeros(2, 5, 1, 4, 4))
    torch.testing.assert_close(masks, torch.full_like(masks, 0.2), rtol=0, atol=1e-7)


def test_compose_saturated_logits():
    flows = _rand(1, 2, 3, 2, 2).double()
    logits = torch.zeros(1, 2, 1, 2, 2, dtype=torch.float64)
    logits[0, 0, 0, 0, 0], logits[0, 1, 0, 0, 0] = 50.0, -50.0
    masks, recon = DivA.compose(flows, logits)
    # m1 = 1 / (1 + e^-100)
    assert abs(masks[0, 0, 0, 0] - 1.0) <= 1e-6
    assert (recon[0, :, 0, 0] - flows[0, 0, :, 0, 0]).abs().max() <= 1e-6


def test_compose_rejects_empty():
    with pytest.raises(ValueError):
        DivA.compose(torch.zeros(1, 0, 3, 2, 2), torch.zeros(1, 0, 1, 2, 2))


def test_slot_softmax_matches_torch():
    x = torch.randn(3, 6, 5, dtype=torch.float64)
    torch.testing.assert_close(slot_softmax(x, 1), torch.softmax(x, 1))


def test_adversarial_decode(model, adversary):
    image = _rand(1, 3, 64, 64)
    slots = model.init_slots(3, 1, torch.Generator().manual_seed(0))
    with torch.no_grad():
        pyr = model.encode_condition(image)
        a = adversarial_decode(slots, pyr, adversary)
        b = adversarial_decode(slots, pyr, adversary)
    assert a.shape == (1, 3, 3, 64, 64)
    assert torch.equal(a, b)


def test_adversary_parameters_disjoint(model, adversary):
    ids = {id(p) for p in model.parameters()}
    assert not ids & {id(p) for p in adversary.parameters()}
    ptrs = {p.data_ptr() for p in model.parameters()}
    assert not ptrs & {p.data_ptr() for p in adversary.parameters()}


def test_full_forward_permutation_equivariance(model, adversary):
    flow, image = _rand(2, 3, 32, 32, seed=1), _rand(2, 3, 32, 32, seed=2)
    for n in (2, 3, 4, 6):
        init = model.init_slots(n, 2, torch.Generator().manual_seed(n))
        perm = torch.randperm(n, generator=torch.Generator().manual_seed(n))
        with torch.no_grad():
            a = model(flow, image, n, init=init)
            b = model(flow, image, n, init=init[:, perm])
            adv_a = adversary(a.slots, a.pyramid)
            adv_b = adversary(b.slots, b.pyramid)
        assert torch.equal(a.slots[:, perm], b.slots)
        assert torch.equal(a.masks[:, perm], b.masks)
        assert torch.equal(a.slot_flows[:, perm], b.slot_flows)
        assert torch.equal(adv_a[:, perm], adv_b)
        assert torch.equal(a.recon, b.recon)


def test_mask_simplex(model):
    with torch.no_grad():
        out = model(_rand(1, 3, 32, 32), _rand(1, 3, 32, 32, seed=3), 5, generator=torch.Generator().manual_seed(0))
    assert (out.masks.sum(1) - 1).abs().max() <= 1e-5
    assert out.masks.min() >= 0


def test_unconditional_variant_runs():
    m = DivA(ModelConfig(conditional=False))
    with torch.no_grad():
        out = m(_rand(1, 3, 32, 32), _rand(1, 3, 32, 32), 3, generator=torch.Generator().manual_seed(0))
    assert out.pyramid is None and out.recon.shape == (1, 3, 32, 32)


def test_shape_errors(model):
    with pytest.raises(InputShapeError):
        model(_rand(1, 3, 32, 32), _rand(1, 3, 32, 36), 2)
    with pytest.raises(InputShapeError):
        model.encode_features(_rand(1, 2, 32, 32))


def test_nan_input_is_rejected(model):
    flow = _rand(1, 3, 32, 32)
    flow[0, 0, 3, 3] = float("nan")
    with pytest.raises(NonFiniteInputError):
        model(flow, _rand(1, 3, 32, 32), 2)


def test_forward_deterministic(model):
    f, im = _rand(1, 3, 32, 32), _rand(1, 3, 32, 32, seed=4)
    with torch.no_grad():
        a = model(f, im, 4, generator=torch.Generator().manual_seed(0))
        b = model(f, im, 4, generator=torch.Generator().manual_seed(0))
    assert all(torch.equal(x, y) for x, y in zip(a[:5], b[:5]))
