"""Adapter construction, factorised math, merging, trainability partition."""

import copy

import numpy as np
import pytest

from soekit import tensor as T
from soekit.lora import LoraAdapter, LoraConfig, adapted_matmul, attach, merge
from soekit.nets import ConditionEmbedder, MiniUnet, ModelConfig
from soekit.optim import Adam
from soekit.rng import stream_rng
from soekit.tensor import Tensor, backward

CFG = ModelConfig(image_side=32, base_width=16, cond_dim=16, time_dim=16, groups=4)


def fresh_setup(seed=0, blocks=("mid", "down1_up1", "down0_up3"), rank=4):
    unet = MiniUnet(CFG, seed=seed)
    base_copy = copy.deepcopy(unet)
    adapters = attach(unet, LoraConfig(rank=rank, blocks=blocks), seed=seed)
    emb = ConditionEmbedder(CFG, seed=seed)
    return unet, base_copy, adapters, emb


def unet_inputs(seed=0):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    m = np.zeros((2, 1, 32, 32), np.float32)
    m[:, :, 10:20, 10:20] = 1.0
    return z, Tensor(m)


def test_adapter_b_zero_after_construction():
    _, _, adapters, _ = fresh_setup()
    for ad in adapters.adapters.values():
        assert not ad.b.data.any()
        assert ad.a.data.any()


def test_same_seed_gives_bit_identical_a_matrices():
    _, _, a1, _ = fresh_setup(seed=42)
    _, _, a2, _ = fresh_setup(seed=42)
    for k in a1.adapters:
        assert a1.adapters[k].a.data.tobytes() == a2.adapters[k].a.data.tobytes()


def test_empty_or_unknown_block_selection_rejected():
    unet = MiniUnet(CFG, seed=0)
    with pytest.raises(ValueError, match="no blocks"):
        attach(unet, LoraConfig(blocks=()), seed=0)
    with pytest.raises(ValueError, match="unknown"):
        attach(unet, LoraConfig(blocks=("down7_up9",)), seed=0)
    # down2_up2 needs a third level; the default depth-2 net lacks it
    with pytest.raises(ValueError, match="unknown"):
        attach(unet, LoraConfig(blocks=("down2_up2",)), seed=0)


def test_rank_must_be_below_min_dim():
    rng = stream_rng(0, "lora")
    with pytest.raises(ValueError, match="rank"):
        LoraAdapter("t", j=4, k=16, rank=4, alpha=1.0, init_std=0.01, rng=rng)


def test_adapter_param_count_formula_and_budget():
    unet = MiniUnet(ModelConfig(), seed=1)
    base_params = sum(p.size for p in unet.params().values())
    adapters = attach(unet, LoraConfig(rank=4), seed=1)
    expected = 0
    for ad in adapters.adapters.values():
        j, r = ad.b.shape
        _, k = ad.a.shape
        expected += r * (j + k)
    assert adapters.param_count() == expected
    assert adapters.param_count() < 0.10 * base_params


def test_trainability_flags_after_attach():
    unet, _, adapters, _ = fresh_setup()
    assert all(not p.requires_grad for p in unet.params().values())
    assert all(p.requires_grad for p in adapters.params().values())


def test_adapted_matmul_zero_init_is_exact():
    rng = stream_rng(1, "lora")
    ad = LoraAdapter("t", j=8, k=6, rank=2, alpha=1.0, init_std=0.01, rng=rng)
    x = Tensor(np.random.default_rng(0).standard_normal((3, 8)).astype(np.float32))
    w0 = Tensor(np.random.default_rng(1).standard_normal((8, 6)).astype(np.float32))
    out = adapted_matmul(x, w0, ad)
    assert np.array_equal(out.data, (x.data @ w0.data))


def test_adapted_matmul_matches_dense_materialisation():
    rng = stream_rng(2, "lora")
    ad = LoraAdapter("t", j=8, k=6, rank=2, alpha=0.7, init_std=0.01, rng=rng)
    gen = np.random.default_rng(3)
    ad.b.data = gen.standard_normal(ad.b.shape).astype(np.float32)
    ad.a.data = gen.standard_normal(ad.a.shape).astype(np.float32)
    x = Tensor(gen.standard_normal((5, 8)).astype(np.float32))
    w0 = Tensor(gen.standard_normal((8, 6)).astype(np.float32))
    dense = x.data @ (w0.data + 0.7 * (ad.b.data @ ad.a.data))
    assert np.abs(adapted_matmul(x, w0, ad).data - dense).max() < 1e-5


def test_adapted_matmul_alpha_zero_is_base():
    rng = stream_rng(4, "lora")
    ad = LoraAdapter("t", j=8, k=6, rank=2, alpha=0.0, init_std=0.01, rng=rng)
    gen = np.random.default_rng(5)
    ad.b.data = gen.standard_normal(ad.b.shape).astype(np.float32)
    x = Tensor(gen.standard_normal((3, 8)).astype(np.float32))
    w0 = Tensor(gen.standard_normal((8, 6)).astype(np.float32))
    assert np.array_equal(adapted_matmul(x, w0, ad).data, x.data @ w0.data)


def test_zero_init_student_output_bit_identical_to_base():
    unet, base_copy, _, emb = fresh_setup(seed=9)
    z, m = unet_inputs()
    cond = emb.embed([0, 1], [2, 3], "color_label")
    student = unet.forward(z, [7, 300], cond, m)
    base = base_copy.forward(z, [7, 300], cond, m)
    assert student.data.tobytes() == base.data.tobytes()


def test_merge_of_fresh_adapters_is_bit_identical_to_base():
    unet, _, adapters, _ = fresh_setup(seed=12)
    merged = merge(unet, adapters)
    for name, p in unet.params().items():
        assert merged.params()[name].data.tobytes() == p.data.tobytes()


def test_merged_and_factorized_forward_agree():
    unet, _, adapters, emb = fresh_setup(seed=15)
    gen = np.random.default_rng(7)
    for ad in adapters.adapters.values():
        ad.b.data = (gen.standard_normal(ad.b.shape) * 0.05).astype(np.float32)
        ad.a.data = (gen.standard_normal(ad.a.shape) * 0.05).astype(np.float32)
    merged = merge(unet, adapters)
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        z = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        m = np.zeros((1, 1, 32, 32), np.float32)
        m[:, :, 6:14, 6:14] = 1.0
        cond = emb.embed([trial % 5], [trial % 8], "color_label")
        t = 1 + (trial * 97) % 999
        a = unet.forward(z, t, cond, Tensor(m)).data
        b = merged.forward(z, t, cond, Tensor(m)).data
        assert np.abs(a - b).max() < 1e-5
        assert np.argmax(a) == np.argmax(b)


def test_double_merge_rejected():
    unet, _, adapters, _ = fresh_setup(seed=18)
    merged = merge(unet, adapters)
    with pytest.raises(ValueError, match="mismatch"):
        merge(merged, adapters)  # adapters belong to `unet`, not the merged copy
    adapters.base = merged
    with pytest.raises(ValueError, match="second merge"):
        merge(merged, adapters)


def test_merge_on_foreign_base_rejected():
    unet, _, adapters, _ = fresh_setup(seed=21)
    other = MiniUnet(CFG, seed=99)
    with pytest.raises(ValueError, match="mismatch"):
        merge(other, adapters)


def test_training_step_moves_adapters_but_not_base():
    unet, _, adapters, emb = fresh_setup(seed=24)
    emb.set_trainable(False)
    base_bytes = {k: p.data.tobytes() for k, p in unet.params().items()}
    z, m = unet_inputs()
    opt = Adam(adapters.params(), lr=1e-2)
    before = {k: p.data.copy() for k, p in adapters.params().items()}
    cond = emb.embed([0, 1], [2, 3], "color_label")
    target = Tensor(np.random.default_rng(1).standard_normal(z.shape).astype(np.float32))
    loss = T.huber(unet.forward(z, [50, 200], cond, m), target)
    backward(loss)
    opt.step()
    assert all(unet.params()[k].data.tobytes() == v for k, v in base_bytes.items())
    changed = sum(int(not np.array_equal(before[k], p.data)) for k, p in adapters.params().items())
    assert changed >= 1
