import numpy as np
import pytest

from beyondct import autodiff as ad
from beyondct import model as md
from beyondct.autodiff import Tensor
from beyondct.errors import ConfigError, ContractError, DimensionError
from beyondct.model import (
    DemographicsRecord,
    ModelConfig,
    assemble_sequence,
    cnn_baseline_forward,
    cnn_stem,
    embed_demographics,
    encode_and_regress,
    forward,
    init_params,
    mae_loss,
    multi_head_attention,
    patchify,
    regression_head,
    transformer_block,
)
from beyondct.volume import NORM255, Volume

TINY16 = ModelConfig(
    input_cube=16, embed_dim=16, blocks=2, heads=4, patch=2,
    stem_channels=(4, 8, 8), head_hidden=(8, 4),
)

DEMO = DemographicsRecord(
    age=63.0, sex=1, height_in=68.0, weight_lb=180.0,
    smoking_status=1, cigs_per_day=20.0, smoke_years=30.0,
)


def norm_cube(n, seed=0, scale=255.0):
    rng = np.random.default_rng(seed)
    return Volume(rng.uniform(0, scale, size=(n, n, n)).astype(np.float32), (1.5,) * 3, NORM255)


# ---------------------------------------------------------------------------
# config and record validation


def test_config_defaults_reproduce_paper_arithmetic():
    cfg = ModelConfig()
    assert cfg.feature_grid == 32
    assert cfg.patch_tokens == 512
    assert cfg.patch_flat_len == 512
    assert cfg.sequence_len == 513
    assert cfg.head_dim == 64


def test_config_validation_lists_every_violation():
    with pytest.raises(ConfigError) as err:
        ModelConfig(input_cube=60, embed_dim=100, heads=8, target="TLC")
    message = str(err.value)
    assert "input_cube" in message
    assert "divisible by heads" in message
    assert "target" in message


def test_config_tiny_preset_is_valid():
    cfg = ModelConfig.tiny()
    assert cfg.input_cube == 64
    assert cfg.feature_grid == 8
    assert cfg.patch_tokens == 8
    assert cfg.patch_flat_len == 512
    assert cfg.embed_dim == 64


def test_demographics_record_validation():
    with pytest.raises(ContractError):
        DemographicsRecord(age=-1, sex=0, height_in=65, weight_lb=150,
                           smoking_status=0, cigs_per_day=0, smoke_years=0)
    with pytest.raises(ContractError):
        DemographicsRecord(age=50, sex=2, height_in=65, weight_lb=150,
                           smoking_status=0, cigs_per_day=0, smoke_years=0)
    vec = DEMO.as_vector()
    np.testing.assert_array_equal(vec, [63.0, 1.0, 68.0, 180.0, 1.0, 20.0, 30.0])


def test_param_names_and_shapes_depend_only_on_config():
    a = init_params(TINY16, seed=1)
    b = init_params(TINY16, seed=2)
    assert list(a) == list(b)
    for name in a:
        assert a[name].shape == b[name].shape
    c = init_params(TINY16, seed=1)
    for name in a:
        np.testing.assert_array_equal(a[name].data, c[name].data)


def test_all_initial_params_finite():
    params = init_params(ModelConfig.tiny(), seed=3)
    for t in params.values():
        assert np.isfinite(t.data).all()


# ---------------------------------------------------------------------------
# stem


def test_stem_paper_shape_256():
    cfg = ModelConfig()
    params = init_params(cfg, seed=4)
    x = Tensor(np.zeros((1, 256, 256, 256), dtype=np.float32))
    out = cnn_stem(x, params)
    assert out.shape == (8, 32, 32, 32)


def test_stem_zero_input_zero_bias_gives_zero():
    cfg = ModelConfig.tiny()
    params = init_params(cfg, seed=5)  # biases start at zero
    out = cnn_stem(Tensor(np.zeros((1, 64, 64, 64), dtype=np.float32)), params)
    np.testing.assert_array_equal(out.data, 0.0)


def test_stem_tiny_shape_64():
    params = init_params(ModelConfig.tiny(), seed=6)
    out = cnn_stem(Tensor(np.zeros((1, 64, 64, 64), dtype=np.float32)), params)
    assert out.shape == (8, 8, 8, 8)


# ---------------------------------------------------------------------------
# patchify


def test_patchify_paper_shape():
    f = Tensor(np.zeros((8, 32, 32, 32), dtype=np.float32))
    out = patchify(f, 4)
    assert out.shape == (512, 512)


def test_patchify_constant_gives_identical_tokens():
    f = Tensor(np.full((8, 8, 8, 8), 2.5, dtype=np.float32))
    out = patchify(f, 4)
    assert out.shape == (8, 512)
    np.testing.assert_array_equal(out.data, np.tile(out.data[0], (8, 1)))


def test_patchify_matches_index_map_oracle():
    rng = np.random.default_rng(60)
    c, m, p = 8, 8, 4
    f = rng.normal(size=(c, m, m, m))
    out = patchify(Tensor(f), p)
    nb = m // p
    for t in range(nb ** 3):
        bz, rem = divmod(t, nb * nb)
        by, bx = divmod(rem, nb)
        for dz in range(p):
            for dy in range(p):
                for dx in range(p):
                    for ch in range(c):
                        j = ((dz * p + dy) * p + dx) * c + ch
                        expected = f[ch, bz * p + dz, by * p + dy, bx * p + dx]
                        assert out.data[t, j] == pytest.approx(expected, rel=1e-6)


def test_patchify_divisibility_error():
    with pytest.raises(DimensionError):
        patchify(Tensor(np.zeros((8, 6, 6, 6))), 4)


# ---------------------------------------------------------------------------
# demographics embedding and sequence assembly


def test_demo_embed_zero_params_zero_token():
    params = {
        "demo_embed.weight": Tensor(np.zeros((7, 16))),
        "demo_embed.bias": Tensor(np.zeros(16)),
    }
    out = embed_demographics(DEMO, params)
    assert out.shape == (1, 16)
    np.testing.assert_array_equal(out.data, 0.0)


def test_demo_embed_row_selector_reproduces_age():
    w = np.zeros((7, 16), dtype=np.float32)
    w[0, 0] = 1.0
    params = {"demo_embed.weight": Tensor(w), "demo_embed.bias": Tensor(np.zeros(16))}
    out = embed_demographics(DEMO, params)
    assert out.data[0, 0] == pytest.approx(63.0)
    np.testing.assert_array_equal(out.data[0, 1:], 0.0)


def test_demo_embed_matches_matmul_oracle():
    rng = np.random.default_rng(61)
    w = rng.normal(size=(7, 12))
    b = rng.normal(size=12)
    params = {
        "demo_embed.weight": Tensor(w, dtype=np.float64),
        "demo_embed.bias": Tensor(b, dtype=np.float64),
    }
    out = embed_demographics(DEMO, params)
    np.testing.assert_allclose(out.data[0], DEMO.as_vector() @ w + b, atol=1e-9)


def test_assemble_sequence_counts_and_identity():
    rng = np.random.default_rng(62)
    patches = Tensor(rng.normal(size=(512, 8)).astype(np.float32))
    demo = Tensor(rng.normal(size=(1, 8)).astype(np.float32))
    pos = Tensor(np.zeros((513, 8), dtype=np.float32))
    seq = assemble_sequence(patches, demo, pos)
    assert seq.shape == (513, 8)
    np.testing.assert_array_equal(seq.data[0], demo.data[0])
    np.testing.assert_array_equal(seq.data[1:], patches.data)


def test_assemble_sequence_positional_mismatch():
    patches = Tensor(np.zeros((8, 4)))
    pos = Tensor(np.zeros((9, 4)))
    with pytest.raises(DimensionError):
        assemble_sequence(patches, None, pos)


# ---------------------------------------------------------------------------
# attention


def mha_oracle(x, wq, wk, wv, wo, heads):
    t, d = x.shape
    dk = d // heads
    out = np.zeros((t, d))
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        q, k, v = x @ wq[:, cols], x @ wk[:, cols], x @ wv[:, cols]
        scores = q @ k.T / np.sqrt(dk)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        out[:, cols] = (e / e.sum(axis=-1, keepdims=True)) @ v
    return out @ wo


def test_attention_single_token_reduces_to_projection():
    rng = np.random.default_rng(63)
    x = rng.normal(size=(1, 4))
    mats = [rng.normal(size=(4, 4)) for _ in range(4)]
    out = multi_head_attention(
        Tensor(x, dtype=np.float64), *[Tensor(m, dtype=np.float64) for m in mats], heads=2
    )
    np.testing.assert_allclose(out.data, x @ mats[2] @ mats[3], atol=1e-12)


def test_attention_zero_query_is_uniform_average():
    rng = np.random.default_rng(64)
    x = rng.normal(size=(5, 6))
    wk, wv, wo = (rng.normal(size=(6, 6)) for _ in range(3))
    out = multi_head_attention(
        Tensor(x, dtype=np.float64),
        Tensor(np.zeros((6, 6)), dtype=np.float64),
        Tensor(wk, dtype=np.float64),
        Tensor(wv, dtype=np.float64),
        Tensor(wo, dtype=np.float64),
        heads=1,
    )
    expected = np.tile((x @ wv).mean(axis=0), (5, 1)) @ wo
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_attention_t2_d2_matches_step_by_step_oracle():
    rng = np.random.default_rng(65)
    x = rng.normal(size=(2, 2))
    mats = [rng.normal(size=(2, 2)) for _ in range(4)]
    out = multi_head_attention(
        Tensor(x, dtype=np.float64), *[Tensor(m, dtype=np.float64) for m in mats], heads=1
    )
    np.testing.assert_allclose(out.data, mha_oracle(x, *mats, heads=1), atol=1e-6)


def test_attention_multihead_matches_oracle():
    rng = np.random.default_rng(66)
    x = rng.normal(size=(7, 8))
    mats = [rng.normal(size=(8, 8)) for _ in range(4)]
    out = multi_head_attention(
        Tensor(x, dtype=np.float64), *[Tensor(m, dtype=np.float64) for m in mats], heads=4
    )
    np.testing.assert_allclose(out.data, mha_oracle(x, *mats, heads=4), atol=1e-9)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(67)
    x = rng.normal(size=(6, 8))
    mats = [rng.normal(size=(8, 8)) for _ in range(4)]
    _, weights = multi_head_attention(
        Tensor(x, dtype=np.float64),
        *[Tensor(m, dtype=np.float64) for m in mats],
        heads=2,
        return_weights=True,
    )
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_dimension_errors():
    x = Tensor(np.zeros((3, 6)))
    w = Tensor(np.zeros((6, 6)))
    with pytest.raises(DimensionError):
        multi_head_attention(x, w, w, w, w, heads=4)  # 6 % 4 != 0


# ---------------------------------------------------------------------------
# transformer block and head


def ln_oracle(x, gain, shift, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + shift


def gelu_oracle(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def test_block_all_zero_weights_is_identity():
    d = 8
    zeros = lambda *shape: Tensor(np.zeros(shape), dtype=np.float64)
    params = {
        "block0.ln1.gain": zeros(d), "block0.ln1.shift": zeros(d),
        "block0.attn.wq": zeros(d, d), "block0.attn.wk": zeros(d, d),
        "block0.attn.wv": zeros(d, d), "block0.attn.wo": zeros(d, d),
        "block0.ln2.gain": zeros(d), "block0.ln2.shift": zeros(d),
        "block0.mlp.w1": zeros(d, 4 * d), "block0.mlp.b1": zeros(4 * d),
        "block0.mlp.w2": zeros(4 * d, d), "block0.mlp.b2": zeros(d),
    }
    rng = np.random.default_rng(68)
    x = rng.normal(size=(5, d))
    out = transformer_block(Tensor(x, dtype=np.float64), params, "block0", heads=2)
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_block_matches_composed_primitive_oracle():
    rng = np.random.default_rng(69)
    d, t = 8, 5
    raw = {
        "ln1.gain": rng.normal(size=d), "ln1.shift": rng.normal(size=d),
        "attn.wq": rng.normal(size=(d, d)), "attn.wk": rng.normal(size=(d, d)),
        "attn.wv": rng.normal(size=(d, d)), "attn.wo": rng.normal(size=(d, d)),
        "ln2.gain": rng.normal(size=d), "ln2.shift": rng.normal(size=d),
        "mlp.w1": rng.normal(size=(d, 4 * d)), "mlp.b1": rng.normal(size=4 * d),
        "mlp.w2": rng.normal(size=(4 * d, d)), "mlp.b2": rng.normal(size=d),
    }
    params = {f"block0.{k}": Tensor(v, dtype=np.float64) for k, v in raw.items()}
    x = rng.normal(size=(t, d))
    out = transformer_block(Tensor(x, dtype=np.float64), params, "block0", heads=2)

    h = x + mha_oracle(
        ln_oracle(x, raw["ln1.gain"], raw["ln1.shift"]),
        raw["attn.wq"], raw["attn.wk"], raw["attn.wv"], raw["attn.wo"], heads=2,
    )
    mlp_in = ln_oracle(h, raw["ln2.gain"], raw["ln2.shift"])
    expected = h + gelu_oracle(mlp_in @ raw["mlp.w1"] + raw["mlp.b1"]) @ raw["mlp.w2"] + raw["mlp.b2"]
    np.testing.assert_allclose(out.data, expected, atol=1e-9)


def head_params(rng, d, h1, h2, dtype=np.float64):
    return {
        "head.w1": Tensor(rng.normal(size=(d, h1)), dtype=dtype),
        "head.b1": Tensor(rng.normal(size=h1), dtype=dtype),
        "head.w2": Tensor(rng.normal(size=(h1, h2)), dtype=dtype),
        "head.b2": Tensor(rng.normal(size=h2), dtype=dtype),
        "head.w3": Tensor(rng.normal(size=(h2, 1)), dtype=dtype),
        "head.b3": Tensor(rng.normal(size=1), dtype=dtype),
    }


def test_head_zero_final_layer_outputs_bias():
    rng = np.random.default_rng(70)
    params = head_params(rng, 6, 4, 3)
    params["head.w3"] = Tensor(np.zeros((3, 1)), dtype=np.float64)
    params["head.b3"] = Tensor(np.array([2.75]), dtype=np.float64)
    out = regression_head(Tensor(rng.normal(size=(9, 6)), dtype=np.float64), params)
    assert out.data.reshape(()) == pytest.approx(2.75)


def test_head_token_permutation_invariance():
    rng = np.random.default_rng(71)
    params = head_params(rng, 6, 4, 3)
    x = rng.normal(size=(9, 6))
    a = regression_head(Tensor(x, dtype=np.float64), params)
    b = regression_head(Tensor(x[rng.permutation(9)], dtype=np.float64), params)
    assert a.data.reshape(()) == pytest.approx(b.data.reshape(()), abs=1e-12)


def test_head_matches_composed_matmul_oracle():
    rng = np.random.default_rng(72)
    params = head_params(rng, 6, 4, 3)
    x = rng.normal(size=(9, 6))
    out = regression_head(Tensor(x, dtype=np.float64), params)
    pooled = x.mean(axis=0, keepdims=True)
    h = np.maximum(pooled @ params["head.w1"].data + params["head.b1"].data, 0)
    h = np.maximum(h @ params["head.w2"].data + params["head.b2"].data, 0)
    expected = h @ params["head.w3"].data + params["head.b3"].data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# full forward


def test_forward_tiny_finite_and_pure():
    params = init_params(TINY16, seed=7)
    vol = norm_cube(16, seed=8)
    a = forward(vol, DEMO, params, TINY16)
    b = forward(vol, DEMO, params, TINY16)
    assert a.shape == (1, 1)
    assert np.isfinite(a.data).all()
    np.testing.assert_array_equal(a.data, b.data)


def test_forward_input_contracts():
    params = init_params(TINY16, seed=9)
    with pytest.raises(ContractError):
        forward(norm_cube(8), DEMO, params, TINY16)  # wrong cube
    hu = Volume(np.zeros((16, 16, 16), dtype=np.float32), (1.5,) * 3, "HU")
    with pytest.raises(ContractError):
        forward(hu, DEMO, params, TINY16)  # not normalized
    with pytest.raises(ContractError):
        forward(norm_cube(16), None, params, TINY16)  # demographics required


def test_forward_without_demographics():
    cfg = ModelConfig(
        input_cube=16, embed_dim=16, blocks=1, heads=4, patch=2,
        head_hidden=(8, 4), use_demographics=False,
    )
    params = init_params(cfg, seed=10)
    assert "demo_embed.weight" not in params
    out = forward(norm_cube(16, seed=11), None, params, cfg)
    assert np.isfinite(out.data).all()


def test_forward_sensitive_to_intensity():
    params = init_params(TINY16, seed=12)
    vol = norm_cube(16, seed=13, scale=100.0)
    doubled = Volume(vol.values * 2.0, vol.spacing_mm, NORM255)
    a = forward(vol, DEMO, params, TINY16).data.reshape(())
    b = forward(doubled, DEMO, params, TINY16).data.reshape(())
    assert a != b


def test_sequence_permutation_invariance_without_positional():
    rng = np.random.default_rng(73)
    cfg = ModelConfig(
        input_cube=16, embed_dim=16, blocks=2, heads=4, patch=2,
        head_hidden=(8, 4), use_demographics=False,
    )
    params = init_params(cfg, seed=14, dtype=np.float64)
    tokens = rng.normal(size=(6, 16))
    base = encode_and_regress(Tensor(tokens, dtype=np.float64), params, cfg).data.reshape(())
    for _ in range(20):
        perm = rng.permutation(6)
        out = encode_and_regress(Tensor(tokens[perm], dtype=np.float64), params, cfg)
        assert out.data.reshape(()) == pytest.approx(base, abs=1e-9)


# ---------------------------------------------------------------------------
# loss


def test_mae_loss_examples():
    assert mae_loss(Tensor([[2.0]]), 2.0).item() == 0.0
    assert mae_loss(Tensor([[2.0]]), 3.36).item() == pytest.approx(1.36, abs=1e-6)
    batch = Tensor([[2.0], [5.0]])
    assert mae_loss(batch, np.array([3.0, 4.0])).item() == pytest.approx(1.0)


def test_mae_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        mae_loss(Tensor([[1.0], [2.0]]), Tensor([[1.0]]))


# ---------------------------------------------------------------------------
# CNN baseline


def test_cnn_baseline_zero_head_outputs_bias():
    cfg = ModelConfig.tiny(arch="cnn")
    params = init_params(cfg, seed=15)
    params["head.w3"] = Tensor(np.zeros((32, 1), dtype=np.float32), requires_grad=True)
    params["head.b3"] = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
    out = cnn_baseline_forward(norm_cube(64, seed=16), params, cfg)
    assert out.data.reshape(()) == pytest.approx(1.5)


def test_cnn_baseline_shape_cube_64():
    cfg = ModelConfig.tiny(arch="cnn")
    params = init_params(cfg, seed=17)
    assert "patch_embed.weight" not in params
    assert params["head.w1"].shape == (8, 64)
    out = cnn_baseline_forward(norm_cube(64, seed=18), params, cfg)
    assert out.shape == (1, 1)
    assert np.isfinite(out.data).all()


# ---------------------------------------------------------------------------
# gradients


def test_full_model_gradient_check():
    cfg = TINY16
    params = init_params(cfg, seed=19, dtype=np.float64)
    vol = norm_cube(16, seed=20)
    target = 3.2

    def f(p):
        return mae_loss(forward(vol, DEMO, p, cfg), target)

    report = ad.finite_diff_check(f, params, max_elements_per_param=3, seed=21)
    assert report.max_rel_err < 1e-4, report.summary()


def test_cnn_baseline_gradient_check():
    cfg = ModelConfig(
        input_cube=16, embed_dim=16, heads=4, patch=2, head_hidden=(8, 4), arch="cnn",
    )
    params = init_params(cfg, seed=22, dtype=np.float64)
    vol = norm_cube(16, seed=23)

    def f(p):
        return mae_loss(cnn_baseline_forward(vol, p, cfg), 2.8)

    report = ad.finite_diff_check(f, params, max_elements_per_param=4, seed=24)
    assert report.max_rel_err < 1e-4, report.summary()
