import numpy as np
import pytest

from dynperceiver import tensor as T
from dynperceiver.config import ImageSpec, ModelConfig, StageConfig, get_preset
from dynperceiver.errors import ConfigError, ContractError, NumericalError, ShapeError
from dynperceiver.gradcheck import model_gradcheck, randomize
from dynperceiver.model import X2Z, Z2X, build_model
from dynperceiver.tensor import Tensor

from conftest import random_tiny_config
from oracles import attention_loop, conv2d_loop, gelu, layer_norm_rows, linear_loop, pool_loop


def tiny_stages(channels=(4, 8, 16, 32), heads=(1, 2, 4, 8)):
    return tuple(StageConfig(channels=c, sa_heads=h, widening=4, stride=s)
                 for c, h, s in zip(channels, heads, (1, 1, 2, 2)))


def spec_tiny(**kw):
    stages = tiny_stages()
    args = dict(num_classes=4, stages=stages, latent_tokens=8, image=ImageSpec(1, 16, 16))
    args.update(kw)
    return ModelConfig(**args)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Count written out layer by layer from the architecture description."""
    lin = lambda i, o, bias=True: i * o + (o if bias else 0)  # noqa: E731
    ln = lambda d: 2 * d  # noqa: E731

    def cross(d, kv, rpb):
        return ln(d) + (ln(kv) if kv > 1 else 0) + lin(d, d) + lin(kv, d, False) + lin(kv, d) + lin(d, d) \
            + (49 if rpb else 0)

    def block(d, w):
        return 2 * ln(d) + 3 * lin(d, d) + lin(d, d, False) + lin(d, w * d) + lin(w * d, d)

    C = [s.channels for s in cfg.stages]
    D = [C[0], C[0], C[1], C[2]]  # latent width while each stage runs
    Dout = [C[0], C[1], C[2], C[2]]
    L = [cfg.latent_tokens] + list(cfg.token_schedule)
    total = L[0] * C[0]
    c_in = cfg.image.channels
    for i, s in enumerate(cfg.stages):
        total += 9 * c_in * C[i] + C[i] + s.conv_blocks * (9 * C[i] + C[i] + C[i] * C[i] + C[i])
        total += 9 * c_in + c_in + cross(D[i], c_in, True)
        total += s.sa_blocks * block(D[i], s.widening)
        if i < 3:
            total += lin(L[i], L[i + 1]) + lin(D[i], Dout[i]) + ln(Dout[i])
        total += cross(C[i], Dout[i], False)
        c_in = C[i]
    nc = cfg.num_classes
    in_dims = {1: Dout[2], 2: Dout[3], 3: C[3], 4: C[3] + Dout[3]}
    for k in cfg.exits:
        fkt = any(e < k for e in cfg.exits)
        total += (lin(nc, nc) if fkt else 0) + lin(in_dims[k] + (nc if fkt else 0), nc)
    return total


# -- build ---------------------------------------------------------------------------

def test_resnet_model_1_preset():
    cfg = get_preset("resnet-model-1-style")
    assert [s.sa_blocks for s in cfg.stages] == [3, 3, 9, 3]
    assert [s.widening for s in cfg.stages] == [4] * 4
    assert [s.sa_heads for s in cfg.stages] == [1, 2, 4, 8]
    assert cfg.latent_tokens == 128
    model = build_model(cfg, 0)
    assert model.num_parameters() == expected_parameter_count(cfg)


def test_tiny_parameter_count_closed_form():
    cfg = spec_tiny()
    assert build_model(cfg, 0).num_parameters() == expected_parameter_count(cfg)
    for seed in range(5):
        rc = random_tiny_config(seed)
        assert build_model(rc, 0).num_parameters() == expected_parameter_count(rc)


def test_head_override_builds():
    stages = tiny_stages(heads=(1, 1, 1, 1))
    model = build_model(spec_tiny(stages=stages), 0)
    assert all(b.attn.num_heads == 1 for st in model.cls_stages for b in st.blocks)


def test_init_deterministic_and_seeded():
    a, b, c = build_model(spec_tiny(), 3), build_model(spec_tiny(), 3), build_model(spec_tiny(), 4)
    pa, pb, pc = (dict(m.named_parameters()) for m in (a, b, c))
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    assert not np.array_equal(pa["latent"].data, pc["latent"].data)


@pytest.mark.parametrize("change,field", [
    (dict(latent_tokens=8, token_schedule=(8, 16, 4, 4)), "token_schedule"),
    (dict(stages=tiny_stages(heads=(1, 3, 1, 1))), "stages[2].sa_heads"),
    (dict(stages=tiny_stages(channels=(8, 4, 16, 32))), "stages.channels"),
    (dict(exits=(1, 2, 3)), "exits"),
    (dict(image=ImageSpec(1, 6, 6)), "image"),
    (dict(num_classes=1), "num_classes"),
])
def test_config_invariant_errors_name_field(change, field):
    with pytest.raises(ConfigError) as exc:
        spec_tiny(**change)
    assert exc.value.field.startswith(field)


# -- X2Z -----------------------------------------------------------------------------

def test_x2z_zero_input_passes_latent_through(rng):
    x2z = X2Z(4, 3)
    x2z.initialize(0)
    z = rng.normal(size=(2, 5, 4))
    out = x2z(Tensor(z), Tensor(np.zeros((2, 3, 9, 9))))
    assert np.array_equal(out.data, z)


def test_x2z_7x7_input_skips_pooling(rng):
    x2z = X2Z(4, 3)
    randomize_module(x2z, rng)
    z, x = rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 3, 7, 7))
    tokens = x2z.dwc(Tensor(x)).data.reshape(1, 3, 49).transpose(0, 2, 1)
    direct = x2z.attn(Tensor(z), Tensor(tokens)).data
    assert np.array_equal(x2z(Tensor(z), Tensor(x)).data, direct)


def randomize_module(m, rng, scale=0.5):
    for _, p in m.named_parameters():
        p.data = rng.normal(0.0, scale, size=p.shape)


def cross_oracle(attn, q_src, kv_src, bias=None):
    qn = layer_norm_rows(q_src, attn.norm_q.weight.data, attn.norm_q.bias.data)
    kn = kv_src if attn.norm_kv is None else layer_norm_rows(kv_src, attn.norm_kv.weight.data,
                                                             attn.norm_kv.bias.data)
    q = linear_loop(qn, attn.q.weight.data, attn.q.bias.data)
    k = linear_loop(kn, attn.k.weight.data)
    v = linear_loop(kn, attn.v.weight.data, attn.v.bias.data)
    return q_src + linear_loop(attention_loop(q, k, v, bias), attn.proj.weight.data, attn.proj.bias.data)


def x2z_oracle(x2z, z, x):
    C = x.shape[1]
    dw = conv2d_loop(x, x2z.dwc.weight.data, x2z.dwc.bias.data, 1, 1, C)
    pooled = pool_loop(dw, 7)
    out = np.zeros_like(z)
    for n in range(z.shape[0]):
        tokens = pooled[n].reshape(C, 49).T
        out[n] = cross_oracle(x2z.attn, z[n], tokens, x2z.attn.rpb.table.data[0])
    return out


def test_x2z_composed_loop_oracle(rng):
    x2z = X2Z(6, 3)
    randomize_module(x2z, rng)
    z, x = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 3, 10, 9))
    np.testing.assert_allclose(x2z(Tensor(z), Tensor(x)).data, x2z_oracle(x2z, z, x), atol=1e-10)


# -- Z2X -----------------------------------------------------------------------------

def test_z2x_zero_value_projection_is_residual(rng):
    z2x = Z2X(3, 5)
    randomize_module(z2x, rng)
    z2x.attn.v.weight.data[...] = 0.0
    z2x.attn.v.bias.data[...] = 0.0
    z2x.attn.proj.bias.data[...] = 0.0
    x = rng.normal(size=(2, 3, 4, 4))
    assert np.array_equal(z2x(Tensor(x), Tensor(rng.normal(size=(2, 6, 5)))).data, x)


def test_z2x_single_latent_token(rng):
    z2x = Z2X(3, 5)
    randomize_module(z2x, rng)
    x, z = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 1, 5))
    a = z2x.attn
    zn = layer_norm_rows(z[0], a.norm_kv.weight.data, a.norm_kv.bias.data)
    update = linear_loop(linear_loop(zn, a.v.weight.data, a.v.bias.data), a.proj.weight.data, a.proj.bias.data)
    expected = x + update[0][None, :, None, None]
    np.testing.assert_allclose(z2x(Tensor(x), Tensor(z)).data, expected, atol=1e-12)


def z2x_oracle(z2x, x, z):
    B, C, H, W = x.shape
    out = np.zeros_like(x)
    for n in range(B):
        q = x[n].reshape(C, H * W).T
        out[n] = cross_oracle(z2x.attn, q, z[n]).T.reshape(C, H, W)
    return out


def test_z2x_loop_oracle(rng):
    z2x = Z2X(4, 6)
    randomize_module(z2x, rng)
    x, z = rng.normal(size=(2, 4, 5, 3)), rng.normal(size=(2, 3, 6))
    np.testing.assert_allclose(z2x(Tensor(x), Tensor(z)).data, z2x_oracle(z2x, x, z), atol=1e-10)


def test_z2x_channel_mismatch():
    with pytest.raises(ShapeError):
        Z2X(4, 6)(Tensor(np.zeros((1, 4, 3, 3))), Tensor(np.zeros((1, 2, 5))))


# -- classification stage, FKT, forward ----------------------------------------------

@pytest.fixture
def rmodel(tiny_config):
    model = build_model(tiny_config, 0)
    randomize(model, 7)
    return model


def test_classification_stage_shapes_and_determinism(rmodel, tiny_config, rng):
    image = rng.normal(size=(2, 1, 16, 16))
    out = rmodel(Tensor(image))
    st = out.store.values
    z1 = rmodel.classification_stage(1, st["Z0"], st["X0"])
    assert z1.shape == (2, tiny_config.token_schedule[0], tiny_config.channel_schedule[0])
    assert out.logits[1].shape == (2, tiny_config.num_classes)
    again = rmodel(Tensor(image))
    for k in (1, 2, 3, 4):
        assert np.array_equal(out.logits[k].data, again.logits[k].data)


def block_oracle(block, z):
    h = z.copy()
    for n in range(z.shape[0]):
        a = block.attn
        d = z.shape[-1] // a.num_heads
        zn = layer_norm_rows(z[n], block.norm1.weight.data, block.norm1.bias.data)
        q = linear_loop(zn, a.q.weight.data, a.q.bias.data)
        k = linear_loop(zn, a.k.weight.data)
        v = linear_loop(zn, a.v.weight.data, a.v.bias.data)
        cat = np.concatenate([attention_loop(q[:, i * d:(i + 1) * d], k[:, i * d:(i + 1) * d],
                                             v[:, i * d:(i + 1) * d]) for i in range(a.num_heads)], axis=1)
        h[n] = z[n] + linear_loop(cat, a.proj.weight.data, a.proj.bias.data)
        n2 = layer_norm_rows(h[n], block.norm2.weight.data, block.norm2.bias.data)
        m = block.mlp
        h[n] = h[n] + linear_loop(gelu(linear_loop(n2, m.fc1.weight.data, m.fc1.bias.data)),
                                  m.fc2.weight.data, m.fc2.bias.data)
    return h


def classification_oracle(stage, z, x):
    """Z_i = psi_i(f_att(g_i(Z_{i-1}, X_{i-1}))) evaluated with loop oracles."""
    z = x2z_oracle(stage.x2z, z, x)
    for block in stage.blocks:
        z = block_oracle(block, z)
    if stage.mixer is None:
        return z
    m = stage.mixer
    out = []
    for n in range(z.shape[0]):
        mixed = linear_loop(z[n].T, m.token_down.weight.data, m.token_down.bias.data).T
        mixed = linear_loop(mixed, m.channel_up.weight.data, m.channel_up.bias.data)
        out.append(layer_norm_rows(mixed, stage.mixer_norm.weight.data, stage.mixer_norm.bias.data))
    return np.stack(out)


@pytest.mark.parametrize("i", [1, 2, 3, 4])
def test_classification_stage_matches_monolithic_oracle(rmodel, rng, i):
    out = rmodel(Tensor(rng.normal(size=(1, 1, 16, 16))))
    z_prev, x_prev = out.store.values[f"Z{i - 1}"].data, out.store.values[f"X{i - 1}"].data
    ref = classification_oracle(rmodel.cls_stages[i - 1], z_prev, x_prev)
    np.testing.assert_allclose(out.store.values[f"Z{i}"].data, ref, atol=1e-12, rtol=1e-12)


def test_fkt_zero_weights_ignores_slot(rmodel, rng):
    head = rmodel.heads["2"]
    head.fkt.weight.data[...] = 0.0
    head.fkt.bias.data[...] = 0.0
    w = rmodel.config.channel_schedule[3]
    pooled, prev = rng.normal(size=(3, w)), rng.normal(size=(3, 4))
    aug = rmodel.fkt_augment(2, Tensor(pooled), Tensor(prev)).data
    assert np.array_equal(aug, np.concatenate([pooled, np.zeros((3, 4))], axis=1))
    logits = head(Tensor(pooled), Tensor(prev)).data
    plain = pooled @ head.fc.weight.data[:, :w].T + head.fc.bias.data
    np.testing.assert_allclose(logits, plain, atol=1e-14)


def test_fkt_exit1_pass_through(rmodel, rng):
    pooled = rng.normal(size=(2, 16))
    assert np.array_equal(rmodel.fkt_augment(1, Tensor(pooled), None).data, pooled)


def test_fkt_layout(rmodel, rng, tiny_config):
    nc = tiny_config.num_classes
    widths = {2: tiny_config.channel_schedule[3], 3: tiny_config.stages[3].channels,
              4: tiny_config.stages[3].channels + tiny_config.channel_schedule[3]}
    for k, w in widths.items():
        pooled, prev = rng.normal(size=(2, w)), rng.normal(size=(2, nc))
        aug = rmodel.fkt_augment(k, Tensor(pooled), Tensor(prev)).data
        fkt = rmodel.heads[str(k)].fkt
        assert aug.shape == (2, w + nc)
        assert np.array_equal(aug[:, :w], pooled)
        np.testing.assert_allclose(aug[:, w:], prev @ fkt.weight.data.T + fkt.bias.data, atol=1e-14)


def test_fkt_missing_predecessor(rmodel):
    with pytest.raises(ContractError):
        rmodel.fkt_augment(3, Tensor(np.zeros((1, 32))), None)


def test_zero_image_finite_logits(tiny_model):
    out = tiny_model(Tensor(np.zeros((2, 1, 16, 16))))
    assert sorted(out.logits) == [1, 2, 3, 4]
    assert all(np.all(np.isfinite(v.data)) for v in out.logits.values())


def test_disabled_exit3(tiny_config, rng):
    image = Tensor(rng.normal(size=(2, 1, 16, 16)))
    full = build_model(tiny_config, 0)
    randomize(full, 3)
    part = build_model(tiny_config.replace(exits=(1, 2, 4)), 0)
    shared = dict(full.named_parameters())
    for path, p in part.named_parameters():
        p.data = shared[path].data.copy()
    a, b = full(image), part(image)
    assert 3 not in b.logits
    for k in (1, 2):
        assert np.array_equal(a.logits[k].data, b.logits[k].data)
    # Exit 4's FKT link now reads exit 2, its nearest enabled predecessor.
    head = part.heads["4"]
    pooled = np.concatenate([b.pooled["X4"].data, b.pooled["Z4"].data], axis=1)
    expected = head(Tensor(pooled), b.logits[2]).data
    assert np.array_equal(b.logits[4].data, expected)


def test_forward_equals_stage_by_stage_replay(rmodel, rng):
    image = Tensor(rng.normal(size=(2, 1, 16, 16)))
    out = rmodel(image)
    z = T.expand(rmodel.latent, (2,) + rmodel.latent.shape)
    x = image
    zs, xs = {}, {}
    for i in (1, 2, 3, 4):
        z = rmodel.classification_stage(i, z, x)
        zs[i] = z
        x = rmodel.feature_stage(i, x, z)
        xs[i] = x
    logits1 = rmodel.heads["1"](T.mean(zs[3], axis=1))
    assert np.array_equal(out.logits[1].data, logits1.data)
    np.testing.assert_array_equal(out.store.values["X4"].data, xs[4].data)


def test_dependency_trace(rmodel, rng):
    out = rmodel(Tensor(rng.normal(size=(1, 1, 16, 16))))
    reads = out.store.reads
    for i in (1, 2, 3, 4):
        assert sorted(reads[f"cls{i}"]) == sorted([f"Z{i - 1}", f"X{i - 1}"])
        assert sorted(reads[f"feat{i}"]) == sorted([f"X{i - 1}", f"Z{i}"])


def test_exit1_outside_dependency_cone(tiny_config, rng):
    image = Tensor(rng.normal(size=(3, 1, 16, 16)))
    model = build_model(tiny_config, 0)
    randomize(model, 11)
    before = model(image).logits[1].data.copy()
    r = np.random.default_rng(99)
    for path, p in model.named_parameters():
        if path.startswith(("heads.2", "heads.3", "heads.4", "feature_stages.2", "feature_stages.3",
                            "z2x.2", "z2x.3")):
            p.data = r.normal(size=p.shape)
    assert np.array_equal(model(image).logits[1].data, before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_activation_names_layer(tiny_model):
    tiny_model.feature_stages[0].conv.weight.data[...] = np.inf
    with pytest.raises(NumericalError, match="feature_stage1"):
        tiny_model(Tensor(np.ones((1, 1, 16, 16))))


def test_wrong_image_shape(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model(Tensor(np.zeros((1, 1, 8, 8))))


def test_model_gradcheck_sampled(tiny_config):
    # Full-coverage check lives in the acceptance suite; here a few entries per tensor.
    report = model_gradcheck(tiny_config, seed=0, max_entries=2)
    assert report.max_error < 1e-4
    assert {"latent", "cls_stages.0.x2z.attn.rpb.table", "heads.2.fkt.weight"} <= set(report.errors)
