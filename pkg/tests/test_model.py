import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from takunet import ArchConfig, TakuNet, build_model
from takunet.analysis import count_flops, count_params
from takunet.model import downsampler_groups
from takunet.tensor import Precision
from oracles import max_rel_err

MINI = dict(stem_channels=4, stage_depths=(1, 1, 1, 1), stage_out_channels=(4, 8, 8, 8))


@pytest.fixture(scope="module")
def default_model():
    return build_model(ArchConfig())


def test_default_shape_chain(default_model):
    rows = {r.name: r for r in default_model.trace((1, 3, 240, 240))}
    assert rows["stem.conv"].out_shape == (1, 40, 120, 120)
    assert rows["stem.dw"].out_shape == (1, 40, 60, 60)
    assert rows["stem.skip_pool"].out_shape == (1, 40, 60, 60)
    expect = {1: (80, 30), 2: (120, 15), 3: (240, 7), 4: (240, 3)}
    for s, (c, hw) in expect.items():
        assert rows[f"downsampler{s}.pool"].out_shape == (1, c, hw, hw)
    assert rows["refiner.pool"].out_shape == (1, 240, 1, 1)
    assert rows["classifier"].out_shape == (1, 5)


def test_default_forward_zero_input(default_model):
    out = default_model.forward(np.zeros((2, 3, 240, 240), np.float32))
    assert out.shape == (2, 5) and np.all(np.isfinite(out))


def test_forward_rejects_bad_shape(default_model):
    with pytest.raises(ValueError):
        default_model.forward(np.zeros((1, 3, 224, 224), np.float32))
    with pytest.raises(ValueError):
        default_model.forward(np.zeros((1, 1, 240, 240), np.float32))


def test_toggles_off_layer_kinds():
    cfg = ArchConfig(dense_connections=False, grn=False, channel_shuffle=False, refiner=False)
    kinds = {r.kind for r in build_model(cfg).trace((1, 3, 240, 240))}
    names = [r.name for r in build_model(cfg).trace((1, 3, 240, 240))]
    assert not kinds & {"grn", "shuffle", "concat"}
    assert not any(n.startswith("refiner") for n in names)
    on = {r.kind for r in build_model(ArchConfig()).trace((1, 3, 240, 240))}
    assert {"grn", "shuffle", "concat"} <= on


def test_class_count_delta_is_classifier_only():
    a = count_params(build_model(ArchConfig())).total
    b = count_params(build_model(ArchConfig(input_size=(224, 224), num_classes=4))).total
    assert a - b == 240 + 1 == 241


@given(st.sampled_from([(4, 8, 8, 8), (8, 8, 16, 16), (4, 4, 8, 12)]), st.integers(2, 9))
@settings(max_examples=15)
def test_class_delta_property(widths, k):
    cfg = ArchConfig(input_size=(64, 64), stem_channels=4, stage_depths=(1, 1, 1, 1), stage_out_channels=widths)
    hi = count_params(TakuNet(cfg.replace(num_classes=k))).total
    lo = count_params(TakuNet(cfg.replace(num_classes=k - 1))).total
    assert hi - lo == widths[-1] + 1


def test_eval_forward_bit_identical(default_model, rng):
    x = rng.standard_normal((2, 3, 240, 240)).astype(np.float32)
    assert np.array_equal(default_model.forward(x), default_model.forward(x))


def test_train_forward_updates_running_stats(rng):
    m = TakuNet(ArchConfig(input_size=(64, 64), **MINI))
    before = m.named_buffers()["stem.bn1.running_mean"].copy()
    m.forward(rng.standard_normal((2, 3, 64, 64)), train=True)
    assert not np.array_equal(before, m.named_buffers()["stem.bn1.running_mean"])


def test_f16_model_parity(default_model, rng):
    lo = default_model.copy(Precision.F16)
    x = rng.standard_normal((4, 3, 240, 240)).astype(np.float32)
    a = default_model.forward(x)
    b = lo.forward(x.astype(np.float16))
    assert b.dtype == np.float16
    assert np.abs(a - b.astype(np.float32)).max() <= 1e-2


def test_backward_zero_grad(rng):
    m = TakuNet(ArchConfig(input_size=(64, 64), **MINI))
    m.forward(rng.standard_normal((2, 3, 64, 64)), train=True)
    grads = m.backward(np.zeros((2, 5)))
    assert set(grads) == set(m.named_parameters())
    assert all(not g.any() for g in grads.values())


def test_backward_without_forward_errors():
    m = TakuNet(ArchConfig(input_size=(64, 64), **MINI))
    with pytest.raises(RuntimeError):
        m.backward(np.zeros((1, 5)))


def test_miniature_at_32_collapses():
    # 32 -> 16 -> 8 in the stem, then pools reach 1 at stage 3 and 0 at stage 4.
    with pytest.raises(ValueError):
        TakuNet(ArchConfig(input_size=(32, 32), **MINI))


@pytest.mark.parametrize("dense", [True, False])
def test_full_graph_finite_differences(dense):
    cfg = ArchConfig(input_size=(64, 64), precision="f64", dense_connections=dense, **MINI)
    m = TakuNet(cfg, seed=3)
    r = np.random.default_rng(11)
    # Non-zero GRN and BN affine so every path carries signal.
    for name, p in m.named_parameters().items():
        if ".grn." in name or name.endswith("beta"):
            p[...] = r.uniform(-0.5, 0.5, p.shape)
    x = r.standard_normal((3, 3, 64, 64))
    R = r.standard_normal((3, 5))
    m.forward(x, train=True)
    grads = m.backward(R)
    h = 1e-6
    analytic, numeric = [], []
    for name, p in m.named_parameters().items():
        num = np.zeros_like(p)
        flat, gflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = np.sum(m.forward(x, train=True) * R)
            flat[i] = old - h
            fm = np.sum(m.forward(x, train=True) * R)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        analytic.append(grads[name].ravel())
        numeric.append(num.ravel())
        # A bias feeding a train-mode BN is cancelled by the mean subtraction.
        if name.endswith(".b") and not name.startswith("classifier"):
            assert np.abs(grads[name]).max() < 1e-10, name
    assert max_rel_err(np.concatenate(analytic), np.concatenate(numeric)) <= 1e-3


def test_input_gradient_sums_both_dense_consumers(rng):
    cfg = ArchConfig(input_size=(64, 64), precision="f64", **MINI)
    m = TakuNet(cfg)
    ds = m.downsamplers[0]
    x = rng.standard_normal((2, 4, 16, 16))
    blk = m.stages[0][0]
    y = blk.forward(x, True)
    out = ds.forward(x, y, True)
    g_in, g_blk = ds.backward(np.ones_like(out))
    assert g_in is not None and g_in.shape == x.shape and np.abs(g_in).sum() > 0
    off = TakuNet(cfg.replace(dense_connections=False))
    ds_off = off.downsamplers[0]
    out = ds_off.forward(x, off.stages[0][0].forward(x, True), True)
    assert ds_off.backward(np.ones_like(out))[0] is None


def test_dense_toggle_changes_pointwise_fan_in(rng):
    cfg = ArchConfig(input_size=(64, 64), **MINI)
    on, off = TakuNet(cfg), TakuNet(cfg.replace(dense_connections=False))
    x = rng.standard_normal((8, 3, 64, 64)).astype(np.float32)
    R = rng.standard_normal((8, 5)).astype(np.float32)
    for m in (on, off):
        m.forward(x, train=True)
    g_on, g_off = on.backward(R), off.backward(R)
    for s in range(1, 5):
        k = f"downsampler{s}.pw.w"
        assert g_on[k].shape[1] == 2 * g_off[k].shape[1]
        assert np.count_nonzero(g_on[k]) == g_on[k].size
        assert np.count_nonzero(g_on[k]) == 2 * np.count_nonzero(g_off[k])


@pytest.mark.parametrize("seed", range(10))
def test_init_logits_bounded(default_model, seed):
    m = TakuNet(ArchConfig(), seed=seed)
    x = np.random.default_rng(seed).standard_normal((2, 3, 240, 240)).astype(np.float32)
    assert np.abs(m.forward(x)).max() < 50


def test_dense_off_groups_use_block_output_only():
    cfg = ArchConfig(dense_connections=False)
    m = TakuNet(cfg)
    for s, ds in enumerate(m.downsamplers):
        cin = cfg.stage_in_channels[s]
        assert ds.groups == downsampler_groups(cin, cin) == (2 * cin) // 4
        assert ds.pw.spec.in_channels == cin
    dense = TakuNet(ArchConfig())
    for s, ds in enumerate(dense.downsamplers):
        cin = cfg.stage_in_channels[s]
        assert ds.pw.spec.in_channels == 2 * cin


def test_groups_formula_and_divisibility():
    assert downsampler_groups(40, 40) == 20
    assert downsampler_groups(7, 5) == 3
    with pytest.raises(ValueError):
        TakuNet(ArchConfig(stage_out_channels=(90, 120, 240, 240)))


def _executed_shapes(m, x):
    """Record every leaf layer's output shape during a real forward."""
    seen = {}
    for leaf in m.leaves():
        orig = leaf.forward

        def wrapped(v, train, _orig=orig, _name=leaf.name):
            out = _orig(v, train)
            seen[_name] = out.shape
            return out

        leaf.forward = wrapped
    m.forward(x, train=False)
    return seen


@given(st.sampled_from([(64, 64), (96, 64), (64, 128), (112, 112)]),
       st.sampled_from([(4, 8, 8, 8), (8, 8, 16, 16)]),
       st.booleans(), st.booleans(), st.booleans(), st.booleans())
@settings(max_examples=20)
def test_trace_matches_execution(hw, widths, dense, grn, shuffle, refiner):
    cfg = ArchConfig(input_size=hw, stem_channels=4, stage_depths=(1, 2, 1, 1), stage_out_channels=widths,
                     dense_connections=dense, grn=grn, channel_shuffle=shuffle, refiner=refiner)
    m = TakuNet(cfg)
    seen = _executed_shapes(m, np.zeros((1, 3) + hw, np.float32))
    for row in m.trace((1, 3) + hw):
        if row.kind == "concat":
            continue
        assert tuple(seen[row.name]) == tuple(row.out_shape), row.name


def test_ablations_reduce_counts():
    base = ArchConfig()
    p0 = count_params(TakuNet(base)).total
    f0 = count_flops(TakuNet(base)).total
    every = base.replace(dense_connections=False, grn=False, channel_shuffle=False, refiner=False)
    assert count_params(TakuNet(every)).total < p0
    assert count_flops(TakuNet(every)).total < f0
    for toggle in ("dense_connections", "grn", "refiner"):
        m = TakuNet(base.replace(**{toggle: False}))
        assert count_params(m).total < p0, toggle
        assert count_flops(m).total < f0, toggle
    # A permutation has neither weights nor arithmetic.
    m = TakuNet(base.replace(channel_shuffle=False))
    assert count_params(m).total == p0 and count_flops(m).total == f0


def test_state_dict_roundtrip_and_strict(rng):
    a = TakuNet(ArchConfig(input_size=(64, 64), **MINI), seed=1)
    b = TakuNet(ArchConfig(input_size=(64, 64), **MINI), seed=2)
    b.load_state_dict(a.state_dict())
    x = rng.standard_normal((1, 3, 64, 64)).astype(np.float32)
    assert np.array_equal(a.forward(x), b.forward(x))
    bad = dict(a.state_dict())
    bad["nope"] = np.zeros(1)
    with pytest.raises(KeyError):
        b.load_state_dict(bad)


def test_same_seed_same_weights():
    a = TakuNet(ArchConfig(input_size=(64, 64), **MINI), seed=5).state_dict()
    b = TakuNet(ArchConfig(input_size=(64, 64), **MINI), seed=5).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
