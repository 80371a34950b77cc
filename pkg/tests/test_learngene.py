import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import truncnorm

from wavelg.errors import ChecksumError, IncompatibleError, ShapeError, VersionError
from wavelg.kron import kron_product
from wavelg.learngene import (
    FAMILIES,
    TemplateBank,
    bank_init,
    family_of,
    load_bank,
    load_checkpoint,
    load_scalers,
    materialize,
    save_bank,
    save_checkpoint,
    save_scalers,
    scaler_shapes,
    scalers_init,
    transferred_param_count,
)
from wavelg.lifecycle import he_init
from wavelg.vit import TEMPLATED, ModelConfig, param_count, weight_name


def cfg(D=64, L=4, heads=None, ratio=4):
    return ModelConfig(depth=L, embed_dim=D, heads=heads or max(1, D // 16), mlp_hidden=ratio * D)


def test_bank_init_deterministic_and_bounded():
    a, b = bank_init(16, (4, 4, 4), seed=9), bank_init(16, (4, 4, 4), seed=9)
    assert a.digest() == b.digest()
    assert all(np.array_equal(a.templates[f], b.templates[f]) for f in FAMILIES)
    assert sum(x.shape[0] for x in a.templates.values()) == 12
    assert transferred_param_count(a) == 3072
    assert max(np.abs(x).max() for x in a.templates.values()) <= 0.04
    assert bank_init(16, (4, 4, 4), seed=10).digest() != a.digest()


def test_bank_rejects_rectangular_templates():
    with pytest.raises(ShapeError, match="square"):
        TemplateBank(2, {"att": np.zeros((1, 2, 3)), "proj": np.zeros((1, 2, 2)), "mlp": np.zeros((1, 2, 2))})


def test_transferred_count_trivial_and_target_independent():
    assert transferred_param_count(bank_init(1, (1, 1, 1))) == 3
    b = bank_init(16, (2, 3, 4))
    assert transferred_param_count(b) == (2 + 3 + 4) * 256
    scaler_shapes(b, cfg(32, 2))
    scaler_shapes(b, cfg(96, 6))
    assert transferred_param_count(b) == (2 + 3 + 4) * 256


def test_scaler_shapes_one_template_per_width():
    shapes = scaler_shapes(64, cfg(64, 4))
    assert shapes == {"att": (1, 3), "proj": (1, 1), "mlp1": (1, 4), "mlp2": (4, 1)}


def test_full_width_templates_give_single_row_att_scalers():
    for D in (16, 32, 48):
        assert scaler_shapes(D, cfg(D, 2))["att"][0] == 1


def test_scaler_shapes_names_offending_dimension():
    with pytest.raises(IncompatibleError, match=r"t=32.*embed_dim=48"):
        scaler_shapes(32, cfg(48, 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 4), st.sampled_from([1, 2, 4, 8]))
def test_scaler_shapes_total_on_divisible_domain(mult, heads, ratio, t):
    D = t * mult * heads
    c = ModelConfig(depth=1, embed_dim=D, heads=heads, mlp_hidden=ratio * D)
    shapes = scaler_shapes(t, c)
    for comp, (s1, s2) in shapes.items():
        from wavelg.vit import templated_shape

        r, k = templated_shape(c, comp)
        assert (s1 * t, s2 * t) == (r, k)
    bad = D + 1 if t > 1 else None
    if bad and bad % heads == 0:
        with pytest.raises(IncompatibleError):
            scaler_shapes(t, ModelConfig(depth=1, embed_dim=bad, heads=heads))


def test_scalers_init_deterministic_and_counted():
    b = bank_init(64, (4, 4, 4), seed=0)
    s1, s2 = scalers_init(b, cfg(64, 4), seed=3), scalers_init(b, cfg(64, 4), seed=3)
    assert all(np.array_equal(s1.scalers[k], s2.scalers[k]) for k in s1.scalers)
    assert s1.param_count() == 192
    assert param_count(cfg(64, 4), "templated") == 196608


def test_composed_weight_variance_scales_with_scaler_area():
    trunc_var = truncnorm.var(-2, 2) * 0.02**2
    c = cfg(32, 1, heads=2)
    ratios = {comp: [] for comp in TEMPLATED}
    for seed in range(100):
        b = bank_init(8, (3, 3, 3), seed=seed)
        w = materialize(b, scalers_init(b, c, seed=seed + 1000))
        shapes = scaler_shapes(b, c)
        for comp in TEMPLATED:
            s1, s2 = shapes[comp]
            ratios[comp].append(w[weight_name(0, comp)].var() / (trunc_var / (3 * s1 * s2)))
    for comp, r in ratios.items():
        assert abs(np.mean(r) - 1.0) < 0.1, comp


def test_scalers_small_relative_to_templated_weights():
    for D, L, t, n in [(32, 2, 16, 8), (64, 4, 16, 4), (96, 6, 32, 8), (64, 2, 64, 8)]:
        b = bank_init(t, (n, n, n))
        s = scalers_init(b, cfg(D, L))
        assert s.param_count() < 0.05 * param_count(cfg(D, L), "templated")


def test_materialize_identity_scalers_tile_template():
    b = bank_init(4, (1, 1, 1), seed=2)
    c = ModelConfig(depth=2, embed_dim=8, heads=2, mlp_hidden=16)
    s = scalers_init(b, c)
    for name in s.scalers:
        s.scalers[name] = np.ones_like(s.scalers[name])
    out = materialize(b, s)
    for l in range(2):
        for comp in TEMPLATED:
            T = b.templates[family_of(comp)][0].astype(np.float64)
            rows, cols = s.scalers[weight_name(l, comp)].shape[1:]
            assert np.array_equal(out[weight_name(l, comp)], kron_product(T, np.ones((rows, cols))))


def test_materialize_pure_and_matches_brute_force():
    b = bank_init(8, (3, 2, 4), seed=4)
    c = ModelConfig(depth=2, embed_dim=16, heads=2)
    s = scalers_init(b, c, seed=1)
    w1, w2 = materialize(b, s), materialize(b, s)
    for name, w in w1.items():
        assert np.array_equal(w, w2[name])
        comp = name.split(".")[2]
        T = b.templates[family_of(comp)].astype(np.float64)
        S = s.scalers[name].astype(np.float64)
        brute = sum(np.kron(T[i], S[i]) for i in range(len(T)))
        assert np.max(np.abs(w - brute)) < 1e-6


def test_bank_round_trip_and_materialize_commutes(tmp_path):
    b = bank_init(8, (2, 2, 2), seed=1)
    b.metadata["provenance"] = {"teacher_sha256": "ab" * 32}
    save_bank(b, tmp_path / "b.wlg")
    r = load_bank(tmp_path / "b.wlg")
    assert r.digest() == b.digest() and r.metadata == b.metadata
    c = ModelConfig(depth=2, embed_dim=16, heads=2)
    s = scalers_init(b, c)
    m1, m2 = materialize(b, s), materialize(r, s)
    assert all(np.array_equal(m1[k], m2[k]) for k in m1)


def test_bank_corruption_and_version(tmp_path):
    p = tmp_path / "b.wlg"
    save_bank(bank_init(4, (1, 1, 1)), p)
    data = bytearray(p.read_bytes())
    data[-10] ^= 0xFF
    (tmp_path / "bad.wlg").write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_bank(tmp_path / "bad.wlg")
    text = p.read_bytes().replace(b'"format_version":1', b'"format_version":2')
    (tmp_path / "v2.wlg").write_bytes(text)
    with pytest.raises(VersionError):
        load_bank(tmp_path / "v2.wlg")


def test_scalers_and_checkpoint_round_trip(tmp_path):
    b = bank_init(8, (2, 2, 2))
    c = ModelConfig(depth=2, embed_dim=16, heads=2, classes=5)
    s = scalers_init(b, c, seed=7)
    save_scalers(s, tmp_path / "s.wlg")
    r = load_scalers(tmp_path / "s.wlg")
    assert r.config == c and r.t == 8
    assert all(np.array_equal(r.scalers[k], s.scalers[k]) for k in s.scalers)
    params = he_init(c, 0)
    save_checkpoint(params, c, tmp_path / "c.wlg", {"role": "x"})
    p2, c2, meta = load_checkpoint(tmp_path / "c.wlg")
    assert c2 == c and meta["role"] == "x"
    assert all(np.array_equal(p2[k], params[k]) and p2[k].dtype == np.float32 for k in params)


def test_materialize_rejects_mismatched_scalers():
    b = bank_init(8, (2, 2, 2))
    s = scalers_init(b, ModelConfig(depth=1, embed_dim=16, heads=2))
    with pytest.raises(IncompatibleError):
        materialize(bank_init(8, (3, 2, 2)), s)
