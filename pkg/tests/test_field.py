import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import TINY, fd_check, random_params, relative_errors
from streamfield.config import FieldConfig
from streamfield.field import (
    PRIMES,
    FieldError,
    field_backward,
    field_forward,
    hash_encode,
    init_params,
    level_resolutions,
    load_checkpoint,
    new_tape,
    save_checkpoint,
    spacetime_forward,
    zero_params,
)

SMALL = FieldConfig(levels=3, table_size=64, features=2, base_resolution=2, per_level_scale=2.0,
                    hidden_width=16, hidden_depth=2)


def corner_index(c, res, table_size):
    """Independent per-corner index: dense when the level fits, else XOR-of-primes hash."""
    side = res + 1
    if side**3 <= table_size:
        return c[0] + c[1] * side + c[2] * side * side
    h = 0
    for ci, p in zip(c, PRIMES):
        h ^= (ci * p) & 0xFFFFFFFF
    return h % table_size


def oracle_encode(x, params):
    cfg = params.config
    out = []
    for l, res in enumerate(level_resolutions(cfg)):
        pos = np.asarray(x, dtype=np.float64) * res
        base = np.minimum(np.floor(pos), res - 1).astype(int)
        frac = pos - base
        feat = np.zeros(cfg.features)
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    w = ((frac[0] if dx else 1 - frac[0]) * (frac[1] if dy else 1 - frac[1])
                         * (frac[2] if dz else 1 - frac[2]))
                    corner = (base[0] + dx, base[1] + dy, base[2] + dz)
                    feat += w * params.tables[l, corner_index(corner, res, cfg.table_size)]
        out.append(feat)
    return np.concatenate(out)




def test_encode_vs_corner_oracle(rng):
    cfg = FieldConfig(levels=4, table_size=128, features=2, base_resolution=3, per_level_scale=1.7)
    params = random_params(cfg)
    # level 0 dense (4^3 <= 128), higher levels hashed
    assert (level_resolutions(cfg)[0] + 1) ** 3 <= 128 < (level_resolutions(cfg)[-1] + 1) ** 3
    xs = np.r_[rng.random((200, 3)), [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.5]]]
    got = hash_encode(xs, params)
    for x, g in zip(xs, got):
        np.testing.assert_allclose(g, oracle_encode(x, params), atol=1e-7)


def test_encode_lattice_point():
    params = random_params(SMALL)
    res = level_resolutions(SMALL)
    x = np.array([1, 2, 3]) / res[2]
    feats = hash_encode(x, params).reshape(SMALL.levels, SMALL.features)
    idx = corner_index((1, 2, 3), res[2], SMALL.table_size)
    np.testing.assert_allclose(feats[2], params.tables[2, idx], atol=1e-12)


def test_encode_zero_tables_and_domain():
    p = zero_params(SMALL)
    assert np.all(hash_encode(np.random.default_rng(0).random((10, 3)), p) == 0)
    for bad in ([1.01, 0.5, 0.5], [-1e-9, 0.5, 0.5], [np.nan, 0.5, 0.5]):
        with pytest.raises(FieldError):
            hash_encode(np.array(bad), p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0 - 1e-6), min_size=3, max_size=3))
def test_encode_continuity(x):
    params = random_params(SMALL)
    x = np.array(x)
    a = hash_encode(x, params)
    b = hash_encode(np.minimum(x + 1e-6, 1.0), params)
    assert np.abs(a - b).max() < 1e-4


def test_zero_params_outputs():
    p = zero_params(SMALL)
    x = np.random.default_rng(0).random((5, 3))
    d = np.tile([0.0, 0.0, 1.0], (5, 1))
    out = field_forward(x, d, np.zeros((5, 6)), p)
    np.testing.assert_array_equal(out.sigma, 1.0)
    np.testing.assert_array_equal(out.color, 0.5)
    st_p = zero_params(FieldConfig(**{**SMALL.__dict__, "conditioning": "space-time"}))
    out = spacetime_forward(x, d, 0.3, st_p)
    np.testing.assert_array_equal(out.sigma, 1.0)
    np.testing.assert_array_equal(out.color, 0.5)


def test_output_ranges_and_determinism(rng):
    p = random_params(FieldConfig(), scale=2.0)
    for name in ("W0", "Wd"):
        p.arrays[name] *= 5
    x = rng.random((10_000, 3))
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    stats = rng.random((10_000, 6))
    a = field_forward(x, d, stats, p)
    b = field_forward(x, d, stats, p)
    assert np.all(a.sigma >= 0) and np.all(a.sigma <= 1e4)
    assert np.all((a.color >= 0) & (a.color <= 1))
    assert np.array_equal(a.sigma, b.sigma) and np.array_equal(a.color, b.color)


def test_wrong_variant_and_bad_inputs():
    p = zero_params(SMALL)
    with pytest.raises(FieldError):
        spacetime_forward(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), 0.0, p)
    with pytest.raises(FieldError):
        field_forward(np.full((1, 3), 0.5), np.array([[0, 0, np.inf]]), np.zeros((1, 6)), p)


def test_conditioning_sensitivity(rng):
    p = random_params(FieldConfig(), seed=3)
    x = rng.random((50, 3))
    d = np.tile([0.0, 0.0, 1.0], (50, 1))
    s = rng.random((50, 6))
    s2 = s.copy()
    s2[:, :3] += 0.3
    assert np.abs(field_forward(x, d, s, p).color - field_forward(x, d, s2, p).color).max() > 1e-4








@pytest.mark.parametrize("conditioning", ["projected-color", "space-time"])
def test_gradient_matches_finite_differences(conditioning):
    analytic, numeric = fd_check(conditioning)
    assert np.count_nonzero(analytic) > analytic.size // 2
    assert relative_errors(analytic, numeric).max() < 1e-4


def test_backward_linearity(rng):
    params = random_params(TINY)
    x = rng.random((10, 3))
    d = np.tile([0.0, 1.0, 0.0], (10, 1))
    tape = new_tape(params)
    field_forward(x, d, rng.random((10, 6)), params, tape)
    zero = field_backward(tape, np.zeros(10), np.zeros((10, 3)), params)
    assert all(np.all(g == 0) for g in zero.values())
    gs, gc = rng.normal(size=10), rng.normal(size=(10, 3))
    g1 = field_backward(tape, gs, gc, params)
    g3 = field_backward(tape, 3 * gs, 3 * gc, params)
    for k in g1:
        np.testing.assert_allclose(g3[k], 3 * g1[k], rtol=1e-12, atol=1e-15)


def test_backward_tape_mismatch(rng):
    params = random_params(TINY)
    tape = new_tape(params)
    with pytest.raises(FieldError):
        field_backward(tape, np.zeros(1), np.zeros((1, 3)), params)
    other = random_params(SMALL)
    field_forward(rng.random((2, 3)), np.tile([0, 0, 1.0], (2, 1)), np.zeros((2, 6)), params, tape)
    with pytest.raises(FieldError):
        field_backward(tape, np.zeros(2), np.zeros((2, 3)), other)


def test_checkpoint_round_trip(tmp_path):
    params = init_params(SMALL, np.random.default_rng(5), np.float32)
    save_checkpoint(params, tmp_path / "f.ckpt", extra={"frame": 3})
    back, extra = load_checkpoint(tmp_path / "f.ckpt")
    assert extra == {"frame": 3} and back.config == SMALL
    for k in params.arrays:
        assert np.array_equal(params.arrays[k], back.arrays[k])
    raw = (tmp_path / "f.ckpt").read_bytes()
    assert raw[:4] == b"SFLD"
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FieldError):
        load_checkpoint(tmp_path / "bad.ckpt")
