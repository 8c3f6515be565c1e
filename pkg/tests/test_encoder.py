import numpy as np
import pytest

import treebo
from treebo import encoder as enc
from treebo import spacedsl as sd


@pytest.fixture(scope="module")
def spaces():
    return {n: treebo.load_builtin_space(n) for n in ("simulation", "svm", "xgboost", "cash")}


def small_cfg(**kw):
    base = dict(n_blocks=2, n_heads=2, part_dim=4, d_inner=16, mlp_hidden=(16, 8), latent_dim=8)
    base.update(kw)
    return enc.EncoderConfig(**base)


def permute_config(cfg, rng):
    order = rng.permutation(len(cfg.tokens))
    return sd.Configuration(cfg.subspace_id, tuple(cfg.tokens[i] for i in order), cfg.raw)


def test_config_validation():
    with pytest.raises(ValueError):
        enc.EncoderConfig(part_dim=3, n_heads=5)  # d_model 12 not divisible by 5
    with pytest.raises(ValueError):
        enc.EncoderConfig(mlp_hidden=(16,), latent_dim=8)
    with pytest.raises(ValueError):
        enc.EncoderConfig(pooling="cls")


def test_default_architecture_dimensions(spaces):
    cfg = enc.EncoderConfig()
    assert cfg.d_model == 256
    assert cfg.mlp_hidden == (128, 128, 128, 32)
    params = enc.EncoderParams.for_space(spaces["svm"], cfg, seed=0)
    c = sd.sample(spaces["svm"], 2, 1)
    E = enc.embed_config(c, params)
    assert E.shape == (4, 256)


def test_embedding_parts_layout(spaces):
    space = spaces["simulation"]
    cfg = small_cfg()
    params = enc.EncoderParams.for_space(space, cfg, seed=0)
    c = sd.sample(space, 1, 3)
    E = enc.embed_config(c, params)
    part = cfg.part_dim
    for k, tok in enumerate(c.tokens):
        assert np.allclose(E[k, :part], params.views["id_table"][tok.id_code])
        assert np.allclose(E[k, part:2 * part], params.views["idx_table"][tok.idx_code])
        expected_value = tok.norm_value * params.views["value_w"] + params.views["value_b"]
        assert np.allclose(E[k, 2 * part:3 * part], expected_value)
        assert np.allclose(E[k, 3 * part:], params.views["id_table"][tok.father_code])
    # root hyperparameter: father part equals the padding row
    assert c.tokens[0].father_code == 0
    assert np.allclose(E[0, 3 * part:], params.views["id_table"][0])


def test_equal_tokens_give_equal_rows(spaces):
    space = spaces["simulation"]
    params = enc.EncoderParams.for_space(space, small_cfg(), seed=0)
    c = sd.sample(space, 1, 3)
    tokens = (c.tokens[0], c.tokens[0], c.tokens[1])
    cfg = sd.Configuration(1, tokens, c.raw)
    E = enc.embed_config(cfg, params)
    assert np.array_equal(E[0], E[1])


def test_code_out_of_bounds_raises(spaces):
    space = spaces["simulation"]
    params = enc.EncoderParams.for_space(space, small_cfg(), seed=0)
    bad = sd.Configuration(
        1, (sd.Token(id_code=search_max(space) + 7, idx_code=0, father_code=0, norm_value=0.5),), {}
    )
    with pytest.raises(IndexError):
        enc.encode([bad], params, backend=enc.PythonEncoderBackend())


def search_max(space):
    return space.n_names


def test_attention_identities():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(1, 4))
    Q = rng.normal(size=(1, 4))
    assert np.allclose(enc.attention(Q, Q, V), V)

    Q0 = np.zeros((3, 4))
    K = rng.normal(size=(3, 4))
    V3 = rng.normal(size=(3, 4))
    out = enc.attention(Q0, K, V3)
    assert np.allclose(out, np.tile(V3.mean(axis=0), (3, 1)))


def test_attention_matches_dense_oracle():
    rng = np.random.default_rng(5)
    Q, K, V = rng.normal(size=(3, 3, 4))
    scores = Q @ K.T / 2.0
    expw = np.exp(scores - scores.max(axis=1, keepdims=True))
    probs = expw / expw.sum(axis=1, keepdims=True)
    assert np.allclose(enc.attention(Q, K, V), probs @ V, atol=1e-12)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        enc.attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))


def test_encode_shape_mixed_subspaces(spaces):
    space = spaces["svm"]
    params = enc.EncoderParams.for_space(space, small_cfg(), seed=1)
    configs = [sd.sample(space, 1, 1), sd.sample(space, 2, 2)]  # lengths 2 and 4
    z = enc.encode(configs, params, backend=enc.PythonEncoderBackend())
    assert z.shape == (2, 8)


def test_encode_batch_order_preserved(spaces):
    # grouping by length must not permute the output rows
    space = spaces["svm"]
    params = enc.EncoderParams.for_space(space, small_cfg(), seed=1)
    configs = [sd.sample(space, 1 + i % 4, 60 + i) for i in range(9)]
    be = enc.PythonEncoderBackend()
    z = enc.encode(configs, params, backend=be)
    singles = np.vstack([enc.encode([c], params, backend=be) for c in configs])
    assert np.allclose(z, singles, atol=1e-10)


@pytest.mark.parametrize("pooling", ["average", "token_mixer"])
def test_permutation_invariance(spaces, pooling):
    rng = np.random.default_rng(7)
    be = enc.PythonEncoderBackend()
    for name in ("simulation", "svm", "xgboost", "cash"):
        space = spaces[name]
        params = enc.EncoderParams.for_space(space, small_cfg(pooling=pooling), seed=2)
        for _ in range(5):
            sid = 1 + int(rng.integers(len(space.subspaces)))
            c = sd.sample(space, sid, int(rng.integers(2**31)))
            cp = permute_config(c, rng)
            z = enc.encode([c], params, backend=be)
            zp = enc.encode([cp], params, backend=be)
            assert np.linalg.norm(zp - z) / np.linalg.norm(z) <= 1e-5


def test_structure_blind_ablation(spaces):
    # with structural embeddings off, equal values + equal lengths from
    # different subspaces collapse to the same latent
    space = spaces["simulation"]
    params = enc.EncoderParams.for_space(
        space, small_cfg(use_structure_embeddings=False), seed=3
    )
    a = sd.sample(space, 1, 10)
    b_tokens = tuple(
        sd.Token(t2.id_code, t2.idx_code, t2.father_code, t1.norm_value)
        for t1, t2 in zip(a.tokens, sd.sample(space, 4, 11).tokens)
    )
    b = sd.Configuration(4, b_tokens, {})
    be = enc.PythonEncoderBackend()
    za = enc.encode([a], params, backend=be)
    zb = enc.encode([b], params, backend=be)
    assert np.allclose(za, zb, atol=1e-12)

    # and with them on, the same pair separates
    params_on = enc.EncoderParams.for_space(space, small_cfg(), seed=3)
    za_on = enc.encode([a], params_on, backend=be)
    zb_on = enc.encode([b], params_on, backend=be)
    assert not np.allclose(za_on, zb_on, atol=1e-6)


def test_deterministic_latents(spaces):
    space = spaces["cash"]
    params = enc.EncoderParams.for_space(space, small_cfg(), seed=4)
    configs = [sd.sample(space, 1 + i % 6, i) for i in range(6)]
    be = enc.PythonEncoderBackend()
    z1 = enc.encode(configs, params, backend=be)
    z2 = enc.encode(configs, params, backend=be)
    assert np.array_equal(z1, z2)


def test_params_roundtrip(tmp_path, spaces):
    space = spaces["svm"]
    params = enc.EncoderParams.for_space(space, small_cfg(), seed=5)
    path = tmp_path / "weights.json"
    enc.save_params(params, path, extra={"note": "test"})
    loaded, payload = enc.load_params(path)
    assert payload["note"] == "test"
    assert np.array_equal(loaded.flat, params.flat)
    assert loaded.cfg == params.cfg


def test_params_load_shape_mismatch(tmp_path, spaces):
    space = spaces["svm"]
    params = enc.EncoderParams.for_space(space, small_cfg(), seed=5)
    payload = enc.params_to_payload(params)
    payload["encoder_config"]["part_dim"] = 8  # inconsistent with stored tensors
    with pytest.raises(ValueError, match="shape"):
        enc.params_from_payload(payload)
