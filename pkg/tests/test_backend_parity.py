"""The compiled core must agree with the pure-Python reference bit-for-bit
(up to float reassociation) on every space, pooling mode, and ablation flag."""

import numpy as np
import pytest

import treebo
from treebo import encoder as enc
from treebo import spacedsl as sd
from treebo.backend import HAVE_COMPILED, CompiledEncoderBackend

pytestmark = pytest.mark.skipif(not HAVE_COMPILED, reason="compiled core not built")


def cfg_for(pooling, structure):
    return enc.EncoderConfig(
        n_blocks=2, n_heads=2, part_dim=4, d_inner=16, mlp_hidden=(16, 8),
        latent_dim=8, pooling=pooling, use_structure_embeddings=structure,
    )


@pytest.mark.parametrize("space_name", ["simulation_bench", "svm", "cash", "nas"])
@pytest.mark.parametrize("pooling", ["average", "token_mixer"])
@pytest.mark.parametrize("structure", [True, False])
def test_forward_and_vjp_parity(space_name, pooling, structure):
    space = treebo.load_builtin_space(space_name)
    params = enc.EncoderParams.for_space(space, cfg_for(pooling, structure), seed=1)
    configs = [
        sd.sample(space, 1 + i % len(space.subspaces), 100 + i) for i in range(7)
    ]
    batches = enc.pack_configs(configs)
    py = enc.PythonEncoderBackend()
    cy = CompiledEncoderBackend()
    z_py, vjp_py = py.encode_with_vjp(params, batches, len(configs))
    z_cy, vjp_cy = cy.encode_with_vjp(params, batches, len(configs))
    assert np.abs(z_py - z_cy).max() < 1e-12

    dz = np.random.default_rng(7).normal(size=z_py.shape)
    g_py, g_cy = vjp_py(dz), vjp_cy(dz)
    rel = np.abs(g_py - g_cy) / np.maximum(np.abs(g_py), 1.0)
    assert rel.max() < 1e-10


def test_default_architecture_parity():
    space = treebo.load_builtin_space("svm")
    params = enc.EncoderParams.for_space(space, enc.EncoderConfig(), seed=2)
    configs = [sd.sample(space, 1 + i % 4, i) for i in range(5)]
    batches = enc.pack_configs(configs)
    z_py = enc.PythonEncoderBackend().encode(params, batches, 5)
    z_cy = CompiledEncoderBackend().encode(params, batches, 5)
    assert np.abs(z_py - z_cy).max() < 1e-10
