import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvlab import _fallback, kernels

BACKENDS = ["python"] + (["compiled"] if kernels.HAVE_COMPILED else [])

# Random123 known-answer vectors for Philox4x32-10
KAT = [
    ([0, 0, 0, 0], 0, [0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8]),
    ([0xFFFFFFFF] * 4, 0xFFFFFFFFFFFFFFFF, [0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD]),
    (
        [0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344],
        (0x299F31D0 << 32) | 0xA4093822,
        [0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1],
    ),
]


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers(name, ctr, key, expected):
    mod = kernels.get_backend(name)
    out = mod.philox4x32(np.array([ctr], dtype=np.uint32), key)
    assert [int(v) for v in out[0]] == expected


@pytest.mark.skipif(not kernels.HAVE_COMPILED, reason="compiled kernels not built")
@given(
    seed=st.integers(0, 2**64 - 1),
    step=st.integers(0, 2**32 - 1),
    start=st.integers(0, 10**6),
    count=st.integers(0, 40),
    width=st.integers(1, 5),
)
def test_backends_agree_on_random_streams(seed, step, start, count, width):
    c = kernels.get_backend("compiled")
    a = _fallback.uniforms(seed, 0, step, start, count, width)
    assert np.array_equal(a, c.uniforms(seed, 0, step, start, count, width))
    # libm and numpy transcendental functions may differ by an ulp
    a = _fallback.normals(seed, 0, step, start, count, width)
    assert np.allclose(a, c.normals(seed, 0, step, start, count, width), rtol=1e-14, atol=1e-15)


@given(start=st.integers(0, 500), count=st.integers(1, 50))
def test_streams_are_addressable_by_particle(start, count):
    full = kernels.normals(3, 5, 0, start + count, 2)
    part = kernels.normals(3, 5, start, count, 2)
    assert np.array_equal(full[start:], part)


def test_normals_moments():
    z = kernels.normals(11, 0, 0, 200_000, 1)[:, 0]
    assert abs(z.mean()) < 5 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 5 * np.sqrt(2 / z.size)
    u = kernels.uniforms(11, 0, 0, 100_000, 1)[:, 0]
    assert u.min() > 0 and u.max() < 1


def test_streams_differ():
    a = kernels.normals(1, 0, 0, 10, 1)
    assert not np.array_equal(a, kernels.normals(1, 1, 0, 10, 1))
    assert not np.array_equal(a, kernels.normals(2, 0, 0, 10, 1))
    assert not np.array_equal(a, kernels.normals(1, 0, 0, 10, 1, stream=kernels.STREAM_INITIAL))


@pytest.mark.skipif(not kernels.HAVE_COMPILED, reason="compiled kernels not built")
def test_cic_and_kde_backends_agree():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(300, 2))
    w = rng.random(300)
    origin = np.floor(pts.min(axis=0) / 0.3).astype(np.int64)
    shape = (np.floor(pts.max(axis=0) / 0.3).astype(np.int64) - origin + 2).astype(np.int64)
    c = kernels.get_backend("compiled")
    g1 = _fallback.cic_deposit(pts, w, 0.3, origin, shape)
    g2 = c.cic_deposit(pts, w, 0.3, origin, shape)
    assert np.allclose(g1, g2, rtol=1e-13, atol=1e-15)
    assert np.isclose(g1.sum(), w.sum())
    q = rng.normal(size=(20, 2))
    v1, s1 = _fallback.kde_gauss(pts, w, q, 0.4)
    v2, s2 = c.kde_gauss(pts, w, q, 0.4)
    assert np.allclose(v1, v2, rtol=1e-12) and np.allclose(s1, s2, rtol=1e-12)


def test_kde_matches_direct_sum():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(50, 1))
    w = np.full(50, 1 / 50)
    q = np.array([[0.0], [0.7]])
    vals, sq = kernels.kde_gauss(pts, w, q, 0.5)
    k = np.exp(-((q[:, None, 0] - pts[None, :, 0]) ** 2) / (2 * 0.25)) / np.sqrt(2 * np.pi * 0.25)
    assert np.allclose(vals, k @ w, rtol=1e-13)
    assert np.allclose(sq, (k**2) @ w, rtol=1e-13)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@pytest.mark.skipif(not kernels.HAVE_COMPILED, reason="compiled kernels not built")
def test_simulation_agrees_across_backends(tmp_path):
    import os
    import subprocess
    import sys

    script = (
        "import numpy as np, sys\n"
        "from mvlab import presets\n"
        "from mvlab.measures import EmpiricalMeasure\n"
        "from mvlab.simulator import SimulationPlan, simulate_mckean_vlasov\n"
        "ens = simulate_mckean_vlasov(presets.get('bump_drift_mu_dependent'), EmpiricalMeasure.dirac([0.0]),\n"
        "                             SimulationPlan.uniform(500, 0, 0.5, 20, seed=3))\n"
        "np.save(sys.argv[1], ens.paths)\n"
    )
    out = {}
    for name in ("python", "compiled"):
        env = {**os.environ, "MVLAB_BACKEND": name}
        subprocess.run([sys.executable, "-c", script, str(tmp_path / f"{name}.npy")], env=env, check=True)
        out[name] = np.load(tmp_path / f"{name}.npy")
    assert np.allclose(out["python"], out["compiled"], rtol=0, atol=1e-12)
