
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camotex.fixtures import door_panel, flat_quad, hemisphere
from camotex.geometry import (AtlasFitError, DegenerateFaceError, MeshParseError, PatchTopologyError,
                              bake_texel_mask, distortion_energy, face_singular_values, load_mesh,
                              make_mesh, relax_uv, save_mesh, uv_patches)
from camotex.texture import load_mask_png, save_mask_png

from conftest import triangle_mesh


def write(tmp_path, text, name="m.obj"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------------------
# oracles

def cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def jacobian_svd(p, q):
    """Singular values of the explicitly assembled 3x2 uv->world Jacobian."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    e = np.column_stack([p[1] - p[0], p[2] - p[0]])
    u = np.column_stack([q[1] - q[0], q[2] - q[0]])
    j = np.linalg.solve(u.T, e.T).T
    return np.linalg.svd(j, compute_uv=False)


def energy_loop(mesh):
    total = 0.0
    for f in range(mesh.n_faces):
        if not mesh.textured[f]:
            continue
        p = mesh.vertices[mesh.faces[f]]
        s = jacobian_svd(p, mesh.uv[f])
        area = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
        total += area * ((s[0] - 1) ** 2 + (s[1] - 1) ** 2)
    return total


def mask_oracle(mesh, w, h):
    mask = np.zeros((h, w), bool)
    for r in range(h):
        for c in range(w):
            pt = np.array([(c + 0.5) / w, (r + 0.5) / h])
            for f in np.flatnonzero(mesh.textured):
                a, b, d = mesh.uv[f]
                s = [cross2(y - x, pt - x) for x, y in ((a, b), (b, d), (d, a))]
                if min(s) >= 0 or max(s) <= 0:
                    mask[r, c] = True
                    break
    return mask


def random_rotation(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


# ---------------------------------------------------------------------------
# load_mesh

def test_identity_triangle_loads_with_unit_sigmas(tmp_path):
    p = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n")
    mesh = load_mesh(p)
    assert mesh.n_faces == 1 and mesh.textured.all()
    assert face_singular_values(mesh, 0) == pytest.approx((1.0, 1.0), abs=1e-12)


def test_hemisphere_asset_has_512_textured_faces(hemi_mesh):
    assert hemi_mesh.n_faces == 512
    assert hemi_mesh.textured.all()


def test_zero_area_face_is_named(tmp_path):
    p = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nvt 0 0\nvt 1 0\nvt 0 1\n"
                        "f 1/1 2/2 3/3\nf 1/1 2/2 4/3\n")
    with pytest.raises(DegenerateFaceError) as err:
        load_mesh(p)
    assert err.value.faces == [1]


def test_parse_error_reports_line(tmp_path):
    p = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 zz\nf 1 2 3\n")
    with pytest.raises(MeshParseError) as err:
        load_mesh(p)
    assert err.value.line == 3


def test_faces_without_uv_are_untextured(tmp_path):
    p = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert not load_mesh(p).textured.any()


def test_save_load_round_trip(tmp_path, hemi_mesh):
    path = tmp_path / "h.obj"
    save_mesh(hemi_mesh, path)
    back = load_mesh(path)
    np.testing.assert_allclose(back.vertices, hemi_mesh.vertices, atol=1e-12)
    np.testing.assert_array_equal(back.faces, hemi_mesh.faces)
    np.testing.assert_allclose(back.uv, hemi_mesh.uv, atol=1e-12)
    np.testing.assert_array_equal(back.textured, hemi_mesh.textured)


# ---------------------------------------------------------------------------
# face_singular_values

def test_isometry_sigmas():
    m = triangle_mesh([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [(0, 0), (1, 0), (0, 1)])
    assert face_singular_values(m, 0) == pytest.approx((1, 1), abs=1e-12)


def test_axis_stretch_sigmas():
    m = triangle_mesh([(0, 0, 0), (2, 0, 0), (0, 1, 0)], [(0, 0), (0.5, 0), (0, 0.5)])
    # uv scaled by 0.5 into [0,1]: stretch doubles
    assert face_singular_values(m, 0) == pytest.approx((4, 2), abs=1e-12)
    m = triangle_mesh([(0, 0, 0), (2, 0, 0), (0, 1, 0)], [(0, 0), (1, 0), (0, 1)])
    assert face_singular_values(m, 0) == pytest.approx((2, 1), abs=1e-12)


def test_uv_degenerate_raises():
    m = make_mesh([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [[0, 1, 2]], uv=[[(0, 0), (0.5, 0.5), (1, 1)]],
                  textured=[True], validate=False)
    with pytest.raises(DegenerateFaceError):
        face_singular_values(m, 0)


def test_random_triangles_match_svd_oracle(rng):
    for _ in range(200):
        p = rng.normal(size=(3, 3))
        q = rng.uniform(0, 1, size=(3, 2))
        if abs(cross2(q[1] - q[0], q[2] - q[0])) < 1e-3:
            continue
        m = triangle_mesh(p, q)
        s1, s2 = face_singular_values(m, 0)
        ref = jacobian_svd(p, q)
        assert s1 >= s2 > 0
        np.testing.assert_allclose([s1, s2], ref, rtol=1e-9)


@given(st.integers(0, 2 ** 31))
def test_sigmas_invariant_under_rigid_motions(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(3, 3))
    q = rng.uniform(0.3, 0.7, size=(3, 2))
    if abs(cross2(q[1] - q[0], q[2] - q[0])) < 1e-2:
        return
    base = face_singular_values(triangle_mesh(p, q), 0)
    p2 = p @ random_rotation(rng, 3).T + rng.normal(size=3)
    c = q.mean(axis=0)
    q2 = (q - c) @ random_rotation(rng, 2).T + c + rng.uniform(-0.05, 0.05, size=2)
    moved = face_singular_values(triangle_mesh(p2, q2), 0)
    np.testing.assert_allclose(moved, base, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------------------
# distortion_energy

def test_flat_quad_energy_zero():
    rep = distortion_energy(flat_quad(1.0))
    assert rep.energy == pytest.approx(0.0, abs=1e-24)
    assert rep.stretched_count == 0 and rep.compressed_count == 0


def test_planar_hemisphere_is_distorted(hemi_mesh):
    rep = distortion_energy(hemi_mesh)
    assert rep.energy > 0 and rep.stretched_count > 0


@pytest.mark.parametrize("make", [lambda: hemisphere(), lambda: door_panel(), lambda: flat_quad(0.8)])
def test_energy_equals_term_by_term_loop(make):
    mesh = make()
    assert distortion_energy(mesh).energy == pytest.approx(energy_loop(mesh), rel=1e-10, abs=1e-15)


def test_report_sigma_ordering(hemi_mesh):
    s = distortion_energy(hemi_mesh).per_face_sigmas
    assert np.all(s[:, 0] >= s[:, 1]) and np.all(s[:, 1] >= 0)


# ---------------------------------------------------------------------------
# relax_uv

def test_isometric_patch_is_fixed_point():
    mesh = flat_quad(0.5)
    out = relax_uv(mesh, 0, 20)
    assert distortion_energy(out).energy == pytest.approx(0.0, abs=1e-20)
    # rigid uv motion preserves every pairwise corner distance
    a = mesh.uv.reshape(-1, 2)
    b = out.uv.reshape(-1, 2)
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    np.testing.assert_allclose(db, da, atol=1e-9)


def test_hemisphere_energy_halves_with_monotone_trace(hemi_mesh):
    before = distortion_energy(hemi_mesh).energy
    trace = []
    out = relax_uv(hemi_mesh, 0, 200, trace=trace)
    after = distortion_energy(out).energy
    assert after <= 0.5 * before
    assert len(trace) == 200
    seq = [before] + trace
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    assert out.uv.min() >= 0 and out.uv.max() <= 1


def test_door_stretched_count_decreases():
    door = door_panel()
    before = distortion_energy(door).stretched_count
    after = distortion_energy(relax_uv(door, 0, 100)).stretched_count
    assert after < before


def test_only_relaxed_patch_changes(car_mesh):
    labels = uv_patches(car_mesh)
    seed = int(np.flatnonzero(labels == labels.max())[0])
    out = relax_uv(car_mesh, seed, 5, rect=tuple(_patch_rect(car_mesh, labels == labels.max())))
    other = labels != labels.max()
    np.testing.assert_array_equal(out.uv[other], car_mesh.uv[other])
    np.testing.assert_array_equal(out.vertices, car_mesh.vertices)
    np.testing.assert_array_equal(out.faces, car_mesh.faces)
    assert distortion_energy(out).energy <= distortion_energy(car_mesh).energy


def _patch_rect(mesh, sel):
    q = mesh.uv[sel].reshape(-1, 2)
    lo, hi = q.min(axis=0), q.max(axis=0)
    pad = 0.005
    return (max(lo[0] - pad, 0), max(lo[1] - pad, 0), min(hi[0] + pad, 1), min(hi[1] + pad, 1))


def test_closed_patch_is_rejected():
    # tetrahedron: every face textured with shared uv, no boundary
    v = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    f = [[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]
    uv = np.array([[0.1, 0.1], [0.9, 0.1], [0.1, 0.9], [0.5, 0.5]])
    mesh = make_mesh(v, f, uv=uv[np.array(f)], textured=[True] * 4, validate=False)
    with pytest.raises(PatchTopologyError, match="seam"):
        relax_uv(mesh, 0, 5)


def test_patch_too_large_for_rect(hemi_mesh):
    with pytest.raises(AtlasFitError):
        relax_uv(hemi_mesh, 0, 5, rect=(0.0, 0.0, 0.2, 0.2))


# ---------------------------------------------------------------------------
# bake_texel_mask

def test_no_textured_faces_gives_empty_mask():
    mesh = make_mesh([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [[0, 1, 2]])
    assert not bake_texel_mask(mesh, 16, 16).any()


def test_lower_half_triangle_on_4x4_grid():
    mesh = triangle_mesh([(0, 0, 0), (1, 0, 0), (1, 1, 0)], [(0, 0), (1, 0), (1, 1)])
    got = bake_texel_mask(mesh, 4, 4)
    np.testing.assert_array_equal(got, mask_oracle(mesh, 4, 4))
    rows, cols = np.mgrid[0:4, 0:4]
    # v <= u on texel centers: row <= col
    np.testing.assert_array_equal(got, rows <= cols)


@pytest.mark.parametrize("make,size", [(lambda: hemisphere(8), 24), (lambda: door_panel(nx=4, ny=3), 20)])
def test_mask_matches_half_space_oracle(make, size):
    mesh = make()
    got = bake_texel_mask(mesh, size, size)
    assert got.sum() == mask_oracle(mesh, size, size).sum()
    np.testing.assert_array_equal(got, mask_oracle(mesh, size, size))


def test_full_atlas_patch_count():
    mesh = flat_quad(1.0)
    assert bake_texel_mask(mesh, 32, 32).sum() == 32 * 32


@given(st.permutations(list(range(128))))
def test_mask_independent_of_face_order(perm):
    mesh = hemisphere(8)
    perm = np.asarray(perm)
    shuffled = make_mesh(mesh.vertices, mesh.faces[perm], uv=mesh.uv[perm], textured=mesh.textured[perm],
                         validate=False)
    np.testing.assert_array_equal(bake_texel_mask(shuffled, 32, 32), bake_texel_mask(mesh, 32, 32))


def test_mask_png_round_trip(tmp_path, hemi_mesh):
    m = bake_texel_mask(hemi_mesh, 64, 64)
    save_mask_png(m, tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png"), m)
