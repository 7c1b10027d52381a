import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from helpers import icosphere, random_neural_mesh, random_similarity
from meshalign.camera import Camera
from meshalign.io import (FormatError, dump_json, load_neural_mesh, read_feature_banks, read_feature_grid,
                          read_pgm, read_ply, save_neural_mesh, write_feature_banks, write_feature_grid,
                          write_pgm, write_ply)
from meshalign.mesh import (MeshError, NeuralMesh, SimilarityTransform, apply_transform, compose,
                            euler_characteristic, is_closed_manifold, point_diameter, project_vertex)

seeds = st.integers(0, 2 ** 32 - 1)


# -- transforms ------------------------------------------------------------------

@given(seeds)
def test_compose_matches_sequential_application(seed):
    rng = np.random.default_rng(seed)
    t1, t2 = random_similarity(rng), random_similarity(rng)
    x = rng.normal(size=(10, 3))
    assert np.allclose(t2.apply(t1.apply(x)), compose(t2, t1).apply(x), atol=1e-9)


@given(seeds)
def test_inverse_round_trips(seed):
    rng = np.random.default_rng(seed)
    t = random_similarity(rng)
    x = rng.normal(size=(5, 3))
    assert np.allclose(t.inverse().apply(t.apply(x)), x, atol=1e-9)
    assert np.allclose(t.matrix() @ t.inverse().matrix(), np.eye(4), atol=1e-9)


def test_transform_json_round_trip(rng):
    t = random_similarity(rng)
    back = SimilarityTransform.from_dict(t.to_dict())
    assert back.scale == t.scale and np.array_equal(back.rotation, t.rotation)


@pytest.mark.parametrize("kw", [dict(scale=0.0), dict(scale=-1.0), dict(rotation=np.diag([1, 1, -1.0])),
                                dict(rotation=2 * np.eye(3))])
def test_transform_rejects_invalid_parameters(kw):
    with pytest.raises(MeshError):
        SimilarityTransform(**kw)


def test_apply_transform_keeps_faces_and_banks(rng):
    m = random_neural_mesh(rng, 10, faces=np.array([[0, 1, 2]]))
    t = random_similarity(rng)
    out = apply_transform(m, t)
    assert np.array_equal(out.faces, m.faces)
    assert all(np.array_equal(a, b) for a, b in zip(out.feature_banks, m.feature_banks))


# -- neural mesh invariants ---------------------------------------------------------

def test_mesh_rejects_out_of_range_faces():
    with pytest.raises(MeshError):
        NeuralMesh.geometry_only(np.zeros((3, 3)), [[0, 1, 3]])


def test_mesh_rejects_repeated_face_vertices():
    with pytest.raises(MeshError):
        NeuralMesh.geometry_only(np.eye(3), [[0, 0, 1]])


def test_mesh_rejects_non_unit_features():
    with pytest.raises(MeshError):
        NeuralMesh(np.eye(3), np.zeros((0, 3)), (np.array([[2.0, 0]]), np.zeros((0, 2)), np.zeros((0, 2))), 2)


def test_mesh_rejects_non_finite_vertices():
    with pytest.raises(MeshError):
        NeuralMesh.geometry_only([[0, 0, np.nan]], np.zeros((0, 3)))


def test_mesh_with_zero_feature_dim_is_allowed():
    m = NeuralMesh.geometry_only(np.eye(3), [[0, 1, 2]])
    assert m.feature_dim == 0 and len(m.featured) == 0


def test_mesh_arrays_are_read_only(rng):
    m = random_neural_mesh(rng, 5)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0


@given(seeds)
def test_point_diameter_matches_all_pairs(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(int(rng.integers(1, 120)), 3))
    assert abs(point_diameter(p) - oracles.diameter(p)) < 1e-12


def test_icosphere_topology():
    v, f = icosphere(2)
    assert is_closed_manifold(f)
    assert euler_characteristic(len(v), f) == 2


def test_open_surface_is_not_closed():
    assert not is_closed_manifold([[0, 1, 2]])
    assert not is_closed_manifold(np.zeros((0, 3), dtype=int))


# -- camera ------------------------------------------------------------------------

def test_look_at_projects_target_to_principal_point():
    cam = Camera.look_at([3.0, 1, 2], [0, 0, 0], [0, 0, 1], 100, 64, 48)
    uv, depth = cam.project(np.zeros((1, 3)))
    assert np.allclose(uv[0], [31.5, 23.5]) and depth[0] == pytest.approx(np.sqrt(14))
    assert np.allclose(cam.center, [3, 1, 2])


def test_points_behind_the_camera_are_flagged():
    cam = Camera.look_at([0, 0, -5.0], [0, 0, 0], [0, 1, 0], 100, 64, 64)
    uv, depth, in_front = project_vertex([0, 0, -6.0], cam)
    assert not in_front and depth < 0 and np.all(np.isnan(uv))


def test_camera_dict_round_trip_and_validation():
    cam = Camera.look_at([1.0, 2, 3], [0, 0, 0], [0, 0, 1], 80, 32, 32)
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.projection_matrix(), cam.projection_matrix())
    with pytest.raises(ValueError):
        Camera(np.diag([-1.0, 1, 1]), np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.eye(3), np.zeros(3), 0, 4)


# -- files -------------------------------------------------------------------------

def test_neural_mesh_round_trip(tmp_path, rng):
    v, f = icosphere(1)
    m = random_neural_mesh(rng, len(v), 6, 3, faces=f)
    m = NeuralMesh(v, f, m.feature_banks, 6)
    save_neural_mesh(m, tmp_path / "m.ply", tmp_path / "m.nmfb")
    back = load_neural_mesh(tmp_path / "m.ply", tmp_path / "m.nmfb")
    assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.faces, m.faces)
    for a, b in zip(back.feature_banks, m.feature_banks):
        assert a.shape == b.shape and np.allclose(a, b, atol=1e-6)
        if len(a):
            assert np.allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)  # renormalized on load


def test_bank_file_layout(tmp_path):
    banks = [np.array([[1.0, 0.0]]), np.zeros((0, 2)), np.array([[0.0, 1.0], [0.6, 0.8]])]
    write_feature_banks(tmp_path / "b.nmfb", banks, 2)
    data = (tmp_path / "b.nmfb").read_bytes()
    assert data[:4] == b"NMFB" and struct.unpack_from("<III", data, 4) == (1, 3, 2)
    assert struct.unpack_from("<3I", data, 16) == (1, 0, 2)
    assert len(data) == 16 + 12 + 4 * 3 * 2
    got, dim = read_feature_banks(tmp_path / "b.nmfb")
    assert dim == 2 and [len(b) for b in got] == [1, 0, 2]


def test_vertex_count_mismatch_is_rejected(tmp_path, rng):
    m = random_neural_mesh(rng, 4)
    write_ply(tmp_path / "m.ply", m.vertices[:3])
    write_feature_banks(tmp_path / "m.nmfb", m.feature_banks, m.feature_dim)
    with pytest.raises(FormatError, match="mismatch"):
        load_neural_mesh(tmp_path / "m.ply", tmp_path / "m.nmfb")


def test_truncated_bank_file_is_rejected(tmp_path, rng):
    m = random_neural_mesh(rng, 4, empty_fraction=0.0)
    write_feature_banks(tmp_path / "b.nmfb", m.feature_banks, m.feature_dim)
    data = (tmp_path / "b.nmfb").read_bytes()
    (tmp_path / "b.nmfb").write_bytes(data[:-4])
    with pytest.raises(FormatError, match="length"):
        read_feature_banks(tmp_path / "b.nmfb")


def test_bad_feature_norms_are_rejected_on_load(tmp_path):
    write_ply(tmp_path / "m.ply", np.eye(3))
    write_feature_banks(tmp_path / "m.nmfb", [np.array([[0.5, 0.0]]), np.zeros((0, 2)), np.zeros((0, 2))], 2)
    with pytest.raises(FormatError, match="norm"):
        load_neural_mesh(tmp_path / "m.ply", tmp_path / "m.nmfb")


@pytest.mark.parametrize("text,match", [
    ("nope\n", "not a PLY"),
    ("ply\nformat binary_little_endian 1.0\nend_header\n", "ASCII"),
    ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
     "end_header\n0 0 0\n", "truncated"),
    ("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
     "element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n4 0 1 2 0\n",
     "non-triangle"),
    ("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
     "element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 5\n",
     "out of range"),
])
def test_malformed_ply_is_rejected(tmp_path, text, match):
    (tmp_path / "m.ply").write_text(text)
    with pytest.raises(FormatError, match=match):
        read_ply(tmp_path / "m.ply")


def test_ply_extra_properties_are_ignored(tmp_path):
    (tmp_path / "m.ply").write_text(
        "ply\nformat ascii 1.0\ncomment hi\nelement vertex 1\nproperty float nx\nproperty float x\n"
        "property float y\nproperty float z\nend_header\n9 1 2 3\n")
    v, f = read_ply(tmp_path / "m.ply")
    assert v.tolist() == [[1, 2, 3]] and len(f) == 0


def test_feature_grid_round_trip_and_errors(tmp_path, rng):
    g = rng.normal(size=(4, 5, 3)).astype(np.float32)
    write_feature_grid(tmp_path / "g.nmfg", g)
    assert np.array_equal(read_feature_grid(tmp_path / "g.nmfg"), g)
    (tmp_path / "bad.nmfg").write_bytes(b"NMFG" + struct.pack("<III", 4, 5, 3))
    with pytest.raises(FormatError):
        read_feature_grid(tmp_path / "bad.nmfg")


def test_pgm_round_trip_and_ascii_variant(tmp_path, rng):
    m = rng.random((7, 9)) > 0.5
    write_pgm(tmp_path / "m.pgm", m)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), m)
    (tmp_path / "a.pgm").write_text("P2\n# comment\n3 1\n255\n0 7 0\n")
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[False, True, False]]
    (tmp_path / "x.pgm").write_text("P6\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "x.pgm")


def test_json_output_is_canonical(tmp_path):
    dump_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
    assert (tmp_path / "a.json").read_text() == '{\n  "a": [\n    1.5,\n    2\n  ],\n  "b": 1\n}\n'
