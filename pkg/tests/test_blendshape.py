import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avbf.blendshape import (
    NONSPEECH,
    SPEECH,
    BehindCameraError,
    BlendshapeModel,
    Camera,
    HeadPose,
    apply_pose,
    evaluate_mesh,
    load_model,
    merge_coefficients,
    model_from_dict,
    model_to_dict,
    partition_coefficients,
    project,
    read_obj,
    rotation_matrix,
    rotation_vector,
    save_model,
    write_obj,
)


def random_model(rng, V=10, K=3, roles=None):
    roles = roles or tuple(SPEECH if k % 2 == 0 else NONSPEECH for k in range(K))
    return BlendshapeModel(rng.normal(size=(V, 3)), rng.normal(size=(3 * V, K)), roles, np.arange(min(V, 4)))


finite = st.floats(-5, 5, allow_nan=False)


def test_zero_coefficients_give_neutral():
    m = random_model(np.random.default_rng(0))
    np.testing.assert_array_equal(evaluate_mesh(m, np.zeros(3)), m.b0)


def test_unit_coefficient_adds_one_column():
    m = random_model(np.random.default_rng(1))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        np.testing.assert_allclose(evaluate_mesh(m, e), m.b0 + m.B[:, k].reshape(-1, 3))


def test_evaluate_mesh_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    m = random_model(rng)
    x = rng.uniform(size=3)
    expect = np.empty((10, 3))
    for v in range(10):
        for c in range(3):
            expect[v, c] = m.b0[v, c] + sum(m.B[3 * v + c, k] * x[k] for k in range(3))
    np.testing.assert_allclose(evaluate_mesh(m, x), expect, rtol=1e-12, atol=1e-12)


def test_evaluate_mesh_rejects_wrong_length():
    m = random_model(np.random.default_rng(3))
    with pytest.raises(ValueError):
        evaluate_mesh(m, np.zeros(4))


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_displacement_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    x, y = rng.uniform(size=3) * 0.5, rng.uniform(size=3) * 0.5
    d = lambda z: evaluate_mesh(m, z) - m.b0  # noqa: E731
    np.testing.assert_allclose(d(a * x + b * y), a * d(x) + b * d(y), atol=1e-10)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(b0=np.zeros((3, 3)), B=np.zeros((9, 2))),
        dict(b0=np.zeros((5, 3)), B=np.zeros((14, 2))),
        dict(b0=np.zeros((5, 3)), B=np.zeros((15, 2)), roles=(SPEECH,)),
        dict(b0=np.zeros((5, 3)), B=np.zeros((15, 2)), roles=(SPEECH, SPEECH)),
        dict(b0=np.zeros((5, 3)), B=np.zeros((15, 2)), landmark_indices=[5]),
        dict(b0=np.zeros((5, 3)), B=np.zeros((15, 2)), landmark_indices=[1, 1]),
    ],
)
def test_model_invariants_rejected(kwargs):
    base = dict(b0=np.zeros((5, 3)), B=np.zeros((15, 2)), roles=(SPEECH, NONSPEECH), landmark_indices=[0, 1])
    base.update(kwargs)
    with pytest.raises(ValueError):
        BlendshapeModel(**base)


def test_single_shape_model_may_be_all_speech():
    BlendshapeModel(np.zeros((4, 3)), np.zeros((12, 1)), (SPEECH,), [0])


def test_identity_pose():
    v = np.random.default_rng(4).normal(size=(7, 3))
    np.testing.assert_array_equal(apply_pose(v, HeadPose()), v)


def test_quarter_turn_about_z():
    out = apply_pose(np.array([[1.0, 0, 0]]), HeadPose(np.array([0, 0, np.pi / 2])))
    np.testing.assert_allclose(out[0], [0, 1, 0], atol=1e-12)


@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=finite),
       st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_pose_preserves_distances(rot, trans, seed):
    v = np.random.default_rng(seed).normal(size=(12, 3))
    w = apply_pose(v, HeadPose(rot, trans))
    d0 = np.linalg.norm(v[:, None] - v[None], axis=-1)
    d1 = np.linalg.norm(w[:, None] - w[None], axis=-1)
    np.testing.assert_allclose(d1, d0, rtol=1e-9, atol=1e-9)


@given(arrays(np.float64, 3, elements=st.floats(-1.5, 1.5)))
def test_rotation_vector_inverts_rodrigues(r):
    if np.linalg.norm(r) >= np.pi - 1e-3:
        return
    R = rotation_matrix(r)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(rotation_vector(R), r, atol=1e-8)


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        HeadPose(np.array([np.nan, 0, 0]))
    with pytest.raises(ValueError):
        apply_pose(np.array([[np.inf, 0, 0]]), HeadPose())


def test_projection_on_axis_hits_principal_point():
    cam = Camera((100.0, 120.0), (64.0, 50.0), (128, 100))
    for z in (0.1, 1.0, 37.0):
        np.testing.assert_allclose(project(np.array([0, 0, z]), cam), [64, 50])


def test_projection_hand_value():
    cam = Camera((100.0, 100.0), (64.0, 64.0), (128, 128))
    np.testing.assert_allclose(project(np.array([1.0, 0, 2]), cam), [114, 64])


def test_projection_behind_camera():
    cam = Camera((100.0, 100.0), (64.0, 64.0), (128, 128))
    with pytest.raises(BehindCameraError):
        project(np.array([0, 0, -1.0]), cam)
    with pytest.raises(BehindCameraError):
        project(np.array([0, 0, 0.0]), cam)


def test_camera_invariants():
    with pytest.raises(ValueError):
        Camera((0.0, 1.0), (1.0, 1.0), (2, 2))
    with pytest.raises(ValueError):
        Camera((1.0, 1.0), (3.0, 1.0), (2, 2))


def test_partition_two_shapes():
    m = BlendshapeModel(np.zeros((4, 3)), np.zeros((12, 2)), (SPEECH, NONSPEECH), [0])
    a, b = partition_coefficients(m, np.array([0.3, 0.7]))
    assert a.tolist() == [0.3] and b.tolist() == [0.7]


def test_partition_all_speech():
    m = BlendshapeModel(np.zeros((4, 3)), np.zeros((12, 1)), (SPEECH,), [0])
    a, b = partition_coefficients(m, np.array([0.4]))
    assert a.tolist() == [0.4] and b.size == 0


@given(st.lists(st.booleans(), min_size=2, max_size=12), st.integers(0, 1000))
def test_partition_merge_round_trip(flags, seed):
    if all(flags) or not any(flags):
        return
    roles = tuple(SPEECH if f else NONSPEECH for f in flags)
    K = len(roles)
    m = BlendshapeModel(np.zeros((4, 3)), np.zeros((12, K)), roles, [0])
    x = np.random.default_rng(seed).uniform(size=K)
    np.testing.assert_array_equal(merge_coefficients(m, *partition_coefficients(m, x)), x)


def test_model_file_round_trip(tmp_path):
    m = random_model(np.random.default_rng(5))
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(back.b0, m.b0)
    np.testing.assert_array_equal(back.B, m.B)
    assert back.roles == m.roles
    np.testing.assert_array_equal(back.landmark_indices, m.landmark_indices)
    assert set(model_to_dict(m)) >= {"name", "vertices", "blendshapes", "landmark_indices"}
    assert model_from_dict(model_to_dict(m)).shape_names == m.shape_names


def test_obj_round_trip(tmp_path):
    v = np.random.default_rng(6).normal(size=(5, 3))
    f = np.array([[0, 1, 2], [2, 3, 4]])
    write_obj(tmp_path / "a.obj", v, f)
    v2, f2 = read_obj(tmp_path / "a.obj")
    np.testing.assert_allclose(v2, v, atol=1e-6)
    np.testing.assert_array_equal(f2, f)
