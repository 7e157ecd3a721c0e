import json

import numpy as np
import pytest

from shapediff.ddk import DiffusionSchedule, Mode, run_trajectory
from shapediff.regularizers import RegularizerWeights
from shapediff.shape import Shape, icosphere
from shapediff.shapeio import (ConfigError, FormatError, TrajectoryIOError, load_config,
                               load_shape, load_trajectory, profile_defaults, save_shape,
                               save_trajectory)
from shapediff.synthetic import ellipsoid_mesh, random_smooth_cloud

CUBE_OBJ = """# unit cube
v 0 0 0
v 0 0 1
v 0 1 0
v 0 1 1
v 1 0 0
v 1 0 1
v 1 1 0
v 1 1 1
f 1 2 4 3
f 5 7 8 6
f 1 5 6 2
f 3 4 8 7
f 1 3 7 5
f 2 6 8 4
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_cube_obj(tmp_path):
    s = load_shape(write(tmp_path, "cube.obj", CUBE_OBJ))
    assert s.n == 8 and len(s.faces) == 12 and len(s.edges) == 18


def test_obj_negative_indices_and_slashes(tmp_path):
    s = load_shape(write(tmp_path, "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf -3/1 -2/1 -1/1\n"))
    assert s.faces.tolist() == [[0, 1, 2]]


def test_obj_lines_are_edges(tmp_path):
    s = load_shape(write(tmp_path, "l.obj", "v 0 0 0\nv 1 0 0\nv 2 0 0\nl 1 2 3\n"))
    assert s.faces is None and s.edges.tolist() == [[0, 1], [1, 2]]


def test_obj_normals(tmp_path):
    s = load_shape(write(tmp_path, "n.obj", "v 0 0 0\nv 1 0 0\nvn 0 0 2\nvn 0 3 0\n"))
    assert np.allclose(s.normals, [[0, 0, 1], [0, 1, 0]])


@pytest.mark.parametrize("text,line", [
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 1\nv 0 0 1\nv 1 0 1\nv 0 1 1\nv 1 1 0\nf 1 2 9\n", 9),
    ("v 0 0 0\nv 1 zero 0\n", 2),
    ("v 0 0 0\nq 1\n", 2),
    ("v 0 0\n", 1),
    ("v 0 0 0\nv 1 0 0\nf 1 2\n", 3),
])
def test_obj_errors_name_the_line(tmp_path, text, line):
    p = write(tmp_path, "bad.obj", text)
    with pytest.raises(FormatError) as e:
        load_shape(p)
    assert e.value.line == line
    assert f"bad.obj:{line}" in str(e.value)


def test_unknown_extension(tmp_path):
    with pytest.raises(FormatError):
        load_shape(write(tmp_path, "a.stl", ""))
    with pytest.raises(FormatError):
        save_shape(Shape(np.zeros((1, 3))), tmp_path / "a.off")


def test_ply_polygon_fan(tmp_path):
    text = ("ply\nformat ascii 1.0\ncomment hi\nelement vertex 4\nproperty float x\nproperty float y\n"
            "property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n0 0 0 1\n1 0 0 1\n1 1 0 1\n0 1 0 1\n4 0 1 2 3\n")
    s = load_shape(write(tmp_path, "q.ply", text))
    assert s.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_ply_errors(tmp_path):
    with pytest.raises(FormatError):
        load_shape(write(tmp_path, "b.ply", "ply\nformat binary_little_endian 1.0\nend_header\n"))
    bad_index = ("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
                 "element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n")
    with pytest.raises(FormatError) as e:
        load_shape(write(tmp_path, "c.ply", bad_index))
    assert e.value.line == 13


def test_xyz_errors(tmp_path):
    with pytest.raises(FormatError) as e:
        load_shape(write(tmp_path, "a.xyz", "0 0 0\n1 2\n"))
    assert e.value.line == 2


@pytest.mark.parametrize("ext", [".obj", ".ply", ".xyz"])
def test_roundtrip_random_cloud(tmp_path, rng, ext):
    s = random_smooth_cloud(200, rng)
    save_shape(s, tmp_path / f"a{ext}")
    t = load_shape(tmp_path / f"a{ext}")
    assert np.abs(t.vertices - s.vertices).max() < 1e-6


@pytest.mark.parametrize("ext", [".obj", ".ply"])
def test_roundtrip_mesh_connectivity(tmp_path, ext):
    s = ellipsoid_mesh(level=2)
    save_shape(s, tmp_path / f"m{ext}")
    t = load_shape(tmp_path / f"m{ext}")
    assert np.array_equal(t.faces, s.faces) and np.array_equal(t.edges, s.edges)
    assert np.abs(t.vertices - s.vertices).max() < 1e-6


def test_xyz_refuses_connectivity(tmp_path):
    with pytest.raises(Exception):
        save_shape(icosphere(0), tmp_path / "a.xyz")


def test_writers_are_deterministic(tmp_path, rng):
    s = icosphere(1)
    save_shape(s, tmp_path / "a.obj")
    save_shape(s, tmp_path / "b.obj")
    assert (tmp_path / "a.obj").read_bytes() == (tmp_path / "b.obj").read_bytes()


# -- trajectories ------------------------------------------------------------

@pytest.fixture
def mesh_traj():
    sched = DiffusionSchedule.constant(10, 0.01, interval_i=5, mode=Mode.TEMPLATE_DESCENT, seed=3)
    return run_trajectory(ellipsoid_mesh(level=1), icosphere(1), RegularizerWeights.mesh(), sched)


@pytest.fixture
def cloud_traj():
    sched = DiffusionSchedule.constant(10, 0.05, interval_i=2, seed=1)
    return run_trajectory(random_smooth_cloud(40, np.random.default_rng(0)), None, RegularizerWeights.pcl(), sched)


@pytest.mark.parametrize("which", ["mesh_traj", "cloud_traj"])
def test_trajectory_roundtrip_bit_equal(tmp_path, request, which):
    tr = request.getfixturevalue(which)
    save_trajectory(tr, tmp_path / "t")
    files = sorted(p.name for p in (tmp_path / "t").iterdir())
    assert len([f for f in files if f.startswith("frame_")]) == 11
    assert not any(f.endswith(".tmp") for f in files)
    back = load_trajectory(tmp_path / "t")
    for a, b in zip(tr.frames, back.frames):
        assert np.array_equal(a.vertices, b.vertices)
        assert a.same_connectivity(b)
    assert back.schedule.T == 10 and back.schedule.interval_i == tr.schedule.interval_i
    assert back.schedule.mode is tr.schedule.mode and back.schedule.seed == tr.schedule.seed
    assert [e.total for e in back.energies] == [e.total for e in tr.energies]


def test_trajectory_manifest_is_deterministic(tmp_path, cloud_traj):
    save_trajectory(cloud_traj, tmp_path / "a")
    save_trajectory(cloud_traj, tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["T"] == 10 and len(m["frames"]) == 11 and m["beta_summary"]["max"] == 0.05


def test_trajectory_missing_frame(tmp_path, cloud_traj):
    save_trajectory(cloud_traj, tmp_path / "t")
    (tmp_path / "t" / "frame_0004.xyz").unlink()
    with pytest.raises(TrajectoryIOError, match="frame 4"):
        load_trajectory(tmp_path / "t")


def test_trajectory_checksum_mismatch(tmp_path, cloud_traj):
    save_trajectory(cloud_traj, tmp_path / "t")
    p = tmp_path / "t" / "frame_0002.xyz"
    text = p.read_text()
    p.write_text(text[:-2] + ("1" if text[-2] != "1" else "2") + "\n")
    with pytest.raises(TrajectoryIOError, match="checksum"):
        load_trajectory(tmp_path / "t")


def test_trajectory_missing_manifest(tmp_path):
    (tmp_path / "t").mkdir()
    with pytest.raises(TrajectoryIOError):
        load_trajectory(tmp_path / "t")


# -- config ------------------------------------------------------------------

def test_mesh_profile_from_empty_file(tmp_path):
    c = load_config(write(tmp_path, "e.ini", ""), "mesh")
    d = c.diffusion
    assert (d.lambda_c, d.lambda_e, d.lambda_n, d.lambda_l, d.lambda_p) == (1.0, 0.8, 0.01, 0.15, 0.01)
    assert (d.steps, d.eta, d.beta) == (2000, 1.0, 0.05)


def test_face_profile():
    d = load_config(None, "face").diffusion
    assert (d.eta, d.beta, d.steps, d.interval) == (0.1, 0.01, 500, 1)


def test_pcl_profile():
    c = load_config(None, "pcl")
    d = c.diffusion
    assert (d.steps, d.lambda_c, d.lambda_p, d.lambda_e, d.lambda_n, d.lambda_l) == (500, 1.0, 0.01, 0, 0, 0)
    a = c.average_shape
    assert (a.npoints, a.steps, a.lambda_c, a.lambda_p, a.eta) == (5000, 500, 1.0, 0.01, 1.0)


def test_training_defaults_every_profile():
    for p in ("pcl", "mesh", "face"):
        t = load_config(None, p).training
        assert (t.iterations, t.batch_size, t.lr, t.weight_decay, t.lr_schedule) == (100_000, 32, 2e-4, 1e-6, "cosine")


def test_file_values_and_overrides(tmp_path):
    p = write(tmp_path, "c.ini", "[run]\nprofile = mesh\nseed = 4\n[diffusion]\nsteps = 100\n")
    c = load_config(p, overrides=["diffusion.eta=0.5", "model.time_conditioning=false"])
    assert c.profile == "mesh" and c.seed == 4 and c.diffusion.steps == 100
    assert c.diffusion.eta == 0.5 and c.model.time_conditioning is False
    assert load_config(p, profile="face").profile == "face"


@pytest.mark.parametrize("text", [
    "[diffusion]\nlambda_x = 1\n",
    "[nope]\na = 1\n",
    "[run]\ncolour = red\n",
    "[diffusion]\nsteps = many\n",
    "[diffusion]\nsteps = 1.5\n",
    "[model]\ntime_conditioning = maybe\n",
    "[diffusion]\nmode = sideways\n",
    "[diffusion]\nsteps = 100\ninterval = 30\n",
    "[diffusion]\nlambda_e = -1\n",
    "[training]\nlr = 0\n",
])
def test_config_rejects(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "c.ini", text))


def test_unknown_profile():
    with pytest.raises(ConfigError):
        profile_defaults("cloud")


def test_bad_override():
    with pytest.raises(ConfigError):
        load_config(None, overrides=["steps=5"])


def test_config_echo_roundtrip(tmp_path):
    c = load_config(None, "face", overrides=["run.seed=9", "training.lr=0.001"])
    p = write(tmp_path, "echo.ini", c.to_ini())
    assert load_config(p) == c
