import numpy as np
import pytest

from jumpbsde.blob import BlobError, load_networks, load_paths, read_blob, save_networks, save_paths, write_blob
from jumpbsde.paths import TimeGrid, simulate_forward
from jumpbsde.solver import SolverConfig, run_algorithm1


def test_generic_round_trip(tmp_path):
    p = tmp_path / "x.blob"
    arrs = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
    write_blob(p, "demo", {"k": 1}, arrs)
    meta, back = read_blob(p, "demo")
    assert meta["k"] == 1
    for k in arrs:
        assert back[k].dtype == arrs[k].dtype and np.array_equal(back[k], arrs[k])


def test_wrong_kind_and_garbage(tmp_path):
    p = tmp_path / "x.blob"
    write_blob(p, "demo", {}, {"a": np.zeros(2)})
    with pytest.raises(BlobError, match="expected"):
        read_blob(p, "paths")
    p.write_bytes(p.read_bytes() + b"\0\0")
    with pytest.raises(BlobError, match="trailing"):
        read_blob(p)
    q = tmp_path / "y.blob"
    q.write_bytes(b"not a blob at all")
    with pytest.raises(BlobError):
        read_blob(q)


def test_paths_round_trip(tmp_path, partition05, martingale):
    pb = simulate_forward(martingale, TimeGrid.uniform(1.0, 3), partition05, [1.0], 300, seed=4)
    save_paths(tmp_path / "p.blob", pb)
    back = load_paths(tmp_path / "p.blob")
    assert np.array_equal(back.X, pb.X) and back.seed == pb.seed
    assert np.array_equal(back.grid.nodes, pb.grid.nodes)
    for i in range(3):
        for a, b in zip(back.increments.step_jumps(i), pb.increments.step_jumps(i)):
            assert np.array_equal(a, b)


def test_networks_round_trip(tmp_path, partition05, martingale):
    grid = TimeGrid.uniform(1.0, 2)
    sol = run_algorithm1(martingale, grid, partition05, [1.0], SolverConfig(epochs=1, hidden=5), seed=0, batch=256)
    save_networks(tmp_path / "n.blob", sol.steps, {"fingerprint": sol.fingerprint()})
    steps, meta = load_networks(tmp_path / "n.blob")
    assert meta["fingerprint"] == sol.fingerprint()
    x = np.linspace(0, 2, 5)[:, None]
    for a, b in zip(steps, sol.steps):
        for na, nb in zip((a.net_Y, a.net_Z, a.net_U), (b.net_Y, b.net_Z, b.net_U)):
            assert all(np.array_equal(u, v) for u, v in zip(na.params(), nb.params()))
        assert np.array_equal(a.x_shift, b.x_shift) and np.array_equal(a.x_scale, b.x_scale)
