"""Smoke test for the `rmtr` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/py`
or `maturin develop -m crates/py/Cargo.toml`.
"""

import math
import os
import tempfile

import rmtr


def check_network():
    net = rmtr.Network(2, 4, width=3, blocks=2, beta1=1e-3, beta2=1e-3)
    x, c = rmtr.generate("smiley", 12, seed=5)
    theta = net.init(seed=1)
    assert len(theta) == net.num_params

    loss = net.loss(theta, x, c)
    grad = net.gradient(theta, x, c)
    eps = 1e-6
    for i in (0, len(theta) // 2, len(theta) - 1):
        up = list(theta)
        down = list(theta)
        up[i] += eps
        down[i] -= eps
        fd = (net.loss(up, x, c) - net.loss(down, x, c)) / (2 * eps)
        assert abs(fd - grad[i]) < 1e-6 * (1 + abs(grad[i])), (i, fd, grad[i])

    probs = net.predict(theta, x)
    assert all(abs(sum(p) - 1.0) < 1e-12 for p in probs)
    assert math.isfinite(loss)


def check_data_and_control():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "analytic.csv")
        rmtr.write_dataset("analytic", 20, path, seed=3)
        x, c = rmtr.read_dataset(path)
        assert len(x) == 20 and len(x[0]) == 3 and len(c[0]) == 2
        assert os.path.exists(path + ".meta.json")

    batches = rmtr.minibatches(1000, 200, 40, seed=0)
    assert len(batches) == 6
    assert set(batches[0][-40:]) == set(batches[1][:40])

    assert rmtr.gcontrol(-0.2, 250, 5000) == (False, True, 500, 2)
    assert rmtr.gcontrol(0.05, 250, 5000) == (False, False, 250, 1)
    assert rmtr.gcontrol(0.5, 250, 5000) == (True, False, 250, 1)

    assert rmtr.work_units(100, 2, [(2, 100, 1), (1, 100, 1)]) == 1.5


def check_training():
    config = """
[data]
generator = "smiley"
n = 700

[network]
width = 6
blocks = 2

[solver]
solver = "RMTR_F"
levels = 2

[stop]
work_max = 10.0
"""
    run = rmtr.train(config, seed=3)
    assert run["header"]["solver"] == "RMTR-F"
    assert run["header"]["schema_version"] == rmtr.LOG_SCHEMA_VERSION
    rows = run["rows"]
    assert rows and all(a["work"] <= b["work"] for a, b in zip(rows, rows[1:]))
    assert run["summary"]["termination"] in ("converged", "budget")
    assert run == {**rmtr.train(config, seed=3), "wall_time_s": run["wall_time_s"]}

    summary = rmtr.replicate(config, [1, 2])
    assert summary["succeeded"] + summary["failed"] == 2
    assert "[solver]" in rmtr.default_config()


if __name__ == "__main__":
    check_network()
    check_data_and_control()
    check_training()
    print("rmtr smoke test passed")
