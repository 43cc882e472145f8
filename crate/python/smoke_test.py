"""Smoke test for the lesson_py extension.

Build and install first, e.g.::

    maturin develop --release -m crates/python/Cargo.toml
    python python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

import lesson_py as lp


def main() -> int:
    grid = lp.Grid.bundled("case14", seed=3)
    assert (grid.n_bus, grid.n_state, grid.n_meters) == (14, 13, 34), grid

    x, z = grid.sample_measurement(seed=1)
    attack = lp.Fdia.random(grid, "small", seed=2)
    z_a = [zi + ai for zi, ai in zip(z, attack.a)]
    before, after = grid.bdd_statistic(z), grid.bdd_statistic(z_a)
    assert abs(after - before) <= 1e-9 * (1 + before), (before, after)
    assert grid.detect(z)["dof"] == 21
    assert sum(attack.labels) > 0

    tau = lp.chi_square_threshold(21, 0.99)
    assert math.isclose(tau, 38.932, rel_tol=1e-4), tau

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        n_train, n_test = lp.generate_dataset(grid, str(data), 150, 50, seed=4)
        assert (n_train, n_test) == (200, 100)

        model = lp.Model.preset(grid, seed=5)
        report = model.fit(str(data), epochs=3, seed=5)
        assert len(report["loss_trace"]) == 3
        assert 0.0 <= report["row_accuracy"] <= report["meter_accuracy"] <= 1.0

        path = Path(tmp) / "model.json"
        model.save(str(path))
        again = lp.Model.load(str(path))
        assert again.logits(z_a) == model.logits(z_a)

        result = lp.run_attack(model, grid, z_a, attack, "lesson4", lr=0.01, max_iter=20)
        assert max(abs(v) for v in result["zeta"]) < 1.0
        assert all(result["zeta"][t] == 0.0 for t in attack.target_indices)

    try:
        lp.run_attack(model, grid, z_a, attack, "lesson9")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown variant accepted")

    try:
        grid.estimate([0.0] * 3)
    except lp.LessonError as e:
        assert str(e).startswith("shape"), e
    else:
        raise AssertionError("short measurement vector accepted")

    print("lesson_py smoke test passed:", grid, model)
    return 0


if __name__ == "__main__":
    sys.exit(main())
