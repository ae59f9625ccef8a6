"""Smoke test for the pyautoloss extension module.

Build with `maturin develop -m crates/python/Cargo.toml`, or copy
target/release/libpyautoloss.so to pyautoloss.so on PYTHONPATH.
"""

import math

import pyautoloss as al


def main():
    expr = al.Expr("mul(neg(log(yhat)),mul(y,inv(N)))")
    assert expr.is_legal()
    assert expr.size == 8
    assert expr.canonical() == al.Expr("mul(mul(inv(N),y),neg(log(yhat)))").canonical()
    assert not al.Expr("square(add(yhat,neg(y)))").is_legal()
    try:
        al.Expr("add(yhat,")
    except ValueError:
        pass
    else:
        raise AssertionError("bad expression parsed")

    assert al.verify_loss("add(yhat,add(y,N))")["verdict"] == "accept"
    zero = al.verify_loss("mul(mul(add(yhat,neg(yhat)),y),N)")
    assert zero["verdict"] == "reject(zero-gradient)", zero
    assert len(zero["probe_values"]) == 4

    assert math.isclose(al.uct_score(0.7, 8, 2, 1.0), 1.7197, abs_tol=1e-4)
    assert "balanced-softmax" in al.presets() and "A" in al.presets()

    ds = al.Dataset.sbm(rho=10, seed=1)
    assert ds.train_class_counts == [20, 20, 2]
    result = al.train(ds, "CE", epochs=100, hidden=32, seed=0)
    assert result["completed"]
    assert 0.0 <= result["test"]["balanced_accuracy"] <= 1.0

    top = al.search(episodes=100, seed=3)
    assert top and top[0][1] > 0.5
    print("best toy-oracle loss:", top[0])
    print("CE test bAcc: %.4f" % result["test"]["balanced_accuracy"])
    print("smoke test passed")


if __name__ == "__main__":
    main()
