"""Smoke test for the sddemp extension: build, simulate, solve, check."""

import math

import sddemp


def main():
    assert "lq-scalar" in sddemp.scenarios()
    assert sddemp.scenario_defaults("lq-scalar")["delta"] == 0.25

    t, vals = sddemp.lq_curvature(0.0, 0.0, 1.0, 2.0, 1.0, 1.0, 0.25, 1e-3)
    assert abs(vals[500] - 2.0) < 1e-6 and abs(vals[900] - 1.1) < 1e-6

    sc = sddemp.Scenario("lq-scalar", steps=100)
    assert sc.dims == (1, 1, 1) and sc.has_lq_form
    sim = sc.simulate(seed=42, paths=400)
    mean, se = sim.cost()
    assert math.isfinite(mean) and se >= 0.0

    adj = sim.first_adjoint()
    assert adj["mode"] == "deterministic" and len(adj["p"]) == 101

    curly = sim.curly_p()
    assert len(curly) == 101 and abs(curly[50][0][0] - 2.0) < 0.05

    d = sim.duality(0.25, 0.05)
    assert abs(d["difference"]) <= 3.0 * d["stderr"] + 1e-12

    pc = sddemp.Scenario("pointwise-cost", steps=100).simulate(seed=1, paths=200)
    scan = pc.scan()
    assert scan["passed"] and scan["delayed_exercised"]

    try:
        sddemp.Scenario("lq-scalar", {"delta": 1.5})
    except sddemp.SddeMpError as e:
        assert "delta" in str(e)
    else:
        raise AssertionError("out-of-range delta accepted")

    print("sddemp smoke test passed: J = %.4f +/- %.4f, P(0.5) = %.4f" % (mean, se, curly[50][0][0]))


if __name__ == "__main__":
    main()
