"""Smoke test for the Python bindings.

Build and install first, e.g.
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/stabxform-*.whl
"""

import math
import os
import sys
import tempfile

import stabxform as sx


def main() -> int:
    names = [row[0] for row in sx.list_catalog()]
    assert "halfspeed_1d" in names and "iss_scalar" in names, names

    # x' = -x/2, V = x^2, gamma = identity: T(x) = sign(x) x^2
    cert = sx.Certificate.catalog("halfspeed_1d")
    change = sx.build_change(cert, "identity", 1.0)
    for x in (-3.0, -0.1, 0.5, 2.0):
        y = change.forward([x])[0]
        assert abs(y - math.copysign(x * x, x)) <= 1e-9 * (1 + x * x), (x, y)
        assert abs(change.inverse([y])[0] - x) <= 1e-9 * (1 + abs(x)), x
    assert abs(change.jacobian([2.0])[0][0] - 4.0) < 1e-6

    system = sx.System.catalog("halfspeed_1d")
    res = sx.run_pipeline("ugas2uges", system, cert, gamma="identity", signals=10)
    assert res.passed, res.report
    assert any(s.startswith("UGES: PASS") for s in res.summaries), res.summaries
    times, states = res.trajectories()[0]
    assert len(times) == len(states) and times[0] == 0.0

    # the same bound at rate 2 must fail
    bad = sx.run_pipeline("ugas2uges", system, cert, gamma="identity", signals=4, lam=2.0)
    assert not bad.passed

    # inline ISS system through the H-infinity chain
    iss = sx.System.inline(["-x1 + d1"], inputs=1, disturbance_radius=1.0, name="iss")
    iss_cert = sx.Certificate.inline("x1^2/2", 1, decay="s^2/2", iss_gain="2*s", lower="s^2/2", upper="s^2/2")
    assert iss.rhs([2.0], [0.5]) == [-1.5]
    assert iss_cert.gradient([3.0]) == [3.0]
    hinf = sx.run_pipeline("ises2hinf", iss, iss_cert, signals=10)
    assert hinf.passed, hinf.report

    try:
        sx.run_pipeline("iss2ises", system, cert)
    except ValueError:
        pass
    else:
        raise AssertionError("iss2ises without a gain should be rejected")

    times, states = iss.simulate([1.0], 2.0, amplitude=0.5, seed=3)
    assert times[-1] == 2.0 and len(states) == len(times)

    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "h.toml")
        with open(cfg, "w") as f:
            f.write('pipeline = "ugas2uges"\n[system]\ncatalog = "halfspeed_1d"\n[overrides]\ngamma = "identity"\n')
        code = sx.run_config(cfg, out=os.path.join(tmp, "out"), signals=5)
        assert code == sx.EXIT_PASS, code
        with open(os.path.join(tmp, "out", "report.txt")) as f:
            assert "UGES: PASS" in f.read()

    print("python smoke test: OK")
    return 0


if __name__ == "__main__":
    sys.exit(main())
