"""Smoke test for the pystlasso extension.

Build and stage the module first:

    cargo build --release -p pystlasso
    cp target/release/libpystlasso.so python/pystlasso.so

then run `python3 python/smoke_test.py` from the repository root.
"""
import json
import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import pystlasso as st


def main():
    panel, truth = st.simulate(side=2, t=120, seed=3)
    assert (panel.n, panel.t, panel.k) == (4, 120, 3), panel
    assert truth.stationarity()["stationary"]

    ll = truth.log_likelihood(panel)
    assert math.isfinite(ll)
    eps = truth.residuals(panel)
    assert len(eps) == 4 and len(eps[0]) == 119

    fit = st.fit(panel, lambda1=0.1, lambda2=0.1, lambda3=0.1)
    assert fit.converged
    assert fit.params.stationarity()["stationary"]
    assert all(abs(b - t) < 0.5 for b, t in zip(fit.params.beta, truth.beta)), fit.params.beta

    doc = json.loads(fit.to_json())
    assert doc["schema_version"] == 1 and doc["n"] == 4
    again = st.FitResult.from_json(fit.to_json())
    assert again.params.w == fit.params.w

    best, cv_fit = st.cross_validate(panel, [0.01, 1.0], [0.1], [0.1], n_blocks=4)
    assert best[0] in (0.01, 1.0)

    rows = st.infer(panel, fit)
    assert rows and {"parameter", "se", "z"} <= rows[0].keys()

    table = st.compare(panel, fit)
    assert [r["model"] for r in table] == ["Spatiotemporal", "VAR(1)", "OLS"]

    try:
        st.fit(panel, lambda1=-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative penalty accepted")

    print("pystlasso smoke test passed:", repr(fit), "selected", best)


if __name__ == "__main__":
    main()
