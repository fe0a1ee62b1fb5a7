"""Smoke test for the compiled `sfp` module.

Build first with `pip install --no-build-isolation -e crates/python`.
"""

import json

import sfp


def main():
    config = json.dumps({"seed": 3, "bootstrap": 10, "dataset": {"synthetic": {"n": 800}}})

    x, y, z = sfp.simulate(config)
    assert len(x) == len(y) == len(z) == 800
    assert len(x[0]) == 10 and set(z) <= {0, 1}

    assert sfp.wasserstein1([0.0, 1.0], [1.0, 2.0]) == 1.0
    assert sfp.dcov2([[0.0], [0.0], [1.0], [1.0]], [0, 0, 1, 1]) > 0.0
    assert sfp.dcov2([[0.5], [0.5], [0.5], [0.5]], [0, 0, 1, 1]) == 0.0
    probs = [[0.2, 0.8], [0.6, 0.4], [0.2, 0.8], [0.6, 0.4]]
    assert abs(sfp.dp_gap(probs, [0, 0, 1, 1])) < 1e-12
    assert sfp.mcdp(probs, [0, 1, 0, 1]) > 0.0

    report = json.loads(sfp.sweep(config))
    assert report["schema_version"] == 1
    levels = [p["m"] for p in report["points"]]
    assert levels == list(range(len(levels)))
    assert report["selected_m"] in levels

    try:
        sfp.sweep(json.dumps({"bogus": 1}))
    except ValueError as err:
        assert "bogus" in str(err)
    else:
        raise AssertionError("unknown key accepted")

    print(f"ok: {len(levels)} levels, selected m = {report['selected_m']}")


if __name__ == "__main__":
    main()
