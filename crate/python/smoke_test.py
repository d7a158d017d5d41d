"""Smoke test for the compiled `evblur` extension module."""

import json
import math
import tempfile
from pathlib import Path

import evblur


def main():
    m = evblur.se3_exp([0.0, 0.0, 0.0, 1.0, 2.0, 3.0])
    assert m == [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 3.0], m
    xi = evblur.se3_log(evblur.se3_exp([0.1, 0.2, 0.3, 1.0, 0.0, 0.0]))
    assert all(abs(a - b) < 1e-8 for a, b in zip(xi, [0.1, 0.2, 0.3, 1.0, 0.0, 0.0])), xi
    assert evblur.psnr([0.5] * 12, [0.5] * 12, 2, 2) == math.inf

    with tempfile.TemporaryDirectory() as tmp:
        ds, run = Path(tmp, "ds"), Path(tmp, "run")
        summary = json.loads(evblur.simulate(str(ds), views=3, novel_views=1, res=12))
        assert summary["views"] == 3
        json.loads(evblur.train(str(ds), str(run), p=3, iters=3, samples=6, batch=16, hidden_width=8))
        report = json.loads(evblur.evaluate(str(run), str(ds)))
        assert len(report["deblurring_views"]) == 3
        try:
            evblur.train(str(ds), str(run), mode="spline")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown mode accepted")
    print("python smoke test ok")


if __name__ == "__main__":
    main()
