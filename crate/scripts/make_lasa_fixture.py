#!/usr/bin/env python3
"""Generate the small synthetic LASA-format fixture used by the test suite
when the real dataset is not available.

    python3 scripts/make_lasa_fixture.py [out dir]

Three planar motions, seven trajectories each, written as
<out>/<Motion>/demo_<i>.csv with columns t,x,y,vx,vy (same layout as
lasa_mat_to_csv.py). Every trajectory ends exactly at the origin and comes to
rest there; velocities are exact derivatives of the generating curve.
"""
import pathlib
import sys

import numpy as np

SAMPLES = 300
DURATION = 3.0
SEED = 20240611


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def arc(u, start, p):
    return np.stack([(1 - ui) * rot(p * (1 - ui)) @ start for ui in u])


def hook(u, start, p):
    return np.stack([(1 - ui) ** 1.5 * rot(p * (1 - ui) ** 2) @ start for ui in u])


def wave(u, start, p):
    n = np.array([-start[1], start[0]]) / np.linalg.norm(start)
    return np.stack([(1 - ui) * (start + p * np.sin(2 * np.pi * ui) * n) for ui in u])


MOTIONS = {
    "Arc": (arc, np.array([-40.0, 10.0]), 1.2),
    "Hook": (hook, np.array([-30.0, -30.0]), -2.0),
    "Wave": (wave, np.array([-35.0, 25.0]), 8.0),
}


def main() -> None:
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/lasa_mini")
    rng = np.random.default_rng(SEED)
    t = np.linspace(0.0, DURATION, SAMPLES)
    tau = t / DURATION
    u = tau * tau * (3 - 2 * tau)
    du = 6 * tau * (1 - tau) / DURATION
    h = 1e-6
    for name, (curve, start, p) in MOTIONS.items():
        (out / name).mkdir(parents=True, exist_ok=True)
        for i in range(1, 8):
            s = start + rng.normal(scale=3.0, size=2)
            q = p * (1 + 0.1 * rng.normal())
            x = curve(u, s, q)
            x[-1] = 0.0
            dxdu = (curve(np.minimum(u + h, 1), s, q) - curve(np.maximum(u - h, 0), s, q)) / (
                np.minimum(u + h, 1) - np.maximum(u - h, 0)
            )[:, None]
            v = dxdu * du[:, None]
            rows = ["t,x,y,vx,vy"] + [
                ",".join(f"{float(c):.10g}" for c in (ti, xi[0], xi[1], vi[0], vi[1])) for ti, xi, vi in zip(t, x, v)
            ]
            (out / name / f"demo_{i}.csv").write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
