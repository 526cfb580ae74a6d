#!/usr/bin/env python3
"""Convert the LASA handwriting dataset (.mat files) into the plain CSV layout
read by `motionfield bench-lasa`.

    python3 scripts/lasa_mat_to_csv.py <DataSet dir with *.mat> <out dir>

Writes <out>/<Motion>/demo_<i>.csv (i = 1..7) with columns t,x,y,vx,vy.
"""
import pathlib
import sys

import scipy.io


def main() -> None:
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    src = pathlib.Path(sys.argv[1])
    out = pathlib.Path(sys.argv[2])
    mats = sorted(src.glob("*.mat"))
    if not mats:
        sys.exit(f"no .mat files under {src}")
    for mat in mats:
        demos = scipy.io.loadmat(mat)["demos"]
        motion_dir = out / mat.stem
        motion_dir.mkdir(parents=True, exist_ok=True)
        for i in range(demos.shape[1]):
            demo = demos[0, i][0, 0]
            pos, vel, t = demo["pos"], demo["vel"], demo["t"].ravel()
            rows = ["t,x,y,vx,vy"]
            for j in range(pos.shape[1]):
                rows.append(
                    f"{t[j]:.9g},{pos[0, j]:.9g},{pos[1, j]:.9g},"
                    f"{vel[0, j]:.9g},{vel[1, j]:.9g}"
                )
            (motion_dir / f"demo_{i + 1}.csv").write_text("\n".join(rows) + "\n")
        print(f"{mat.stem}: {demos.shape[1]} demos")


if __name__ == "__main__":
    main()
