"""Compare the compiled and pure-Python ray-casting kernels.

    python benchmarks/bench_drr.py [--repeats 5] [--px 64]

Prints the median wall time per render for each backend and the largest
absolute difference between their images.
"""

import argparse
import statistics
import time

import numpy as np

from ambireg._kernels import native_kernels, python_kernels
from ambireg.drr import CameraConfig, _rays
from ambireg.geometry import Pose
from ambireg.phantom import PhantomSpec, make_phantom


def run(kern, vol, origin, dirs, step, s_max, repeats):
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = kern.ray_integrals(vol, origin, dirs, step, s_max)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--px", type=int, default=64)
    args = ap.parse_args(argv)

    v = make_phantom(PhantomSpec(seed=1))
    cam = CameraConfig(detector_px=(args.px, args.px), pixel_pitch_mm=4.0 * 64 / args.px)
    origin, dirs, s_max = _rays(v, Pose(3.0, -2.0, 5.0, 12.0, -7.0), cam)
    data = v.data.astype(np.float64)
    step = 0.5 * min(v.spacing)

    t_py, img_py = run(python_kernels, data, origin, dirs, step, s_max, args.repeats)
    print(f"python  {1e3 * t_py:9.2f} ms/render  ({args.px}x{args.px} px)")
    if native_kernels is None:
        print("native  unavailable (extension not built)")
        return
    t_c, img_c = run(native_kernels, data, origin, dirs, step, s_max, args.repeats)
    print(f"native  {1e3 * t_c:9.2f} ms/render  speedup x{t_py / t_c:.1f}")
    print(f"max |native - python| = {np.max(np.abs(img_c - img_py)):.3e}")


if __name__ == "__main__":
    main()
