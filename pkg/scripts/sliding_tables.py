"""Traversal tables for horizontal (LQR vs zero control) and vertical (thin vs thick edge) sliding."""
import argparse

import numpy as np

from clothslide import sliding
from clothslide.sliding import SlidingPlant


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=5)
    args = ap.parse_args()

    plant = SlidingPlant.horizontal()
    data, dyn, gains = sliding.identify_and_design(plant)
    print(f"fit on {len(data)} observations, residual ratio "
          f"{np.round(np.asarray(dyn.residuals) / np.asarray(dyn.zero_residuals), 3).tolist()}")
    print(f"K = {np.round(gains.K, 3).tolist()}, spectral radius {sliding.closed_loop_radius(dyn, gains.K):.5f}")
    ctrls = {"lqr": sliding.LQRController(gains.K), "zero": sliding.ZeroController()}
    print("horizontal   coverage " + " ".join(f"{c:>6.2f}" for c in (0.8, 0.65, 0.5, 0.35)))
    for name, ctrl in ctrls.items():
        row = [np.mean([sliding.horizontal_slide(plant, ctrl, c, s).traversal for s in range(args.trials)])
               for c in (0.8, 0.65, 0.5, 0.35)]
        print(f"  {name:8s}            " + " ".join(f"{v:6.3f}" for v in row))

    print("vertical     coverage " + " ".join(f"{c:>6.2f}" for c in (1.0, 0.75, 0.5, 0.25)))
    for edge in ("thin", "thick"):
        vp = SlidingPlant.vertical(edge)
        row = [np.mean([sliding.vertical_slide(vp, sliding.VERTICAL_KP, sliding.SHEAR_THRESHOLD_MM, c, s).traversal
                        for s in range(args.trials)]) for c in (1.0, 0.75, 0.5, 0.25)]
        print(f"  {edge:8s}            " + " ".join(f"{v:6.3f}" for v in row))


if __name__ == "__main__":
    main()
