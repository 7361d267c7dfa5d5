"""k/(sigma I(s)) for shrinking sigma, compared with both kernel normalizations."""

import argparse

from pinning.geometry import DefectProfile
from pinning.linearized import calibrate, kernel_constant


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--d", type=int, choices=[2, 3], default=2)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.02, 0.01, 0.005])
    args = ap.parse_args()
    cal = calibrate(DefectProfile(args.d, args.sigmas[0]), sigmas=tuple(args.sigmas))
    for sg, r in zip(cal.sigmas, cal.ratios):
        print(f"sigma={sg:<8g} ratio={r:.6f}")
    print(f"limit {cal.limit:.6f}; physical {kernel_constant(args.d, 'physical'):.6f}; "
          f"unnormalized {kernel_constant(args.d, 'paper'):.6f}; chosen {cal.mode}")


if __name__ == "__main__":
    main()
