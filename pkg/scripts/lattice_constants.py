"""Print the cell constants for a handful of rational directions."""

import argparse

import numpy as np

from pinning.cell import check_c_star, fit_singular_coefficient, solve_cell, tail_fit

DIRECTIONS = [(0, 1), (1, 1), (1, 2), (2, 3), (1, 1, 0), (0, 0, 1), (1, 1, 1)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--K", type=int, default=64)
    args = ap.parse_args()
    print(f"{'xi':>10} {'|xi|':>8} {'C0':>10} {'c* err':>9} {'sing fit':>10} {'sing exp':>10} {'tail':>7}")
    for xi in DIRECTIONS:
        K = args.K
        while True:
            try:
                cell = solve_cell(xi, K=K)
                break
            except ValueError:
                K *= 2
        tf = tail_fit(cell)
        print(f"{str(xi):>10} {np.linalg.norm(xi):8.4f} {cell.C0:10.6f} {check_c_star(cell):9.1e} "
              f"{fit_singular_coefficient(cell):10.6f} {cell.singular_coefficient:10.6f} {tf.rate:7.3f}")


if __name__ == "__main__":
    main()
