"""Seed-to-seed spread of the Monte Carlo estimates as the sample count grows.

Uses a linear downstream model on a Gaussian image, where the exact propagated
variance is known (9 * 0.04 = 0.36), and prints mean and spread per T.
"""

import argparse

import numpy as np

from uncprop import DiagGaussianImage, McConfig, SeedSpec, propagate_regression


class Linear:
    def predict_batch(self, xs):
        xs = np.asarray(xs).reshape(len(xs), -1)
        return 3.0 * xs[:, 0], np.full(len(xs), np.log(0.25))


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=32)
    p.add_argument("--samples", type=int, nargs="+", default=[16, 64, 256, 1024, 4096])
    args = p.parse_args()

    up = DiagGaussianImage(np.zeros((4, 4)), np.full((4, 4), np.log(0.04)))
    print(f"{'T':>6} {'mean var_prop':>14} {'std':>10} {'std * sqrt(T)':>14}")
    offset = 0
    for T in args.samples:
        est = [propagate_regression(up, Linear(), McConfig(T, SeedSpec(offset + k))).var_prop
               for k in range(args.seeds)]
        offset += args.seeds
        sd = np.std(est, ddof=1)
        print(f"{T:>6} {np.mean(est):>14.4f} {sd:>10.4f} {sd * np.sqrt(T):>14.3f}")


if __name__ == "__main__":
    main()
