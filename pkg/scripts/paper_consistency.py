"""Closed-loop success rates against the two reported operating points.

Solves the effective attempt budget for each (top-1 accuracy, success rate)
pair, then simulates one subject model at a shared budget and prints the
simulated rates next to the reported ones.
"""

import argparse

import numpy as np

from neurodrive import closedloop as cl

OPERATING_POINTS = {6: (0.4105, 0.5234), 24: (0.2825, 0.3822)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=10_000)
    ap.add_argument("--minutes", type=float, default=3.0)
    ap.add_argument("--attempt-sec", type=float, default=120.0)
    args = ap.parse_args()

    k = cl.attempt_budget(args.minutes, args.attempt_sec)
    print(f"shared budget k = {k:.3f} ({args.minutes:g} min / {args.attempt_sec:g} s per attempt)")
    print(f"{'classes':>7} {'top-1':>7} {'reported':>9} {'solved k':>9} {'closed form':>12} {'simulated':>10} {'99% CI':>17}")
    for n, (p, reported) in OPERATING_POINTS.items():
        words = tuple(f"w{i}" for i in range(n))
        pipe = cl.BernoulliPipeline(words, p)
        logs = [cl.run_attempt_loop(cl.SubjectModel(), pipe, "w0", k, seed) for seed in range(args.episodes)]
        rep = cl.success_report(logs)
        lo, hi = rep.ci99
        print(
            f"{n:>7} {100 * p:>6.2f}% {100 * reported:>8.2f}% {cl.solve_budget(p, reported):>9.3f} "
            f"{100 * cl.expected_success(p, k):>11.2f}% {100 * rep.rate:>9.2f}% {100 * lo:>7.2f}-{100 * hi:.2f}%"
        )

    grid = np.round(np.arange(1.40, 1.501, 0.02), 2)
    print("\nclosed-form rate across k (percent):")
    print("  k     " + "  ".join(f"{g:>5.2f}" for g in grid))
    for n, (p, reported) in OPERATING_POINTS.items():
        print(f"  {n:>2} cls " + "  ".join(f"{100 * cl.expected_success(p, g):>5.1f}" for g in grid) + f"   (reported {100 * reported:.2f})")


if __name__ == "__main__":
    main()
