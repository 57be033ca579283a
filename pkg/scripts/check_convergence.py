"""Gelman-Rubin and batch-means diagnostics for one replicate of the study design.

Usage: python scripts/check_convergence.py [--chains 3] [--iterations 5000] [--burn-in 500]
"""
import argparse

from mstm.study import StudyConfig, convergence_report


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--chains", type=int, default=3)
    parser.add_argument("--iterations", type=int, default=5000)
    parser.add_argument("--burn-in", type=int, default=500)
    parser.add_argument("--replicate", type=int, default=0)
    args = parser.parse_args()

    summary = convergence_report(StudyConfig(), args.chains, args.iterations, args.burn_in, args.replicate)
    keys = [k for k in summary if k == "sigma_k2" or k.startswith(("sigma_xi2[", "beta["))]
    print(f"{'parameter':<16}{'R-hat':>10}{'SE/SD':>10}")
    for k in keys:
        e = summary[k]
        print(f"{k:<16}{e['rhat']:>10.4f}{e['batch_means_se'] / e['posterior_sd']:>10.4f}")
    print(f"max R-hat {max(summary[k]['rhat'] for k in keys):.4f}; "
          f"max SE/SD {max(summary[k]['batch_means_se'] / summary[k]['posterior_sd'] for k in keys):.4f}")


if __name__ == "__main__":
    main()
