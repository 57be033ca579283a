"""Wide CSV storage of posterior draws, one file per chain and parameter block."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .sampler import PosteriorDraws

BLOCKS = ("eta", "xi", "beta", "scalars")


def _fmt_rows(iterations: np.ndarray, values: np.ndarray) -> list:
    return [str(int(i)) + "," + ",".join(repr(float(x)) for x in row) for i, row in zip(iterations, values)]


def _write(path: Path, header: list, iterations, values: np.ndarray):
    lines = [",".join(["iteration", *header])]
    lines += _fmt_rows(iterations, values)
    path.write_text("\n".join(lines) + "\n")


def write_draws(directory, draws: PosteriorDraws) -> list:
    """Write the chain's blocks; returns the file paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    c = draws.chain + 1
    R, T, r = draws.eta.shape
    its = np.arange(draws.burn_in + 1, draws.iterations + 1)
    out = []

    p = directory / f"chain{c}_eta.csv"
    _write(p, [f"eta[{t + 1}][{k + 1}]" for t in range(T) for k in range(r)], its, draws.eta.reshape(R, T * r))
    out.append(p)

    p = directory / f"chain{c}_xi.csv"
    header = [f"xi[{t + 1}][{i + 1}]" for t in range(T) for i in range(draws.xi[t].shape[1])]
    xi = np.hstack(draws.xi) if header else np.zeros((R, 0))
    _write(p, header, its, xi)
    out.append(p)

    p = directory / f"chain{c}_beta.csv"
    if draws.beta.ndim == 2:
        header = [f"beta[{j + 1}]" for j in range(draws.beta.shape[1])]
    else:
        header = [f"beta[{t + 1}][{j + 1}]" for t in range(draws.beta.shape[1]) for j in range(draws.beta.shape[2])]
    _write(p, header, its, draws.beta.reshape(R, -1))
    out.append(p)

    p = directory / f"chain{c}_scalars.csv"
    cols = [draws.sigma_k2[:, None], draws.sigma_xi2]
    header = ["sigma_k2", *[f"sigma_xi2[{t + 1}]" for t in range(T)]]
    if draws.delta is not None:
        cols.append(draws.delta)
        header += [f"delta[{g + 1}]" for g in range(draws.delta.shape[1])]
    _write(p, header, its, np.hstack(cols))
    out.append(p)
    return out


def _read(path: Path) -> tuple[list, np.ndarray]:
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        data = data.reshape(-1, len(header))
    return header[1:], data


def read_draws(directory, chain: int, T: int, r: int, n_t, beta_per_time: bool, seed: int) -> PosteriorDraws:
    directory = Path(directory)
    c = chain + 1
    _, eta = _read(directory / f"chain{c}_eta.csv")
    its = eta[:, 0].astype(int)
    R = len(its)
    eta = eta[:, 1:].reshape(R, T, r)
    _, xi_all = _read(directory / f"chain{c}_xi.csv")
    xi, start = [], 1
    for n in n_t:
        xi.append(xi_all[:, start:start + n].reshape(R, n))
        start += n
    _, beta = _read(directory / f"chain{c}_beta.csv")
    beta = beta[:, 1:]
    if beta_per_time:
        beta = beta.reshape(R, T, -1)
    header, sc = _read(directory / f"chain{c}_scalars.csv")
    sc = sc[:, 1:]
    n_delta = sum(h.startswith("delta[") for h in header)
    delta = sc[:, 1 + T:1 + T + n_delta] if n_delta else None
    burn_in = int(its[0]) - 1 if R else 0
    iterations = int(its[-1]) if R else 0
    return PosteriorDraws(eta, xi, beta, sc[:, 0].copy(), sc[:, 1:1 + T].copy(), delta,
                          iterations, burn_in, seed, chain)
