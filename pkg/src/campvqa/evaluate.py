"""Correlation metrics and the repeated-split evaluation protocol.

SRCC is Pearson over fractional ranks, PLCC is plain Pearson, KRCC is
tie-corrected Kendall tau-b. The protocol draws seeded 80/20 by-video splits,
trains a fresh regressor per repeat and reports per-run metrics plus their
median across (by default) 21 repeats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from campvqa.errors import ConfigError, DegenerateInput, DimError
from campvqa.regressor import TrainConfig, mlp_forward, train

DEFAULT_REPEATS = 21
TRAIN_FRACTION = 0.8


def _check_pair(pred, mos) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    mos = np.asarray(mos, dtype=np.float64).ravel()
    if pred.size != mos.size:
        raise DimError(f"length mismatch: {pred.size} vs {mos.size}")
    if pred.size < 2:
        raise DimError("correlation needs at least 2 samples")
    return pred, mos


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    """Average (midrank) ranks, 1-based; ties share their mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def plcc(pred, mos) -> float:
    """Pearson linear correlation."""
    pred, mos = _check_pair(pred, mos)
    dp = pred - pred.mean()
    dm = mos - mos.mean()
    denom = np.sqrt((dp * dp).sum() * (dm * dm).sum())
    if denom == 0.0:
        raise DegenerateInput("correlation undefined for a constant input")
    return float((dp * dm).sum() / denom)


def srcc(pred, mos) -> float:
    """Spearman rank correlation (Pearson over midranks)."""
    pred, mos = _check_pair(pred, mos)
    return plcc(_fractional_ranks(pred), _fractional_ranks(mos))


def logistic_fit(pred: np.ndarray, mos: np.ndarray) -> np.ndarray:
    """4-parameter logistic mapping of predictions onto the MOS scale.

    Off by default everywhere; supplied for protocols that regress scores
    through a nonlinearity before PLCC. Falls back to the raw predictions
    when the fit cannot converge.
    """
    from scipy.optimize import curve_fit

    pred = np.asarray(pred, dtype=np.float64).ravel()
    mos = np.asarray(mos, dtype=np.float64).ravel()

    def curve(x, beta1, beta2, beta3, beta4):
        z = np.clip(-(x - beta3) / (abs(beta4) + 1e-12), -500.0, 500.0)
        return (beta1 - beta2) / (1.0 + np.exp(z)) + beta2

    p0 = [mos.max(), mos.min(), pred.mean(), max(pred.std(), 1e-6)]
    try:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # only the point estimate matters
            popt, _ = curve_fit(curve, pred, mos, p0=p0, maxfev=20000)
        return curve(pred, *popt)
    except (RuntimeError, ValueError):
        return pred


def krcc(pred, mos) -> float:
    """Kendall tau-b with tie correction."""
    pred, mos = _check_pair(pred, mos)
    dp = np.sign(pred[:, None] - pred[None, :])
    dm = np.sign(mos[:, None] - mos[None, :])
    iu = np.triu_indices(pred.size, k=1)
    prod = dp[iu] * dm[iu]
    concordant_minus_discordant = prod.sum()
    n0 = iu[0].size
    ties_pred = (dp[iu] == 0).sum()
    ties_mos = (dm[iu] == 0).sum()
    denom = np.sqrt(float(n0 - ties_pred) * float(n0 - ties_mos))
    if denom == 0.0:
        raise DegenerateInput("Kendall correlation undefined for fully tied input")
    return float(concordant_minus_discordant / denom)


@dataclass
class RunResult:
    seed: int
    srcc: float
    plcc: float
    krcc: float
    n_test: int


@dataclass
class EvalReport:
    runs: list[RunResult]
    median_srcc: float
    median_plcc: float
    median_krcc: float
    n: int
    split_seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "split_seeds": self.split_seeds,
            "median": {
                "srcc": self.median_srcc,
                "plcc": self.median_plcc,
                "krcc": self.median_krcc,
            },
            "runs": [
                {
                    "seed": r.seed,
                    "srcc": r.srcc,
                    "plcc": r.plcc,
                    "krcc": r.krcc,
                    "n_test": r.n_test,
                }
                for r in self.runs
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        lines = ["seed,srcc,plcc,krcc,n_test"]
        for r in self.runs:
            lines.append(f"{r.seed},{r.srcc!r},{r.plcc!r},{r.krcc!r},{r.n_test}")
        lines.append(
            f"median,{self.median_srcc!r},{self.median_plcc!r},{self.median_krcc!r},"
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def split_indices(
    n: int, seed: int, train_fraction: float = TRAIN_FRACTION
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded by-video shuffle, then an 80/20 cut."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def run_protocol(
    features: np.ndarray,
    mos: np.ndarray,
    config: TrainConfig | None = None,
    repeats: int = DEFAULT_REPEATS,
    seeds: list[int] | None = None,
    plcc_logistic: bool = False,
) -> EvalReport:
    """Repeat (split, train, test) and report per-run and median metrics."""
    features = np.asarray(features, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64).ravel()
    n = mos.size
    if features.ndim != 2 or features.shape[0] != n:
        raise DimError(f"features {features.shape} do not match {n} scores")
    if n < 10:
        raise ConfigError(f"protocol needs at least 10 videos, got {n}")
    if seeds is None:
        seeds = list(range(repeats))
    if len(seeds) != repeats:
        raise ConfigError(f"{len(seeds)} seeds supplied for {repeats} repeats")
    if config is None:
        config = TrainConfig.for_dataset_size(n)

    runs: list[RunResult] = []
    for seed in seeds:
        train_idx, test_idx = split_indices(n, seed)
        run_config = replace(config, seed=seed)
        report = train(features, mos, run_config, split=(train_idx, test_idx))
        pred = mlp_forward(features[test_idx], report.final_params, mode="eval")
        truth = mos[test_idx]
        plcc_pred = logistic_fit(pred, truth) if plcc_logistic else pred
        runs.append(
            RunResult(
                seed=seed,
                srcc=srcc(pred, truth),
                plcc=plcc(plcc_pred, truth),
                krcc=krcc(pred, truth),
                n_test=test_idx.size,
            )
        )

    return EvalReport(
        runs=runs,
        median_srcc=float(np.median([r.srcc for r in runs])),
        median_plcc=float(np.median([r.plcc for r in runs])),
        median_krcc=float(np.median([r.krcc for r in runs])),
        n=n,
        split_seeds=list(seeds),
    )


def per_dimension_eval(
    features: np.ndarray,
    mos_by_dimension: dict[str, np.ndarray],
    config: TrainConfig | None = None,
    repeats: int = DEFAULT_REPEATS,
    seeds: list[int] | None = None,
) -> dict[str, EvalReport]:
    """One full protocol per quality dimension, each with its own regressor."""
    if not mos_by_dimension:
        raise ConfigError("no quality dimensions supplied")
    return {
        dimension: run_protocol(features, scores, config=config, repeats=repeats, seeds=seeds)
        for dimension, scores in mos_by_dimension.items()
    }
