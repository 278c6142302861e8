"""Quality regressor: 3-layer MLP trained with a precision+ranking loss.

The network is affine -> batch norm -> GELU -> dropout for the two hidden
layers and a plain affine output. Training is seeded SGD with single-cycle
cosine annealing, decoupled weight decay on weight matrices only, stochastic
weight averaging over late-epoch snapshots, and early stopping on validation
RMSE. All math runs in float64 so the analytic gradients can be checked
against finite differences.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from campvqa.errors import (
    ConfigError,
    CorruptFile,
    DimError,
    FormatError,
    IoError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_PARAMS_MAGIC = b"CVQM"
_PARAMS_VERSION = 1

# Flat parameter layout; gradients and SWA snapshots follow the same order.
_TRAINABLE = ("w1", "b1", "g1", "be1", "w2", "b2", "g2", "be2", "w3", "b3")
# non-trainable state: BN running stats plus input standardization
_RUNNING = ("rm1", "rv1", "rm2", "rv2", "in_mean", "in_std")


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * phi


@dataclass
class MlpParams:
    """Weights, biases and batch-norm state of the 3-layer regressor."""

    w1: np.ndarray
    b1: np.ndarray
    g1: np.ndarray
    be1: np.ndarray
    rm1: np.ndarray
    rv1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    g2: np.ndarray
    be2: np.ndarray
    rm2: np.ndarray
    rv2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    in_mean: np.ndarray  # per-feature standardization, fitted on training data
    in_std: np.ndarray
    dropout_rate: float = 0.1

    @classmethod
    def init(
        cls,
        d_in: int,
        hidden: tuple[int, int] = (256, 128),
        rng: np.random.Generator | None = None,
        dropout_rate: float = 0.1,
    ) -> "MlpParams":
        if rng is None:
            rng = np.random.default_rng(0)
        h1, h2 = hidden
        if d_in < 1 or h1 < 1 or h2 < 1:
            raise ConfigError(f"invalid layer sizes: d_in={d_in}, hidden={hidden}")

        def he(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
            return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

        return cls(
            w1=he(d_in, (d_in, h1)),
            b1=np.zeros(h1),
            g1=np.ones(h1),
            be1=np.zeros(h1),
            rm1=np.zeros(h1),
            rv1=np.ones(h1),
            w2=he(h1, (h1, h2)),
            b2=np.zeros(h2),
            g2=np.ones(h2),
            be2=np.zeros(h2),
            rm2=np.zeros(h2),
            rv2=np.ones(h2),
            w3=he(h2, (h2, 1)),
            b3=np.zeros(1),
            in_mean=np.zeros(d_in),
            in_std=np.ones(d_in),
            dropout_rate=dropout_rate,
        )

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> tuple[int, int]:
        return (self.w1.shape[1], self.w2.shape[1])

    def copy(self) -> "MlpParams":
        arrays = {
            name: getattr(self, name).copy() for name in (*_TRAINABLE, *_RUNNING)
        }
        return MlpParams(dropout_rate=self.dropout_rate, **arrays)

    def trainable_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in _TRAINABLE])

    def set_trainable_vector(self, vec: np.ndarray) -> None:
        offset = 0
        for name in _TRAINABLE:
            arr = getattr(self, name)
            n = arr.size
            arr[...] = vec[offset : offset + n].reshape(arr.shape)
            offset += n
        if offset != vec.size:
            raise DimError(f"parameter vector has {vec.size} values, expected {offset}")


@dataclass
class Gradients:
    """Gradients for the trainable arrays, in MlpParams layout."""

    arrays: dict[str, np.ndarray]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in _TRAINABLE])


def _bn_forward(
    h: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    rm: np.ndarray,
    rv: np.ndarray,
    use_batch_stats: bool,
) -> tuple[np.ndarray, dict]:
    if use_batch_stats:
        mu = h.mean(axis=0)
        var = h.var(axis=0)
    else:
        mu, var = rm, rv
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (h - mu) * inv_std
    out = gamma * x_hat + beta
    cache = {"x_hat": x_hat, "inv_std": inv_std, "batch": use_batch_stats}
    return out, cache


def _bn_backward(
    dout: np.ndarray, gamma: np.ndarray, cache: dict
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat, inv_std = cache["x_hat"], cache["inv_std"]
    dgamma = (dout * x_hat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    if cache["batch"]:
        # exact for biased batch variance
        dh = (gamma * inv_std) * (
            dout - dout.mean(axis=0) - x_hat * (dout * x_hat).mean(axis=0)
        )
    else:
        dh = dout * gamma * inv_std
    return dh, dgamma, dbeta


def _forward(
    x: np.ndarray,
    params: MlpParams,
    training: bool,
    rng: np.random.Generator | None,
    bn_frozen: bool,
    update_running: bool,
) -> tuple[np.ndarray, dict]:
    """Full forward pass; returns (scores, cache for backward)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.d_in:
        raise DimError(f"input dim {x.shape[1]} != network d_in {params.d_in}")
    x = (x - params.in_mean) / params.in_std
    use_batch = training and not bn_frozen
    cache: dict = {"x": x, "training": training}

    h1 = x @ params.w1 + params.b1
    if use_batch and update_running:
        _update_running(params, "1", h1)
    n1, bn1 = _bn_forward(h1, params.g1, params.be1, params.rm1, params.rv1, use_batch)
    a1 = gelu(n1)
    d1, mask1 = _dropout(a1, params.dropout_rate, training, rng)

    h2 = d1 @ params.w2 + params.b2
    if use_batch and update_running:
        _update_running(params, "2", h2)
    n2, bn2 = _bn_forward(h2, params.g2, params.be2, params.rm2, params.rv2, use_batch)
    a2 = gelu(n2)
    d2, mask2 = _dropout(a2, params.dropout_rate, training, rng)

    out = (d2 @ params.w3 + params.b3).ravel()
    cache.update(
        h1=h1, bn1=bn1, n1=n1, d1=d1, mask1=mask1,
        h2=h2, bn2=bn2, n2=n2, d2=d2, mask2=mask2,
    )
    return out, cache


def _update_running(params: MlpParams, layer: str, h: np.ndarray) -> None:
    mu, var = h.mean(axis=0), h.var(axis=0)
    rm, rv = getattr(params, f"rm{layer}"), getattr(params, f"rv{layer}")
    rm[...] = (1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu
    rv[...] = (1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var


def _dropout(
    a: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray | None]:
    if not training or rate <= 0.0:
        return a, None
    if rng is None:
        raise ConfigError("training with dropout requires a seeded generator")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * mask, mask


def mlp_forward(
    x: np.ndarray,
    params: MlpParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    bn_frozen: bool = False,
) -> np.ndarray:
    """Score one vector or a batch. mode is "eval" or "train"."""
    if mode not in ("eval", "train"):
        raise ConfigError(f"mode must be 'eval' or 'train', got {mode!r}")
    single = np.asarray(x).ndim == 1
    out, _ = _forward(
        x, params, training=(mode == "train"), rng=rng, bn_frozen=bn_frozen,
        update_running=False,
    )
    return float(out[0]) if single else out


def predict(features: np.ndarray, params: MlpParams) -> np.ndarray | float:
    """Eval-mode forward pass."""
    return mlp_forward(features, params, mode="eval")


def loss_precision(pred: np.ndarray, mos: np.ndarray) -> float:
    """Mean absolute error."""
    pred, mos = np.asarray(pred, np.float64), np.asarray(mos, np.float64)
    if pred.shape != mos.shape:
        raise DimError(f"length mismatch: {pred.shape} vs {mos.shape}")
    if pred.size < 1:
        raise DimError("need at least one sample")
    return float(np.abs(pred - mos).mean())


def _ranking_terms(pred: np.ndarray, mos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dy = mos[:, None] - mos[None, :]
    s = np.where(dy >= 0.0, 1.0, -1.0)
    margins = np.abs(dy) - s * (pred[:, None] - pred[None, :])
    return margins, s


def loss_ranking(pred: np.ndarray, mos: np.ndarray) -> float:
    """Pairwise hinge on ordinal consistency, normalized by N^2.

    Each ordered pair (i, j) contributes max(0, |y_i - y_j| - s_ij*(p_i - p_j))
    with s_ij = +1 when y_i >= y_j and -1 otherwise.
    """
    pred, mos = np.asarray(pred, np.float64), np.asarray(mos, np.float64)
    if pred.shape != mos.shape:
        raise DimError(f"length mismatch: {pred.shape} vs {mos.shape}")
    if pred.size < 1:
        raise DimError("need at least one sample")
    margins, _ = _ranking_terms(pred, mos)
    return float(np.maximum(0.0, margins).mean())


def loss_composite(
    pred: np.ndarray, mos: np.ndarray, lambda1: float = 0.6, lambda2: float = 1.0
) -> float:
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"loss weights must be >= 0, got {lambda1}, {lambda2}")
    return lambda1 * loss_precision(pred, mos) + lambda2 * loss_ranking(pred, mos)


def _loss_grad_wrt_pred(
    pred: np.ndarray, mos: np.ndarray, lambda1: float, lambda2: float
) -> tuple[float, np.ndarray]:
    n = pred.size
    lp = float(np.abs(pred - mos).mean())
    dlp = np.sign(pred - mos) / n

    margins, s = _ranking_terms(pred, mos)
    active = (margins > 0.0).astype(np.float64)  # hinge subgradient is 0 at 0
    lr_ = float(np.maximum(0.0, margins).mean())
    sa = s * active
    dlr = (-sa.sum(axis=1) + sa.sum(axis=0)) / (n * n)

    return lambda1 * lp + lambda2 * lr_, lambda1 * dlp + lambda2 * dlr


def backward(
    x: np.ndarray,
    mos: np.ndarray,
    params: MlpParams,
    lambda1: float = 0.6,
    lambda2: float = 1.0,
    training: bool = True,
    rng: np.random.Generator | None = None,
    bn_frozen: bool = False,
    update_running: bool = False,
) -> tuple[float, Gradients]:
    """Composite loss and its exact gradients w.r.t. all trainable arrays."""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"loss weights must be >= 0, got {lambda1}, {lambda2}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mos = np.asarray(mos, dtype=np.float64).ravel()
    if x.shape[0] != mos.size or x.shape[0] < 1:
        raise DimError(f"batch of {x.shape[0]} features vs {mos.size} scores")

    pred, cache = _forward(
        x, params, training=training, rng=rng, bn_frozen=bn_frozen,
        update_running=update_running,
    )
    loss, dpred = _loss_grad_wrt_pred(pred, mos, lambda1, lambda2)

    dout = dpred[:, None]  # (N, 1)
    dw3 = cache["d2"].T @ dout
    db3 = dout.sum(axis=0)
    dd2 = dout @ params.w3.T

    if cache["mask2"] is not None:
        dd2 = dd2 * cache["mask2"]
    dn2 = dd2 * gelu_grad(cache["n2"])
    dh2, dg2, dbe2 = _bn_backward(dn2, params.g2, cache["bn2"])
    dw2 = cache["d1"].T @ dh2
    db2 = dh2.sum(axis=0)
    dd1 = dh2 @ params.w2.T

    if cache["mask1"] is not None:
        dd1 = dd1 * cache["mask1"]
    dn1 = dd1 * gelu_grad(cache["n1"])
    dh1, dg1, dbe1 = _bn_backward(dn1, params.g1, cache["bn1"])
    dw1 = cache["x"].T @ dh1
    db1 = dh1.sum(axis=0)

    grads = Gradients(
        arrays={
            "w1": dw1, "b1": db1, "g1": dg1, "be1": dbe1,
            "w2": dw2, "b2": db2, "g2": dg2, "be2": dbe2,
            "w3": dw3, "b3": db3,
        }
    )
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 50
    lr: float = 0.1
    weight_decay: float = 0.005
    lambda1: float = 0.6
    lambda2: float = 1.0
    swa_start_fraction: float = 0.75
    patience: int = 5
    seed: int = 0
    folds: int = 10
    hidden: tuple[int, int] = (256, 128)
    dropout_rate: float = 0.1

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 < self.swa_start_fraction < 1.0:
            raise ConfigError("swa_start_fraction must be in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size and patience must be >= 1")

    @classmethod
    def large_scale(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def small_scale(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=200, lr=1e-2, weight_decay=5e-4, folds=0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_dataset_size(cls, n_videos: int, threshold: int = 5000, **overrides) -> "TrainConfig":
        if n_videos < threshold:
            return cls.small_scale(**overrides)
        return cls.large_scale(**overrides)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "epochs": self.epochs, "lr": self.lr,
            "weight_decay": self.weight_decay, "lambda1": self.lambda1,
            "lambda2": self.lambda2, "swa_start_fraction": self.swa_start_fraction,
            "patience": self.patience, "seed": self.seed, "folds": self.folds,
            "hidden": list(self.hidden), "dropout_rate": self.dropout_rate,
        }


def cosine_lr(initial: float, epoch_index: int, total_epochs: int) -> float:
    """Single-cycle cosine from `initial` down to 0 across all epochs."""
    if total_epochs <= 1:
        return initial
    t = epoch_index / (total_epochs - 1)
    return 0.5 * initial * (1.0 + math.cos(math.pi * t))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_rmse: float


@dataclass
class TrainReport:
    epochs: list[EpochLog]
    selected_epoch: int  # 1-based epoch with minimal validation RMSE
    swa_applied: bool  # final params are the SWA average
    swa_val_rmse: float | None
    final_params: MlpParams
    swa_snapshots: list[np.ndarray] = field(default_factory=list)

    @property
    def best_val_rmse(self) -> float:
        return min(e.val_rmse for e in self.epochs)


def _rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def _sgd_step(params: MlpParams, grads: Gradients, lr: float, weight_decay: float) -> None:
    # decoupled weight decay: weight matrices only, never biases or BN params
    for name, grad in grads.arrays.items():
        arr = getattr(params, name)
        arr -= lr * grad
        if name in ("w1", "w2", "w3"):
            arr -= lr * weight_decay * arr


def _recompute_bn_stats(params: MlpParams, x_train: np.ndarray) -> None:
    """One full-dataset pass: set running stats to exact dataset statistics."""
    x_train = (x_train - params.in_mean) / params.in_std
    h1 = x_train @ params.w1 + params.b1
    params.rm1[...] = h1.mean(axis=0)
    params.rv1[...] = h1.var(axis=0)
    n1, _ = _bn_forward(h1, params.g1, params.be1, params.rm1, params.rv1, False)
    a1 = gelu(n1)  # dropout disabled during statistics collection
    h2 = a1 @ params.w2 + params.b2
    params.rm2[...] = h2.mean(axis=0)
    params.rv2[...] = h2.var(axis=0)


def swa_average(snapshots: list[np.ndarray]) -> np.ndarray:
    """Uniform mean of parameter snapshots (sequential accumulation)."""
    if not snapshots:
        raise ConfigError("no snapshots to average")
    total = snapshots[0].copy()
    for snap in snapshots[1:]:
        total += snap
    return total / len(snapshots)


def train(
    features: np.ndarray,
    mos: np.ndarray,
    config: TrainConfig,
    split: tuple[np.ndarray, np.ndarray],
) -> TrainReport:
    """Fit the regressor on the train split, selecting by validation RMSE.

    The candidates are the per-epoch parameters and, when snapshots exist,
    their SWA average with batch-norm statistics recomputed on the training
    data; whichever has the lower validation RMSE wins.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(mos, dtype=np.float64).ravel()
    train_idx, val_idx = (np.asarray(ix, dtype=np.intp) for ix in split)
    if train_idx.size < 2 or val_idx.size < 1:
        raise ConfigError("need at least 2 training and 1 validation samples")
    if np.intersect1d(train_idx, val_idx).size:
        raise ConfigError("train and validation splits overlap")

    x_tr, y_tr = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]

    rng = np.random.default_rng(config.seed)
    params = MlpParams.init(
        x.shape[1], hidden=config.hidden, rng=rng, dropout_rate=config.dropout_rate
    )
    # fit normalization statistics on the training split; start the output
    # bias at the target mean so the bounded L1-style gradients are spent on
    # shape rather than on closing a large offset
    params.in_mean[...] = x_tr.mean(axis=0)
    params.in_std[...] = np.maximum(x_tr.std(axis=0), 1e-8)
    params.b3[...] = y_tr.mean()
    batch_size = min(config.batch_size, train_idx.size)
    swa_start = math.ceil(config.swa_start_fraction * config.epochs)

    logs: list[EpochLog] = []
    snapshots: list[np.ndarray] = []
    best_rmse = math.inf
    best_epoch = 0
    best_params = params.copy()
    stale = 0

    for epoch in range(1, config.epochs + 1):
        lr = cosine_lr(config.lr, epoch - 1, config.epochs)
        order = rng.permutation(train_idx.size)
        loss_sum = 0.0
        for start in range(0, order.size, batch_size):
            rows = order[start : start + batch_size]
            loss, grads = backward(
                x_tr[rows], y_tr[rows], params,
                lambda1=config.lambda1, lambda2=config.lambda2,
                training=True, rng=rng, update_running=True,
            )
            _sgd_step(params, grads, lr, config.weight_decay)
            loss_sum += loss * rows.size
        train_loss = loss_sum / order.size

        val_rmse = _rmse(mlp_forward(x_val, params, mode="eval"), y_val)
        logs.append(EpochLog(epoch=epoch, lr=lr, train_loss=train_loss, val_rmse=val_rmse))

        if epoch >= swa_start:
            snapshots.append(params.trainable_vector())

        if val_rmse < best_rmse:
            best_rmse = val_rmse
            best_epoch = epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    swa_applied = False
    swa_val_rmse: float | None = None
    final = best_params
    if snapshots:
        swa_params = params.copy()
        swa_params.set_trainable_vector(swa_average(snapshots))
        _recompute_bn_stats(swa_params, x_tr)
        swa_val_rmse = _rmse(mlp_forward(x_val, swa_params, mode="eval"), y_val)
        if swa_val_rmse < best_rmse:
            final = swa_params
            swa_applied = True

    return TrainReport(
        epochs=logs,
        selected_epoch=best_epoch,
        swa_applied=swa_applied,
        swa_val_rmse=swa_val_rmse,
        final_params=final,
        swa_snapshots=snapshots,
    )


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_params(
    params: MlpParams, path: str | Path, seed: int = 0, config: TrainConfig | None = None
) -> None:
    """Binary model file: JSON header + named f64 sections + payload CRC."""
    names = (*_TRAINABLE, *_RUNNING)
    header = {
        "sections": [{"name": n, "shape": list(getattr(params, n).shape)} for n in names],
        "dropout_rate": params.dropout_rate,
        "seed": seed,
        "config_hash": config_hash(config) if config else None,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes() for n in names
    )
    try:
        with open(path, "wb") as fh:
            fh.write(_PARAMS_MAGIC)
            fh.write(struct.pack("<HI", _PARAMS_VERSION, len(header_bytes)))
            fh.write(header_bytes)
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_params(path: str | Path) -> MlpParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 10 or blob[:4] != _PARAMS_MAGIC:
        raise FormatError(f"{path}: not a model parameters file")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != _PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header_end = 10 + header_len
    if len(blob) < header_end + 4:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[10:header_end].decode("utf-8"))
        sections = header["sections"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc

    payload = blob[header_end:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CorruptFile(f"{path}: CRC mismatch")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for section in sections:
        shape = tuple(section["shape"])
        n = int(np.prod(shape)) * 8
        if offset + n > len(payload):
            raise FormatError(f"{path}: payload shorter than declared sections")
        arrays[section["name"]] = (
            np.frombuffer(payload, dtype="<f8", count=n // 8, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += n
    if offset != len(payload):
        raise FormatError(f"{path}: payload longer than declared sections")
    missing = set((*_TRAINABLE, *_RUNNING)) - set(arrays)
    if missing:
        raise FormatError(f"{path}: missing sections {sorted(missing)}")
    return MlpParams(dropout_rate=float(header.get("dropout_rate", 0.1)), **arrays)
