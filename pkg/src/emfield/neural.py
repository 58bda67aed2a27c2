"""Dense tanh networks for field modeling, with exact input-Jacobians.

Three heads share one engine:

* ActuationNet: position -> (3S + 3) outputs read row-major as the local
  actuation matrix A_B (3 x S) and offset B_0.
* PotentialNet: position -> (S + 1) scalar potentials (one per coil plus a
  bias); the field map is the negative input-gradient, so the predicted
  field is curl-free by construction.
* DirectNet: (position, currents) -> field, a structure-free benchmark.

The engine is first-order reverse mode.  For the PotentialNet the training
loss depends on input-gradients of the network, so its parameter gradients
backpropagate through the forward tangent recurrence as well; both paths are
validated against finite differences in the test-suite.

Everything runs in float64 numpy.  Training is deterministic for a fixed
seed; network evaluation on a finished artifact is pure and thread-safe.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import (
    AffineFieldEval,
    ConvergenceError,
    DimensionError,
    ModelArtifact,
)


class ComplexityRank(Enum):
    """Capacity ladder shared by all model classes."""

    I = "I"
    II = "II"
    III = "III"

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return {"I": (256, 256), "II": (256, 256, 256), "III": (512, 512, 512)}[self.value]

    @property
    def gbt_leaf_limit(self) -> int:
        return {"I": 32, "II": 64, "III": 128}[self.value]

    @property
    def mpem_order(self) -> int:
        return {"I": 1, "II": 2, "III": 3}[self.value]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1024
    max_epochs: int = 1000
    patience: int = 10
    min_improvement_mt: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.learning_rate <= 0:
            raise ValueError("patience must be >= 1 and learning rate positive")


@dataclass
class MlpParams:
    """Layer weights/biases plus the input/output scaling that makes raw
    network outputs carry the mT convention used during training."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # (out, in) per layer
    biases: list[np.ndarray]
    input_mean: np.ndarray
    input_scale: np.ndarray
    output_scale_mt: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise DimensionError("need at least input and output layers")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DimensionError("one weight/bias pair per layer required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise DimensionError(f"layer {l} shapes inconsistent with {sizes}")
        self.input_mean = np.asarray(self.input_mean, dtype=float)
        self.input_scale = np.asarray(self.input_scale, dtype=float)
        if self.input_mean.shape != (sizes[0],) or self.input_scale.shape != (sizes[0],):
            raise DimensionError("normalization statistics must match the input width")
        if np.any(self.input_scale <= 0) or self.output_scale_mt <= 0:
            raise ValueError("normalization scales must be positive")
        self.layer_sizes = sizes

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


# ---------------------------------------------------------------------------
# Engine: batched forward, input tangents, and reverse passes.
# ---------------------------------------------------------------------------


def _forward(weights, biases, X):
    """Activations [X, a_1, ..., a_L]; tanh on hidden layers, linear final."""
    acts = [X]
    a = X
    last = len(weights) - 1
    for l, (W, b) in enumerate(zip(weights, biases)):
        z = a @ W.T + b
        a = z if l == last else np.tanh(z)
        acts.append(a)
    return acts


def _forward_tangent(weights, biases, X):
    """Forward pass carrying input tangents.

    Returns (acts, Hs, Gs): Gs[l] is d(acts[l])/dX of shape (B, n_l, d_in),
    Hs[l] the pre-activation tangent of layer l.
    """
    B, d = X.shape
    acts = [X]
    G = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    Gs = [G]
    Hs = []
    a = X
    last = len(weights) - 1
    for l, (W, b) in enumerate(zip(weights, biases)):
        z = a @ W.T + b
        H = np.einsum("oi,bid->bod", W, G)
        if l == last:
            a, G = z, H
        else:
            a = np.tanh(z)
            G = (1.0 - a * a)[:, :, None] * H
        acts.append(a)
        Hs.append(H)
        Gs.append(G)
    return acts, Hs, Gs


def _backprop(weights, acts, g_out):
    """Parameter gradients of a loss with gradient g_out at the final layer."""
    L = len(weights)
    gw = [None] * L
    gb = [None] * L
    ga = g_out
    for l in range(L - 1, -1, -1):
        a_out, a_in = acts[l + 1], acts[l]
        dz = ga if l == L - 1 else ga * (1.0 - a_out * a_out)
        gw[l] = dz.T @ a_in
        gb[l] = dz.sum(axis=0)
        ga = dz @ weights[l]
    return gw, gb


def _backprop_tangent(weights, acts, Hs, Gs, g_a_out, g_G_out):
    """Parameter gradients when the loss also depends on the input tangent of
    the final layer (PotentialNet: loss sees d(outputs)/d(inputs))."""
    L = len(weights)
    gw = [None] * L
    gb = [None] * L
    ga = g_a_out
    gG = g_G_out
    for l in range(L - 1, -1, -1):
        a_out, a_in = acts[l + 1], acts[l]
        G_in = Gs[l]
        if l == L - 1:
            dz = ga
            gH = gG
        else:
            s = 1.0 - a_out * a_out
            gH = s[:, :, None] * gG
            # G = sigma'(z) * H and sigma'' = -2 a sigma' feed the activation grad
            ga = ga + np.einsum("bod,bod->bo", gG, Hs[l]) * (-2.0 * a_out)
            dz = ga * s
        gw[l] = dz.T @ a_in + np.einsum("bod,bid->oi", gH, G_in)
        gb[l] = dz.sum(axis=0)
        ga = dz @ weights[l]
        gG = np.einsum("oi,bod->bid", weights[l], gH)
    return gw, gb


def _as_batch(params: MlpParams, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != params.in_dim:
        raise DimensionError(f"expected input width {params.in_dim}, got {X.shape[1]}")
    return (X - params.input_mean) / params.input_scale, single


def mlp_forward(params: MlpParams, x):
    """Network output in its mT-family convention (fields/potentials in mT)."""
    Xn, single = _as_batch(params, x)
    out = _forward(params.weights, params.biases, Xn)[-1] * params.output_scale_mt
    return out[0] if single else out


def mlp_input_jacobian(params: MlpParams, x):
    """Exact d(output)/d(input) including normalization and output scaling."""
    Xn, single = _as_batch(params, x)
    G = _forward_tangent(params.weights, params.biases, Xn)[2][-1]
    J = G * (params.output_scale_mt / params.input_scale)[None, None, :]
    return J[0] if single else J


# ---------------------------------------------------------------------------
# Heads.
# ---------------------------------------------------------------------------


def _actuation_split(params: MlpParams):
    if (params.out_dim - 3) % 3 != 0 or params.out_dim < 6:
        raise DimensionError(f"ActuationNet output width {params.out_dim} != 3S + 3")
    return (params.out_dim - 3) // 3


def actuationnet_predict(params: MlpParams, p) -> AffineFieldEval:
    """Local affine map in SI units; outputs are consumed row-major as
    (field component, coil), then the 3-vector offset."""
    S = _actuation_split(params)
    out = mlp_forward(params, np.asarray(p, dtype=float))  # mT units
    return AffineFieldEval(
        actuation=1e-3 * out[: 3 * S].reshape(3, S),
        offset=1e-3 * out[3 * S :],
    )


def potentialnet_predict(params: MlpParams, p) -> AffineFieldEval:
    """Affine map from the potential head: columns of A_B are the negative
    position-gradients of the per-coil potentials."""
    S = params.out_dim - 1
    if S < 1:
        raise DimensionError("PotentialNet needs output width S + 1 >= 2")
    J = mlp_input_jacobian(params, np.asarray(p, dtype=float))  # (S+1, 3) mT/m
    return AffineFieldEval(actuation=-1e-3 * J[:S].T, offset=-1e-3 * J[S])


def directnet_predict(params: MlpParams, p, i):
    """Raw current-to-field benchmark output (T); no affinity guarantee."""
    p = np.asarray(p, dtype=float)
    i = np.asarray(i, dtype=float)
    if params.in_dim != 3 + i.size:
        raise DimensionError(f"DirectNet input width {params.in_dim} != 3 + S")
    return 1e-3 * mlp_forward(params, np.concatenate([p, i]))


def predict_fields(kind: str, params: MlpParams, positions, currents):
    """Vectorised field prediction (T) for any network head."""
    positions = np.asarray(positions, dtype=float)
    currents = np.asarray(currents, dtype=float)
    if kind == "direct_net":
        return 1e-3 * mlp_forward(params, np.hstack([positions, currents]))
    if kind == "actuation_net":
        S = _actuation_split(params)
        out = mlp_forward(params, positions)
        A = out[:, : 3 * S].reshape(-1, 3, S)
        return 1e-3 * (np.einsum("bcs,bs->bc", A, currents) + out[:, 3 * S :])
    if kind == "potential_net":
        S = params.out_dim - 1
        J = mlp_input_jacobian(params, positions)  # (B, S+1, 3)
        return -1e-3 * (np.einsum("bsk,bs->bk", J[:, :S], currents) + J[:, S])
    raise ValueError(f"unknown network kind {kind!r}")


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------


def _init_params(kind: str, coil_count: int, hidden, inputs, fields_mt, rng) -> MlpParams:
    in_dim = 3 + coil_count if kind == "direct_net" else 3
    out_dim = {
        "actuation_net": 3 * coil_count + 3,
        "potential_net": coil_count + 1,
        "direct_net": 3,
    }[kind]
    sizes = (in_dim, *hidden, out_dim)
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        bound = math.sqrt(6.0 / (sizes[l] + sizes[l + 1]))
        weights.append(rng.uniform(-bound, bound, size=(sizes[l + 1], sizes[l])))
        biases.append(np.zeros(sizes[l + 1]))
    mean = inputs.mean(axis=0)
    scale = inputs.std(axis=0)
    scale[scale < 1e-12] = 1.0
    out_scale = float(np.sqrt(np.mean(fields_mt**2)))
    if not out_scale > 0:
        out_scale = 1.0
    return MlpParams(
        layer_sizes=sizes,
        weights=weights,
        biases=biases,
        input_mean=mean,
        input_scale=scale,
        output_scale_mt=out_scale,
    )


def _loss_and_grads(kind, params: MlpParams, Xn, C, Y_mt):
    """Mean-squared field error (mT^2) on a batch and parameter gradients.
    ActuationNet/PotentialNet outputs are composed into fields before the
    loss; the DirectNet output is the field itself."""
    B = Xn.shape[0]
    s_out = params.output_scale_mt
    if kind == "potential_net":
        S = C.shape[1]
        acts, Hs, Gs = _forward_tangent(params.weights, params.biases, Xn)
        D = Gs[-1]  # (B, S+1, d)
        scale_inv = s_out / params.input_scale  # (d,)
        Jp = D * scale_inv[None, None, :]
        pred = -(np.einsum("bsk,bs->bk", Jp[:, :S], C) + Jp[:, S])
        res = pred - Y_mt
        loss = float(np.mean(np.sum(res * res, axis=1)))
        g_pred = (2.0 / B) * res
        gJ = np.zeros_like(Jp)
        gJ[:, :S, :] = -np.einsum("bk,bs->bsk", g_pred, C)
        gJ[:, S, :] = -g_pred
        gD = gJ * scale_inv[None, None, :]
        g_a = np.zeros_like(acts[-1])
        gw, gb = _backprop_tangent(params.weights, acts, Hs, Gs, g_a, gD)
        return loss, gw, gb

    acts = _forward(params.weights, params.biases, Xn)
    out = acts[-1] * s_out
    if kind == "actuation_net":
        S = C.shape[1]
        A = out[:, : 3 * S].reshape(B, 3, S)
        pred = np.einsum("bcs,bs->bc", A, C) + out[:, 3 * S :]
        res = pred - Y_mt
        loss = float(np.mean(np.sum(res * res, axis=1)))
        g_pred = (2.0 / B) * res
        g_out = np.empty_like(out)
        g_out[:, : 3 * S] = np.einsum("bc,bs->bcs", g_pred, C).reshape(B, 3 * S)
        g_out[:, 3 * S :] = g_pred
    else:  # direct_net
        res = out - Y_mt
        loss = float(np.mean(np.sum(res * res, axis=1)))
        g_out = (2.0 / B) * res
    gw, gb = _backprop(params.weights, acts, g_out * s_out)
    return loss, gw, gb


def _rmse_mt(kind, params, Xn_raw_inputs, C, Y_mt):
    pred = predict_fields(kind, params, *_split_inputs(kind, Xn_raw_inputs, C)) * 1e3
    return float(np.sqrt(np.mean(np.sum((pred - Y_mt) ** 2, axis=1))))


def _split_inputs(kind, inputs, C):
    if kind == "direct_net":
        return inputs[:, :3], inputs[:, 3:]
    return inputs, C


def train_model(kind: str, rank: ComplexityRank, train, val, cfg: TrainConfig):
    """Adam training with early stopping on the validation RMSE.

    Stops when the validation RMSE fails to improve by at least
    cfg.min_improvement_mt over cfg.patience consecutive epochs; the returned
    artifact carries the parameters of the best-validation epoch.

    Returns (ModelArtifact, history) with history rows
    (epoch, train_rmse_mt, val_rmse_mt, wall_s).
    """
    if kind not in ("actuation_net", "potential_net", "direct_net"):
        raise ValueError(f"train_model handles network kinds only, got {kind!r}")
    if set(train.unique_position_ids()) & set(val.unique_position_ids()):
        raise ValueError("train and validation splits share positions")
    S = train.coil_count
    rng = np.random.default_rng(cfg.seed)

    def prep(ds):
        inputs = (
            np.hstack([ds.positions, ds.currents]) if kind == "direct_net" else ds.positions
        )
        return inputs, ds.currents, 1e3 * ds.fields

    tr_in, tr_C, tr_Y = prep(train)
    va_in, va_C, va_Y = prep(val)
    params = _init_params(kind, S, rank.hidden_widths, tr_in, tr_Y, rng)
    tr_Xn = (tr_in - params.input_mean) / params.input_scale

    m_w = [np.zeros_like(w) for w in params.weights]
    v_w = [np.zeros_like(w) for w in params.weights]
    m_b = [np.zeros_like(b) for b in params.biases]
    v_b = [np.zeros_like(b) for b in params.biases]
    t_step = 0

    n = tr_Xn.shape[0]
    history = []
    best_val = math.inf
    best_snapshot = None
    best_epoch = 0
    anchor_val = math.inf
    stall = 0
    t0 = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            loss, gw, gb = _loss_and_grads(kind, params, tr_Xn[idx], tr_C[idx], tr_Y[idx])
            if not math.isfinite(loss):
                raise ConvergenceError(
                    f"non-finite loss at epoch {epoch} (kind={kind}, seed={cfg.seed})"
                )
            t_step += 1
            c1 = 1.0 - cfg.beta1**t_step
            c2 = 1.0 - cfg.beta2**t_step
            for store_m, store_v, target, grad in (
                (m_w, v_w, params.weights, gw),
                (m_b, v_b, params.biases, gb),
            ):
                for l, g in enumerate(grad):
                    store_m[l] = cfg.beta1 * store_m[l] + (1 - cfg.beta1) * g
                    store_v[l] = cfg.beta2 * store_v[l] + (1 - cfg.beta2) * g * g
                    target[l] = target[l] - cfg.learning_rate * (store_m[l] / c1) / (
                        np.sqrt(store_v[l] / c2) + cfg.eps
                    )
        train_rmse = _rmse_mt(kind, params, tr_in, tr_C, tr_Y)
        val_rmse = _rmse_mt(kind, params, va_in, va_C, va_Y)
        history.append((epoch, train_rmse, val_rmse, time.perf_counter() - t0))
        if not (math.isfinite(train_rmse) and math.isfinite(val_rmse)):
            raise ConvergenceError(f"non-finite RMSE at epoch {epoch} (kind={kind})")
        if val_rmse < best_val:
            best_val = val_rmse
            best_epoch = epoch
            best_snapshot = (
                [w.copy() for w in params.weights],
                [b.copy() for b in params.biases],
            )
        if val_rmse < anchor_val - cfg.min_improvement_mt:
            anchor_val = val_rmse
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    if best_snapshot is not None:
        params.weights, params.biases = best_snapshot
    artifact = make_artifact(
        kind,
        S,
        params,
        training_meta={
            "seed": cfg.seed,
            "stopping_epoch": best_epoch,
            "final_val_rmse_mt": best_val,
        },
    )
    return artifact, history


def make_artifact(kind: str, coil_count: int, params: MlpParams,
                  training_meta: dict | None = None) -> ModelArtifact:
    return ModelArtifact(
        model_kind=kind,
        coil_count=coil_count,
        payload=params,
        normalization={
            "input_mean": params.input_mean.tolist(),
            "input_scale": params.input_scale.tolist(),
            "output_scale_mt": params.output_scale_mt,
        },
        training_meta=training_meta,
    )


def params_to_dict(params: MlpParams) -> dict:
    return {
        "layer_sizes": list(params.layer_sizes),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "input_mean": params.input_mean.tolist(),
        "input_scale": params.input_scale.tolist(),
        "output_scale_mt": params.output_scale_mt,
    }


def params_from_dict(d: dict) -> MlpParams:
    return MlpParams(
        layer_sizes=tuple(d["layer_sizes"]),
        weights=[np.array(w, dtype=float) for w in d["weights"]],
        biases=[np.array(b, dtype=float) for b in d["biases"]],
        input_mean=np.array(d["input_mean"], dtype=float),
        input_scale=np.array(d["input_scale"], dtype=float),
        output_scale_mt=float(d["output_scale_mt"]),
    )
