"""LSTM noise detector over given-label-probability sequences.

Two stacked LSTM layers (gate order input, forget, candidate, output) read a
sequence of probabilities; the last hidden state of the top layer goes through
an affine head and a sigmoid to give the probability that the sample is
mislabeled. Trained with binary cross-entropy under AdamW.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dyndetect.dynamics import DynamicsTable, resample_rows
from dyndetect.errors import DivergenceError, InvalidArgumentError, ParseError
from dyndetect.optim import AdamWConfig, AdamWState, adamw_step, clip_grad_norm, fan_in_scales

GATES = ("input", "forget", "candidate", "output")


def sigmoid(z):
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass
class DetectorModel:
    layers: list[dict[str, np.ndarray]]  # each: w_ih (4H, in), w_hh (4H, H), b_ih (4H,), b_hh (4H,)
    head_w: np.ndarray  # (H,)
    head_b: np.ndarray  # (1,); scalars are accepted and wrapped
    input_len: int

    def __post_init__(self):
        self.head_b = np.asarray(self.head_b, dtype=np.float64).reshape(1).copy()
        self.input_len = int(self.input_len)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden_size(self) -> int:
        return self.head_w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        """Flat view of all parameters; arrays are shared, not copied."""
        out = {}
        for k, layer in enumerate(self.layers):
            for name in ("w_ih", "w_hh", "b_ih", "b_hh"):
                out[f"layers.{k}.{name}"] = layer[name]
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    @property
    def head_bias(self) -> float:
        return float(self.head_b[0])

    def copy(self) -> "DetectorModel":
        return DetectorModel(
            layers=[{k: v.copy() for k, v in layer.items()} for layer in self.layers],
            head_w=self.head_w.copy(),
            head_b=self.head_bias,
            input_len=self.input_len,
        )

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "input_len": self.input_len,
            "gate_order": list(GATES),
            "layers": [{k: layer[k].ravel().tolist() for k in ("w_ih", "w_hh", "b_ih", "b_hh")} for layer in self.layers],
            "head": {"w": self.head_w.tolist(), "b": self.head_bias},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorModel":
        try:
            h = int(d["hidden_size"])
            layers = []
            for k, raw in enumerate(d["layers"]):
                n_in = 1 if k == 0 else h
                layers.append(
                    {
                        "w_ih": np.array(raw["w_ih"], dtype=np.float64).reshape(4 * h, n_in),
                        "w_hh": np.array(raw["w_hh"], dtype=np.float64).reshape(4 * h, h),
                        "b_ih": np.array(raw["b_ih"], dtype=np.float64).reshape(4 * h),
                        "b_hh": np.array(raw["b_hh"], dtype=np.float64).reshape(4 * h),
                    }
                )
            if len(layers) != int(d["num_layers"]):
                raise ValueError("num_layers does not match layers list")
            model = cls(layers, np.array(d["head"]["w"], dtype=np.float64).reshape(h), float(d["head"]["b"]), int(d["input_len"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed detector checkpoint: {exc}") from None
        if not all(np.isfinite(p).all() for p in model.params().values()):
            raise ParseError("detector checkpoint has non-finite parameters")
        return model

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "DetectorModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def init_detector(input_len: int, hidden_size: int = 64, num_layers: int = 2, seed: int = 0) -> DetectorModel:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) init with the forget-gate bias at 1."""
    rng = np.random.default_rng(seed)
    h = hidden_size
    bound = 1.0 / math.sqrt(h)
    layers = []
    for k in range(num_layers):
        n_in = 1 if k == 0 else h
        layer = {
            "w_ih": rng.uniform(-bound, bound, size=(4 * h, n_in)),
            "w_hh": rng.uniform(-bound, bound, size=(4 * h, h)),
            "b_ih": rng.uniform(-bound, bound, size=4 * h),
            "b_hh": rng.uniform(-bound, bound, size=4 * h),
        }
        layer["b_ih"][h : 2 * h] = 1.0
        layer["b_hh"][h : 2 * h] = 0.0
        layers.append(layer)
    head_w = rng.uniform(-bound, bound, size=h)
    head_b = float(rng.uniform(-bound, bound))
    return DetectorModel(layers, head_w, head_b, int(input_len))


def zero_detector(input_len: int, hidden_size: int = 64, num_layers: int = 2) -> DetectorModel:
    h = hidden_size
    layers = [
        {
            "w_ih": np.zeros((4 * h, 1 if k == 0 else h)),
            "w_hh": np.zeros((4 * h, h)),
            "b_ih": np.zeros(4 * h),
            "b_hh": np.zeros(4 * h),
        }
        for k in range(num_layers)
    ]
    return DetectorModel(layers, np.zeros(h), 0.0, int(input_len))


# ------------------------------------------------------------------ forward / BPTT


def _gate_affine(h_size):
    # sigmoid(z) = 0.5 * (1 + tanh(z / 2)): one tanh call covers all four gates
    scale = np.full(4 * h_size, 0.5)
    scale[2 * h_size : 3 * h_size] = 1.0
    offset = np.full(4 * h_size, 0.5)
    offset[2 * h_size : 3 * h_size] = 0.0
    return scale, offset


def _layer_forward(layer, x):
    """x: (B, T, in). Returns hidden sequence (B, T, H) and the cache for backprop."""
    b, t_len, _ = x.shape
    h_size = layer["w_hh"].shape[1]
    scale, offset = _gate_affine(h_size)
    pre_in = (x @ layer["w_ih"].T + (layer["b_ih"] + layer["b_hh"])) * scale
    w_hh_t = layer["w_hh"].T * scale
    h = np.zeros((b, h_size))
    c = np.zeros((b, h_size))
    hs = np.empty((b, t_len, h_size))
    cs = np.empty((b, t_len, h_size))
    tanh_cs = np.empty((b, t_len, h_size))
    gates = np.empty((b, t_len, 4 * h_size))
    for t in range(t_len):
        g = np.tanh(pre_in[:, t] + h @ w_hh_t)
        g *= scale
        g += offset
        gates[:, t] = g
        c = g[:, h_size : 2 * h_size] * c + g[:, :h_size] * g[:, 2 * h_size : 3 * h_size]
        tc = np.tanh(c)
        h = g[:, 3 * h_size :] * tc
        cs[:, t] = c
        tanh_cs[:, t] = tc
        hs[:, t] = h
    return hs, (x, hs, cs, tanh_cs, gates)


def _layer_backward(layer, cache, dhs):
    """Backprop through one layer. dhs: gradient wrt every output h_t. Returns (dx, grads)."""
    x, hs, cs, tanh_cs, gates = cache
    b, t_len, h_size = hs.shape
    w_hh = layer["w_hh"]
    # d gate / d pre-activation, for all steps at once
    deriv = gates * (1.0 - gates)
    cand = gates[:, :, 2 * h_size : 3 * h_size]
    deriv[:, :, 2 * h_size : 3 * h_size] = 1.0 - cand * cand
    c_prev_all = np.concatenate([np.zeros((b, 1, h_size)), cs[:, :-1]], axis=1)

    dh_next = np.zeros((b, h_size))
    dc_next = np.zeros((b, h_size))
    da_all = np.empty_like(gates)
    for t in range(t_len - 1, -1, -1):
        g = gates[:, t]
        tc = tanh_cs[:, t]
        dh = dhs[:, t] + dh_next
        o = g[:, 3 * h_size :]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da = da_all[:, t]
        da[:, :h_size] = dc * g[:, 2 * h_size : 3 * h_size]
        da[:, h_size : 2 * h_size] = dc * c_prev_all[:, t]
        da[:, 2 * h_size : 3 * h_size] = dc * g[:, :h_size]
        da[:, 3 * h_size :] = dh * tc
        da *= deriv[:, t]
        dc_next = dc * g[:, h_size : 2 * h_size]
        dh_next = da @ w_hh
    flat_da = da_all.reshape(b * t_len, 4 * h_size)
    h_prev = np.concatenate([np.zeros((b, 1, h_size)), hs[:, :-1]], axis=1).reshape(b * t_len, h_size)
    grads = {
        "w_ih": flat_da.T @ x.reshape(b * t_len, -1),
        "w_hh": flat_da.T @ h_prev,
        "b_ih": flat_da.sum(axis=0),
    }
    grads["b_hh"] = grads["b_ih"].copy()
    dx = (flat_da @ layer["w_ih"]).reshape(x.shape)
    return dx, grads


def _check_batch(model: DetectorModel, seqs) -> np.ndarray:
    seqs = np.asarray(seqs, dtype=np.float64)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    if seqs.ndim != 2 or seqs.shape[1] != model.input_len:
        raise InvalidArgumentError(f"sequence length {seqs.shape[-1]} != detector input_len {model.input_len}; resample first")
    if not np.isfinite(seqs).all():
        raise InvalidArgumentError("sequence entries must be finite")
    return seqs


def _forward(model: DetectorModel, seqs: np.ndarray):
    x = seqs[:, :, None]
    caches = []
    for layer in model.layers:
        x, cache = _layer_forward(layer, x)
        caches.append(cache)
    logits = x[:, -1] @ model.head_w + model.head_bias
    return logits, caches


def detector_logits(model: DetectorModel, seqs) -> np.ndarray:
    seqs = _check_batch(model, seqs)
    return _forward(model, seqs)[0]


def detector_forward(model: DetectorModel, seq) -> float | np.ndarray:
    """Mislabel probability for one sequence (float) or a batch (array)."""
    single = np.ndim(seq) == 1
    p = sigmoid(detector_logits(model, seq))
    return float(p[0]) if single else p


def detector_loss_and_grad(model: DetectorModel, seqs, flags) -> tuple[float, dict[str, np.ndarray]]:
    """Mean binary cross-entropy and its gradient keyed like :meth:`DetectorModel.params`."""
    seqs = _check_batch(model, seqs)
    k = np.asarray(flags, dtype=np.float64).reshape(-1)
    if k.shape[0] != seqs.shape[0]:
        raise InvalidArgumentError("one flag per sequence required")
    if not np.isin(k, (0.0, 1.0)).all():
        raise InvalidArgumentError("flags must be 0/1")
    b = seqs.shape[0]
    z, caches = _forward(model, seqs)
    # softplus(z) - k*z == -[k log p + (1-k) log(1-p)]
    loss = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - k * z))
    dz = (sigmoid(z) - k) / b

    h_last = caches[-1][1][:, -1]
    grads = {"head.w": h_last.T @ dz, "head.b": np.array([dz.sum()])}
    dhs = np.zeros_like(caches[-1][1])
    dhs[:, -1] = np.outer(dz, model.head_w)
    for idx in range(model.num_layers - 1, -1, -1):
        dhs, layer_grads = _layer_backward(model.layers[idx], caches[idx], dhs)
        for name, g in layer_grads.items():
            grads[f"layers.{idx}.{name}"] = g
    return loss, grads


# ---------------------------------------------------------------------- training


@dataclass
class DetectorTrainConfig:
    epochs: int = 10
    learning_rate: float = 0.1
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    # scale each weight matrix's step by 1/sqrt(fan_in); without it lr=0.1 saturates H=64 gates
    fan_in_scaled: bool = True
    hidden_size: int = 64
    num_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be >= 0")
        if self.learning_rate < 0 or self.batch_size < 1:
            raise InvalidArgumentError("learning_rate must be >= 0 and batch_size >= 1")

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorTrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


FINETUNE_LR = 0.03


@dataclass
class TrainResult:
    model: DetectorModel
    epoch_losses: list[float] = field(default_factory=list)


def _require_flags(table: DynamicsTable):
    if table.flags is None:
        raise InvalidArgumentError("detector training needs a table with flags")


def _fit(model: DetectorModel, seqs: np.ndarray, flags: np.ndarray, config: DetectorTrainConfig) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    params = model.params()
    state = AdamWState()
    opt = config.adamw()
    scales = fan_in_scales(params) if config.fan_in_scaled else None
    n = seqs.shape[0]
    losses = [_mean_loss(model, seqs, flags)]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = detector_loss_and_grad(model, seqs[idx], flags[idx])
            if not math.isfinite(loss):
                raise DivergenceError(epoch + 1)
            total += loss * idx.size
            if config.learning_rate == 0.0:
                continue
            clip_grad_norm(grads, config.clip_norm)
            try:
                adamw_step(params, grads, state, opt, scales)
            except FloatingPointError as exc:
                raise DivergenceError(epoch + 1, str(exc)) from None
        losses.append(total / n)
    return TrainResult(model, losses)


def _mean_loss(model, seqs, flags, chunk=1024):
    total = 0.0
    for start in range(0, seqs.shape[0], chunk):
        loss, _ = _loss_only(model, seqs[start : start + chunk], flags[start : start + chunk])
        total += loss * min(chunk, seqs.shape[0] - start)
    return total / seqs.shape[0]


def _loss_only(model, seqs, flags):
    z = detector_logits(model, seqs)
    k = flags.astype(np.float64)
    return float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - k * z)), z


def train_detector(table: DynamicsTable, config: DetectorTrainConfig | None = None, *, return_losses: bool = False):
    """Fit a fresh detector on ``table``'s sequences against its flags.

    The detector's ``input_len`` is the table's epoch count. With
    ``return_losses`` a :class:`TrainResult` is returned, whose
    ``epoch_losses[0]`` is the loss before training and ``[e]`` the mean
    mini-batch loss during epoch ``e``.
    """
    config = config or DetectorTrainConfig()
    _require_flags(table)
    model = init_detector(table.num_epochs, config.hidden_size, config.num_layers, seed=config.seed)
    result = _fit(model, table.values.copy(), table.flags, config)
    return result if return_losses else result.model


def fine_tune(model: DetectorModel, table: DynamicsTable, config: DetectorTrainConfig | None = None, *, return_losses: bool = False):
    """Continue training a copy of ``model`` on ``table`` (resampled to ``model.input_len``)."""
    config = config or DetectorTrainConfig(learning_rate=FINETUNE_LR)
    _require_flags(table)
    seqs = resample_rows(table.values, model.input_len)
    result = _fit(model.copy(), seqs, table.flags, config)
    return result if return_losses else result.model


def score(model: DetectorModel, table: DynamicsTable, chunk: int = 512) -> np.ndarray:
    """Per-row mislabel scores; rows are resampled to the detector's input length."""
    if table.num_samples == 0:
        raise InvalidArgumentError("cannot score an empty table")
    seqs = resample_rows(table.values, model.input_len)
    out = np.empty(seqs.shape[0])
    for start in range(0, seqs.shape[0], chunk):
        out[start : start + chunk] = sigmoid(detector_logits(model, seqs[start : start + chunk]))
    return out


def baseline_score(table: DynamicsTable) -> np.ndarray:
    """One minus the mean given-label probability over epochs."""
    return 1.0 - table.values.mean(axis=1)


def hard_decisions(scores, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(scores) > threshold).astype(np.int64)
