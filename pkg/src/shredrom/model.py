"""Recurrent encoder + shallow decoder with hand-written reverse-mode gradients.

A 2-layer LSTM consumes a lag window of scaled sensor readings; its final
hidden state feeds a three-affine-layer decoder (rectifier hidden units,
inverted dropout in training mode) that outputs scaled basis coefficients,
optionally followed by scaled parameter estimates.

Gate order inside every 4H-wide parameter block is (input, forget, cell,
output). All arithmetic is float64. Training-mode randomness (dropout
masks) comes from an explicit generator passed by the caller, drawn in a
fixed order: inter-layer LSTM mask first, then one mask per decoder hidden
layer.

Internally sequences are processed time-major with reusable scratch
buffers: a training loop passes one ``scratch`` dict through ``backward``
so multi-megabyte activations are allocated once, not per batch. Scratch
dicts are not thread-safe; use one per training run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numba import njit

from .container import read_container, write_container
from .dataset import Scaler, apply_scaler, invert_scaler

DEFAULT_HIDDEN = 64
DEFAULT_SDN_HIDDEN = (350, 400)
DEFAULT_DROPOUT = 0.1
DEFAULT_FORGET_BIAS = 1.0


def _sigmoid_inplace(a: np.ndarray) -> None:
    # logistic via tanh: avoids exp overflow and stays on the SIMD path
    a *= 0.5
    np.tanh(a, out=a)
    a += 1.0
    a *= 0.5


def _buf(scratch: dict | None, key: str, shape: tuple) -> np.ndarray:
    if scratch is None:
        return np.empty(shape)
    arr = scratch.get(key)
    if arr is None or arr.shape != shape:
        arr = np.empty(shape)
        scratch[key] = arr
    return arr


@dataclass
class LSTMParams:
    """Stacked-cell weights; per layer: w_x (4H, in), w_h (4H, H), b (4H,)."""

    w_x: list[np.ndarray]
    w_h: list[np.ndarray]
    b: list[np.ndarray]

    @property
    def hidden(self) -> int:
        return self.w_h[0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.w_x)

    @property
    def input_dim(self) -> int:
        return self.w_x[0].shape[1]


@dataclass
class SDNParams:
    """Affine stack; rectifier on hidden layers, identity on the output."""

    w: list[np.ndarray]
    b: list[np.ndarray]

    @property
    def out_dim(self) -> int:
        return self.w[-1].shape[0]


@dataclass
class ShredModel:
    lstm: LSTMParams
    sdn: SDNParams
    input_scaler: Scaler
    target_scaler: Scaler
    lag: int
    dropout: float
    n_coeffs: int
    n_param_targets: int = 0

    @property
    def n_sensors(self) -> int:
        return self.lstm.input_dim

    @property
    def out_dim(self) -> int:
        return self.sdn.out_dim

    def copy(self) -> "ShredModel":
        return replace(
            self,
            lstm=LSTMParams(
                [w.copy() for w in self.lstm.w_x],
                [w.copy() for w in self.lstm.w_h],
                [w.copy() for w in self.lstm.b],
            ),
            sdn=SDNParams(
                [w.copy() for w in self.sdn.w], [w.copy() for w in self.sdn.b]
            ),
        )


def param_dict(model: ShredModel) -> dict[str, np.ndarray]:
    """Name -> array views over every trainable parameter."""
    out: dict[str, np.ndarray] = {}
    for layer in range(model.lstm.n_layers):
        out[f"lstm{layer}.w_x"] = model.lstm.w_x[layer]
        out[f"lstm{layer}.w_h"] = model.lstm.w_h[layer]
        out[f"lstm{layer}.b"] = model.lstm.b[layer]
    for i in range(len(model.sdn.w)):
        out[f"sdn.w{i}"] = model.sdn.w[i]
        out[f"sdn.b{i}"] = model.sdn.b[i]
    return out


def init_model(
    n_sensors: int,
    n_coeffs: int,
    lag: int,
    input_scaler: Scaler,
    target_scaler: Scaler,
    n_param_targets: int = 0,
    hidden: int = DEFAULT_HIDDEN,
    sdn_hidden: tuple[int, int] = DEFAULT_SDN_HIDDEN,
    dropout: float = DEFAULT_DROPOUT,
    forget_bias: float = DEFAULT_FORGET_BIAS,
    seed: int = 0,
) -> ShredModel:
    """Fresh model: weights uniform in +-1/sqrt(fan_in), biases zero except
    the forget gate."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    def uniform(rows, cols):
        s = 1.0 / np.sqrt(cols)
        return rng.uniform(-s, s, size=(rows, cols))

    w_x, w_h, b = [], [], []
    in_dim = n_sensors
    for _ in range(2):
        w_x.append(uniform(4 * hidden, in_dim))
        w_h.append(uniform(4 * hidden, hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = forget_bias
        b.append(bias)
        in_dim = hidden
    out_dim = n_coeffs + n_param_targets
    sizes = (hidden, *sdn_hidden, out_dim)
    sdn_w = [uniform(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
    sdn_b = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
    return ShredModel(
        lstm=LSTMParams(w_x, w_h, b),
        sdn=SDNParams(sdn_w, sdn_b),
        input_scaler=input_scaler,
        target_scaler=target_scaler,
        lag=lag,
        dropout=dropout,
        n_coeffs=n_coeffs,
        n_param_targets=n_param_targets,
    )


# --- LSTM kernels (time-major) -----------------------------------------------


def _layer_forward_train(w_x, w_h, b, x_tm, scratch, tag):
    """One layer over time-major input x_tm (L, B, in), caching activations.

    Returns (cache, h_seq_ext) where h_seq_ext has shape (L+1, B, H) with
    row 0 the zero initial state, so h_seq_ext[:-1] is the h_{t-1} sequence
    and h_seq_ext[1:] the outputs.
    """
    length, batch, _ = x_tm.shape
    hidden = w_h.shape[1]
    w_hT = _buf(scratch, f"{tag}.w_hT", (hidden, 4 * hidden))
    np.copyto(w_hT, w_h.T)
    pre = x_tm.reshape(length * batch, -1) @ w_x.T
    pre = pre.reshape(length, batch, 4 * hidden)
    gates = _buf(scratch, f"{tag}.gates", (length, batch, 4 * hidden))
    h_ext = _buf(scratch, f"{tag}.h_ext", (length + 1, batch, hidden))
    c_ext = _buf(scratch, f"{tag}.c_ext", (length + 1, batch, hidden))
    tanh_c = _buf(scratch, f"{tag}.tanh_c", (length, batch, hidden))
    tmp = _buf(scratch, f"{tag}.tmp", (batch, hidden))
    h_ext[0] = 0.0
    c_ext[0] = 0.0
    h = h_ext[0]
    c = c_ext[0]
    for t in range(length):
        a = gates[t]
        np.matmul(h, w_hT, out=a)
        a += pre[t]
        a += b
        _sigmoid_inplace(a[:, : 2 * hidden])
        np.tanh(a[:, 2 * hidden : 3 * hidden], out=a[:, 2 * hidden : 3 * hidden])
        _sigmoid_inplace(a[:, 3 * hidden :])
        ig = a[:, :hidden]
        fg = a[:, hidden : 2 * hidden]
        gg = a[:, 2 * hidden : 3 * hidden]
        og = a[:, 3 * hidden :]
        c_new = c_ext[t + 1]
        np.multiply(fg, c, out=c_new)
        np.multiply(ig, gg, out=tmp)
        c_new += tmp
        c = c_new
        np.tanh(c, out=tanh_c[t])
        h_new = h_ext[t + 1]
        np.multiply(og, tanh_c[t], out=h_new)
        h = h_new
    cache = {"x": x_tm, "gates": gates, "h_ext": h_ext, "c_ext": c_ext,
             "tanh_c": tanh_c}
    return cache, h_ext


def _layer_forward_eval(w_x, w_h, b, x_tm, scratch, tag, want_seq):
    """Lean forward pass: no caches; optionally returns the full h sequence
    (needed as the next layer's input)."""
    length, batch, _ = x_tm.shape
    hidden = w_h.shape[1]
    w_hT = _buf(scratch, f"{tag}.w_hT", (hidden, 4 * hidden))
    np.copyto(w_hT, w_h.T)
    pre = x_tm.reshape(length * batch, -1) @ w_x.T
    pre = pre.reshape(length, batch, 4 * hidden)
    a = _buf(scratch, f"{tag}.a", (batch, 4 * hidden))
    tmp = _buf(scratch, f"{tag}.tmp", (batch, hidden))
    c = _buf(scratch, f"{tag}.c", (batch, hidden))
    tc = _buf(scratch, f"{tag}.tc", (batch, hidden))
    c[...] = 0.0
    h = np.zeros((batch, hidden))
    h_seq = np.empty((length, batch, hidden)) if want_seq else None
    for t in range(length):
        np.matmul(h, w_hT, out=a)
        a += pre[t]
        a += b
        _sigmoid_inplace(a[:, : 2 * hidden])
        np.tanh(a[:, 2 * hidden : 3 * hidden], out=a[:, 2 * hidden : 3 * hidden])
        _sigmoid_inplace(a[:, 3 * hidden :])
        ig = a[:, :hidden]
        fg = a[:, hidden : 2 * hidden]
        gg = a[:, 2 * hidden : 3 * hidden]
        og = a[:, 3 * hidden :]
        c *= fg
        np.multiply(ig, gg, out=tmp)
        c += tmp
        np.tanh(c, out=tc)
        if want_seq:
            np.multiply(og, tc, out=h_seq[t])
            h = h_seq[t]
        else:
            h = og * tc
    return h.copy() if want_seq else h, h_seq


@njit(cache=True, fastmath=False)
def _backward_step(gates_t, tanh_c_t, c_prev, d_h_t, dh_next, dc_in, d_pre_t, dc_out):
    """Fused cell-state backward arithmetic for one time step.

    Reads the cached gate activations and upstream gradients, writes the
    four preactivation gradients into d_pre_t and the carried cell gradient
    into dc_out. Strict IEEE float64; bit-identical to the unfused ufunc
    sequence it replaces.
    """
    n_rows, four_h = gates_t.shape
    hidden = four_h // 4
    for i in range(n_rows):
        for j in range(hidden):
            ig = gates_t[i, j]
            fg = gates_t[i, hidden + j]
            gg = gates_t[i, 2 * hidden + j]
            og = gates_t[i, 3 * hidden + j]
            tc = tanh_c_t[i, j]
            dh = d_h_t[i, j] + dh_next[i, j]
            dc = dc_in[i, j] + dh * og * (1.0 - tc * tc)
            d_pre_t[i, j] = dc * gg * ig * (1.0 - ig)
            d_pre_t[i, hidden + j] = dc * c_prev[i, j] * fg * (1.0 - fg)
            d_pre_t[i, 2 * hidden + j] = dc * ig * (1.0 - gg * gg)
            d_pre_t[i, 3 * hidden + j] = dh * tc * og * (1.0 - og)
            dc_out[i, j] = dc * fg


def _layer_backward(w_x, w_h, cache, d_h_seq, scratch, tag, need_dx):
    """Reverse-mode pass of one layer.

    d_h_seq: (L, B, H) upstream gradient on every h_t (time-major).
    Returns (dx or None, dw_x, dw_h, db).
    """
    gates = cache["gates"]
    length, batch, four_h = gates.shape
    hidden = four_h // 4
    tanh_c = cache["tanh_c"]
    c_ext = cache["c_ext"]
    d_pre = _buf(scratch, f"{tag}.d_pre", (length, batch, four_h))
    dc_in = _buf(scratch, f"{tag}.dc_in", (batch, hidden))
    dc_out = _buf(scratch, f"{tag}.dc_out", (batch, hidden))
    dh_next = _buf(scratch, f"{tag}.dh_next", (batch, hidden))
    dh_next[...] = 0.0
    dc_in[...] = 0.0
    for t in range(length - 1, -1, -1):
        _backward_step(
            gates[t], tanh_c[t], c_ext[t], d_h_seq[t], dh_next, dc_in,
            d_pre[t], dc_out,
        )
        dc_in, dc_out = dc_out, dc_in
        np.matmul(d_pre[t], w_h, out=dh_next)
    flat = d_pre.reshape(length * batch, four_h)
    dw_x = flat.T @ cache["x"].reshape(length * batch, -1)
    dw_h = flat.T @ cache["h_ext"][:-1].reshape(length * batch, hidden)
    db = flat.sum(axis=0)
    dx = (flat @ w_x).reshape(length, batch, -1) if need_dx else None
    return dx, dw_x, dw_h, db


def _dropout_mask(rng, shape, rate):
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def _to_time_major(window: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(window.transpose(1, 0, 2))


def lstm_forward(
    params: LSTMParams,
    window: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
    scratch: dict | None = None,
):
    """Encode window(s) to the final hidden state of the top layer.

    window: (L, N_s) or (B, L, N_s) of scaled readings. Returns h (or a
    batch of h); in train mode returns (h, cache) for the backward pass.
    Dropout, when active, is applied between stacked layers only.
    """
    squeeze = window.ndim == 2
    x = window[None] if squeeze else window
    if x.shape[-1] != params.input_dim:
        raise ValueError(
            f"window feature dim {x.shape[-1]} != n_sensors {params.input_dim}"
        )
    x_tm = _to_time_major(np.asarray(x, dtype=np.float64))
    if train_mode:
        caches = []
        masks = []
        for layer in range(params.n_layers):
            cache, h_ext = _layer_forward_train(
                params.w_x[layer], params.w_h[layer], params.b[layer],
                x_tm, scratch, f"l{layer}",
            )
            caches.append(cache)
            if layer < params.n_layers - 1:
                x_tm = h_ext[1:]
                if dropout > 0.0:
                    if rng is None:
                        raise ValueError("train mode with dropout needs an rng")
                    mask = _dropout_mask(rng, x_tm.shape, dropout)
                    x_tm = x_tm * mask
                    masks.append(mask)
                else:
                    masks.append(None)
        h = h_ext[-1].copy()
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite LSTM activations")
        if squeeze:
            h = h[0]
        return h, {"layers": caches, "masks": masks}
    for layer in range(params.n_layers):
        last = layer == params.n_layers - 1
        h, h_seq = _layer_forward_eval(
            params.w_x[layer], params.w_h[layer], params.b[layer],
            x_tm, scratch, f"e{layer}", want_seq=not last,
        )
        if not last:
            x_tm = h_seq
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite LSTM activations")
    return h[0] if squeeze else h


def lstm_backward(
    params: LSTMParams, cache, dh: np.ndarray, scratch: dict | None = None
):
    """Gradients of all LSTM parameters given d(loss)/d(final hidden)."""
    batch, hidden = dh.shape
    length = cache["layers"][-1]["gates"].shape[0]
    grads = {}
    top = params.n_layers - 1
    upstream = _buf(scratch, f"l{top}.upstream", (length, batch, hidden))
    upstream[...] = 0.0
    upstream[-1] = dh
    for layer in range(params.n_layers - 1, -1, -1):
        dx, dw_x, dw_h, db = _layer_backward(
            params.w_x[layer], params.w_h[layer], cache["layers"][layer],
            upstream, scratch, f"l{layer}", need_dx=layer > 0,
        )
        grads[f"lstm{layer}.w_x"] = dw_x
        grads[f"lstm{layer}.w_h"] = dw_h
        grads[f"lstm{layer}.b"] = db
        if layer > 0:
            mask = cache["masks"][layer - 1]
            upstream = dx if mask is None else dx * mask
    return grads


def sdn_forward(
    params: SDNParams,
    h: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
):
    """Decode latent state(s); in train mode returns (out, cache)."""
    squeeze = h.ndim == 1
    z = h[None] if squeeze else h
    acts = [z]
    pres = []
    masks = []
    n_hidden = len(params.w) - 1
    for i in range(n_hidden):
        a = z @ params.w[i].T + params.b[i]
        z = np.maximum(a, 0.0)
        if train_mode and dropout > 0.0:
            if rng is None:
                raise ValueError("train mode with dropout needs an rng")
            mask = _dropout_mask(rng, z.shape, dropout)
            z = z * mask
            masks.append(mask)
        else:
            masks.append(None)
        pres.append(a)
        acts.append(z)
    out = z @ params.w[-1].T + params.b[-1]
    out = out[0] if squeeze else out
    if train_mode:
        return out, {"acts": acts, "pres": pres, "masks": masks}
    return out


def sdn_backward(params: SDNParams, cache, dout: np.ndarray):
    """Gradients of decoder parameters plus d(loss)/d(latent input)."""
    grads = {}
    n_hidden = len(params.w) - 1
    grads[f"sdn.w{n_hidden}"] = dout.T @ cache["acts"][-1]
    grads[f"sdn.b{n_hidden}"] = dout.sum(axis=0)
    dz = dout @ params.w[-1]
    for i in range(n_hidden - 1, -1, -1):
        if cache["masks"][i] is not None:
            dz = dz * cache["masks"][i]
        da = dz * (cache["pres"][i] > 0.0)
        grads[f"sdn.w{i}"] = da.T @ cache["acts"][i]
        grads[f"sdn.b{i}"] = da.sum(axis=0)
        dz = da @ params.w[i]
    return grads, dz


def network_forward(
    model: ShredModel,
    scaled_windows: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    scratch: dict | None = None,
):
    """Scaled windows (B, L, N_s) -> scaled outputs (B, out_dim)."""
    dropout = model.dropout if train_mode else 0.0
    if train_mode:
        h, lstm_cache = lstm_forward(
            model.lstm, scaled_windows, True, rng, dropout, scratch
        )
        out, sdn_cache = sdn_forward(model.sdn, h, True, rng, dropout)
        return out, {"lstm": lstm_cache, "sdn": sdn_cache}
    h = lstm_forward(model.lstm, scaled_windows, scratch=scratch)
    return sdn_forward(model.sdn, h)


def forward(
    model: ShredModel,
    raw_window: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Predict unscaled outputs from one raw-unit window.

    Accepts up to ``lag`` readings (m, N_s); shorter histories are
    pre-padded with zero vectors after scaling, so the trajectory start
    needs no burn-in.
    """
    raw_window = np.asarray(raw_window, dtype=np.float64)
    if raw_window.ndim != 2:
        raise ValueError("raw_window must be 2-D (readings, sensors)")
    m = raw_window.shape[0]
    if not 1 <= m <= model.lag:
        raise ValueError(f"window holds {m} readings; expected 1..{model.lag}")
    scaled = apply_scaler(model.input_scaler, raw_window)
    if m < model.lag:
        scaled = np.concatenate(
            [np.zeros((model.lag - m, model.n_sensors)), scaled], axis=0
        )
    if train_mode:
        out, _ = network_forward(model, scaled[None], True, rng)
        return invert_scaler(model.target_scaler, out[0])
    out = network_forward(model, scaled[None])
    return invert_scaler(model.target_scaler, out[0])


def backward(
    model: ShredModel,
    scaled_windows: np.ndarray,
    scaled_targets: np.ndarray,
    rng: np.random.Generator | None = None,
    scratch: dict | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients on a training batch (scaled space).

    Loss is the batch mean of per-sample squared-error sums. Dropout masks
    are drawn from ``rng`` during this call and differentiated through.
    Passing a persistent ``scratch`` dict reuses the large activation
    buffers between calls.
    """
    if scaled_windows.shape[0] == 0:
        raise ValueError("empty batch")
    out, cache = network_forward(model, scaled_windows, True, rng, scratch)
    resid = out - scaled_targets
    batch = scaled_windows.shape[0]
    loss = float(np.sum(resid * resid) / batch)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss ({loss})")
    dout = (2.0 / batch) * resid
    grads, dh = sdn_backward(model.sdn, cache["sdn"], dout)
    grads.update(lstm_backward(model.lstm, cache["lstm"], dh, scratch))
    return loss, grads


def eval_loss(
    model: ShredModel,
    scaled_windows: np.ndarray,
    scaled_targets: np.ndarray,
    batch_size: int = 512,
    scratch: dict | None = None,
) -> float:
    """Deterministic loss (no dropout), batched to bound memory."""
    total = 0.0
    n = scaled_windows.shape[0]
    for lo in range(0, n, batch_size):
        out = network_forward(
            model, scaled_windows[lo : lo + batch_size], scratch=scratch
        )
        resid = out - scaled_targets[lo : lo + batch_size]
        total += float(np.sum(resid * resid))
    return total / n


def predict_scaled(
    model: ShredModel,
    scaled_windows: np.ndarray,
    batch_size: int = 512,
    scratch: dict | None = None,
) -> np.ndarray:
    """Eval-mode scaled outputs for a stack of scaled windows."""
    outs = [
        network_forward(model, scaled_windows[lo : lo + batch_size], scratch=scratch)
        for lo in range(0, scaled_windows.shape[0], batch_size)
    ]
    return np.concatenate(outs, axis=0)


# --- checkpoint io -----------------------------------------------------------


def save_model(model: ShredModel, path: str | Path, extra_meta: dict | None = None):
    tensors: dict[str, np.ndarray] = {}
    for name, arr in param_dict(model).items():
        tensors[name] = arr
    tensors["input_lo"] = model.input_scaler.lo
    tensors["input_hi"] = model.input_scaler.hi
    tensors["target_lo"] = model.target_scaler.lo
    tensors["target_hi"] = model.target_scaler.hi
    meta = {
        "lag": model.lag,
        "dropout": model.dropout,
        "n_coeffs": model.n_coeffs,
        "n_param_targets": model.n_param_targets,
    }
    if extra_meta:
        meta.update(extra_meta)
    names = sorted(meta)
    tensors["meta_values"] = np.array([float(meta[k]) for k in names])
    tensors["meta_names"] = np.array(
        [float(b) for b in "\n".join(names).encode("utf-8")]
    )
    write_container(path, tensors)


def load_model(path: str | Path) -> tuple[ShredModel, dict]:
    t = read_container(path)
    names = bytes(int(b) for b in t["meta_names"]).decode("utf-8").split("\n")
    meta = dict(zip(names, t["meta_values"].tolist()))
    w_x, w_h, b = [], [], []
    layer = 0
    while f"lstm{layer}.w_x" in t:
        w_x.append(t[f"lstm{layer}.w_x"])
        w_h.append(t[f"lstm{layer}.w_h"])
        b.append(t[f"lstm{layer}.b"])
        layer += 1
    sdn_w, sdn_b = [], []
    i = 0
    while f"sdn.w{i}" in t:
        sdn_w.append(t[f"sdn.w{i}"])
        sdn_b.append(t[f"sdn.b{i}"])
        i += 1
    model = ShredModel(
        lstm=LSTMParams(w_x, w_h, b),
        sdn=SDNParams(sdn_w, sdn_b),
        input_scaler=Scaler(t["input_lo"], t["input_hi"]),
        target_scaler=Scaler(t["target_lo"], t["target_hi"]),
        lag=int(meta["lag"]),
        dropout=float(meta["dropout"]),
        n_coeffs=int(meta["n_coeffs"]),
        n_param_targets=int(meta["n_param_targets"]),
    )
    return model, meta
