"""Per-process sequence-to-sequence predictor with attention, in plain numpy.

The encoder is a stack of LSTM layers run over the first 90 seconds of a
window. The decoder is an LSTM stack of the same depth whose layers start
from the encoder's final states; it reads the 9-second hint (teacher
forcing) concatenated with its previous attentional output (input feeding).
At each decoder step the top hidden state attends over the encoder's
last-layer hidden trace, and the attentional output of the final step is
projected to the tag space as the prediction of second 100.

Gate order inside every ``[*, 4H]`` block is input, forget, cell, output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ENCODER_LEN, HINT_LEN, NormStats, WindowBatch

ATTENTION_VARIANTS = ("general", "dot")
CHECKPOINT_MAGIC = b"ICSS2S\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_tags: int
    hidden_dim: int = 64
    num_layers: int = 2
    process_id: int = 0
    seed: int = 0
    attention: str = "general"
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_dim < 1 or self.num_layers < 1 or self.n_tags < 1:
            raise ValueError("hidden_dim, num_layers and n_tags must be >= 1")
        if self.attention not in ATTENTION_VARIANTS:
            raise ValueError(f"attention must be one of {ATTENTION_VARIANTS}")
        np.dtype(self.dtype)


@dataclass
class LstmLayerParams:
    wx: np.ndarray  # [input_dim, 4H]
    wh: np.ndarray  # [H, 4H]
    b: np.ndarray  # [4H]

    @property
    def hidden_dim(self) -> int:
        return self.wh.shape[0]


@dataclass
class SeqModelParams:
    config: ModelConfig
    encoder: list[LstmLayerParams]
    decoder: list[LstmLayerParams]
    attn_w: np.ndarray  # [H, H]; unused by "dot" attention
    combine_w: np.ndarray  # [2H, H]
    combine_b: np.ndarray  # [H]
    out_w: np.ndarray  # [H, n]
    out_b: np.ndarray  # [n]
    norm_stats: NormStats | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name, in a fixed order."""
        out = {}
        for side, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                out[f"{side}.{i}.wx"] = layer.wx
                out[f"{side}.{i}.wh"] = layer.wh
                out[f"{side}.{i}.b"] = layer.b
        if self.config.attention == "general":
            out["attn_w"] = self.attn_w
        out["combine_w"] = self.combine_w
        out["combine_b"] = self.combine_b
        out["out_w"] = self.out_w
        out["out_b"] = self.out_b
        return out

    def copy(self) -> "SeqModelParams":
        return _build(self.config, {k: v.copy() for k, v in self._all_arrays().items()}, self.norm_stats)

    def _all_arrays(self) -> dict[str, np.ndarray]:
        out = self.arrays()
        out.setdefault("attn_w", self.attn_w)
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())


def _shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, n, L = config.hidden_dim, config.n_tags, config.num_layers
    shapes: dict[str, tuple[int, ...]] = {}
    for side in ("encoder", "decoder"):
        for i in range(L):
            if i > 0:
                d = H
            elif side == "encoder":
                d = n
            else:
                d = n + H
            shapes[f"{side}.{i}.wx"] = (d, 4 * H)
            shapes[f"{side}.{i}.wh"] = (H, 4 * H)
            shapes[f"{side}.{i}.b"] = (4 * H,)
    shapes["attn_w"] = (H, H)
    shapes["combine_w"] = (2 * H, H)
    shapes["combine_b"] = (H,)
    shapes["out_w"] = (H, n)
    shapes["out_b"] = (n,)
    return shapes


def _build(config: ModelConfig, arrays: dict[str, np.ndarray], norm_stats=None) -> SeqModelParams:
    def stack(side):
        return [
            LstmLayerParams(arrays[f"{side}.{i}.wx"], arrays[f"{side}.{i}.wh"], arrays[f"{side}.{i}.b"])
            for i in range(config.num_layers)
        ]

    return SeqModelParams(
        config,
        stack("encoder"),
        stack("decoder"),
        arrays["attn_w"],
        arrays["combine_w"],
        arrays["combine_b"],
        arrays["out_w"],
        arrays["out_b"],
        norm_stats,
    )


def zeros_params(config: ModelConfig) -> SeqModelParams:
    dt = np.dtype(config.dtype)
    return _build(config, {k: np.zeros(s, dt) for k, s in _shapes(config).items()})


def init_params(config: ModelConfig, seed: int | None = None) -> SeqModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget-gate biases set to 1.

    For LSTM blocks fan_in is input_dim + hidden_dim; biases share the range
    of their layer. Deterministic in ``seed`` (defaults to ``config.seed``).
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    H = config.hidden_dim
    dt = np.dtype(config.dtype)
    shapes = _shapes(config)
    arrays = {}
    for name, shape in shapes.items():
        if ".wx" in name or ".wh" in name or name.endswith(".b"):
            prefix = name.rsplit(".", 1)[0]
            fan_in = shapes[prefix + ".wx"][0] + H
        elif name in ("combine_b", "out_b"):
            fan_in = shapes[name.replace("_b", "_w")][0]
        else:
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        a = rng.uniform(-bound, bound, size=shape)
        if name.endswith(".b"):
            a[H:2 * H] = 1.0
        arrays[name] = a.astype(dt)
    return _build(config, arrays)


# -- elementary pieces -----------------------------------------------------


def _sigmoid(x: np.ndarray, out: np.ndarray) -> np.ndarray:
    # 0.5 * (1 + tanh(x / 2)); far faster than exp-based forms for large arrays
    np.multiply(x, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def _gates(a: np.ndarray, H: int) -> np.ndarray:
    """Activate pre-gates ``a`` [B, 4H] in place."""
    _sigmoid(a[:, :2 * H], a[:, :2 * H])
    np.tanh(a[:, 2 * H:3 * H], out=a[:, 2 * H:3 * H])
    _sigmoid(a[:, 3 * H:], a[:, 3 * H:])
    return a


def _cell_update(g: np.ndarray, c_prev: np.ndarray, H: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = g[:, H:2 * H] * c_prev
    c += g[:, :H] * g[:, 2 * H:3 * H]
    tc = np.tanh(c)
    h = g[:, 3 * H:] * tc
    return h, c, tc


def lstm_cell_forward(params: LstmLayerParams, x, h, c):
    """One LSTM step; accepts single vectors or ``[B, d]`` batches."""
    single = np.ndim(x) == 1
    x, h, c = (np.atleast_2d(np.asarray(v, dtype=params.wx.dtype)) for v in (x, h, c))
    H = params.hidden_dim
    g = _gates(x @ params.wx + h @ params.wh + params.b, H)
    h2, c2, _ = _cell_update(g, c, H)
    if single:
        return h2[0], c2[0]
    return h2, c2


def _cell_backward(dh, dc, g, tc, c_prev, H, out=None):
    """Gradient of pre-gates [B, 4H] and of the previous cell state."""
    i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
    dc = dc + dh * o * (1.0 - tc * tc)
    da = np.empty_like(g) if out is None else out
    da[:, :H] = dc * gg * i * (1.0 - i)
    da[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
    da[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
    da[:, 3 * H:] = dh * tc * o * (1.0 - o)
    return da, dc * f


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - scores.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def attend(decoder_hidden, all_hidden, attn_w=None):
    """Dot-product attention of ``decoder_hidden`` [B, H] over ``all_hidden`` [T, B, H].

    With ``attn_w`` the query is ``decoder_hidden @ attn_w`` (general form).
    Returns ``(context [B, H], weights [B, T])``.
    """
    h = np.atleast_2d(decoder_hidden)
    enc = np.asarray(all_hidden)
    if enc.ndim == 2:
        enc = enc[:, None, :]
    q = h if attn_w is None else h @ attn_w
    eb = enc.transpose(1, 0, 2)  # [B, T, H]
    scores = np.matmul(eb, q[:, :, None])[:, :, 0]
    w = softmax(scores)
    ctx = np.matmul(w[:, None, :], eb)[:, 0, :]
    return ctx, w


# -- encoder ---------------------------------------------------------------


@dataclass
class EncoderOutput:
    """Final ``(h, c)`` of every encoder layer plus the last layer's hidden trace."""

    last_h: list[np.ndarray]
    last_c: list[np.ndarray]
    all_hidden: np.ndarray  # [T, B, H]
    cache: list = field(default_factory=list, repr=False)

    @property
    def last_state(self) -> tuple[np.ndarray, np.ndarray]:
        return self.last_h[-1], self.last_c[-1]


def _layer_forward(p: LstmLayerParams, inputs: np.ndarray, keep: bool):
    T, B, _ = inputs.shape
    H = p.hidden_dim
    dt = p.wx.dtype
    A = inputs.reshape(T * B, -1) @ p.wx
    A = A.reshape(T, B, 4 * H)
    A += p.b
    hs = np.empty((T, B, H), dt)
    cs = np.empty((T, B, H), dt)
    tcs = np.empty((T, B, H), dt)
    rec = np.empty((B, 4 * H), dt)
    tmp = np.empty((B, H), dt)
    h = np.zeros((B, H), dt)
    c = np.zeros((B, H), dt)
    for t in range(T):
        a = A[t]
        np.matmul(h, p.wh, out=rec)
        a += rec
        _gates(a, H)
        # c = f * c_prev + i * g ; h = o * tanh(c)
        np.multiply(a[:, H:2 * H], c, out=cs[t])
        np.multiply(a[:, :H], a[:, 2 * H:3 * H], out=tmp)
        cs[t] += tmp
        c = cs[t]
        np.tanh(c, out=tcs[t])
        np.multiply(a[:, 3 * H:], tcs[t], out=hs[t])
        h = hs[t]
    cache = (inputs, A, cs, tcs, hs) if keep else None
    return hs, h, c, cache


def encode(params: SeqModelParams, encoder_input: np.ndarray, keep_cache: bool = False) -> EncoderOutput:
    x = np.asarray(encoder_input, dtype=params.out_w.dtype)
    last_h, last_c, caches = [], [], []
    for layer in params.encoder:
        x, h, c, cache = _layer_forward(layer, x, keep_cache)
        last_h.append(h)
        last_c.append(c)
        caches.append(cache)
    return EncoderOutput(last_h, last_c, x, caches if keep_cache else [])


def _layer_backward(p: LstmLayerParams, cache, d_hs, dh_last, dc_last, grad: LstmLayerParams):
    """BPTT through one encoder layer; returns the gradient w.r.t. its inputs."""
    inputs, G, cs, tcs, hs = cache
    T, B, H = hs.shape
    dA = np.empty_like(G)
    dh = dh_last
    dc = dc_last
    zero = np.zeros((B, H), G.dtype)
    for t in range(T - 1, -1, -1):
        dh = dh + d_hs[t]
        da, dc = _cell_backward(dh, dc, G[t], tcs[t], cs[t - 1] if t else zero, H, out=dA[t])
        dh = da @ p.wh.T
    flat = dA.reshape(T * B, 4 * H)
    grad.wx += inputs.reshape(T * B, -1).T @ flat
    if T > 1:
        grad.wh += hs[:-1].reshape((T - 1) * B, H).T @ dA[1:].reshape((T - 1) * B, 4 * H)
    grad.b += flat.sum(axis=0)
    return (flat @ p.wx.T).reshape(inputs.shape)


# -- decoder ---------------------------------------------------------------


def _decode(params: SeqModelParams, enc: EncoderOutput, hint: np.ndarray, keep: bool):
    cfg = params.config
    H, L = cfg.hidden_dim, cfg.num_layers
    dt = params.out_w.dtype
    hint = np.asarray(hint, dtype=dt)
    B = hint.shape[1]
    h = list(enc.last_h)
    c = list(enc.last_c)
    z = np.zeros((B, H), dt)
    attn_w = params.attn_w if cfg.attention == "general" else None
    steps = []
    for t in range(hint.shape[0]):
        x = np.concatenate([hint[t], z], axis=1)
        layer_cache = []
        for l, p in enumerate(params.decoder):
            g = _gates(x @ p.wx + h[l] @ p.wh + p.b, H)
            h_new, c_new, tc = _cell_update(g, c[l], H)
            layer_cache.append((x, h[l], c[l], g, tc))
            h[l], c[l] = h_new, c_new
            x = h_new
        top = h[L - 1]
        ctx, w = attend(top, enc.all_hidden, attn_w)
        u = np.concatenate([top, ctx], axis=1)
        z = np.tanh(u @ params.combine_w + params.combine_b)
        if keep:
            steps.append((layer_cache, top, ctx, w, u, z))
    pred = z @ params.out_w + params.out_b
    return pred, steps


def decode(params: SeqModelParams, encoder_output: EncoderOutput, decoder_hint: np.ndarray) -> np.ndarray:
    """Prediction ``[B, n]`` of the second that follows the hint."""
    pred, _ = _decode(params, encoder_output, decoder_hint, keep=False)
    return pred


def predict(params: SeqModelParams, batch: WindowBatch) -> np.ndarray:
    return decode(params, encode(params, batch.encoder_input), batch.decoder_hint)


def forward_loss(params: SeqModelParams, batch: WindowBatch) -> tuple[float, np.ndarray]:
    """Mean squared error over batch and tags, and the prediction."""
    pred = predict(params, batch)
    return _mse(pred, batch.target), pred


def _mse(pred, target) -> float:
    diff = pred - np.asarray(target, dtype=pred.dtype)
    return float(np.mean(diff * diff, dtype=np.float64))


def backward(params: SeqModelParams, batch: WindowBatch, loss_scale: float = 1.0):
    """Exact reverse-mode gradients of ``loss_scale * forward_loss``.

    Returns ``(loss, grads)`` where ``grads`` is a :class:`SeqModelParams`
    holding gradient arrays in place of weights.
    """
    cfg = params.config
    H, L = cfg.hidden_dim, cfg.num_layers
    grads = zeros_params(cfg)
    enc = encode(params, batch.encoder_input, keep_cache=True)
    pred, steps = _decode(params, enc, batch.decoder_hint, keep=True)
    target = np.asarray(batch.target, dtype=pred.dtype)
    loss = _mse(pred, target)

    B, n = pred.shape
    dpred = (pred - target) * (2.0 * loss_scale / (B * n))
    grads.out_w += steps[-1][5].T @ dpred
    grads.out_b += dpred.sum(axis=0)
    dz = dpred @ params.out_w.T

    eb = enc.all_hidden.transpose(1, 0, 2)  # [B, T, H]
    # per-step factors of the encoder-trace gradient, contracted after the loop
    w_steps, dctx_steps, dscore_steps, q_steps = [], [], [], []
    dh = [np.zeros((B, H), pred.dtype) for _ in range(L)]
    dc = [np.zeros((B, H), pred.dtype) for _ in range(L)]
    for t in range(len(steps) - 1, -1, -1):
        layer_cache, top, ctx, w, u, z = steps[t]
        dpre = dz * (1.0 - z * z)
        grads.combine_w += u.T @ dpre
        grads.combine_b += dpre.sum(axis=0)
        du = dpre @ params.combine_w.T
        d_top, d_ctx = du[:, :H], du[:, H:]
        # context = sum_j w_j e_j
        dw = np.matmul(eb, d_ctx[:, :, None])[:, :, 0]
        dscore = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
        q = top @ params.attn_w if cfg.attention == "general" else top
        dq = np.matmul(dscore[:, None, :], eb)[:, 0, :]
        w_steps.append(w)
        dctx_steps.append(d_ctx)
        dscore_steps.append(dscore)
        q_steps.append(q)
        if cfg.attention == "general":
            grads.attn_w += top.T @ dq
            d_top = d_top + dq @ params.attn_w.T
        else:
            d_top = d_top + dq
        dh[L - 1] = dh[L - 1] + d_top
        dx = None
        for l in range(L - 1, -1, -1):
            x, h_prev, c_prev, g, tc = layer_cache[l]
            p, gp = params.decoder[l], grads.decoder[l]
            dh_l = dh[l] if dx is None else dh[l] + dx
            da, dc[l] = _cell_backward(dh_l, dc[l], g, tc, c_prev, H)
            gp.wx += x.T @ da
            gp.wh += h_prev.T @ da
            gp.b += da.sum(axis=0)
            dh[l] = da @ p.wh.T
            dx = da @ p.wx.T
        dz = dx[:, n:]

    # d e_j = sum_t w_tj dctx_t + dscore_tj q_t
    d_eb = np.matmul(np.stack(w_steps, axis=2), np.stack(dctx_steps, axis=1))
    d_eb += np.matmul(np.stack(dscore_steps, axis=2), np.stack(q_steps, axis=1))
    # decoder initial states are the encoder final states
    d_hs = d_eb.transpose(1, 0, 2)
    for l in range(L - 1, -1, -1):
        if l < L - 1:
            upper = d_in
        else:
            upper = d_hs
        d_in = _layer_backward(params.encoder[l], enc.cache[l], upper, dh[l], dc[l], grads.encoder[l])
    return loss * loss_scale, grads


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(params: SeqModelParams, path: str | Path) -> None:
    """Write config, normalization stats and weights in a byte-stable container.

    Layout: magic, u32 header length, UTF-8 JSON header, then every array's
    raw little-endian bytes in header order.
    """
    arrays = params._all_arrays()
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name]).astype(arrays[name].dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "norm_stats": params.norm_stats.to_dict() if params.norm_stats else None,
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> SeqModelParams:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4
    header = json.loads(data[pos:pos + n])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    base = pos + n
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(data, dtype=dt, count=count, offset=base + e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(dt.newbyteorder("="))
    stats = NormStats.from_dict(header["norm_stats"]) if header["norm_stats"] else None
    return _build(ModelConfig(**header["config"]), arrays, stats)


__all__ = [
    "ENCODER_LEN",
    "HINT_LEN",
    "ModelConfig",
    "LstmLayerParams",
    "SeqModelParams",
    "EncoderOutput",
    "init_params",
    "zeros_params",
    "lstm_cell_forward",
    "attend",
    "encode",
    "decode",
    "predict",
    "forward_loss",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]
