"""Autoregressive transformer decoder with a Gaussian output head.

Each input row is ``[z_{t-1}; x_t; e_i]``: the (scaled) previous value, the
calendar covariates and a learned embedding of the series instance. There are
no positional encodings, so the only ordering information the network ever
sees is the causal mask.

Parameters live in a flat ``dict[str, ndarray]``; block ``l`` uses keys
prefixed ``b{l}.``. Heads are stored as ``(H, width, d)`` stacks and fused into
one matrix for the products.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .data import write_npz

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_instances: int = 1
    n_covariates: int = 2
    n_heads: int = 8
    d_k: int = 10
    d_v: int = 10
    ff_dim: int = 40
    embed_dim: int = 10
    n_blocks: int = 3
    dropout: float = 0.1
    use_causal_mask: bool = True
    use_residual_layernorm: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_instances", "n_heads", "d_k", "d_v", "ff_dim", "embed_dim", "n_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_covariates < 0:
            raise ValueError("ModelConfig.n_covariates must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"ModelConfig.dropout must lie in [0, 1), got {self.dropout}")

    @property
    def input_dim(self) -> int:
        return 1 + self.n_covariates + self.embed_dim

    @property
    def width(self) -> int:
        return self.n_heads * self.d_v

    def block_input_width(self, block: int) -> int:
        return self.input_dim if block == 0 else self.width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict:
    c = config
    shapes = {"embedding": (c.n_instances, c.embed_dim)}
    for l in range(c.n_blocks):
        w = c.block_input_width(l)
        p = f"b{l}."
        shapes[p + "Wq"] = (c.n_heads, w, c.d_k)
        shapes[p + "Wk"] = (c.n_heads, w, c.d_k)
        shapes[p + "Wv"] = (c.n_heads, w, c.d_v)
        shapes[p + "Wo"] = (c.width, c.width)
        shapes[p + "bo"] = (c.width,)
        if c.use_residual_layernorm:
            if w != c.width:
                shapes[p + "Ws"] = (w, c.width)
            shapes[p + "ln1_g"] = (c.width,)
            shapes[p + "ln1_b"] = (c.width,)
        shapes[p + "W1"] = (c.width, c.ff_dim)
        shapes[p + "b1"] = (c.ff_dim,)
        shapes[p + "W2"] = (c.ff_dim, c.width)
        shapes[p + "b2"] = (c.width,)
        if c.use_residual_layernorm:
            shapes[p + "ln2_g"] = (c.width,)
            shapes[p + "ln2_b"] = (c.width,)
    shapes["head.W"] = (c.width, 2)
    shapes["head.b"] = (2,)
    return shapes


def num_params(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights; zero biases and embeddings; unit layer-norm gains."""
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if name == "embedding" or leaf.startswith("b") or leaf.endswith("_b") or name == "head.b":
            params[name] = np.zeros(shape)
        elif leaf.endswith("_g"):
            params[name] = np.ones(shape)
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            a = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def zero_params(config: ModelConfig) -> dict:
    return {name: np.zeros(shape) for name, shape in param_shapes(config).items()}


def embed_instance(params: dict, i: int) -> np.ndarray:
    table = params["embedding"]
    if not 0 <= i < len(table):
        raise IndexError(f"instance {i} outside embedding table of {len(table)} rows")
    return table[i].copy()


def _fuse(W):
    H, w, d = W.shape
    return W.transpose(1, 0, 2).reshape(w, H * d)


def _unfuse(dW, H):
    w, hd = dW.shape
    return dW.reshape(w, H, hd // H).transpose(1, 0, 2)


def _split_heads(X, H):
    B, N, hd = X.shape
    return X.reshape(B, N, H, hd // H).transpose(0, 2, 1, 3)


def _merge_heads(X):
    B, H, N, d = X.shape
    return X.transpose(0, 2, 1, 3).reshape(B, N, H * d)


def attention_head(Y, Wq, Wk, Wv, mask=None) -> np.ndarray:
    """Single scaled dot-product attention head over the rows of ``Y``."""
    Q, K, V = nk.matmul(Y, Wq), nk.matmul(Y, Wk), nk.matmul(Y, Wv)
    A = nk.masked_softmax(nk.matmul(Q, np.swapaxes(K, -1, -2)) / math.sqrt(Wq.shape[-1]), mask)
    return nk.matmul(A, V)


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite activation in {where}")


def _block_forward(Y, params, l, config, bias, training, rng, q_from=0):
    # rows before q_from act only as keys/values; the block emits rows q_from: onward
    c = config
    p = f"b{l}."
    H = c.n_heads
    if Y.shape[-1] != c.block_input_width(l):
        raise nk.ShapeError(f"block {l}: input width {Y.shape[-1]} != {c.block_input_width(l)}")
    Wqf, Wkf, Wvf = _fuse(params[p + "Wq"]), _fuse(params[p + "Wk"]), _fuse(params[p + "Wv"])
    Yq = Y[:, q_from:] if q_from else Y
    Q = _split_heads(Yq @ Wqf, H)
    K = _split_heads(Y @ Wkf, H)
    V = _split_heads(Y @ Wvf, H)
    inv = 1.0 / math.sqrt(c.d_k)
    S = Q @ K.swapaxes(-1, -2)
    S *= inv
    A = nk.softmax_inplace(S, None if bias is None else bias[q_from:])
    Ad, att_mask = nk.dropout(A, c.dropout, rng, training)
    O = _merge_heads(Ad @ V)
    P = O @ params[p + "Wo"] + params[p + "bo"]
    cache = dict(Y=Y, Q=Q, K=K, V=V, A=A, Ad=Ad, att_mask=att_mask, O=O,
                 Wqf=Wqf, Wkf=Wkf, Wvf=Wvf, inv=inv, q_from=q_from)
    if c.use_residual_layernorm:
        skip = Yq @ params[p + "Ws"] if p + "Ws" in params else Yq
        U1, cache["ln1"] = nk.layer_norm_forward(skip + P, params[p + "ln1_g"], params[p + "ln1_b"], c.ln_eps)
    else:
        U1 = P
    F, cache["ff"] = nk.feedforward_forward(U1, params[p + "W1"], params[p + "b1"],
                                            params[p + "W2"], params[p + "b2"])
    Fd, cache["ff_mask"] = nk.dropout(F, c.dropout, rng, training)
    if c.use_residual_layernorm:
        U2, cache["ln2"] = nk.layer_norm_forward(U1 + Fd, params[p + "ln2_g"], params[p + "ln2_b"], c.ln_eps)
    else:
        U2 = Fd
    _check_finite(U2, f"decoder block {l}")
    return U2, cache


def _block_backward(dU2, cache, params, l, config, grads):
    c = config
    p = f"b{l}."
    H = c.n_heads
    if c.use_residual_layernorm:
        dR2, grads[p + "ln2_g"], grads[p + "ln2_b"] = nk.layer_norm_backward(dU2, cache["ln2"], params[p + "ln2_g"])
        dFd, dU1 = dR2, dR2.copy()
    else:
        dFd, dU1 = dU2, 0.0
    dF = dFd * cache["ff_mask"] if cache["ff_mask"] is not None else dFd
    dU1_ff, grads[p + "W1"], grads[p + "b1"], grads[p + "W2"], grads[p + "b2"] = nk.feedforward_backward(
        dF, cache["ff"], params[p + "W1"], params[p + "W2"])
    dU1 = dU1 + dU1_ff
    Y = cache["Y"]
    q_from = cache["q_from"]
    Yq = Y[:, q_from:]
    flatY = Y.reshape(-1, Y.shape[-1])
    dY = np.zeros_like(Y)
    if c.use_residual_layernorm:
        dR1, grads[p + "ln1_g"], grads[p + "ln1_b"] = nk.layer_norm_backward(dU1, cache["ln1"], params[p + "ln1_g"])
        dP = dR1
        if p + "Ws" in params:
            grads[p + "Ws"] = Yq.reshape(-1, Yq.shape[-1]).T @ dR1.reshape(-1, dR1.shape[-1])
            dY[:, q_from:] = dR1 @ params[p + "Ws"].T
        else:
            dY[:, q_from:] = dR1
    else:
        dP = dU1
    dPf = dP.reshape(-1, dP.shape[-1])
    grads[p + "Wo"] = cache["O"].reshape(-1, cache["O"].shape[-1]).T @ dPf
    grads[p + "bo"] = dPf.sum(axis=0)
    dO = _split_heads(dP @ params[p + "Wo"].T, H)
    dAd = dO @ cache["V"].swapaxes(-1, -2)
    dV = cache["Ad"].swapaxes(-1, -2) @ dO
    dA = dAd * cache["att_mask"] if cache["att_mask"] is not None else dAd
    dS = nk.masked_softmax_backward(dA, cache["A"])
    dS *= cache["inv"]
    dQ = dS @ cache["K"]
    dK = dS.swapaxes(-1, -2) @ cache["Q"]
    dQm = _merge_heads(dQ)
    grads[p + "Wq"] = _unfuse(Yq.reshape(-1, Yq.shape[-1]).T @ dQm.reshape(-1, dQm.shape[-1]), H)
    dY[:, q_from:] += dQm @ cache["Wqf"].T
    for name, dX, Wf in (("Wk", dK, cache["Wkf"]), ("Wv", dV, cache["Wvf"])):
        dXm = _merge_heads(dX)
        grads[p + name] = _unfuse(flatY.T @ dXm.reshape(-1, dXm.shape[-1]), H)
        dY += dXm @ Wf.T
    return dY


def decoder_block(Y, params, l, config, mask=None, training=False, rng=None):
    """Apply decoder block ``l`` to ``Y`` (shape ``(..., N, width)``)."""
    Y = nk.as_float(Y)
    squeeze = Y.ndim == 2
    if squeeze:
        Y = Y[None]
    allowed = mask.allowed() if isinstance(mask, nk.CausalMask) else mask
    bias = None if allowed is None else nk.mask_bias(allowed)
    out, _ = _block_forward(Y, params, l, config, bias, training, rng)
    return out[0] if squeeze else out


def assemble_inputs(params, inputs, instance):
    emb = params["embedding"][np.asarray(instance)]
    B, N, _ = inputs.shape
    return np.concatenate([inputs, np.broadcast_to(emb[:, None, :], (B, N, emb.shape[-1]))], axis=-1)


def forward(params: dict, config: ModelConfig, inputs: np.ndarray, instance, training: bool = False,
            rng: np.random.Generator | None = None, out_from: int = 0):
    """Per-step Gaussian parameters for a batch of windows.

    ``inputs`` has shape ``(B, N, 1 + n_covariates)``. Returns ``(mu, sigma, cache)``
    where ``mu`` and ``sigma`` are ``(B, N - out_from)`` in scaled space: with
    ``out_from > 0`` only the trailing rows are emitted (the last block then
    skips the queries of earlier rows, which changes nothing about the rows
    that are emitted).
    """
    if training and config.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    inputs = nk.as_float(inputs)
    if inputs.ndim != 3 or inputs.shape[-1] != 1 + config.n_covariates:
        raise nk.ShapeError(f"inputs must be (B, N, {1 + config.n_covariates}), got {inputs.shape}")
    X = assemble_inputs(params, inputs, instance)
    N = X.shape[1]
    bias = nk.mask_bias(nk.CausalMask(N).allowed()) if config.use_causal_mask else None
    caches = []
    Y = X
    if not 0 <= out_from < N:
        raise ValueError(f"out_from must lie in [0, {N}), got {out_from}")
    for l in range(config.n_blocks):
        last = l == config.n_blocks - 1
        Y, bc = _block_forward(Y, params, l, config, bias, training, rng, out_from if last else 0)
        caches.append(bc)
    out = Y @ params["head.W"] + params["head.b"]
    mu, raw = out[..., 0], out[..., 1]
    sigma = nk.softplus(raw) + SIGMA_FLOOR
    _check_finite(sigma, "output head")
    cache = dict(caches=caches, Y=Y, raw=raw, instance=np.asarray(instance), X=X)
    return mu, sigma, cache


def backward(params: dict, config: ModelConfig, cache: dict, dmu: np.ndarray, dsigma: np.ndarray) -> dict:
    """Gradients of a scalar loss given its gradients w.r.t. ``mu`` and ``sigma``.

    The returned dict has one entry per parameter plus ``"inputs"`` (the
    gradient w.r.t. the raw input rows, without the embedding columns).
    """
    grads = {}
    dout = np.stack([dmu, dsigma * nk.sigmoid(cache["raw"])], axis=-1)
    Y = cache["Y"]
    grads["head.W"] = Y.reshape(-1, Y.shape[-1]).T @ dout.reshape(-1, 2)
    grads["head.b"] = dout.reshape(-1, 2).sum(axis=0)
    dY = dout @ params["head.W"].T
    for l in reversed(range(config.n_blocks)):
        dY = _block_backward(dY, cache["caches"][l], params, l, config, grads)
    n_raw = 1 + config.n_covariates
    demb = np.zeros_like(params["embedding"])
    np.add.at(demb, cache["instance"], dY[..., n_raw:].sum(axis=1))
    grads["embedding"] = demb
    grads["inputs"] = dY[..., :n_raw]
    return grads


# -- incremental decoding ---------------------------------------------------

class Decoder:
    """Autoregressive rollout that reuses attention keys/values of earlier rows.

    The shared observed prefix is encoded once per instance; sampled
    continuations (``n`` per instance) only ever compute their own rows. Exact
    for the causally masked model; maskless models recompute every step.
    """

    def __init__(self, params: dict, config: ModelConfig, prefix_inputs: np.ndarray, instance, n: int,
                 max_steps: int):
        self.params = params
        self.config = config
        self.n = n
        self.max_steps = max_steps
        self.instance = np.asarray(instance)
        self.prefix_inputs = np.asarray(prefix_inputs, dtype=np.float64)
        self.steps = []  # raw input rows fed so far, each (k, n, 1 + D)
        if config.use_causal_mask:
            self._encode_prefix()

    def _encode_prefix(self):
        c, params = self.config, self.params
        Y = assemble_inputs(params, self.prefix_inputs, self.instance)
        bias = nk.mask_bias(nk.CausalMask(Y.shape[1]).allowed())
        self.prefix_kv = []
        for l in range(c.n_blocks):
            p = f"b{l}."
            K = _split_heads(Y @ _fuse(params[p + "Wk"]), c.n_heads)
            V = _split_heads(Y @ _fuse(params[p + "Wv"]), c.n_heads)
            self.prefix_kv.append((K, V))
            Y, _ = _block_forward(Y, params, l, c, bias, False, None)
        k = len(self.instance)
        self.step_kv = [(np.empty((k, c.n_heads, self.n, self.max_steps, c.d_k)),
                         np.empty((k, c.n_heads, self.n, self.max_steps, c.d_v)))
                        for _ in range(c.n_blocks)]

    def step(self, x_new: np.ndarray):
        """Feed one new row per trajectory; ``x_new`` is ``(k, n, 1 + D)``. Returns ``(mu, sigma)`` of shape ``(k, n)``."""
        if len(self.steps) >= self.max_steps:
            raise IndexError(f"decoder was sized for {self.max_steps} steps")
        self.steps.append(np.asarray(x_new, dtype=np.float64))
        if not self.config.use_causal_mask:
            return self._recompute()
        s = len(self.steps)
        c, params = self.config, self.params
        k, n, _ = x_new.shape
        H = c.n_heads
        emb = params["embedding"][self.instance]
        Y = np.concatenate([x_new, np.broadcast_to(emb[:, None, :], (k, n, emb.shape[-1]))], axis=-1)
        inv = 1.0 / math.sqrt(c.d_k)
        for l in range(c.n_blocks):
            p = f"b{l}."
            q = (Y @ _fuse(params[p + "Wq"])).reshape(k, n, H, c.d_k).transpose(0, 2, 1, 3)
            kn = (Y @ _fuse(params[p + "Wk"])).reshape(k, n, H, c.d_k).transpose(0, 2, 1, 3)
            vn = (Y @ _fuse(params[p + "Wv"])).reshape(k, n, H, c.d_v).transpose(0, 2, 1, 3)
            Kbuf, Vbuf = self.step_kv[l]
            Kbuf[:, :, :, s - 1] = kn
            Vbuf[:, :, :, s - 1] = vn
            Kst, Vst = Kbuf[:, :, :, :s], Vbuf[:, :, :, :s]               # (k, H, n, s, d)
            Kp, Vp = self.prefix_kv[l]
            s_pre = (q @ Kp.swapaxes(-1, -2)) * inv                       # (k, H, n, Np)
            s_new = (q[..., None, :] @ Kst.swapaxes(-1, -2))[..., 0, :] * inv
            A = nk.masked_softmax(np.concatenate([s_pre, s_new], axis=-1))
            Np = Kp.shape[2]
            O = A[..., :Np] @ Vp + (A[..., None, Np:] @ Vst)[..., 0, :]
            O = O.transpose(0, 2, 1, 3).reshape(k, n, H * c.d_v)
            P = O @ params[p + "Wo"] + params[p + "bo"]
            if c.use_residual_layernorm:
                skip = Y @ params[p + "Ws"] if p + "Ws" in params else Y
                U1 = nk.layer_norm(skip + P, params[p + "ln1_g"], params[p + "ln1_b"], c.ln_eps)
            else:
                U1 = P
            F = nk.feedforward(U1, params[p + "W1"], params[p + "b1"], params[p + "W2"], params[p + "b2"])
            Y = nk.layer_norm(U1 + F, params[p + "ln2_g"], params[p + "ln2_b"], c.ln_eps) \
                if c.use_residual_layernorm else F
            _check_finite(Y, f"decoder block {l}")
        out = Y @ params["head.W"] + params["head.b"]
        return out[..., 0], nk.softplus(out[..., 1]) + SIGMA_FLOOR

    def _recompute(self):
        k, n, _ = self.steps[-1].shape
        pre = np.repeat(self.prefix_inputs[:, None], n, axis=1)
        seq = np.concatenate([pre, np.stack(self.steps, axis=2)], axis=2)
        flat = seq.reshape(k * n, seq.shape[2], seq.shape[3])
        mu, sigma, _ = forward(self.params, self.config, flat, np.repeat(self.instance, n))
        return mu[:, -1].reshape(k, n), sigma[:, -1].reshape(k, n)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params: dict, config: ModelConfig, seed: int | None = None,
                    manifest: dict | None = None) -> Path:
    meta = {"config": config.to_dict(), "seed": seed, "manifest": manifest or {},
            "shapes": {k: list(v.shape) for k, v in params.items()}}
    arrays = {f"param/{k}": np.ascontiguousarray(v, dtype="<f8") for k, v in params.items()}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    write_npz(path, arrays)
    return path


def load_checkpoint(path):
    """Returns ``(params, config, meta)``."""
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"]))
        params = {k[len("param/"):]: npz[k].astype(np.float64) for k in npz.files if k.startswith("param/")}
    config = ModelConfig.from_dict(meta["config"])
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError(f"checkpoint {path}: parameter {name!r} missing or misshapen")
    return params, config, meta
