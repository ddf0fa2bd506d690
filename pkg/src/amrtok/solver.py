"""Encoder-only attention solver over token sequences.

Everything trains through a micro reverse-mode tape: a handful of matrix
and elementwise primitives, each recording one backward closure, replayed
in exact reverse order with additive gradient accumulation at fan-out.
No external ML framework; float64 throughout, so finite-difference
gradient checks hold to tight tolerances.

Blocks are pre-norm: h += MHA(LN(h)); h += FFN(LN(h)). Attention
projections carry no biases; the FFN, the input embedding and the output
head do. The head predicts the absolute next state by default, with a
residual-output flag as the alternative reading.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (AmrtokError, BadMagicError, ConfigError, ShapeError,
                     TruncatedContainerError, VersionMismatchError)
from .posenc import PosEncodingConfig, encode_positions
from .pruning import sample_thresholds
from .tokenizer import features_on_tree, tokenize, tokenize_pair, with_features

_APRM_MAGIC = b"APRM"
_APRM_VERSION = 1


# --------------------------------------------------------------- autodiff

class Var:
    """A float64 tensor tracked on a Tape; grad stays None until backward."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None


def _acc(v, g):
    if v.grad is None:
        v.grad = np.zeros_like(v.value)
    v.grad += g


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape numpy broadcast it from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Recorded primitives; backward() replays closures in reverse order."""

    def __init__(self):
        self._backs = []

    def backward(self, loss):
        if loss.value.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._backs):
            fn()

    def matmul(self, a, b):
        out = Var(a.value @ b.value)

        def back():
            if out.grad is None:
                return
            _acc(a, out.grad @ b.value.T)
            _acc(b, a.value.T @ out.grad)

        self._backs.append(back)
        return out

    def matmul_t(self, a, b):
        """a @ b.T, so attention logits need no explicit transpose node."""
        out = Var(a.value @ b.value.T)

        def back():
            if out.grad is None:
                return
            _acc(a, out.grad @ b.value)
            _acc(b, out.grad.T @ a.value)

        self._backs.append(back)
        return out

    def add(self, a, b):
        out = Var(a.value + b.value)

        def back():
            if out.grad is None:
                return
            _acc(a, _unbroadcast(out.grad, a.value.shape))
            _acc(b, _unbroadcast(out.grad, b.value.shape))

        self._backs.append(back)
        return out

    def add_const(self, a, c):
        out = Var(a.value + c)

        def back():
            if out.grad is None:
                return
            _acc(a, _unbroadcast(out.grad, a.value.shape))

        self._backs.append(back)
        return out

    def mul(self, a, b):
        out = Var(a.value * b.value)

        def back():
            if out.grad is None:
                return
            _acc(a, _unbroadcast(out.grad * b.value, a.value.shape))
            _acc(b, _unbroadcast(out.grad * a.value, b.value.shape))

        self._backs.append(back)
        return out

    def scale(self, a, s):
        out = Var(a.value * float(s))

        def back():
            if out.grad is None:
                return
            _acc(a, out.grad * float(s))

        self._backs.append(back)
        return out

    def relu(self, a):
        mask = a.value > 0.0
        out = Var(np.where(mask, a.value, 0.0))

        def back():
            if out.grad is None:
                return
            _acc(a, out.grad * mask)

        self._backs.append(back)
        return out

    def softmax_rows(self, a):
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        out = Var(y)

        def back():
            if out.grad is None:
                return
            dot = (out.grad * y).sum(axis=-1, keepdims=True)
            _acc(a, y * (out.grad - dot))

        self._backs.append(back)
        return out

    def layernorm(self, a, gain, bias, eps=1e-5):
        x = a.value
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = Var(xhat * gain.value + bias.value)

        def back():
            if out.grad is None:
                return
            g = out.grad
            _acc(bias, _unbroadcast(g, bias.value.shape))
            _acc(gain, _unbroadcast(g * xhat, gain.value.shape))
            gx = g * gain.value
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _acc(a, inv * term)

        self._backs.append(back)
        return out

    def slice_cols(self, a, j0, j1):
        out = Var(a.value[:, j0:j1])

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(a.value)
            g[:, j0:j1] = out.grad
            _acc(a, g)

        self._backs.append(back)
        return out

    def hstack(self, parts):
        out = Var(np.concatenate([p.value for p in parts], axis=1))
        widths = [p.value.shape[1] for p in parts]

        def back():
            if out.grad is None:
                return
            j = 0
            for p, w in zip(parts, widths):
                _acc(p, out.grad[:, j:j + w])
                j += w

        self._backs.append(back)
        return out

    def sum_all(self, a):
        out = Var(a.value.sum())

        def back():
            if out.grad is None:
                return
            _acc(a, np.full_like(a.value, float(out.grad)))

        self._backs.append(back)
        return out


# --------------------------------------------------------------- model

def attention(Q, K, V):
    """softmax(Q K^T / sqrt(d_k)) V with max-subtracted row softmax."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("attention expects 2D Q, K, V")
    if Q.shape[0] != K.shape[0] or K.shape[0] != V.shape[0] or Q.shape[1] != K.shape[1]:
        raise ShapeError(
            f"attention shapes incompatible: Q{Q.shape}, K{K.shape}, V{V.shape}")
    if Q.shape[1] < 1:
        raise ShapeError("attention needs d_k >= 1")
    logits = Q @ K.T / math.sqrt(Q.shape[1])
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w = w / w.sum(axis=1, keepdims=True)
    return w @ V


@dataclass(frozen=True)
class SolverConfig:
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 6
    d_ff: int = 1024
    warmup_steps: int = 4000
    k: int = 2
    c: int = 4
    residual_output: bool = False

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "warmup_steps", "k", "c"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model < 6:
            raise ConfigError(f"d_model must be >= 6, got {self.d_model}")

    @property
    def K(self):
        return self.k * self.k

    @property
    def in_width(self):
        return self.K * (self.c + 3)

    @property
    def out_width(self):
        return self.K * self.c

    def to_json_dict(self):
        return {"d_model": self.d_model, "n_heads": self.n_heads,
                "n_layers": self.n_layers, "d_ff": self.d_ff,
                "warmup_steps": self.warmup_steps, "k": self.k, "c": self.c,
                "residual_output": self.residual_output}

    @classmethod
    def from_json_dict(cls, d):
        known = {"d_model", "n_heads", "n_layers", "d_ff", "warmup_steps",
                 "k", "c", "residual_output"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown solver config keys {sorted(unknown)}")
        return cls(**d)


_LAYER_FIELDS = ("ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo",
                 "ln2_gain", "ln2_bias", "w_ff1", "b_ff1", "w_ff2", "b_ff2")


def param_shapes(cfg):
    """Tensor shapes in declaration order; the checkpoint writes this order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"w_in": (cfg.in_width, d), "b_in": (d,)}
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes[p + "ln1_gain"] = (d,)
        shapes[p + "ln1_bias"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ln2_gain"] = (d,)
        shapes[p + "ln2_bias"] = (d,)
        shapes[p + "w_ff1"] = (d, f)
        shapes[p + "b_ff1"] = (f,)
        shapes[p + "w_ff2"] = (f, d)
        shapes[p + "b_ff2"] = (d,)
    shapes["w_out"] = (d, cfg.out_width)
    shapes["b_out"] = (cfg.out_width,)
    return shapes


@dataclass
class SolverParams:
    config: SolverConfig
    tensors: dict

    @classmethod
    def initialize(cls, cfg, seed):
        """uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN gains."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(cfg).items():
            base = name.rsplit(".", 1)[-1]
            if base.startswith("w"):
                bound = 1.0 / math.sqrt(shape[0])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
            elif base.endswith("gain"):
                tensors[name] = np.ones(shape)
            else:
                tensors[name] = np.zeros(shape)
        return cls(config=cfg, tensors=tensors)

    def copy(self):
        return SolverParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _feature_slots(cfg):
    """Flat-input column indices holding the c per-cell features."""
    idx = []
    for ci in range(cfg.K):
        base = ci * (cfg.c + 3)
        idx.extend(range(base, base + cfg.c))
    return np.array(idx, dtype=np.intp)


def _forward_vars(tape, x_var, pos, pvars, cfg):
    h = tape.add(tape.matmul(x_var, pvars["w_in"]), pvars["b_in"])
    h = tape.add_const(h, pos)
    dh = cfg.d_model // cfg.n_heads
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    for i in range(cfg.n_layers):
        P = {n: pvars[f"layer{i}.{n}"] for n in _LAYER_FIELDS}
        x1 = tape.layernorm(h, P["ln1_gain"], P["ln1_bias"])
        Q = tape.matmul(x1, P["wq"])
        Km = tape.matmul(x1, P["wk"])
        Vm = tape.matmul(x1, P["wv"])
        heads = []
        for hd in range(cfg.n_heads):
            j0, j1 = hd * dh, (hd + 1) * dh
            logits = tape.scale(
                tape.matmul_t(tape.slice_cols(Q, j0, j1), tape.slice_cols(Km, j0, j1)),
                inv_sqrt_dh)
            A = tape.softmax_rows(logits)
            heads.append(tape.matmul(A, tape.slice_cols(Vm, j0, j1)))
        h = tape.add(h, tape.matmul(tape.hstack(heads), P["wo"]))
        x2 = tape.layernorm(h, P["ln2_gain"], P["ln2_bias"])
        f1 = tape.relu(tape.add(tape.matmul(x2, P["w_ff1"]), P["b_ff1"]))
        h = tape.add(h, tape.add(tape.matmul(f1, P["w_ff2"]), P["b_ff2"]))
    y = tape.add(tape.matmul(h, pvars["w_out"]), pvars["b_out"])
    if cfg.residual_output:
        y = tape.add_const(y, x_var.value[:, _feature_slots(cfg)])
    return y


def _token_inputs(tokens, cfg, use_posenc=True):
    X = tokens.feature_matrix()
    N, K, width = X.shape
    if K != cfg.K or width != cfg.c + 3:
        raise ShapeError(
            f"embedding: tokens have K={K}, cell width {width}; "
            f"model expects K={cfg.K}, cell width {cfg.c + 3}")
    if use_posenc:
        pos = encode_positions(tokens.parent_positions(), PosEncodingConfig(cfg.d_model))
    else:
        pos = np.zeros((N, cfg.d_model))
    return X.reshape(N, -1), pos


def forward(tokens, params, cfg=None, use_posenc=True):
    """Predicted next-step token features, N x K x c."""
    cfg = params.config if cfg is None else cfg
    Xf, pos = _token_inputs(tokens, cfg, use_posenc)
    tape = Tape()
    pvars = {k: Var(v) for k, v in params.tensors.items()}
    y = _forward_vars(tape, Var(Xf), pos, pvars, cfg)
    return y.value.reshape(len(tokens.tokens), cfg.K, cfg.c)


def nmse(pred, label):
    """Sum (pred-label)^2 / sum label^2 over the whole sample.

    A label that is identically zero makes the normalizer meaningless;
    plain MSE is used instead and a warning records the fallback.
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ShapeError(f"nmse shapes differ: {pred.shape} vs {label.shape}")
    denom = float((label * label).sum())
    if denom == 0.0:
        warnings.warn("nmse: zero label, falling back to plain MSE")
        return float(((pred - label) ** 2).mean())
    return float(((pred - label) ** 2).sum() / denom)


def lr_schedule(step, cfg):
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ConfigError(f"schedule step must be >= 1, got {step}")
    return cfg.d_model ** -0.5 * min(step ** -0.5,
                                     step * cfg.warmup_steps ** -1.5)


class _SGD:
    def update(self, tensors, grads, lr):
        for name, g in grads.items():
            tensors[name] -= lr * g


class _Adam:
    """Optional extension for runs where plain SGD stalls."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def update(self, tensors, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            tensors[name] -= lr * mhat / (np.sqrt(vhat) + self.eps)


_OPTIMIZERS = {"sgd": _SGD, "adam": _Adam}


def _sample_loss(tape, pvars, cfg, Xf, pos, label_flat):
    y = _forward_vars(tape, Var(Xf), pos, pvars, cfg)
    if y.value.shape != label_flat.shape:
        raise ShapeError(
            f"prediction {y.value.shape} vs label {label_flat.shape}")
    diff = tape.add_const(y, -label_flat)
    total = tape.sum_all(tape.mul(diff, diff))
    denom = float((label_flat * label_flat).sum())
    if denom == 0.0:
        warnings.warn("training sample with zero label: plain MSE step")
        return tape.scale(total, 1.0 / label_flat.size)
    return tape.scale(total, 1.0 / denom)


def make_sample(prev, cur, nxt, tok_cfg):
    """(tokens, flat input, flat label) for one (t-dt, t, t+dt) triple.

    The input tree comes from the pair decision when virtual velocity is
    enabled; the label is the next frame aggregated over that same tree
    so prediction and label tokens align one to one.
    """
    if tok_cfg.use_virtual_velocity:
        tokens = tokenize_pair(prev, cur, tok_cfg)
    else:
        tokens = tokenize(cur, tok_cfg)
    n = len(tokens.tokens)
    label = features_on_tree(tokens, nxt).reshape(n, -1)
    return tokens, label


def train(dataset, cfg, tok_cfg, epochs=1, seed=0, optimizer="sgd",
          max_steps=None, log_every=0):
    """Gradient-descent training over all (prev, cur, next) frame triples.

    Thresholds are freshly sampled per sample so the model sees many tree
    shapes. Returns (params, log) where log has per-step records and
    per-epoch means. Deterministic in (dataset, configs, seed).
    """
    if optimizer not in _OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    samples = []
    for ci, seq in enumerate(dataset):
        if len(seq.frames) < 3:
            raise ConfigError(
                f"case {ci} has {len(seq.frames)} frames; need >= 3 for training triples")
        samples.extend((ci, t) for t in range(1, len(seq.frames) - 1))
    params = SolverParams.initialize(cfg, [seed & 0xFFFFFFFFFFFFFFFF, 0])
    rng_thr = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 1])
    rng_order = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 2])
    opt = _OPTIMIZERS[optimizer]()
    steps = []
    epoch_log = []
    step = 0
    done = False
    for epoch in range(epochs):
        losses = []
        for si in rng_order.permutation(len(samples)):
            ci, t = samples[int(si)]
            seq = dataset[ci]
            thr = sample_thresholds(rng_thr, r_G=tok_cfg.thresholds.r_G)
            scfg = replace(tok_cfg, thresholds=thr)
            tokens, label = make_sample(seq.frames[t - 1], seq.frames[t],
                                        seq.frames[t + 1], scfg)
            Xf, pos = _token_inputs(tokens, cfg)
            step += 1
            lr = lr_schedule(step, cfg)
            tape = Tape()
            pvars = {k: Var(v) for k, v in params.tensors.items()}
            loss = _sample_loss(tape, pvars, cfg, Xf, pos, label)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise AmrtokError(
                    f"non-finite loss {lv} at step {step} (case {ci}, triple {t})")
            tape.backward(loss)
            grads = {k: v.grad for k, v in pvars.items() if v.grad is not None}
            opt.update(params.tensors, grads, lr)
            losses.append(lv)
            steps.append({"epoch": epoch, "step": step, "lr": lr, "loss": lv,
                          "n_tokens": len(tokens.tokens)})
            if log_every and step % log_every == 0:
                print(f"step={step} lr={lr:.3e} loss={lv:.6f}")
            if max_steps is not None and step >= max_steps:
                done = True
                break
        if losses:
            epoch_log.append({"epoch": epoch, "mean_loss": float(np.mean(losses)),
                              "steps": len(losses)})
        if done:
            break
    return params, {"steps": steps, "epochs": epoch_log}


def _grid_metrics(pred_data, true_data):
    err = pred_data - true_data
    denom = float((true_data ** 2).sum())
    mse = float((err ** 2).mean())
    out = {"mse": mse, "mae": float(np.abs(err).mean())}
    out["nmse"] = float((err ** 2).sum() / denom) if denom else mse
    return out


def evaluate(params, dataset, tok_cfg, cfg=None):
    """Grid-space metrics of the trained model against ground truth.

    Predictions are detokenized back to the regular grid. Also reports
    the identity baseline (next state = current state) and the tokenizer
    floor (labels aggregated and detokenized over the same tree), which
    bounds the best MSE any model could reach on that tree.
    """
    from .tokenizer import detokenize

    cfg = params.config if cfg is None else cfg
    cases = []
    for ci, seq in enumerate(dataset):
        if len(seq.frames) < 3:
            raise ConfigError(f"case {ci}: need >= 3 frames to evaluate")
        agg = {"nmse": [], "mse": [], "mae": [], "identity_nmse": [], "floor_mse": []}
        for t in range(1, len(seq.frames) - 1):
            cur, nxt = seq.frames[t], seq.frames[t + 1]
            tokens, label = make_sample(seq.frames[t - 1], cur, nxt, tok_cfg)
            pred = forward(tokens, params, cfg)
            pred_field = detokenize(with_features(tokens, pred))
            m = _grid_metrics(pred_field.data, nxt.data)
            floor_field = detokenize(
                with_features(tokens, label.reshape(pred.shape)))
            agg["nmse"].append(m["nmse"])
            agg["mse"].append(m["mse"])
            agg["mae"].append(m["mae"])
            agg["identity_nmse"].append(_grid_metrics(cur.data, nxt.data)["nmse"])
            agg["floor_mse"].append(_grid_metrics(floor_field.data, nxt.data)["mse"])
        cases.append({"case": ci} | {k: float(np.mean(v)) for k, v in agg.items()})
    overall = {k: float(np.mean([c[k] for c in cases]))
               for k in ("nmse", "mse", "mae", "identity_nmse", "floor_mse")}
    return {"cases": cases, "aggregate": overall}


# --------------------------------------------------------------- checkpoints

def save_params(params, path, extra_config=None):
    """`.aprm` checkpoint: magic, version, JSON config block, f64 tensors."""
    path = Path(path)
    doc = {"solver": params.config.to_json_dict()}
    if extra_config:
        doc.update(extra_config)
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += _APRM_MAGIC
    buf += struct.pack("<II", _APRM_VERSION, len(blob))
    buf += blob
    for name, shape in param_shapes(params.config).items():
        t = np.ascontiguousarray(params.tensors[name], dtype=np.float64)
        if t.shape != shape:
            raise ShapeError(f"checkpoint tensor {name}: shape {t.shape}, expected {shape}")
        buf += struct.pack("<I", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += t.astype("<f8").tobytes()
    path.write_bytes(bytes(buf))
    return path


def load_params(path):
    """Returns (SolverParams, full JSON config document)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _APRM_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, blob_len = struct.unpack_from("<II", raw, 4)
    except struct.error:
        raise TruncatedContainerError(f"{path}: header truncated") from None
    if version != _APRM_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {_APRM_VERSION}")
    off = 12
    doc = json.loads(raw[off:off + blob_len].decode("utf-8"))
    off += blob_len
    cfg = SolverConfig.from_json_dict(doc["solver"])
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        try:
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
        except struct.error:
            raise TruncatedContainerError(f"{path}: tensor table truncated at {name}") from None
        if dims != shape:
            raise ShapeError(f"{path}: tensor {name} has dims {dims}, expected {shape}")
        count = int(np.prod(dims)) if dims else 1
        if off + 8 * count > len(raw):
            raise TruncatedContainerError(f"{path}: tensor {name} payload truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                      offset=off).reshape(dims).copy()
        off += 8 * count
    return SolverParams(config=cfg, tensors=tensors), doc
