"""Tiny models with hand-written forward and backward passes.

Three kinds are supported:

* ``mlp`` -- fully connected net, any depth, tanh/relu/linear activations.
* ``attention_block`` -- one multi-head self-attention layer followed by a
  token-wise feed-forward net, mean-pooled into a linear classifier head.
  No layer norm and no residuals, which keeps the exact gradient short
  enough to derive and audit by hand.
* ``quadratic`` -- the bowl 0.5*|theta - x|^2 whose gradient is known in
  closed form; used as an analytic target in tests and self-checks.

Noise can be injected either into the pre-activation output of a named
affine site (for score-function gradient estimation) or into a block of
parameters (for simultaneous-perturbation estimation). ``oracle_gradient``
computes the exact analytic gradient; it exists for verification metrics
only and is never consulted by the perturbation-based training path.

Besides the scalar ``forward``, two batched paths evaluate many queries at
once: ``forward_many_params`` (one parameter vector per query) and
``forward_many_actnoise`` (shared parameters, one activation-noise vector
per query). Both are plain einsum pipelines over a query axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

ACTIVATIONS = ("tanh", "relu", "linear")
LOSSES = ("cross_entropy", "mse")
KINDS = ("mlp", "attention_block", "quadratic")

# Affine sites of the attention block, in forward order. Each one is the
# output of exactly one affine map, which is what activation-noise
# estimation needs.
ATTN_SITES = ("q", "k", "v", "attn_out", "ffn1", "ffn2", "head")


class NumericalBlowupError(RuntimeError):
    """Non-finite value met during evaluation."""

    def __init__(self, where: str, step: Optional[int] = None):
        self.where = where
        self.step = step
        msg = f"numerical blowup at {where}"
        if step is not None:
            msg += f" (step {step})"
        super().__init__(msg)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``layer_sizes`` means [d_in, hidden..., n_out] for mlp,
    [d_model, d_ff, n_classes] for attention_block, and [dim] for quadratic.
    """

    kind: str
    layer_sizes: tuple
    activation: str = "tanh"
    loss: str = "cross_entropy"
    num_heads: int = 1
    seq_len: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        sizes = tuple(int(s) for s in self.layer_sizes)
        if any(s <= 0 for s in sizes):
            raise ValueError("layer sizes must be positive")
        object.__setattr__(self, "layer_sizes", sizes)
        if self.kind == "mlp" and len(sizes) < 2:
            raise ValueError("mlp needs at least [d_in, d_out]")
        if self.kind == "attention_block":
            if len(sizes) != 3:
                raise ValueError("attention_block layer_sizes must be [d_model, d_ff, n_classes]")
            d_model = sizes[0]
            if d_model % self.num_heads != 0:
                raise ValueError("d_model must be divisible by num_heads")
            if self.seq_len < 1:
                raise ValueError("seq_len must be >= 1")
        if self.kind == "quadratic" and len(sizes) != 1:
            raise ValueError("quadratic layer_sizes must be [dim]")

    @property
    def head_dim(self) -> int:
        return self.layer_sizes[0] // self.num_heads

    @property
    def input_dim(self) -> int:
        if self.kind == "mlp":
            return self.layer_sizes[0]
        if self.kind == "attention_block":
            return self.seq_len * self.layer_sizes[0]
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]


def mlp(layer_sizes, activation="tanh", loss="cross_entropy") -> ModelSpec:
    return ModelSpec(kind="mlp", layer_sizes=tuple(layer_sizes), activation=activation, loss=loss)


def attention_block(d_model, d_ff, n_classes, seq_len, num_heads=1,
                    activation="tanh", loss="cross_entropy") -> ModelSpec:
    return ModelSpec(kind="attention_block", layer_sizes=(d_model, d_ff, n_classes),
                     activation=activation, loss=loss, num_heads=num_heads, seq_len=seq_len)


def quadratic(dim) -> ModelSpec:
    return ModelSpec(kind="quadratic", layer_sizes=(dim,), loss="mse")


# ---------------------------------------------------------------------------
# Parameter layout


@lru_cache(maxsize=None)
def param_blocks(model: ModelSpec) -> "dict[str, tuple[slice, tuple]]":
    """Ordered map of block name -> (slice into flat theta, shape).

    Cached per spec; treat the returned dict as read-only.
    """
    blocks: dict[str, tuple[slice, tuple]] = {}
    pos = 0

    def add(name, shape):
        nonlocal pos
        n = int(np.prod(shape))
        blocks[name] = (slice(pos, pos + n), tuple(shape))
        pos += n

    if model.kind == "mlp":
        sizes = model.layer_sizes
        for l in range(len(sizes) - 1):
            add(f"w{l}", (sizes[l + 1], sizes[l]))
            add(f"b{l}", (sizes[l + 1],))
    elif model.kind == "attention_block":
        d, d_ff, n_cls = model.layer_sizes
        add("attn_q", (d, d))
        add("attn_k", (d, d))
        add("attn_v", (d, d))
        add("attn_o", (d, d))
        add("ffn_w1", (d, d_ff))
        add("ffn_b1", (d_ff,))
        add("ffn_w2", (d_ff, d))
        add("ffn_b2", (d,))
        add("head_w", (d, n_cls))
        add("head_b", (n_cls,))
    else:
        add("theta", (model.layer_sizes[0],))
    return blocks


@lru_cache(maxsize=None)
def param_count(model: ModelSpec) -> int:
    blocks = param_blocks(model)
    last = next(reversed(blocks.values()))
    return last[0].stop


def views(model: ModelSpec, theta: np.ndarray) -> "dict[str, np.ndarray]":
    """Reshaped views into the flat parameter vector (no copies)."""
    if theta.shape != (param_count(model),):
        raise ValueError(f"theta has {theta.shape}, model wants ({param_count(model)},)")
    return {name: theta[sl].reshape(shape) for name, (sl, shape) in param_blocks(model).items()}


@lru_cache(maxsize=None)
def param_groups(model: ModelSpec) -> "dict[str, slice]":
    """Coarse parameter groups addressable by a noise site or a grad clip.

    mlp: one group per affine layer; attention_block: attn / ffn / head;
    quadratic: the whole vector. Groups are contiguous by construction.
    """
    blocks = param_blocks(model)
    if model.kind == "mlp":
        n_layers = len(model.layer_sizes) - 1
        return {
            f"layer{l}": slice(blocks[f"w{l}"][0].start, blocks[f"b{l}"][0].stop)
            for l in range(n_layers)
        }
    if model.kind == "attention_block":
        return {
            "attn": slice(blocks["attn_q"][0].start, blocks["attn_o"][0].stop),
            "ffn": slice(blocks["ffn_w1"][0].start, blocks["ffn_b2"][0].stop),
            "head": slice(blocks["head_w"][0].start, blocks["head_b"][0].stop),
        }
    return {"theta": blocks["theta"][0]}


def group_names(model: ModelSpec) -> tuple:
    return tuple(param_groups(model).keys())


def init_params(model: ModelSpec, rng) -> np.ndarray:
    """Flat parameter vector; weights ~ N(0, 1/fan_in), biases zero."""
    from .rng import as_generator

    gen = as_generator(rng)
    theta = np.zeros(param_count(model))
    for name, (sl, shape) in param_blocks(model).items():
        if name.startswith("b") or name.endswith("_b") or "_b" in name:
            continue
        if model.kind == "quadratic":
            continue
        fan_in = shape[1] if (model.kind == "mlp" and len(shape) == 2) else shape[0]
        if len(shape) == 2:
            theta[sl] = (gen.standard_normal(shape) / np.sqrt(fan_in)).ravel()
    return theta


# ---------------------------------------------------------------------------
# Activations and losses


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    return np.ones_like(a)


def _ce(logits: np.ndarray, label) -> np.ndarray:
    """Stable cross entropy; logits may carry leading batch axes."""
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    return lse - logits[..., int(label)]


def _mse(out: np.ndarray, target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    d = out - t
    return 0.5 * (d * d).sum(axis=-1)


def _loss_of_output(out: np.ndarray, label, loss: str) -> np.ndarray:
    return _ce(out, label) if loss == "cross_entropy" else _mse(out, label)


# ---------------------------------------------------------------------------
# Noise sites


@dataclass(frozen=True)
class NoiseSite:
    """Where a perturbation enters and how wide it is.

    ``site`` is "pre_activation" (noise added to the output of affine map
    number ``layer`` before the nonlinearity) or "parameters" (noise added
    to the parameter group number ``layer``).
    """

    layer: int
    site: str
    sigma: float

    def __post_init__(self):
        if self.site not in ("pre_activation", "parameters"):
            raise ValueError(f"unknown site kind {self.site!r}")
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")


def activation_site_dims(model: ModelSpec) -> tuple:
    """Flattened width of every pre-activation site, in forward order."""
    if model.kind == "mlp":
        return tuple(model.layer_sizes[1:])
    if model.kind == "attention_block":
        d, d_ff, n_cls = model.layer_sizes
        t = model.seq_len
        return (t * d, t * d, t * d, t * d, t * d_ff, t * d, n_cls)
    return ()


def site_param_group(model: ModelSpec, site: NoiseSite) -> slice:
    """Flat-theta slice addressed by a site (covered params for LR, the
    perturbed block for parameter noise)."""
    groups = list(param_groups(model).values())
    if site.site == "parameters":
        if not 0 <= site.layer < len(groups):
            raise ValueError(f"parameter group {site.layer} out of range")
        return groups[site.layer]
    blocks = param_blocks(model)
    if model.kind == "mlp":
        n_layers = len(model.layer_sizes) - 1
        if not 0 <= site.layer < n_layers:
            raise ValueError(f"activation site {site.layer} out of range")
        return slice(blocks[f"w{site.layer}"][0].start, blocks[f"b{site.layer}"][0].stop)
    if model.kind == "attention_block":
        spans = {
            0: ("attn_q", "attn_q"),
            1: ("attn_k", "attn_k"),
            2: ("attn_v", "attn_v"),
            3: ("attn_o", "attn_o"),
            4: ("ffn_w1", "ffn_b1"),
            5: ("ffn_w2", "ffn_b2"),
            6: ("head_w", "head_b"),
        }
        if site.layer not in spans:
            raise ValueError(f"activation site {site.layer} out of range")
        first, last = spans[site.layer]
        return slice(blocks[first][0].start, blocks[last][0].stop)
    raise ValueError(f"{model.kind} has no activation sites")


def activation_site_dim(model: ModelSpec, layer: int) -> int:
    dims = activation_site_dims(model)
    if not 0 <= layer < len(dims):
        raise ValueError(f"activation site {layer} out of range")
    return dims[layer]


# ---------------------------------------------------------------------------
# Scalar forward


def _check_input(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != model.input_dim:
        raise ValueError(f"input has {x.shape[0]} features, model wants {model.input_dim}")
    return x


def forward(model: ModelSpec, theta: np.ndarray, x, label, noise=None):
    """Evaluate the loss on one datum; returns (loss, cache).

    ``noise`` is None or a pair (NoiseSite, z). Parameter noise evaluates
    at theta + z on the site's group; pre-activation noise adds z to the
    site's affine output before the nonlinearity. The cache carries the
    model output and the embedding (the representation fed to the head).
    """
    x = _check_input(model, x)
    site_layer = -1
    z = None
    if noise is not None:
        site, z = noise
        z = np.asarray(z, dtype=np.float64).ravel()
        if site.site == "parameters":
            sl = site_param_group(model, site)
            if z.shape[0] != sl.stop - sl.start:
                raise ValueError("noise does not match the parameter group size")
            theta = theta.copy()
            theta[sl] += z
        else:
            if z.shape[0] != activation_site_dim(model, site.layer):
                raise ValueError("noise does not match the activation site size")
            site_layer = site.layer

    if model.kind == "quadratic":
        d = theta - x
        loss = 0.5 * float(d @ d)
        cache = {"output": theta.copy(), "embedding": x}
        _ensure_finite_scalar(model, theta, x, label, loss)
        return loss, cache

    v = views(model, theta)
    if model.kind == "mlp":
        n_layers = len(model.layer_sizes) - 1
        h = x
        pre, acts = [], [x]
        for l in range(n_layers):
            a = v[f"w{l}"] @ h + v[f"b{l}"]
            if l == site_layer:
                a = a + z
            pre.append(a)
            h = _act(a, model.activation) if l < n_layers - 1 else a
            acts.append(h)
        out = acts[-1]
        embedding = acts[-2]
        loss = float(_loss_of_output(out, label, model.loss))
        cache = {"output": out, "embedding": embedding, "pre": pre, "acts": acts}
        _ensure_finite_scalar(model, theta, x, label, loss)
        return loss, cache

    # attention block
    t, d = model.seq_len, model.layer_sizes[0]
    s = x.reshape(t, d)
    q = s @ v["attn_q"]
    if site_layer == 0:
        q = q + z.reshape(t, d)
    k = s @ v["attn_k"]
    if site_layer == 1:
        k = k + z.reshape(t, d)
    val = s @ v["attn_v"]
    if site_layer == 2:
        val = val + z.reshape(t, d)
    o = _attend(model, q, k, val)
    u = o @ v["attn_o"]
    if site_layer == 3:
        u = u + z.reshape(t, d)
    a1 = u @ v["ffn_w1"] + v["ffn_b1"]
    if site_layer == 4:
        a1 = a1 + z.reshape(t, model.layer_sizes[1])
    h1 = _act(a1, model.activation)
    f = h1 @ v["ffn_w2"] + v["ffn_b2"]
    if site_layer == 5:
        f = f + z.reshape(t, d)
    pooled = f.mean(axis=0)
    logits = pooled @ v["head_w"] + v["head_b"]
    if site_layer == 6:
        logits = logits + z
    loss = float(_loss_of_output(logits, label, model.loss))
    cache = {"output": logits, "embedding": pooled, "tokens": s}
    _ensure_finite_scalar(model, theta, x, label, loss)
    return loss, cache


def _attend(model: ModelSpec, q, k, val):
    """Multi-head softmax attention on (T, d) tensors."""
    t, d = q.shape
    nh, dh = model.num_heads, model.head_dim
    qh = q.reshape(t, nh, dh)
    kh = k.reshape(t, nh, dh)
    vh = val.reshape(t, nh, dh)
    scores = np.einsum("thd,shd->hts", qh, kh) / np.sqrt(dh)
    p = _softmax(scores)
    oh = np.einsum("hts,shd->thd", p, vh)
    return oh.reshape(t, d)


def _softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def _ensure_finite_scalar(model, theta, x, label, loss):
    if np.isfinite(loss):
        return
    raise NumericalBlowupError(_locate_blowup(model, theta, x, label))


def _locate_blowup(model: ModelSpec, theta, x, label) -> str:
    """Rerun the forward pass checking layer by layer (failure path only)."""
    try:
        if model.kind == "quadratic":
            return "quadratic loss"
        v = views(model, theta)
        x = np.asarray(x, dtype=np.float64).ravel()
        if model.kind == "mlp":
            h = x
            n_layers = len(model.layer_sizes) - 1
            for l in range(n_layers):
                a = v[f"w{l}"] @ h + v[f"b{l}"]
                if not np.all(np.isfinite(a)):
                    return f"mlp layer {l}"
                h = _act(a, model.activation) if l < n_layers - 1 else a
            return "loss"
        t, d = model.seq_len, model.layer_sizes[0]
        s = x.reshape(t, d)
        stages = {}
        stages["attn_q"] = q = s @ v["attn_q"]
        stages["attn_k"] = k = s @ v["attn_k"]
        stages["attn_v"] = val = s @ v["attn_v"]
        stages["attention"] = o = _attend(model, q, k, val)
        stages["attn_o"] = u = o @ v["attn_o"]
        stages["ffn1"] = a1 = u @ v["ffn_w1"] + v["ffn_b1"]
        stages["ffn2"] = f = _act(a1, model.activation) @ v["ffn_w2"] + v["ffn_b2"]
        stages["head"] = f.mean(axis=0) @ v["head_w"] + v["head_b"]
        for name, val_ in stages.items():
            if not np.all(np.isfinite(val_)):
                return name
        return "loss"
    except FloatingPointError:  # pragma: no cover
        return "unknown"


# ---------------------------------------------------------------------------
# Batched forward over data (clean evaluation, used for accuracy/oracle)


def forward_data_batch(model: ModelSpec, theta: np.ndarray, xs: np.ndarray):
    """Clean forward on an (N, input_dim) batch.

    Returns (outputs (N, n_out), cache) where the cache holds whatever the
    matching backward pass needs.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[None, :]
    if xs.shape[1] != model.input_dim:
        raise ValueError(f"inputs have {xs.shape[1]} features, model wants {model.input_dim}")
    v = views(model, theta)
    if model.kind == "quadratic":
        return np.broadcast_to(theta, (xs.shape[0], theta.shape[0])).copy(), {"xs": xs}
    if model.kind == "mlp":
        n_layers = len(model.layer_sizes) - 1
        h = xs
        pre, acts = [], [xs]
        for l in range(n_layers):
            a = h @ v[f"w{l}"].T + v[f"b{l}"]
            pre.append(a)
            h = _act(a, model.activation) if l < n_layers - 1 else a
            acts.append(h)
        return acts[-1], {"pre": pre, "acts": acts}
    n = xs.shape[0]
    t, d = model.seq_len, model.layer_sizes[0]
    nh, dh = model.num_heads, model.head_dim
    s = xs.reshape(n, t, d)
    q = s @ v["attn_q"]
    k = s @ v["attn_k"]
    val = s @ v["attn_v"]
    qh = q.reshape(n, t, nh, dh)
    kh = k.reshape(n, t, nh, dh)
    vh = val.reshape(n, t, nh, dh)
    scores = np.einsum("nthd,nshd->nhts", qh, kh) / np.sqrt(dh)
    p = _softmax(scores)
    oh = np.einsum("nhts,nshd->nthd", p, vh)
    o = oh.reshape(n, t, d)
    u = o @ v["attn_o"]
    a1 = u @ v["ffn_w1"] + v["ffn_b1"]
    h1 = _act(a1, model.activation)
    f = h1 @ v["ffn_w2"] + v["ffn_b2"]
    pooled = f.mean(axis=1)
    logits = pooled @ v["head_w"] + v["head_b"]
    cache = {"s": s, "qh": qh, "kh": kh, "vh": vh, "p": p, "o": o, "u": u,
             "a1": a1, "h1": h1, "pooled": pooled}
    return logits, cache


def batch_losses(model: ModelSpec, theta: np.ndarray, xs, labels) -> np.ndarray:
    """Per-datum clean losses over a batch."""
    outputs, _ = forward_data_batch(model, theta, xs)
    return _batch_loss_of_outputs(model, outputs, labels)


def _batch_loss_of_outputs(model, outputs, labels) -> np.ndarray:
    if model.loss == "cross_entropy":
        labels = np.asarray(labels, dtype=int)
        m = outputs.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(outputs - m).sum(axis=1))
        return lse - outputs[np.arange(outputs.shape[0]), labels]
    targets = np.asarray(labels, dtype=np.float64)
    if targets.ndim == 1 and outputs.shape[1] > 1 and targets.shape[0] == outputs.shape[0]:
        raise ValueError("mse needs vector targets per datum")
    d = outputs - targets
    return 0.5 * (d * d).sum(axis=1)


# ---------------------------------------------------------------------------
# Oracle gradient (exact; verification only)


def oracle_gradient(model: ModelSpec, theta: np.ndarray, batch) -> np.ndarray:
    """Exact gradient of the mean loss over a batch of data.

    Hand-derived backward pass per model kind; checked against central
    finite differences in the test suite. Never used for training updates
    by the perturbation path.
    """
    xs, labels = batch
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[None, :]
    n = xs.shape[0]
    if model.kind == "quadratic":
        return theta - xs.mean(axis=0)

    outputs, cache = forward_data_batch(model, theta, xs)
    dout = _loss_grad_wrt_output(model, outputs, labels) / n
    v = views(model, theta)
    grad = np.zeros_like(theta)
    g = views(model, grad)

    if model.kind == "mlp":
        n_layers = len(model.layer_sizes) - 1
        da = dout
        for l in range(n_layers - 1, -1, -1):
            h_prev = cache["acts"][l]
            g[f"w{l}"][...] = da.T @ h_prev
            g[f"b{l}"][...] = da.sum(axis=0)
            if l > 0:
                dh = da @ v[f"w{l}"]
                da = dh * _act_grad(cache["pre"][l - 1], model.activation)
        return grad

    t, d = model.seq_len, model.layer_sizes[0]
    nh, dh_ = model.num_heads, model.head_dim
    s, p = cache["s"], cache["p"]
    g["head_w"][...] = cache["pooled"].T @ dout
    g["head_b"][...] = dout.sum(axis=0)
    dpooled = dout @ v["head_w"].T
    df = np.repeat(dpooled[:, None, :], t, axis=1) / t
    g["ffn_w2"][...] = np.einsum("ntf,ntd->fd", cache["h1"], df)
    g["ffn_b2"][...] = df.sum(axis=(0, 1))
    dh1 = df @ v["ffn_w2"].T
    da1 = dh1 * _act_grad(cache["a1"], model.activation)
    g["ffn_w1"][...] = np.einsum("ntd,ntf->df", cache["u"], da1)
    g["ffn_b1"][...] = da1.sum(axis=(0, 1))
    du = da1 @ v["ffn_w1"].T
    g["attn_o"][...] = np.einsum("ntd,nte->de", cache["o"], du)
    do = du @ v["attn_o"].T
    doh = do.reshape(n, t, nh, dh_)
    dp = np.einsum("nthd,nshd->nhts", doh, cache["vh"])
    dvh = np.einsum("nhts,nthd->nshd", p, doh)
    dscores = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh_)
    dqh = np.einsum("nhts,nshd->nthd", dscores, cache["kh"])
    dkh = np.einsum("nhts,nthd->nshd", dscores, cache["qh"])
    dq = dqh.reshape(n, t, d)
    dk = dkh.reshape(n, t, d)
    dv = dvh.reshape(n, t, d)
    g["attn_q"][...] = np.einsum("ntd,nte->de", s, dq)
    g["attn_k"][...] = np.einsum("ntd,nte->de", s, dk)
    g["attn_v"][...] = np.einsum("ntd,nte->de", s, dv)
    return grad


def _loss_grad_wrt_output(model, outputs, labels) -> np.ndarray:
    if model.loss == "cross_entropy":
        labels = np.asarray(labels, dtype=int)
        m = outputs.max(axis=1, keepdims=True)
        e = np.exp(outputs - m)
        probs = e / e.sum(axis=1, keepdims=True)
        dout = probs
        dout[np.arange(outputs.shape[0]), labels] -= 1.0
        return dout
    return outputs - np.asarray(labels, dtype=np.float64)


def embedding(model: ModelSpec, theta: np.ndarray, x) -> np.ndarray:
    """Representation fed to the head: penultimate activation for mlp,
    pooled token for the attention block, the input itself for quadratic."""
    _, cache = forward(model, theta, x, _dummy_label(model))
    return np.asarray(cache["embedding"], dtype=np.float64).copy()


def _dummy_label(model: ModelSpec):
    return 0 if model.loss == "cross_entropy" else np.zeros(model.num_classes)


# ---------------------------------------------------------------------------
# Query-batched paths


def forward_many_params(model: ModelSpec, thetas: np.ndarray, x, label) -> np.ndarray:
    """Losses for Q parameter vectors (rows of ``thetas``) on one datum."""
    x = _check_input(model, x)
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim != 2 or thetas.shape[1] != param_count(model):
        raise ValueError("thetas must be (Q, param_count)")
    if model.kind == "quadratic":
        diff = thetas - x[None, :]
        losses = 0.5 * (diff * diff).sum(axis=1)
        return _finite_losses(model, losses)

    blocks = param_blocks(model)

    def bview(name):
        sl, shape = blocks[name]
        return thetas[:, sl].reshape((thetas.shape[0],) + shape)

    if model.kind == "mlp":
        n_layers = len(model.layer_sizes) - 1
        h = None
        for l in range(n_layers):
            w, b = bview(f"w{l}"), bview(f"b{l}")
            if h is None:
                a = np.einsum("qoi,i->qo", w, x) + b
            else:
                a = np.einsum("qoi,qi->qo", w, h) + b
            h = _act(a, model.activation) if l < n_layers - 1 else a
        return _finite_losses(model, _loss_of_output(h, label, model.loss))

    t, d = model.seq_len, model.layer_sizes[0]
    nh, dh_ = model.num_heads, model.head_dim
    s = x.reshape(t, d)
    q = np.einsum("td,qde->qte", s, bview("attn_q"))
    k = np.einsum("td,qde->qte", s, bview("attn_k"))
    val = np.einsum("td,qde->qte", s, bview("attn_v"))
    nq = thetas.shape[0]
    qh = q.reshape(nq, t, nh, dh_)
    kh = k.reshape(nq, t, nh, dh_)
    vh = val.reshape(nq, t, nh, dh_)
    scores = np.einsum("qthd,qshd->qhts", qh, kh) / np.sqrt(dh_)
    p = _softmax(scores)
    o = np.einsum("qhts,qshd->qthd", p, vh).reshape(nq, t, d)
    u = np.einsum("qtd,qde->qte", o, bview("attn_o"))
    a1 = np.einsum("qtd,qdf->qtf", u, bview("ffn_w1")) + bview("ffn_b1")[:, None, :]
    h1 = _act(a1, model.activation)
    f = np.einsum("qtf,qfd->qtd", h1, bview("ffn_w2")) + bview("ffn_b2")[:, None, :]
    pooled = f.mean(axis=1)
    logits = np.einsum("qd,qdc->qc", pooled, bview("head_w")) + bview("head_b")
    return _finite_losses(model, _loss_of_output(logits, label, model.loss))


def forward_many_actnoise(model: ModelSpec, theta: np.ndarray, x, label,
                          layer: int, zs: np.ndarray):
    """Losses for Q activation-noise vectors injected at one site.

    Returns (losses (Q,), local_input) where ``local_input`` is the input of
    the perturbed affine map (shared across queries since theta is fixed) --
    exactly what the score-function outer product needs.
    """
    x = _check_input(model, x)
    zs = np.asarray(zs, dtype=np.float64)
    nq = zs.shape[0]
    if zs.ndim != 2 or zs.shape[1] != activation_site_dim(model, layer):
        raise ValueError("zs must be (Q, site_dim)")
    v = views(model, theta)

    if model.kind == "mlp":
        n_layers = len(model.layer_sizes) - 1
        h = x
        for l in range(layer):
            a = v[f"w{l}"] @ h + v[f"b{l}"]
            h = _act(a, model.activation) if l < n_layers - 1 else a
        local_input = h
        a = (v[f"w{layer}"] @ h + v[f"b{layer}"])[None, :] + zs
        hq = _act(a, model.activation) if layer < n_layers - 1 else a
        for l in range(layer + 1, n_layers):
            a = hq @ v[f"w{l}"].T + v[f"b{l}"]
            hq = _act(a, model.activation) if l < n_layers - 1 else a
        return _finite_losses(model, _loss_of_output(hq, label, model.loss)), local_input

    t, d = model.seq_len, model.layer_sizes[0]
    d_ff = model.layer_sizes[1]
    nh, dh_ = model.num_heads, model.head_dim
    s = x.reshape(t, d)
    q = s @ v["attn_q"]
    k = s @ v["attn_k"]
    val = s @ v["attn_v"]

    def heads(m):  # (..., t, d) -> (..., t, nh, dh)
        return m.reshape(m.shape[:-2] + (t, nh, dh_))

    if layer <= 2:
        local_input = s
        if layer == 0:
            qq = q[None] + zs.reshape(nq, t, d)
            scores = np.einsum("qthd,shd->qhts", heads(qq), heads(k)) / np.sqrt(dh_)
            p = _softmax(scores)
            o = np.einsum("qhts,shd->qthd", p, heads(val)).reshape(nq, t, d)
        elif layer == 1:
            kq = k[None] + zs.reshape(nq, t, d)
            scores = np.einsum("thd,qshd->qhts", heads(q), heads(kq)) / np.sqrt(dh_)
            p = _softmax(scores)
            o = np.einsum("qhts,shd->qthd", p, heads(val)).reshape(nq, t, d)
        else:
            scores = np.einsum("thd,shd->hts", heads(q), heads(k)) / np.sqrt(dh_)
            p = _softmax(scores)
            vq = val[None] + zs.reshape(nq, t, d)
            o = np.einsum("hts,qshd->qthd", p, heads(vq)).reshape(nq, t, d)
        u = o @ v["attn_o"]
        a1 = u @ v["ffn_w1"] + v["ffn_b1"]
        h1 = _act(a1, model.activation)
        f = h1 @ v["ffn_w2"] + v["ffn_b2"]
    else:
        o = _attend(model, q, k, val)
        u_clean = o @ v["attn_o"]
        if layer == 3:
            local_input = o
            u = u_clean[None] + zs.reshape(nq, t, d)
            a1 = u @ v["ffn_w1"] + v["ffn_b1"]
            h1 = _act(a1, model.activation)
            f = h1 @ v["ffn_w2"] + v["ffn_b2"]
        else:
            a1_clean = u_clean @ v["ffn_w1"] + v["ffn_b1"]
            if layer == 4:
                local_input = u_clean
                a1 = a1_clean[None] + zs.reshape(nq, t, d_ff)
                h1 = _act(a1, model.activation)
                f = h1 @ v["ffn_w2"] + v["ffn_b2"]
            else:
                h1_clean = _act(a1_clean, model.activation)
                f_clean = h1_clean @ v["ffn_w2"] + v["ffn_b2"]
                if layer == 5:
                    local_input = h1_clean
                    f = f_clean[None] + zs.reshape(nq, t, d)
                else:
                    pooled = f_clean.mean(axis=0)
                    logits = (pooled @ v["head_w"] + v["head_b"])[None, :] + zs
                    losses = _loss_of_output(logits, label, model.loss)
                    return _finite_losses(model, losses), pooled
    pooled = f.mean(axis=1)
    logits = pooled @ v["head_w"] + v["head_b"]
    return _finite_losses(model, _loss_of_output(logits, label, model.loss)), local_input


def _finite_losses(model, losses: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(losses)):
        raise NumericalBlowupError(f"{model.kind} batched evaluation")
    return losses


def lr_sample_to_params(model: ModelSpec, layer: int, weighted_scores: np.ndarray,
                        local_input: np.ndarray, out: np.ndarray) -> None:
    """Scatter score-function samples into parameter coordinates.

    ``weighted_scores`` is (Q, site_dim) already multiplied by the loss; the
    gradient sample w.r.t. the site's affine map is the outer product with
    its input. Writes a (Q, block_dim) matrix into ``out``.
    """
    nq = weighted_scores.shape[0]
    if model.kind == "mlp":
        h = local_input
        gw = weighted_scores[:, :, None] * h[None, None, :]
        out[:, : gw[0].size] = gw.reshape(nq, -1)
        out[:, gw[0].size :] = weighted_scores
        return
    t, d = model.seq_len, model.layer_sizes[0]
    d_ff = model.layer_sizes[1]
    if layer <= 3:
        ws = weighted_scores.reshape(nq, t, d)
        out[...] = np.einsum("ti,qto->qio", local_input, ws).reshape(nq, -1)
        return
    if layer == 4:
        ws = weighted_scores.reshape(nq, t, d_ff)
        gw = np.einsum("ti,qto->qio", local_input, ws).reshape(nq, -1)
        out[:, : d * d_ff] = gw
        out[:, d * d_ff :] = ws.sum(axis=1)
        return
    if layer == 5:
        ws = weighted_scores.reshape(nq, t, d)
        gw = np.einsum("ti,qto->qio", local_input, ws).reshape(nq, -1)
        out[:, : d_ff * d] = gw
        out[:, d_ff * d :] = ws.sum(axis=1)
        return
    # head site: (Q, C) scores, pooled input
    n_cls = model.num_classes
    gw = local_input[None, :, None] * weighted_scores[:, None, :]
    out[:, : gw[0].size] = gw.reshape(nq, -1)
    out[:, gw[0].size :] = weighted_scores
