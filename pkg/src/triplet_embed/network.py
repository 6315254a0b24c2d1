"""Convolutional embedding network with hand-written backpropagation.

Activations are NHWC float64 arrays. A network is a list of :class:`Layer`
records plus an input side length; parameters are a flat list of arrays,
``[W, b]`` for every conv and dense layer in declaration order. Convolutions
use valid padding.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericFault, StructuralError
from .rng import INIT, make_rng

NORM_EPS = 1e-12

KINDS = ("conv", "relu", "maxpool", "gap", "dense", "l2norm")
INPUT_NORMS = ("none", "standardize")
STD_FLOOR = 1e-3


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int = 0
    kernel: int = 0
    stride: int = 1
    window: int = 0

    def __str__(self):
        if self.kind == "conv":
            return f"conv {self.out} {self.kernel} {self.stride}"
        if self.kind == "maxpool":
            return f"maxpool {self.window}"
        if self.kind == "dense":
            return f"dense {self.out}"
        return self.kind

    @classmethod
    def parse(cls, text):
        parts = text.split()
        if not parts or parts[0] not in KINDS:
            raise StructuralError(f"unknown layer {text!r}")
        kind, args = parts[0], [int(a) for a in parts[1:]]
        want = {"conv": (2, 3), "maxpool": (1,), "dense": (1,)}.get(kind, (0,))
        if len(args) not in want:
            raise StructuralError(f"wrong argument count for layer {text!r}")
        if kind == "conv":
            return cls(kind, out=args[0], kernel=args[1], stride=args[2] if len(args) > 2 else 1)
        if kind == "maxpool":
            return cls(kind, window=args[0])
        if kind == "dense":
            return cls(kind, out=args[0])
        return cls(kind)


def conv(out, kernel, stride=1):
    return Layer("conv", out=out, kernel=kernel, stride=stride)


def maxpool(window):
    return Layer("maxpool", window=window)


def dense(out):
    return Layer("dense", out=out)


RELU = Layer("relu")
GAP = Layer("gap")
L2NORM = Layer("l2norm")


def desk_layers(embedding_dim=128):
    return [conv(8, 3), RELU, maxpool(2), conv(16, 3), RELU, maxpool(2),
            conv(32, 3), RELU, GAP, dense(embedding_dim), L2NORM]


@dataclass
class OptimizerState:
    learning_rate_initial: float = 0.01
    decay: float = 0.9
    momentum: float = 0.0
    velocity: list = field(default_factory=list)

    def learning_rate(self, iteration):
        return self.learning_rate_initial * self.decay ** iteration


class Network:
    """Layer stack mapping an ``size`` x ``size`` image to a unit vector."""

    def __init__(self, layers, input_size, input_norm="none"):
        self.layers = [Layer.parse(l) if isinstance(l, str) else l for l in layers]
        self.input_size = int(input_size)
        if input_norm not in INPUT_NORMS:
            raise StructuralError(f"unknown input normalization {input_norm!r}")
        self.input_norm = input_norm
        if len(self.layers) < 2 or self.layers[-1].kind != "l2norm" or self.layers[-2].kind != "dense":
            raise StructuralError("layer stack must end with dense followed by l2norm")
        self.shapes = [(self.input_size, self.input_size, 1)]
        self.param_shapes = []
        for i, layer in enumerate(self.layers):
            shape = self.shapes[-1]
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise StructuralError(f"layer {i} conv needs a spatial input")
                h, w, c = shape
                k, s = layer.kernel, layer.stride
                if layer.out < 1 or k < 1 or s < 1 or h < k or w < k:
                    raise StructuralError(f"layer {i} ({layer}) does not fit input {shape}")
                self.param_shapes += [(layer.out, c, k, k), (layer.out,)]
                shape = ((h - k) // s + 1, (w - k) // s + 1, layer.out)
            elif layer.kind == "maxpool":
                if len(shape) != 3 or layer.window < 1 or min(shape[:2]) < layer.window:
                    raise StructuralError(f"layer {i} ({layer}) does not fit input {shape}")
                shape = (shape[0] // layer.window, shape[1] // layer.window, shape[2])
            elif layer.kind == "gap":
                if len(shape) != 3:
                    raise StructuralError(f"layer {i} gap needs a spatial input")
                shape = (shape[2],)
            elif layer.kind == "dense":
                if layer.out < 1:
                    raise StructuralError(f"layer {i} dense needs a positive width")
                self.param_shapes += [(layer.out, math.prod(shape)), (layer.out,)]
                shape = (layer.out,)
            elif layer.kind == "l2norm" and i != len(self.layers) - 1:
                raise StructuralError("l2norm must be the final layer")
            self.shapes.append(shape)

    @property
    def embedding_dim(self):
        return self.layers[-2].out

    def spec_lines(self):
        head = f"input {self.input_size}"
        if self.input_norm != "none":
            head += f" {self.input_norm}"
        return [head] + [str(l) for l in self.layers]

    @classmethod
    def from_spec_lines(cls, lines):
        head = lines[0].split()
        if len(head) not in (2, 3) or head[0] != "input":
            raise StructuralError(f"bad network header {lines[0]!r}")
        return cls(lines[1:], int(head[1]), head[2] if len(head) == 3 else "none")

    def __repr__(self):
        return f"Network({'; '.join(self.spec_lines())})"

    def init_params(self, seed):
        """He-style uniform weights scaled by fan-in; zero biases."""
        rng = make_rng(seed, INIT)
        params = []
        for shape in self.param_shapes:
            if len(shape) == 1:
                params.append(np.zeros(shape))
            else:
                bound = math.sqrt(6.0 / math.prod(shape[1:]))
                params.append(rng.uniform(-bound, bound, size=shape))
        return params

    def check_params(self, params):
        if len(params) != len(self.param_shapes):
            raise StructuralError(f"expected {len(self.param_shapes)} parameter arrays, got {len(params)}")
        for p, shape in zip(params, self.param_shapes):
            if p.shape != shape:
                raise StructuralError(f"parameter shape {p.shape} does not match {shape}")

    # ------------------------------------------------------------------

    def forward(self, params, x):
        """Embed one image (S, S) or a batch (B, S, S).

        Returns ``(y, cache)`` where ``y`` has unit-norm rows (or is a single
        vector for unbatched input) and ``cache`` feeds :meth:`backward`.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != (self.input_size, self.input_size):
            raise StructuralError(f"input shape {x.shape[1:]} does not match network input {self.input_size}")
        y, cache = self._run(params, self.prepare(x)[..., None], 0)
        return (y[0] if single else y), cache

    def prepare(self, x):
        """Apply the input normalization to a batch (B, S, S)."""
        if self.input_norm == "standardize":
            mean = x.mean(axis=(1, 2), keepdims=True)
            std = x.std(axis=(1, 2), keepdims=True)
            return (x - mean) / np.maximum(std, STD_FLOOR)
        return x

    def forward_from(self, params, start, a):
        """Run layers ``start:`` on a batch of intermediate activations."""
        return self._run(params, a, start)[0]

    def _run(self, params, a, start):
        cache = []
        pi = self.param_index(start)
        for i in range(start, len(self.layers)):
            layer = self.layers[i]
            if layer.kind in ("conv", "dense"):
                a, aux = _step(i, layer, a, params[pi], params[pi + 1])
                pi += 2
            else:
                a, aux = _step(i, layer, a)
            cache.append(aux)
            if not np.all(np.isfinite(a)):
                raise NumericFault(f"layer {i} ({layer}): non-finite activation")
        return a, cache

    def param_index(self, layer_index):
        """Position in the parameter list of the first array at or after a layer."""
        return 2 * sum(1 for l in self.layers[:layer_index] if l.kind in ("conv", "dense"))

    def backward(self, params, cache, grad_y, start=None):
        """Parameter gradients given the gradient of a scalar loss w.r.t. the embeddings.

        With ``start`` set, ``grad_y`` is taken as the gradient w.r.t. the
        output of layer ``start`` instead and later layers are skipped; their
        parameters (if any) get zero gradients.
        """
        self.check_params(params)
        if len(cache) != len(self.layers):
            raise StructuralError("cache does not come from this network")
        last = len(self.layers) - 1 if start is None else start
        g = np.asarray(grad_y, dtype=np.float64)
        if g.ndim == 1:
            g = g[None]
        batch = cache[-1][0].shape[0]
        if g.shape != (batch,) + tuple(self.shapes[last + 1]):
            raise StructuralError(f"upstream gradient shape {g.shape} does not match layer {last} output")
        grads = [np.zeros_like(p) for p in params]
        pi = self.param_index(last + 1)
        for i in range(last, -1, -1):
            layer, aux = self.layers[i], cache[i]
            kind = layer.kind
            first = i == 0
            if kind == "l2norm":
                g = l2_normalize_backward(aux[0], g, aux[1])
            elif kind == "dense":
                pi -= 2
                a_in, in_shape = aux
                W = params[pi]
                grads[pi] = g.T @ a_in
                grads[pi + 1] = g.sum(axis=0)
                g = None if first else (g @ W).reshape(in_shape)
            elif kind == "gap":
                b, h, w, c = aux
                g = np.broadcast_to(g[:, None, None, :] / (h * w), aux)
            elif kind == "relu":
                g = g * aux
            elif kind == "maxpool":
                g = _pool_backward(g, aux, layer.window)
            elif kind == "conv":
                pi -= 2
                grads[pi], grads[pi + 1], g = _conv_backward(g, aux, params[pi], layer.stride, first)
        return grads

    def embed(self, params, images, chunk=256, threads=1):
        """Forward many images in fixed-size chunks; returns an (N, D) array.

        Chunk boundaries do not depend on ``threads``, so the result is the
        same for any worker count.
        """
        images = np.asarray(images, dtype=np.float64)
        out = np.empty((len(images), self.embedding_dim))
        starts = range(0, len(images), chunk)

        def run(start):
            out[start:start + chunk] = self.forward(params, images[start:start + chunk])[0]

        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run, starts))
        else:
            for start in starts:
                run(start)
        return out


def _step(i, layer, a, W=None, b=None):
    kind = layer.kind
    if kind == "conv":
        return _conv_forward(a, W, b, layer.stride)
    if kind == "relu":
        mask = a > 0
        return a * mask, mask
    if kind == "maxpool":
        return _pool_forward(a, layer.window)
    if kind == "gap":
        return a.mean(axis=(1, 2)), a.shape
    if kind == "dense":
        a_in = a.reshape(a.shape[0], -1)
        return a_in @ W.T + b, (a_in, a.shape)
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    if np.any(~(norms > NORM_EPS)):
        raise NumericFault(f"layer {i} ({layer}): cannot normalize a zero vector")
    return a / norms[:, None], (a, norms)


def _conv_forward(x, W, b, stride):
    B = x.shape[0]
    O, C, k, _ = W.shape
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(B * ho * wo, C * k * k)
    out = cols @ W.reshape(O, -1).T + b
    return out.reshape(B, ho, wo, O), (cols, x.shape)


def _conv_backward(g, aux, W, stride, skip_input):
    cols, in_shape = aux
    B, ho, wo, O = g.shape
    _, C, k, _ = W.shape
    g2 = g.reshape(-1, O)
    dW = (g2.T @ cols).reshape(W.shape)
    db = g2.sum(axis=0)
    if skip_input:
        return dW, db, None
    dcols = (g2 @ W.reshape(O, -1)).reshape(B, ho, wo, C, k, k)
    dx = np.zeros(in_shape)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dx[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[..., i, j]
    return dW, db, dx


def _pool_forward(x, w):
    B, H, Wd, C = x.shape
    ho, wo = H // w, Wd // w
    xr = x[:, :ho * w, :wo * w, :].reshape(B, ho, w, wo, w, C)
    xr = xr.transpose(0, 1, 3, 5, 2, 4).reshape(B, ho, wo, C, w * w)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _pool_backward(g, aux, w):
    arg, in_shape = aux
    B, ho, wo, C = g.shape
    dxr = np.zeros((B, ho, wo, C, w * w))
    np.put_along_axis(dxr, arg[..., None], g[..., None], axis=-1)
    dxr = dxr.reshape(B, ho, wo, C, w, w).transpose(0, 1, 4, 2, 5, 3).reshape(B, ho * w, wo * w, C)
    if dxr.shape == in_shape:
        return dxr
    dx = np.zeros(in_shape)
    dx[:, :ho * w, :wo * w, :] = dxr
    return dx


def l2_normalize_backward(x, upstream, norms=None):
    """Gradient through y = x/|x|: (I - y y^T) upstream / |x|, row-wise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x, g = x[None], g[None]
    if norms is None:
        norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(~(norms > NORM_EPS)):
        raise NumericFault("l2 normalization backward at a zero vector")
    y = x / norms[:, None]
    radial = np.einsum("ij,ij->i", y, g)
    out = (g - y * radial[:, None]) / norms[:, None]
    return out[0] if single else out


def sgd_step(params, grads, state, iteration):
    """One momentum-SGD update with learning rate ``lr0 * decay**iteration``.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    if len(params) != len(grads):
        raise StructuralError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise StructuralError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFault("non-finite gradient")
    velocity = state.velocity or [np.zeros_like(p) for p in params]
    lr = state.learning_rate(iteration)
    new_v = [state.momentum * v - lr * g for v, g in zip(velocity, grads)]
    new_p = [p + v for p, v in zip(params, new_v)]
    new_state = OptimizerState(state.learning_rate_initial, state.decay, state.momentum, new_v)
    return new_p, new_state


def gradient_check(params, loss_closure, analytic, epsilon=1e-5):
    """Largest relative error between ``analytic`` and central differences.

    ``loss_closure(params)`` must return a finite scalar. Each entry is
    perturbed in place and restored; relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-8 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-8, 1e-3]")
    params = [np.array(p, dtype=np.float64) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat, aflat = p.reshape(-1), np.asarray(a, dtype=np.float64).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp = loss_closure(params)
            flat[j] = orig - epsilon
            lm = loss_closure(params)
            flat[j] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericFault("loss closure returned a non-finite value")
            num = (lp - lm) / (2 * epsilon)
            err = abs(aflat[j] - num) / max(abs(aflat[j]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class GradCheck:
    max_error: float  # over the entries that were compared
    checked: int
    kinked: int  # entries whose +-epsilon step changed a ReLU or max-pool decision
    raw_max_error: float  # over every entry, kinks included


def _pattern_changed(net, start, cache, base, copies):
    """Per-variant flag: did any ReLU mask or max-pool argmax differ from ``base``?"""
    changed = np.zeros(copies, dtype=bool)
    for j, aux in enumerate(cache):
        i = start + j
        kind = net.layers[i].kind
        if kind == "relu":
            now, ref = aux, base[i]
        elif kind == "maxpool":
            now, ref = aux[0], base[i][0]
        else:
            continue
        now = now.reshape((copies,) + ref.shape)
        changed |= (now != ref).reshape(copies, -1).any(axis=1)
    return changed


def network_gradient_check(net, params, x, batch_loss, analytic, epsilon=1e-5, chunk=128,
                           skip_kinks=True):
    """Central-difference check of every network parameter, batched.

    ``batch_loss`` maps embeddings of shape (V, n, D) to V losses, where n
    is ``len(x)``. Perturbing one weight by +-epsilon shifts a single output
    channel of its layer by a known amount (epsilon times the matching input
    column), so each perturbed network is evaluated by editing that layer's
    output and replaying only the layers after it, many perturbations per
    replay. Error definition as in :func:`gradient_check`.

    A step that flips a ReLU or moves a max-pool argmax straddles a point
    where the loss is not differentiable, and the central difference there
    measures the kink rather than the gradient. Such entries are detected
    exactly from the replayed activation patterns and, with ``skip_kinks``,
    left out of ``max_error`` (they are still counted in ``kinked``).
    """
    if not 1e-8 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-8, 1e-3]")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    _, base = net._run(params, net.prepare(x)[..., None], 0)
    acts = [net.prepare(x)[..., None]]
    pi = 0
    for i, layer in enumerate(net.layers[:-1]):
        if layer.kind in ("conv", "dense"):
            acts.append(_step(i, layer, acts[i], params[pi], params[pi + 1])[0])
            pi += 2
        else:
            acts.append(_step(i, layer, acts[i])[0])
    worst, raw, checked, kinked = 0.0, 0.0, 0, 0
    for li, layer in enumerate(net.layers):
        if layer.kind not in ("conv", "dense"):
            continue
        pi = net.param_index(li)
        out = acts[li + 1]
        if layer.kind == "conv":
            cols = base[li][0].reshape(out.shape[:-1] + (-1,))
        else:
            cols = acts[li].reshape(n, -1)
        n_out = out.shape[-1]
        for which in (0, 1):
            ana = np.asarray(analytic[pi + which], dtype=np.float64).reshape(-1)
            fan_in = ana.size // n_out
            for start in range(0, ana.size, chunk):
                flat = np.arange(start, min(start + chunk, ana.size))
                m = len(flat)
                var = np.broadcast_to(out, (2, m) + out.shape).copy()
                for v, j in enumerate(flat):
                    o, f = divmod(j, fan_in)
                    delta = epsilon * cols[..., f] if which == 0 else epsilon
                    var[0, v, ..., o] += delta
                    var[1, v, ..., o] -= delta
                y, cache = net._run(params, var.reshape((-1,) + out.shape[1:]), li + 1)
                losses = np.asarray(batch_loss(y.reshape(2 * m, n, -1)), dtype=np.float64)
                if not np.all(np.isfinite(losses)):
                    raise NumericFault("loss closure returned a non-finite value")
                num = (losses[:m] - losses[m:]) / (2 * epsilon)
                a = ana[flat]
                err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
                kink = _pattern_changed(net, li + 1, cache, base, 2 * m).reshape(2, m).any(axis=0)
                kinked += int(kink.sum())
                raw = max(raw, float(err.max()))
                if skip_kinks:
                    err = err[~kink]
                checked += len(err)
                if len(err):
                    worst = max(worst, float(err.max()))
    return GradCheck(worst, checked, kinked, raw)


def center_output_bias(net, params, images):
    """Set the final dense bias so the mean pre-normalization output is zero.

    Random ReLU features share a large positive common component, which
    maps every input to nearly the same direction on the sphere. Removing
    the mean over ``images`` spreads the initial embeddings out. Returns a
    new parameter list.
    """
    x = net.prepare(np.asarray(images, dtype=np.float64))[..., None]
    dense_at = len(net.layers) - 2
    feats = _features(net, params, x, dense_at)
    pi = net.param_index(dense_at)
    out = list(params)
    out[pi + 1] = -(params[pi] @ feats.reshape(len(feats), -1).mean(axis=0))
    return out


def _features(net, params, a, stop):
    pi = 0
    for i, layer in enumerate(net.layers[:stop]):
        if layer.kind in ("conv", "dense"):
            a = _step(i, layer, a, params[pi], params[pi + 1])[0]
            pi += 2
        else:
            a = _step(i, layer, a)[0]
    return a
