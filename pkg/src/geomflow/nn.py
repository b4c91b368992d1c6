"""Hand-rolled differentiable blocks for the equivariant velocity field.

Dense nets with SiLU activations, a rotation-equivariant message-passing
layer on the fully connected point graph, the velocity model v(z, t), and
the equivariant encoder/decoder. Every backward pass is coded analytically
and checked against central finite differences (`grad_check`).

Two floating-point disciplines matter here:

* Forward matmuls go through ``np.einsum(..., optimize=False)`` whose
  per-row reduction order does not depend on row position, so permuting the
  input points permutes the outputs bit-exactly (BLAS gemm does not have
  that property). Backward passes use BLAS since gradients only need to be
  mathematically exact.
* Sums over neighbours are taken in sorted order, which makes the reduction
  independent of how the points were enumerated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Geometry, LatentGeometry

GRAD_CHECK_PARAM_LIMIT = 5000


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(z):
    return z * sigmoid(z)


def silu_grad(z):
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _rowwise_matmul(a, w):
    # einsum keeps each output row's reduction order independent of the row
    # position; required for exact permutation equivariance.
    return np.einsum("ni,oi->no", a, w, optimize=False)


_EDGE_CACHE: dict[int, tuple] = {}


def _edges(n: int):
    """Fully connected directed edge lists, i-major, plus the j-major order."""
    if n not in _EDGE_CACHE:
        i_idx = np.repeat(np.arange(n), n - 1)
        j_idx = np.concatenate(
            [np.delete(np.arange(n), i) for i in range(n)]
        ) if n > 1 else np.zeros(0, dtype=np.intp)
        jmaj = np.lexsort((i_idx, j_idx))
        _EDGE_CACHE[n] = (i_idx.astype(np.intp), j_idx.astype(np.intp), jmaj)
    return _EDGE_CACHE[n]


def _reduce_i(vals, n):
    """Sum edge values per source node, summands in sorted (canonical) order."""
    return np.sort(vals.reshape(n, n - 1, vals.shape[1]), axis=1).sum(axis=1)


def _reduce_j(vals, n, jmaj):
    """Sum edge values per neighbour node, summands in sorted order."""
    return np.sort(vals[jmaj].reshape(n, n - 1, vals.shape[1]), axis=1).sum(axis=1)


def _sorted_mean(vals):
    return np.sort(vals, axis=0).sum(axis=0) / vals.shape[0]


class DenseNet:
    """MLP with SiLU between layers and a linear final layer.

    Weights are (out, in); `widths` lists layer sizes input-first. Gradients
    accumulate across backward calls until `zero_grads`.
    """

    def __init__(self, widths, rng):
        if len(widths) < 2:
            raise ValueError("dense net needs at least input and output widths")
        self.widths = list(widths)
        self.weights = [
            rng.standard_normal((o, i)) / np.sqrt(i)
            for i, o in zip(widths[:-1], widths[1:])
        ]
        self.biases = [np.zeros(o) for o in widths[1:]]
        self.grad_w = [np.zeros_like(w) for w in self.weights]
        self.grad_b = [np.zeros_like(b) for b in self.biases]
        self._cache = None

    def forward(self, x, cache=True):
        x = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        xs, zs = [], []
        a = x
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            xs.append(a)
            z = _rowwise_matmul(a, w) + b
            if l < last:
                zs.append(z)
                a = silu(z)
            else:
                a = z
        self._cache = (xs, zs) if cache else None
        return a

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        xs, zs = self._cache
        dy = np.asarray(dy, dtype=np.float64)
        dx = None
        for l in range(len(self.weights) - 1, -1, -1):
            self.grad_w[l] += dy.T @ xs[l]
            self.grad_b[l] += dy.sum(axis=0)
            dx = dy @ self.weights[l]
            if l > 0:
                dy = dx * silu_grad(zs[l - 1])
        self._cache = None
        return dx

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def grads(self):
        out = []
        for gw, gb in zip(self.grad_w, self.grad_b):
            out.extend((gw, gb))
        return out

    def zero_grads(self):
        for g in self.grad_w:
            g[...] = 0.0
        for g in self.grad_b:
            g[...] = 0.0


class EquivariantLayer:
    """One message-passing update on the fully connected point graph.

    Messages m_ij = edge_net(h_i, h_j, |x_i - x_j|^2); coordinates move by
    scale/(n-1) * sum_j (x_i - x_j) * coord_net(m_ij) with the displacement
    projected back to zero CoM (the raw update does not conserve the CoM
    when messages are asymmetric); features become node_net(h_i, sum_j m_ij).
    """

    def __init__(self, width, rng, coord_scale=1.0):
        self.width = width
        self.coord_scale = coord_scale
        self.edge_net = DenseNet([2 * width + 1, width, width], rng)
        self.coord_net = DenseNet([width, width, 1], rng)
        # Small initial coordinate updates keep freshly initialized models
        # integrable; compounding O(1) updates across layers produces
        # superlinear fields the adaptive solver cannot finish.
        self.coord_net.weights[-1] *= 0.1
        self.node_net = DenseNet([2 * width, width, width], rng)
        self._cache = None

    def forward(self, x, h, cache=True):
        n = x.shape[0]
        if n == 1:
            n_in = np.concatenate([h, np.zeros((1, self.width))], axis=1)
            h_out = self.node_net.forward(n_in, cache)
            self._cache = (None, None, n) if cache else None
            return x.copy(), h_out
        i_idx, j_idx, _ = _edges(n)
        diff = x[i_idx] - x[j_idx]
        d2 = np.einsum("ei,ei->e", diff, diff, optimize=False)[:, None]
        e_in = np.concatenate([h[i_idx], h[j_idx], d2], axis=1)
        m = self.edge_net.forward(e_in, cache)
        w = self.coord_net.forward(m, cache)
        delta = _reduce_i(diff * w, n) * (self.coord_scale / (n - 1))
        delta = delta - _sorted_mean(delta)
        agg = _reduce_i(m, n)
        h_out = self.node_net.forward(np.concatenate([h, agg], axis=1), cache)
        self._cache = (diff, w, n) if cache else None
        return x + delta, h_out

    def backward(self, dx_out, dh_out):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        diff, w, n = self._cache
        width = self.width
        dn_in = self.node_net.backward(dh_out)
        dh = dn_in[:, :width].copy()
        dagg = dn_in[:, width:]
        dx = np.array(dx_out, dtype=np.float64, copy=True)
        if n > 1:
            i_idx, j_idx, jmaj = _edges(n)
            ddelta = (dx_out - dx_out.mean(axis=0)) * (self.coord_scale / (n - 1))
            dwdiff = ddelta[i_idx]
            dw = np.einsum("ei,ei->e", dwdiff, diff, optimize=False)[:, None]
            ddiff = dwdiff * w
            dm = self.coord_net.backward(dw) + dagg[i_idx]
            de_in = self.edge_net.backward(dm)
            dd2 = de_in[:, 2 * width :]
            ddiff = ddiff + 2.0 * diff * dd2
            dh += _reduce_i(de_in[:, :width], n) + _reduce_j(
                de_in[:, width : 2 * width], n, jmaj
            )
            dx += _reduce_i(ddiff, n) - _reduce_j(ddiff, n, jmaj)
        self._cache = None
        return dx, dh

    def sub_nets(self):
        return [self.edge_net, self.coord_net, self.node_net]


class VectorFieldModel:
    """Velocity field plus equivariant encoder/decoder.

    With `identity_latent` the encoder/decoder are the identity (latent
    width k equals the data feature width d) and carry no parameters. Time
    enters the velocity net as one extra invariant scalar feature per point.
    """

    def __init__(
        self,
        d,
        k=2,
        hidden=64,
        flow_layers=3,
        decoder_layers=1,
        identity_latent=False,
        coord_scale=1.0,
        seed=0,
    ):
        if d < 1 or k < 1 or hidden < 1 or flow_layers < 1 or decoder_layers < 1:
            raise ValueError("model sizes must be positive")
        if identity_latent:
            k = d
        self.d = d
        self.k = k
        self.hidden = hidden
        self.n_flow_layers = flow_layers
        self.n_decoder_layers = decoder_layers
        self.identity_latent = identity_latent
        self.coord_scale = coord_scale
        self.meta: dict = {}

        rng = np.random.default_rng(seed)
        if identity_latent:
            self.enc_embed = self.enc_layer = self.enc_out = None
            self.dec_embed = self.dec_out = None
            self.dec_stack = []
        else:
            self.enc_embed = DenseNet([d, hidden], rng)
            self.enc_layer = EquivariantLayer(hidden, rng, coord_scale)
            self.enc_out = DenseNet([hidden, k], rng)
            self.dec_embed = DenseNet([k, hidden], rng)
            self.dec_stack = [
                EquivariantLayer(hidden, rng, coord_scale)
                for _ in range(decoder_layers)
            ]
            self.dec_out = DenseNet([hidden, d], rng)
        self.flow_embed = DenseNet([k + 1, hidden], rng)
        self.flow_stack = [
            EquivariantLayer(hidden, rng, coord_scale) for _ in range(flow_layers)
        ]
        self.flow_out = DenseNet([hidden, k], rng)
        self._flow_cached = False

    # -- parameter plumbing -------------------------------------------------

    def _dense_nets(self):
        nets = []
        if not self.identity_latent:
            nets.append(self.enc_embed)
            nets.extend(self.enc_layer.sub_nets())
            nets.append(self.enc_out)
            nets.append(self.dec_embed)
            for layer in self.dec_stack:
                nets.extend(layer.sub_nets())
            nets.append(self.dec_out)
        nets.append(self.flow_embed)
        for layer in self.flow_stack:
            nets.extend(layer.sub_nets())
        nets.append(self.flow_out)
        return nets

    def parameters(self):
        return [p for net in self._dense_nets() for p in net.params()]

    def gradients(self):
        return [g for net in self._dense_nets() for g in net.grads()]

    def flow_parameters(self):
        nets = [self.flow_embed, self.flow_out]
        for layer in self.flow_stack:
            nets.extend(layer.sub_nets())
        return [p for net in nets for p in net.params()]

    def flow_gradients(self):
        nets = [self.flow_embed, self.flow_out]
        for layer in self.flow_stack:
            nets.extend(layer.sub_nets())
        return [g for net in nets for g in net.grads()]

    def ae_parameters(self):
        if self.identity_latent:
            return []
        nets = [self.enc_embed, *self.enc_layer.sub_nets(), self.enc_out,
                self.dec_embed, self.dec_out]
        for layer in self.dec_stack:
            nets.extend(layer.sub_nets())
        return [p for net in nets for p in net.params()]

    def ae_gradients(self):
        if self.identity_latent:
            return []
        nets = [self.enc_embed, *self.enc_layer.sub_nets(), self.enc_out,
                self.dec_embed, self.dec_out]
        for layer in self.dec_stack:
            nets.extend(layer.sub_nets())
        return [g for net in nets for g in net.grads()]

    def zero_grads(self):
        for net in self._dense_nets():
            net.zero_grads()

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        params = self.parameters()
        if not params:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in params])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for p in self.parameters():
            p[...] = vec[off : off + p.size].reshape(p.shape)
            off += p.size
        if off != vec.size:
            raise ValueError("parameter vector size mismatch")

    def arch_dict(self) -> dict:
        return {
            "d": self.d,
            "k": self.k,
            "hidden": self.hidden,
            "flow_layers": self.n_flow_layers,
            "decoder_layers": self.n_decoder_layers,
            "identity_latent": self.identity_latent,
            "coord_scale": self.coord_scale,
            "meta": self.meta,
        }

    @classmethod
    def from_arch(cls, arch: dict) -> "VectorFieldModel":
        model = cls(
            d=arch["d"],
            k=arch["k"],
            hidden=arch["hidden"],
            flow_layers=arch["flow_layers"],
            decoder_layers=arch["decoder_layers"],
            identity_latent=arch["identity_latent"],
            coord_scale=arch.get("coord_scale", 1.0),
            seed=0,
        )
        model.meta = dict(arch.get("meta", {}))
        return model

    # -- velocity field ------------------------------------------------------

    def velocity(self, z: LatentGeometry, t: float, cache=False) -> LatentGeometry:
        if not 0.0 <= t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        if z.k != self.k:
            raise ValueError("latent feature width mismatch")
        n = z.n
        h_in = np.concatenate([z.features, np.full((n, 1), float(t))], axis=1)
        h = self.flow_embed.forward(h_in, cache)
        x = np.asarray(z.coords)
        for layer in self.flow_stack:
            x, h = layer.forward(x, h, cache)
        vh = self.flow_out.forward(h, cache)
        self._flow_cached = cache
        return LatentGeometry(n, x - z.coords, vh)

    def backward_velocity(self, dvx, dvh):
        """Pull the velocity adjoint back to (dz_x, dz_h); accumulates grads."""
        if not self._flow_cached:
            raise RuntimeError("backward requires a cached forward pass")
        dvx = np.asarray(dvx, dtype=np.float64)
        dh = self.flow_out.backward(dvh)
        dx = dvx
        for layer in reversed(self.flow_stack):
            dx, dh = layer.backward(dx, dh)
        dh_in = self.flow_embed.backward(dh)
        self._flow_cached = False
        return dx - dvx, dh_in[:, : self.k]

    # -- autoencoder ---------------------------------------------------------

    def encode_means(self, x_centered, features, cache=False):
        if self.identity_latent:
            return np.array(x_centered, dtype=np.float64), np.array(
                features, dtype=np.float64
            )
        h = self.enc_embed.forward(features, cache)
        x1, h1 = self.enc_layer.forward(np.asarray(x_centered, np.float64), h, cache)
        return x1, self.enc_out.forward(h1, cache)

    def decode_arrays(self, zx, zh, cache=False):
        if self.identity_latent:
            return np.array(zx, dtype=np.float64), np.array(zh, dtype=np.float64)
        h = self.dec_embed.forward(zh, cache)
        x = np.asarray(zx, dtype=np.float64)
        for layer in self.dec_stack:
            x, h = layer.forward(x, h, cache)
        return x, self.dec_out.forward(h, cache)

    def ae_backward(self, dx_rec, dlogits):
        """Backward through decoder then encoder; returns nothing useful."""
        if self.identity_latent:
            raise RuntimeError("identity-latent model has no autoencoder")
        dh = self.dec_out.backward(dlogits)
        dx = np.array(dx_rec, dtype=np.float64, copy=True)
        for layer in reversed(self.dec_stack):
            dx, dh = layer.backward(dx, dh)
        dzh = self.dec_embed.backward(dh)
        dh1 = self.enc_out.backward(dzh)
        dx1, dhe = self.enc_layer.backward(dx, dh1)
        self.enc_embed.backward(dhe)
        return dx1


def forward(model: VectorFieldModel, z: LatentGeometry, t: float, cache=False):
    """Evaluate the velocity field v(z, t)."""
    return model.velocity(z, t, cache=cache)


def backward(model: VectorFieldModel, adjoint):
    """Accumulate parameter gradients for a velocity adjoint.

    `adjoint` is LatentGeometry-shaped (anything with `.coords` and
    `.features`, or a (dvx, dvh) pair). Returns the gradient record, a list
    of arrays parallel to `model.parameters()`.
    """
    if hasattr(adjoint, "coords"):
        dvx, dvh = adjoint.coords, adjoint.features
    else:
        dvx, dvh = adjoint
    model.backward_velocity(dvx, dvh)
    return model.gradients()


def encode(model: VectorFieldModel, g: Geometry, sigma0=0.0, seed=0):
    """Center, encode, and add zero-CoM-projected noise scaled by sigma0."""
    rng = np.random.default_rng(seed) if sigma0 > 0 else None
    return encode_rng(model, g, sigma0, rng)


def encode_rng(model: VectorFieldModel, g: Geometry, sigma0, rng):
    if sigma0 < 0:
        raise ValueError("sigma0 must be non-negative")
    x = g.coords - g.coords.mean(axis=0)
    mu_x, mu_h = model.encode_means(x, g.features, cache=False)
    if sigma0 > 0:
        eps_x = rng.standard_normal((g.n, 3))
        eps_x -= eps_x.mean(axis=0)
        eps_h = rng.standard_normal((g.n, model.k))
        return LatentGeometry(g.n, mu_x + sigma0 * eps_x, mu_h + sigma0 * eps_h)
    return LatentGeometry(g.n, mu_x, mu_h)


def decode(model: VectorFieldModel, z: LatentGeometry) -> Geometry:
    """Map a latent point set back to a Geometry (coords re-centered)."""
    if z.k != model.k:
        raise ValueError("latent feature width mismatch")
    zx = z.coords - z.coords.mean(axis=0)
    x, feats = model.decode_arrays(zx, z.features, cache=False)
    return Geometry(z.n, x - x.mean(axis=0), feats)


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam update with bias correction; parameters change in place."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    param_count: int
    tolerance: float
    passed: bool


def grad_check(model_factory, tolerance=1e-4, seed=0, step=1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Builds a model, a random latent input and a random regression target,
    and perturbs every parameter by +/-step. The relative error uses an
    absolute floor of 1e-3 in the denominator so near-zero gradients cannot
    produce spurious blowups.
    """
    model = model_factory()
    if model.param_count > GRAD_CHECK_PARAM_LIMIT:
        raise ValueError("grad_check is limited to models with <= 5k parameters")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    zx = rng.standard_normal((n, 3))
    zx -= zx.mean(axis=0)
    z = LatentGeometry(n, zx, rng.standard_normal((n, model.k)))
    t = float(rng.uniform())
    ux = rng.standard_normal((n, 3))
    uh = rng.standard_normal((n, model.k))
    numel = n * (3 + model.k)

    def loss_value():
        v = model.velocity(z, t, cache=False)
        return (np.sum((v.coords - ux) ** 2) + np.sum((v.features - uh) ** 2)) / numel

    v = model.velocity(z, t, cache=True)
    model.zero_grads()
    model.backward_velocity(2.0 * (v.coords - ux) / numel, 2.0 * (v.features - uh) / numel)
    analytic = np.concatenate([g.ravel() for g in model.gradients()])

    flat = model.get_flat()
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        model.set_flat(flat)
        lp = loss_value()
        flat[i] = orig - step
        model.set_flat(flat)
        lm = loss_value()
        flat[i] = orig
        numeric[i] = (lp - lm) / (2.0 * step)
    model.set_flat(flat)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        max_rel_err=max_rel,
        worst_index=worst,
        param_count=model.param_count,
        tolerance=tolerance,
        passed=max_rel <= tolerance,
    )
