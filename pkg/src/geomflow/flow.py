"""Straight-path flow matching on aligned couplings, plus reflow.

Training (per step): encode a data geometry, sample matching noise, align
the encoded target onto the noise with the joint rotation/permutation
solver, draw t uniformly, and regress the velocity net onto the straight
path target z1_hat - z0. Sampling integrates dz/dt = v(z, t) from 0 to 1.
Reflow re-pairs each noise sample with the ODE endpoint it generates,
optionally filters the decoded endpoints through a validity predicate
(purification), re-aligns, and fine-tunes on the new coupling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .alignment import solve_omt
from .geometry import LatentGeometry
from .nn import AdamState, VectorFieldModel, adam_step, decode, encode_rng
from .ode import SolverConfig, integrate

_SOURCES = ("random", "estimated")


@dataclass(frozen=True)
class CouplingPair:
    """One (noise, target) latent pair; `aligned` marks an OMT-aligned target."""

    z0: LatentGeometry
    z1: LatentGeometry
    aligned: bool = False
    source: str = "random"
    valid: bool = True

    def __post_init__(self):
        if self.z0.n != self.z1.n:
            raise ValueError("coupling pair size mismatch")
        if self.z0.k != self.z1.k:
            raise ValueError("coupling pair feature width mismatch")
        if self.source not in _SOURCES:
            raise ValueError(f"unknown coupling source {self.source!r}")


@dataclass
class CouplingSet:
    """A batch of coupling pairs with a common latent width."""

    pairs: list

    def __post_init__(self):
        if self.pairs:
            k = self.pairs[0].z0.k
            if any(p.z0.k != k for p in self.pairs):
                raise ValueError("coupling set mixes latent widths")

    @property
    def k(self) -> int:
        if not self.pairs:
            raise ValueError("empty coupling")
        return self.pairs[0].z0.k

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def concat(self, other: "CouplingSet") -> "CouplingSet":
        return CouplingSet(list(self.pairs) + list(other.pairs))


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for training, alignment, and reflow."""

    lam: float = 0.5
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    sigma0: float = 0.01
    reflow_rounds: int = 1
    purify: bool = True
    seed: int = 0
    # architecture
    k: int = 2
    hidden: int = 64
    flow_layers: int = 3
    decoder_layers: int = 1
    identity_latent: bool = False
    coord_scale: float = 1.0
    # alignment during training (paper-faithful single pass by default)
    use_omt: bool = True
    omt_iters: int = 1
    omt_restarts: int = 1
    # autoencoder
    ae_epochs: int = 10
    # reflow
    reflow_pairs: int | None = None
    reflow_epochs: int | None = None
    fresh_reflow: bool = False
    estimate_solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(method="rk4", fixed_steps=40)
    )
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.ae_epochs < 0:
            raise ValueError("epochs and batch size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be non-negative")
        if self.reflow_rounds < 0:
            raise ValueError("reflow_rounds must be >= 0")


@dataclass(frozen=True)
class SizeSampler:
    """Draws point counts from an empirical histogram."""

    sizes: tuple
    probs: tuple

    @classmethod
    def from_histogram(cls, hist: dict) -> "SizeSampler":
        if not hist:
            raise ValueError("empty size histogram")
        sizes = sorted(int(n) for n in hist)
        counts = np.array([hist[n] if n in hist else hist[str(n)] for n in sizes], float)
        return cls(tuple(sizes), tuple(counts / counts.sum()))

    @classmethod
    def from_dataset(cls, geoms) -> "SizeSampler":
        hist: dict = {}
        for g in geoms:
            hist[g.n] = hist.get(g.n, 0) + 1
        return cls.from_histogram(hist)

    @classmethod
    def fixed(cls, n: int) -> "SizeSampler":
        return cls((n,), (1.0,))

    def sample(self, rng: np.random.Generator) -> int:
        return int(self.sizes[rng.choice(len(self.sizes), p=np.array(self.probs))])


def size_histogram(geoms) -> dict:
    hist: dict = {}
    for g in geoms:
        hist[int(g.n)] = hist.get(int(g.n), 0) + 1
    return hist


def sample_noise(n: int, k: int, seed) -> LatentGeometry:
    """Standard Gaussian latent noise with the coordinate part centered."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return noise_rng(n, k, np.random.default_rng(seed))


def noise_rng(n: int, k: int, rng: np.random.Generator) -> LatentGeometry:
    coords = rng.standard_normal((n, 3))
    coords -= coords.mean(axis=0)
    return LatentGeometry(n, coords, rng.standard_normal((n, k)))


def interpolate(z0: LatentGeometry, z1: LatentGeometry, t: float) -> LatentGeometry:
    """Convex combination (1-t) z0 + t z1 of both channels."""
    if z0.n != z1.n or z0.k != z1.k:
        raise ValueError("shape mismatch between latent geometries")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return LatentGeometry(
        z0.n,
        (1.0 - t) * z0.coords + t * z1.coords,
        (1.0 - t) * z0.features + t * z1.features,
    )


def align_pair(pair: CouplingPair, lam=0.5, max_iters=1, restarts=1):
    """Replace the pair's target with its OMT-aligned version."""
    sol = solve_omt(pair.z1, pair.z0, lam, max_iters=max_iters, restarts=restarts)
    return replace(pair, z1=sol.aligned_target, aligned=True), sol


def _velocity_regression(model: VectorFieldModel, z0, z1t, t, backward=True):
    """Mean-squared velocity regression against the straight-path target."""
    zt = interpolate(z0, z1t, t)
    v = model.velocity(zt, t, cache=backward)
    ux = z1t.coords - z0.coords
    uh = z1t.features - z0.features
    numel = z0.n * (3 + z0.k)
    loss = (np.sum((v.coords - ux) ** 2) + np.sum((v.features - uh) ** 2)) / numel
    if backward:
        model.backward_velocity(
            2.0 * (v.coords - ux) / numel, 2.0 * (v.features - uh) / numel
        )
    return float(loss)


def fm_loss(model: VectorFieldModel, pair: CouplingPair, t: float, backward=True):
    """Straight-path flow-matching loss on an aligned pair.

    Returns (loss, gradient record); gradients accumulate on the model, so
    callers batching several pairs should `model.zero_grads()` first.
    """
    if not pair.aligned:
        raise ValueError("pair must be OMT-aligned")
    loss = _velocity_regression(model, pair.z0, pair.z1, t, backward=backward)
    return loss, (model.gradients() if backward else None)


def _check_dataset(dataset):
    if not dataset:
        raise ValueError("empty dataset")
    d = dataset[0].features.shape[1]
    if any(g.features.shape[1] != d for g in dataset):
        raise ValueError("dataset mixes feature widths")
    return d


def train(dataset, config: TrainConfig):
    """Train the velocity field (and, unless identity-latent, the autoencoder).

    Returns (model, loss_curve) with one loss value per optimizer step.
    """
    d = _check_dataset(dataset)
    model = VectorFieldModel(
        d=d,
        k=config.k,
        hidden=config.hidden,
        flow_layers=config.flow_layers,
        decoder_layers=config.decoder_layers,
        identity_latent=config.identity_latent,
        coord_scale=config.coord_scale,
        seed=config.seed,
    )
    model.meta = {
        "size_hist": {str(n): c for n, c in sorted(size_histogram(dataset).items())},
        "train_size": len(dataset),
        "sigma0": config.sigma0,
        "lambda": config.lam,
    }
    rng = np.random.default_rng(config.seed)
    if not config.identity_latent and config.ae_epochs > 0:
        train_autoencoder(model, dataset, config, rng)
    losses = _train_flow(model, dataset, config, rng)
    return model, losses


def _train_flow(model, dataset, config, rng):
    params = model.flow_parameters()
    state = AdamState.init(params)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            model.zero_grads()
            total = 0.0
            for idx in batch:
                g = dataset[idx]
                z1 = encode_rng(model, g, config.sigma0, rng)
                z0 = noise_rng(g.n, model.k, rng)
                if config.use_omt:
                    sol = solve_omt(
                        z1, z0, config.lam,
                        max_iters=config.omt_iters, restarts=config.omt_restarts,
                    )
                    z1t = sol.aligned_target
                else:
                    z1t = z1
                total += _velocity_regression(model, z0, z1t, float(rng.uniform()))
            grads = model.flow_gradients()
            inv = 1.0 / len(batch)
            for gr in grads:
                gr *= inv
            adam_step(params, grads, state, config.lr)
            losses.append(total / len(batch))
    return losses


def _softmax(rows):
    shifted = rows - rows.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=1, keepdims=True)


def train_autoencoder(model, dataset, config, rng):
    """Reconstruction training: squared error on coords, cross-entropy on
    one-hot classes (targets taken as the argmax of each feature row)."""
    params = model.ae_parameters()
    state = AdamState.init(params)
    losses = []
    for _ in range(config.ae_epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            model.zero_grads()
            total = 0.0
            for idx in batch:
                g = dataset[idx]
                x = g.coords - g.coords.mean(axis=0)
                noise_x = rng.standard_normal((g.n, 3))
                noise_x -= noise_x.mean(axis=0)
                noise_h = rng.standard_normal((g.n, model.k))
                mu_x, mu_h = model.encode_means(x, g.features, cache=True)
                zx = mu_x + config.sigma0 * noise_x
                zh = mu_h + config.sigma0 * noise_h
                x_rec, logits = model.decode_arrays(zx, zh, cache=True)
                labels = np.argmax(g.features, axis=1)
                p = _softmax(logits)
                coord_loss = float(((x_rec - x) ** 2).mean())
                ce = float(-np.log(np.maximum(p[np.arange(g.n), labels], 1e-300)).mean())
                total += coord_loss + ce
                y = np.zeros_like(p)
                y[np.arange(g.n), labels] = 1.0
                model.ae_backward(
                    2.0 * (x_rec - x) / x.size, (p - y) / g.n
                )
            grads = model.ae_gradients()
            inv = 1.0 / len(batch)
            for gr in grads:
                gr *= inv
            adam_step(params, grads, state, config.lr)
            losses.append(total / len(batch))
    return losses


def _pack(z: LatentGeometry) -> np.ndarray:
    return np.concatenate([np.asarray(z.coords).ravel(), np.asarray(z.features).ravel()])


def _unpack(y: np.ndarray, n: int, k: int) -> LatentGeometry:
    return LatentGeometry(n, y[: 3 * n].reshape(n, 3), y[3 * n :].reshape(n, k))


def sample_ode(model: VectorFieldModel, z0: LatentGeometry, solver: SolverConfig):
    """Integrate the learned field from the noise sample to t = 1.

    Returns (terminal latent geometry, accepted step count).
    """
    if z0.k != model.k:
        raise ValueError("latent feature width mismatch")
    n, k = z0.n, z0.k

    def f(t, y):
        return _pack(model.velocity(_unpack(y, n, k), t, cache=False))

    y1, steps = integrate(f, _pack(z0), solver)
    return _unpack(y1, n, k), steps


def _spawned(seed, count):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(count)


def _map_indexed(fn, items, threads):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def generate(model, size_sampler: SizeSampler, count, solver: SolverConfig, seed, threads=1):
    """Draw sizes, sample noise, integrate, decode. Deterministic per seed."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return []

    def one(ss):
        rng = np.random.default_rng(ss)
        n = size_sampler.sample(rng)
        z0 = noise_rng(n, model.k, rng)
        z1, steps = sample_ode(model, z0, solver)
        return decode(model, z1), steps

    return _map_indexed(one, _spawned(seed, count), threads)


def estimate_couplings(model, count, solver: SolverConfig, seed,
                       size_sampler: SizeSampler, threads=1) -> CouplingSet:
    """Pair each noise draw with its ODE endpoint (the estimated coupling)."""
    if count < 1:
        raise ValueError("count must be >= 1")

    def one(ss):
        rng = np.random.default_rng(ss)
        n = size_sampler.sample(rng)
        z0 = noise_rng(n, model.k, rng)
        z1, _ = sample_ode(model, z0, solver)
        return CouplingPair(z0, z1, aligned=False, source="estimated")

    return CouplingSet(_map_indexed(one, _spawned(seed, count), threads))


def random_couplings(model, dataset, count, seed) -> CouplingSet:
    """Independent (noise, encoded data) pairs: the random coupling baseline."""
    if count < 1:
        raise ValueError("count must be >= 1")
    sigma0 = float(model.meta.get("sigma0", 0.0))
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        g = dataset[int(rng.integers(len(dataset)))]
        z1 = encode_rng(model, g, sigma0, rng)
        z0 = noise_rng(g.n, model.k, rng)
        pairs.append(CouplingPair(z0, z1, aligned=False, source="random"))
    return CouplingSet(pairs)


def reflow(model: VectorFieldModel, config: TrainConfig, validity, threads=1):
    """Estimate couplings, purify, re-align, and fine-tune the same model.

    `validity` maps a decoded Geometry to bool. Returns (model, coupling set
    of the final round); with purify on, every returned pair decoded to a
    geometry the predicate accepted.
    """
    if config.reflow_rounds < 1:
        raise ValueError("reflow needs reflow_rounds >= 1")
    if "size_hist" not in model.meta:
        raise ValueError("model has no size histogram; train it first")
    sampler = SizeSampler.from_histogram(model.meta["size_hist"])
    count = config.reflow_pairs
    if count is None:
        count = 10 * int(model.meta.get("train_size", 100))

    last = None
    for rnd in range(config.reflow_rounds):
        est = estimate_couplings(
            model, count, config.estimate_solver,
            np.random.SeedSequence([config.seed, 101, rnd]), sampler, threads,
        )
        flagged = [
            replace(p, valid=bool(validity(decode(model, p.z1)))) for p in est
        ]
        kept = [p for p in flagged if p.valid] if config.purify else flagged
        if not kept:
            raise ValueError("purification rejected all samples")
        aligned = [
            align_pair(p, config.lam, config.omt_iters, config.omt_restarts)[0]
            for p in kept
        ]
        coupling = CouplingSet(aligned)
        if config.fresh_reflow:
            fresh = VectorFieldModel(
                d=model.d, k=model.k, hidden=model.hidden,
                flow_layers=model.n_flow_layers,
                decoder_layers=model.n_decoder_layers,
                identity_latent=model.identity_latent,
                coord_scale=model.coord_scale, seed=config.seed,
            )
            fresh.meta = dict(model.meta)
            model = fresh
        _finetune(model, coupling, config, rnd)
        last = coupling
    return model, last


def _finetune(model, coupling: CouplingSet, config: TrainConfig, rnd: int):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 202, rnd]))
    params = model.flow_parameters()
    state = AdamState.init(params)
    epochs = config.reflow_epochs if config.reflow_epochs is not None else config.epochs
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(coupling))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            model.zero_grads()
            total = 0.0
            for idx in batch:
                p = coupling[int(idx)]
                total += _velocity_regression(model, p.z0, p.z1, float(rng.uniform()))
            grads = model.flow_gradients()
            inv = 1.0 / len(batch)
            for gr in grads:
                gr *= inv
            adam_step(params, grads, state, config.lr)
            losses.append(total / len(batch))
    return losses
