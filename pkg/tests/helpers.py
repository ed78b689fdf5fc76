"""Small fixtures shared by unit and acceptance tests."""
from __future__ import annotations

import numpy as np

from resproxy import autodiff as ad
from resproxy import units
from resproxy.autodiff.gradcheck import randn
from resproxy.fluid import FluidProperties
from resproxy.history import CorrectionSet, apply_rock_correction, hm_loss, time_weights
from resproxy.rates import ConnectionTable, connection_index_tensor, producer_rates_tensor
from resproxy.reservoir import (
    ControlSchedule, GridGeometry, ReservoirModel, ReservoirState, RockProperties, Well,
)
from resproxy.surrogate import ConvNet, ConvSpec, RolloutInputs, Surrogate, SurrogateConfig, predict


def tiny_model(nx=8, ny=8, nz=4, seed=0, n_times=6) -> ReservoirModel:
    """Two producers (one deviated) and one injector on a small heterogeneous box."""
    rng = np.random.default_rng(seed)
    dx, dy, dz = 20.0, 20.0, 5.0
    shape = (nz, ny, nx)
    active = np.ones(shape, dtype=bool)
    active[:, 0, 0] = False
    poro = 0.2 + 0.02 * rng.standard_normal(shape)
    kx = 100.0 * units.MILLIDARCY * np.exp(0.3 * rng.standard_normal(shape))
    rock = RockProperties(poro, kx.copy(), 1.2 * kx, 0.1 * kx)
    state = ReservoirState(np.full(shape, 200.0e5), np.full(shape, 0.2))
    zmax = nz * dz
    wells = [
        Well("P1", "producer", 0.1, [[1.5 * dx, 1.5 * dy, 0.0], [1.5 * dx, 1.5 * dy, zmax]]),
        Well("P2", "producer", 0.1, [[(nx - 2.5) * dx, (ny - 1.5) * dy, 0.0],
                                     [(nx - 1.5) * dx, (ny - 2.5) * dy, zmax]]),
        Well("I1", "injector", 0.1, [[(nx - 0.5) * dx, 0.5 * dy, 0.0], [(nx - 0.5) * dx, 0.5 * dy, zmax]]),
    ]
    times = 10.0 * np.arange(n_times)
    bhp = {"P1": np.linspace(150e5, 140e5, n_times), "P2": np.full(n_times, 145e5)}
    inj = {"I1": np.full(n_times, 100.0)}
    model = ReservoirModel(GridGeometry(nx, ny, nz, dx, dy, dz, active), rock, state, wells,
                           ControlSchedule(times, bhp, inj))
    model.validate()
    return model


def tiny_config(grid_shape=(4, 8, 8), **kw) -> SurrogateConfig:
    base = dict(latent_channels=2, latent_static_channels=2, latent_control_channels=2,
                encoder_channels=(2, 2, 2), g_hidden=3, decoder_channels=(2, 2), grid_shape=grid_shape,
                state_mean=[180e5, 0.25, 0.75], state_std=[20e5, 0.1, 0.1],
                static_mean=[0.2, -29.9, -29.7, -32.2], static_std=[0.02, 0.3, 0.3, 0.3],
                control_scale=[150e5, 100.0], inference_dtype="float64")
    base.update(kw)
    return SurrogateConfig(**base)


def tiny_surrogate(seed=0, model=None, randomize_rhs=True, **kw) -> Surrogate:
    """Surrogate with a handful of channels; BN running statistics are primed."""
    model = model or tiny_model()
    sg = Surrogate(tiny_config(tuple(model.grid.shape), **kw), seed=seed)
    rng = np.random.default_rng(seed + 100)
    if randomize_rhs:
        # the last rhs layer starts at zero; give it weight so the dynamics are non-trivial
        w = sg.rhs.params["g.1.weight"]
        w.data = 0.3 * rng.standard_normal(w.shape)
    for st in sg.bn_states().values():
        st.running_mean = 0.1 * rng.standard_normal(st.num_features)
        st.running_var = 0.5 + rng.random(st.num_features)
    return sg


# ---------------------------------------------------------------------------
# gradient-check cases: each builder maps an rng to (f, inputs)

def _away_from(rng, shape, kinks, margin=0.05):
    """N(0,1) draws resampled until every entry is ``margin`` away from each kink."""
    x = rng.standard_normal(shape)
    for _ in range(100):
        bad = np.zeros(shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(x - k) < margin
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(int(bad.sum()))
    raise RuntimeError("rejection sampling failed")


def _unary(op, shape=(3, 4), transform=None, kinks=()):
    def build(rng):
        x = _away_from(rng, shape, kinks) if kinks else rng.standard_normal(shape)
        if transform is not None:
            x = transform(x)
        R = np.random.default_rng(rng.integers(1 << 31))
        proj = R.standard_normal(op(ad.Tensor(x)).shape)
        return (lambda a: ad.sum(ad.mul(op(a), proj))), [ad.Tensor(x)]
    return build


def _binary(op, sa=(3, 4), sb=(3, 4), tb=None):
    def build(rng):
        a = randn(rng, *sa)
        b = rng.standard_normal(sb)
        b = ad.Tensor(tb(b) if tb else b)
        proj = rng.standard_normal(op(a, b).shape)
        return (lambda x, y: ad.sum(ad.mul(op(x, y), proj))), [a, b]
    return build


def _conv(rng):
    x, w, b = randn(rng, 1, 2, 5, 4, 5), randn(rng, 3, 2, 3, 3, 3), randn(rng, 3)
    proj = rng.standard_normal((1, 3, 3, 2, 3))
    return (lambda x, w, b: ad.sum(ad.mul(ad.conv3d(x, w, b, (2, 2, 2), (1, 1, 1)), proj))), [x, w, b]


def _conv_mse(rng):
    x, w, b = randn(rng, 1, 1, 4, 4, 4), randn(rng, 2, 1, 3, 3, 3), randn(rng, 2)
    y = rng.standard_normal((1, 2, 4, 4, 4))
    return (lambda x, w, b: ad.mse(ad.conv3d(x, w, b, 1, 1), y)), [x, w, b]


def _bn(training):
    def build(rng):
        x, g, b = randn(rng, 2, 3, 2, 2, 2), randn(rng, 3), randn(rng, 3)
        st = ad.BatchNormState(3, rng.standard_normal(3), 0.5 + rng.random(3))
        proj = rng.standard_normal(x.shape)
        return (lambda x, g, b: ad.sum(ad.mul(ad.batch_norm(x, g, b, st, training), proj))), [x, g, b]
    return build


def _conv_stack(rng):
    net = ConvNet("s", [ConvSpec(2, 3, 1, True), ConvSpec(3, 3, 2, True), ConvSpec(3, 2, 1, False)], 3,
                  np.random.Generator(np.random.Philox(int(rng.integers(1 << 31)))))
    cfg = SurrogateConfig()
    x = randn(rng, 2, 2, 4, 4, 4)
    w0 = net.params["s.0.weight"]
    g1 = net.params["s.1.gamma"]
    proj = rng.standard_normal((2, 2, 2, 2, 2))
    return (lambda x, w0, g1: ad.sum(ad.mul(net(x, True, cfg), proj))), [x, w0, g1]


def _shuffle_decoder(rng):
    w = randn(rng, 8, 2, 3, 3, 3)
    z = randn(rng, 1, 2, 2, 2, 2)
    proj = rng.standard_normal((1, 1, 4, 4, 4))
    return (lambda z, w: ad.sum(ad.mul(ad.voxel_shuffle(ad.conv3d(z, w, None, 1, 1), 2), proj))), [z, w]


def _euler(rng):
    sg = tiny_surrogate(seed=int(rng.integers(1000)))
    lat = sg.cfg.latent_shape
    z0 = ad.Tensor(rng.standard_normal((1, 2) + lat))
    u = ad.Tensor(rng.standard_normal((3, 2) + lat))
    th = ad.Tensor(rng.standard_normal((1, 2) + lat))
    w = sg.rhs.params["g.0.weight"]
    proj = rng.standard_normal((4, 2) + lat)

    def f(z0, u, w):
        return ad.sum(ad.mul(ad.concat(sg.integrate(z0, u, th, 3), axis=0), proj))
    return f, [z0, u, w]


def _rate_chain(rng):
    model = tiny_model(seed=int(rng.integers(1000)))
    tab = ConnectionTable.from_model(model)
    fluid = FluidProperties()
    ncell = model.grid.active.size
    T = 2
    # work in scaled coordinates so finite differences see O(1) sensitivities
    p0 = 180e5 + 1e5 * rng.standard_normal((T, ncell))
    sw0 = 0.45 + 0.05 * rng.standard_normal((T, ncell))
    logk0 = np.log(100 * units.MILLIDARCY) + 0.2 * rng.standard_normal((3, tab.n))
    bhp = np.full((T, len(tab.wells)), 150e5)
    # low-dimensional perturbations spread over the grid keep the check cheap
    B = rng.standard_normal((4, ncell))
    dp, dsw = randn(rng, T, 4), randn(rng, T, 4)
    dk, lm = randn(rng, 3, tab.n), randn(rng, tab.n)
    for t in (dp, dsw, dk, lm):
        t.data *= 0.1

    def f(dp, dsw, dk, lm):
        p = ad.add(ad.scale(ad.matmul(dp, B), 1e5), p0)
        sw = ad.add(ad.scale(ad.matmul(dsw, B), 0.05), sw0)
        C = connection_index_tensor(ad.add(dk, logk0), tab, model.grid.cell_size)
        qw, qo = producer_rates_tensor(p, sw, tab, bhp, fluid, index=C, multipliers=ad.exp(lm))
        return ad.add(ad.sum(ad.scale(qw, units.DAY)), ad.sum(ad.scale(qo, units.DAY)))
    return f, [dp, dsw, dk, lm]


def _hm_loss(rng):
    model = tiny_model(seed=int(rng.integers(1000)), n_times=4)
    sg = tiny_surrogate(seed=int(rng.integers(1000)), model=model)
    for p in sg.parameters().values():
        p.requires_grad = False
    fluid = FluidProperties()
    steps = 2
    inp = RolloutInputs(sg, model, steps)
    factor = 4
    rock = randn(rng, 4, 1, 2, 2)
    rock.data *= 0.3
    lc = randn(rng, inp.table.n)
    lc.data *= 0.1
    hist = np.abs(rng.normal(50.0, 20.0, (steps, 2, 2)))
    w = time_weights(steps)
    corr = CorrectionSet(rock.data, lc.data)

    def f(rock, lc):
        static = apply_rock_correction(ad.Tensor(inp.static[None]), rock, factor, model.grid.active)
        _, qw, qo = predict(sg, inp, fluid, static_norm=static, log_mult=lc)
        return hm_loss(qw, qo, hist, w, corr, 5e-4, 1.0, rock=rock, log_conn=lc)
    return f, [rock, lc]


def _shuffle(rng):
    x = randn(rng, 1, 16, 1, 2, 1)
    proj = rng.standard_normal((1, 2, 2, 4, 2))
    return (lambda x: ad.sum(ad.mul(ad.voxel_shuffle(x, 2), proj))), [x]


def _upsample(rng):
    x = randn(rng, 1, 2, 2, 3, 2)
    proj = rng.standard_normal((1, 2, 4, 3, 6))
    return (lambda x: ad.sum(ad.mul(ad.trilinear_upsample(x, (2, 1, 3)), proj))), [x]


def _pad(rng):
    x = randn(rng, 2, 3)
    proj = rng.standard_normal((3, 6))
    return (lambda x: ad.sum(ad.mul(ad.pad(x, [(1, 0), (2, 1)]), proj))), [x]


def _take(rng):
    x = randn(rng, 3, 4)
    idx = np.array([0, 5, 5, 11, 2])
    proj = rng.standard_normal(5)
    return (lambda x: ad.sum(ad.mul(ad.take(x, idx), proj))), [x]


def _concat(rng):
    a, b = randn(rng, 2, 3), randn(rng, 1, 3)
    proj = rng.standard_normal((3, 3))
    return (lambda a, b: ad.sum(ad.mul(ad.concat([a, b], axis=0), proj))), [a, b]


def _where(rng):
    x = randn(rng, 3, 4)
    mask = rng.random((3, 4)) > 0.4
    proj = rng.standard_normal((3, 4))
    return (lambda x: ad.sum(ad.mul(ad.where_mask(x, mask), proj))), [x]


def _reductions(rng):
    x = randn(rng, 2, 3, 4)
    p1 = rng.standard_normal((2, 4))
    return (lambda x: ad.add(ad.sum(ad.mul(ad.sum(x, axis=1), p1)),
                             ad.mean(ad.square(ad.mean(x, axis=(0, 2), keepdims=True))))), [x]


def _mse(rng):
    a, b = randn(rng, 3, 4), randn(rng, 3, 4)
    return (lambda a, b: ad.mse(a, b)), [a, b]


OP_CASES = {
    "add": _binary(ad.add),
    "add_broadcast": _binary(ad.add, sb=(3, 1)),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul, sb=(3, 1)),
    "div": _binary(ad.div, tb=lambda b: np.sign(b) * (0.5 + np.abs(b))),
    "matmul": _binary(ad.matmul, sb=(4, 2)),
    "scale": _unary(lambda a: ad.scale(a, -2.5)),
    "neg": _unary(ad.neg),
    "power": _unary(lambda a: ad.power(a, 2.5), transform=lambda x: 0.5 + np.abs(x)),
    "square": _unary(ad.square),
    "sqrt": _unary(ad.sqrt, transform=lambda x: 0.5 + np.abs(x)),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, transform=lambda x: 0.5 + np.abs(x)),
    "log1p": _unary(ad.log1p, transform=np.abs),
    "relu": _unary(ad.relu, kinks=(0.0,)),
    "leaky_relu": _unary(lambda a: ad.leaky_relu(a, 0.2), kinks=(0.0,)),
    "clip": _unary(lambda a: ad.clip(a, -0.5, 0.5), kinks=(-0.5, 0.5)),
    "reshape": _unary(lambda a: ad.reshape(a, (4, 3))),
    "getitem": _unary(lambda a: ad.getitem(a, (slice(1, 3), slice(None, None, 2)))),
    "take": _take,
    "concat": _concat,
    "pad": _pad,
    "where_mask": _where,
    "sum_mean": _reductions,
    "mse": _mse,
    "conv3d": _conv,
    "conv3d_mse": _conv_mse,
    "voxel_shuffle": _shuffle,
    "batch_norm_train": _bn(True),
    "batch_norm_eval": _bn(False),
    "trilinear_upsample": _upsample,
}

COMPOSITE_CASES = {
    "conv_stack": _conv_stack,
    "conv_voxel_shuffle": _shuffle_decoder,
    "euler_rollout": _euler,
    "rate_chain": _rate_chain,
    "hm_loss": _hm_loss,
}

ALL_CASES = {**OP_CASES, **COMPOSITE_CASES}


def grad_error(name: str, seed: int, eps: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    f, inputs = ALL_CASES[name](rng)
    return ad.grad_check(f, inputs, eps)


# ---------------------------------------------------------------------------
# acceptance report lines, collected for the terminal summary

ACCEPTANCE_LINES: dict = {}


def report_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok
