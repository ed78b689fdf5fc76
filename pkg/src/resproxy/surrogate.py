"""Latent neural-ODE reduced-order model of reservoir dynamics.

State, static and control cubes are encoded by strided fully-convolutional
networks onto a coarse latent grid; the latent state is advanced by forward
Euler with a small convolutional right-hand side and decoded back to the
full grid by stride-free convolutions followed by a voxel shuffle.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .fluid import FluidProperties
from .rates import ConnectionTable, connection_index_tensor, producer_rates_tensor
from .reservoir import ReservoirModel

STATE_CHANNELS = ("pressure", "sat_water", "sat_oil")
STATIC_CHANNELS = ("porosity", "log_perm_x", "log_perm_y", "log_perm_z")
CONTROL_CHANNELS = ("bhp", "injection")


class ModelMissingError(FileNotFoundError):
    pass


@dataclass
class SurrogateConfig:
    latent_channels: int = 16
    latent_static_channels: int = 8
    latent_control_channels: int = 8
    encoder_channels: tuple = (16, 32, 32)
    encoder_strides: tuple = (1, 2, 1, 2)
    kernel: int = 3
    g_hidden: int = 64
    decoder_channels: tuple = (32, 32, 32)
    dt_days: float = 10.0
    time_unit_days: float = 10.0
    slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    grid_shape: tuple = (8, 16, 16)  # (nz, ny, nx)
    state_mean: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    state_std: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    static_mean: list = field(default_factory=lambda: [0.0] * 4)
    static_std: list = field(default_factory=lambda: [1.0] * 4)
    control_scale: list = field(default_factory=lambda: [1.0, 1.0])
    inference_dtype: str = "float32"  # tape-free eval path only; training and HM stay float64

    @property
    def r(self) -> int:
        return int(np.prod(self.encoder_strides))

    @property
    def padded_shape(self) -> tuple:
        r = self.r
        return tuple(-(-n // r) * r for n in self.grid_shape)

    @property
    def latent_shape(self) -> tuple:
        return tuple(n // self.r for n in self.padded_shape)

    def validate(self) -> None:
        if len(self.encoder_strides) != 4:
            raise ValueError("encoders have exactly four layers")
        if min(self.state_std + self.static_std + self.control_scale) <= 0:
            raise ValueError("normalisation scales must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("kernel extent must be odd")
        if self.inference_dtype not in ("float32", "float64"):
            raise ValueError(f"inference_dtype must be float32 or float64, got {self.inference_dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateConfig":
        tuples = {"encoder_channels", "encoder_strides", "decoder_channels", "grid_shape"}
        return cls(**{k: tuple(v) if k in tuples else v for k, v in d.items()})


@dataclass
class ConvSpec:
    cin: int
    cout: int
    stride: int
    norm: bool  # conv -> batch norm -> leaky relu, else plain conv
    zero_init: bool = False


class ConvNet:
    """Sequential stack of 3-D convolutions with optional BN + Leaky ReLU."""

    def __init__(self, name: str, specs: list, kernel: int, rng: np.random.Generator):
        self.name = name
        self.specs = specs
        self.kernel = kernel
        self.params = {}
        self.bn = {}
        k = kernel
        for i, s in enumerate(specs):
            fan_in = s.cin * k ** 3
            if s.zero_init:
                w = np.zeros((s.cout, s.cin, k, k, k))
            else:
                w = rng.standard_normal((s.cout, s.cin, k, k, k)) * np.sqrt(2.0 / fan_in)
            self.params[f"{name}.{i}.weight"] = ad.Tensor(w, requires_grad=True)
            self.params[f"{name}.{i}.bias"] = ad.Tensor(np.zeros(s.cout), requires_grad=True)
            if s.norm:
                self.params[f"{name}.{i}.gamma"] = ad.Tensor(np.ones(s.cout), requires_grad=True)
                self.params[f"{name}.{i}.beta"] = ad.Tensor(np.zeros(s.cout), requires_grad=True)
                self.bn[f"{name}.{i}"] = ad.BatchNormState(s.cout)

    def __call__(self, x, training: bool, cfg: SurrogateConfig):
        if not training and not ad.is_grad_enabled():
            return ad.Tensor(self.infer(ad.as_tensor(x).data, cfg))
        pad = self.kernel // 2
        for i, s in enumerate(self.specs):
            p = self.params
            x = ad.conv3d(x, p[f"{self.name}.{i}.weight"], p[f"{self.name}.{i}.bias"], s.stride, pad)
            if s.norm:
                x = ad.batch_norm(x, p[f"{self.name}.{i}.gamma"], p[f"{self.name}.{i}.beta"],
                                  self.bn[f"{self.name}.{i}"], training, cfg.bn_eps, cfg.bn_momentum)
                x = ad.leaky_relu(x, cfg.slope)
        return x


    def folded(self, cfg: SurrogateConfig) -> list:
        """Per-layer (weight matrix, bias) with eval-mode batch norm folded in."""
        out = []
        for i, s in enumerate(self.specs):
            w = self.params[f"{self.name}.{i}.weight"].data.reshape(s.cout, -1)
            b = self.params[f"{self.name}.{i}.bias"].data
            if s.norm:
                st = self.bn[f"{self.name}.{i}"]
                if not st.initialized:
                    raise RuntimeError("batch_norm eval mode requires running statistics from a train-mode call")
                g = self.params[f"{self.name}.{i}.gamma"].data / np.sqrt(st.running_var + cfg.bn_eps)
                w = w * g[:, None]
                b = (b - st.running_mean) * g + self.params[f"{self.name}.{i}.beta"].data
            out.append((w, b[:, None]))
        return out

    def infer(self, x: np.ndarray, cfg: SurrogateConfig) -> np.ndarray:
        """Tape-free eval-mode forward pass, one sample at a time (cache friendly)."""
        k, pad = self.kernel, self.kernel // 2
        dt = np.dtype(cfg.inference_dtype)
        layers = [(w.astype(dt), b.astype(dt)) for w, b in self.folded(cfg)]
        x = np.ascontiguousarray(x, dtype=dt)
        outs = []
        for n in range(x.shape[0]):
            h = x[n:n + 1]
            for s, (w, b) in zip(self.specs, layers):
                D, H, W = (kernels.out_extent(e, k, s.stride, pad) for e in h.shape[2:])
                cols = kernels.im2col3d(h, k, k, k, s.stride, s.stride, s.stride, pad, pad, pad)
                h = w @ cols[0] + b
                if s.norm:
                    h = np.maximum(h, dt.type(cfg.slope) * h)
                h = h.reshape(1, s.cout, D, H, W)
            outs.append(h)
        return np.concatenate(outs)


def _encoder_specs(cin: int, cout: int, cfg: SurrogateConfig) -> list:
    chans = (cin,) + tuple(cfg.encoder_channels) + (cout,)
    return [ConvSpec(chans[i], chans[i + 1], cfg.encoder_strides[i], i < 3) for i in range(4)]


class Surrogate:
    """Encoders, latent dynamics and decoder plus normalisation statistics."""

    def __init__(self, cfg: SurrogateConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.training = False
        rng = np.random.Generator(np.random.Philox(seed))
        cz, cu, ct = cfg.latent_channels, cfg.latent_control_channels, cfg.latent_static_channels
        self.enc_state = ConvNet("E_s", _encoder_specs(3, cz, cfg), cfg.kernel, rng)
        self.enc_static = ConvNet("E_theta", _encoder_specs(4, ct, cfg), cfg.kernel, rng)
        self.enc_control = ConvNet("E_u", _encoder_specs(2, cu, cfg), cfg.kernel, rng)
        self.rhs = ConvNet("g", [ConvSpec(cz + cu + ct, cfg.g_hidden, 1, True),
                                 ConvSpec(cfg.g_hidden, cz, 1, False, zero_init=True)], cfg.kernel, rng)
        dch = (cz,) + tuple(cfg.decoder_channels)
        dspecs = [ConvSpec(dch[i], dch[i + 1], 1, True) for i in range(len(dch) - 1)]
        dspecs.append(ConvSpec(dch[-1], 3 * cfg.r ** 3, 1, False))
        self.decoder = ConvNet("E_z", dspecs, cfg.kernel, rng)

    @property
    def nets(self) -> list:
        return [self.enc_state, self.enc_static, self.enc_control, self.rhs, self.decoder]

    def parameters(self) -> dict:
        out = {}
        for net in self.nets:
            out.update(net.params)
        return out

    def bn_states(self) -> dict:
        out = {}
        for net in self.nets:
            out.update(net.bn)
        return out

    def train(self) -> "Surrogate":
        self.training = True
        return self

    def eval(self) -> "Surrogate":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # -- normalisation ----------------------------------------------------

    def _pad(self, cube: np.ndarray) -> np.ndarray:
        target = self.cfg.padded_shape
        widths = [(0, 0)] * (cube.ndim - 3) + [(0, t - n) for t, n in zip(target, cube.shape[-3:])]
        return np.pad(cube, widths) if any(w[1] for w in widths) else cube

    def _crop(self, x):
        D, H, W = self.cfg.grid_shape
        if x.shape[-3:] == (D, H, W):
            return x
        return ad.getitem(x, (Ellipsis, slice(0, D), slice(0, H), slice(0, W)))

    def normalize_state(self, cubes: np.ndarray, active: np.ndarray) -> np.ndarray:
        """(..., 3, D, H, W) physical -> padded normalised, inactive cells zeroed."""
        m = np.array(self.cfg.state_mean).reshape(3, 1, 1, 1)
        s = np.array(self.cfg.state_std).reshape(3, 1, 1, 1)
        return self._pad((cubes - m) / s * active)

    def static_cube(self, model: ReservoirModel) -> np.ndarray:
        r = model.rock
        act = model.grid.active
        raw = np.stack([r.porosity, np.log(np.where(act, r.perm_x, 1.0)),
                        np.log(np.where(act, r.perm_y, 1.0)), np.log(np.where(act, r.perm_z, 1.0))])
        m = np.array(self.cfg.static_mean).reshape(4, 1, 1, 1)
        s = np.array(self.cfg.static_std).reshape(4, 1, 1, 1)
        return self._pad((raw - m) / s * act)

    def denormalize_static_logk(self, static_norm) -> ad.Tensor:
        """ln(k) channels (3, D*H*W) from a normalised static tensor [1, 4, Dp, Hp, Wp]."""
        x = self._crop(static_norm)
        x = ad.getitem(x, (0, slice(1, 4)))
        m = np.array(self.cfg.static_mean[1:]).reshape(3, 1, 1, 1)
        s = np.array(self.cfg.static_std[1:]).reshape(3, 1, 1, 1)
        x = ad.add(ad.mul(x, s), m)
        return ad.reshape(x, (3, -1))

    def rasterize_control(self, bhp: np.ndarray, inj: np.ndarray, table: ConnectionTable) -> np.ndarray:
        """Control cubes (T, 2, Dp, Hp, Wp) from per-well BHP (Pa) and injection (m^3/day)."""
        T = bhp.shape[0]
        D, H, W = self.cfg.grid_shape
        out = np.zeros((T, 2, D * H * W))
        sb, si = self.cfg.control_scale
        for l, (w, flat) in enumerate(zip(table.conn_well, table.flat)):
            if table.kinds[w] == "producer":
                out[:, 0, flat] += bhp[:, w] / sb
            else:
                out[:, 1, flat] += inj[:, w] / si
        return self._pad(out.reshape(T, 2, D, H, W))

    # -- network pieces -----------------------------------------------------

    def _check_extents(self, x) -> None:
        r = self.cfg.r
        if any(n % r for n in x.shape[2:]):
            raise ValueError(f"spatial extents {x.shape[2:]} not divisible by r={r}; pad the grid")

    def encode_state(self, s):
        self._check_extents(s)
        return self.enc_state(s, self.training, self.cfg)

    def encode_static(self, theta):
        self._check_extents(theta)
        return self.enc_static(theta, self.training, self.cfg)

    def encode_control(self, u):
        self._check_extents(u)
        return self.enc_control(u, self.training, self.cfg)

    def latent_rhs(self, z, u_hat, theta_hat):
        if not (z.shape[2:] == u_hat.shape[2:] == theta_hat.shape[2:]):
            raise ValueError(f"latent grids disagree: {z.shape}, {u_hat.shape}, {theta_hat.shape}")
        return self.rhs(ad.concat([z, u_hat, theta_hat], axis=1), self.training, self.cfg)

    def integrate(self, z0, u_hat, theta_hat, steps: int) -> list:
        """Forward-Euler rollout; ``u_hat`` is [>=steps, Cu, ...], one row per step."""
        if u_hat.shape[0] < steps:
            raise ValueError(f"control series has {u_hat.shape[0]} entries, need {steps}")
        h = self.cfg.dt_days / self.cfg.time_unit_days
        zs = [z0]
        z = z0
        for k in range(steps):
            uk = ad.getitem(u_hat, slice(k, k + 1)) if u_hat.shape[0] > 1 else u_hat
            z = ad.add(z, ad.scale(self.latent_rhs(z, uk, theta_hat), h))
            if not np.all(np.isfinite(z.data)):
                raise FloatingPointError(f"non-finite latent state at step {k + 1}")
            zs.append(z)
        return zs

    def decode_state(self, z, active=None):
        """Normalised state cube, cropped to the grid; inactive cells exactly 0."""
        out = ad.voxel_shuffle(self.decoder(z, self.training, self.cfg), self.cfg.r)
        out = self._crop(out)
        if active is not None:
            out = ad.where_mask(out, active.astype(np.float64)[None, None])
        return out

    def denormalize_state(self, x, active=None):
        m = np.array(self.cfg.state_mean).reshape(1, 3, 1, 1, 1)
        s = np.array(self.cfg.state_std).reshape(1, 3, 1, 1, 1)
        out = ad.add(ad.mul(x, s), m)
        if active is not None:
            out = ad.where_mask(out, active.astype(np.float64)[None, None])
        return out

    def rollout(self, s0_norm: np.ndarray, static_norm, control_cubes: np.ndarray, steps: int,
                active: np.ndarray):
        """Normalised decoded states [steps + 1, 3, D, H, W] (index 0 reconstructs s0)."""
        z0 = self.encode_state(ad.Tensor(s0_norm[None]))
        theta_hat = self.encode_static(static_norm)
        u_hat = self.encode_control(ad.Tensor(control_cubes[:max(steps, 1)]))
        zs = self.integrate(z0, u_hat, theta_hat, steps)
        z = ad.concat(zs, axis=0) if len(zs) > 1 else zs[0]
        return self.decode_state(z, active)

    # -- serialisation ----------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        blobs, entries, offset = [], [], 0
        for name, t in self.parameters().items():
            entries.append({"name": name, "kind": "param", "shape": list(t.shape), "offset": offset})
            blobs.append(t.data.reshape(-1))
            offset += t.size
        for name, st in self.bn_states().items():
            if st.initialized:
                for kind, arr in (("running_mean", st.running_mean), ("running_var", st.running_var)):
                    entries.append({"name": name, "kind": kind, "shape": [arr.size], "offset": offset})
                    blobs.append(arr)
                    offset += arr.size
        manifest = {"format": "resproxy-surrogate", "version": 1, "config": self.cfg.to_dict(),
                    "entries": entries, "blob": "weights.f64", "count": offset}
        np.concatenate(blobs).astype("<f8").tofile(path / "weights.f64")
        (path / "weights.json").write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "Surrogate":
        path = Path(path)
        mf = path / "weights.json"
        if not mf.exists():
            raise ModelMissingError(f"no trained surrogate at {path} (missing weights.json)")
        manifest = json.loads(mf.read_text())
        blob = np.fromfile(path / manifest["blob"], dtype="<f8")
        if blob.size != manifest["count"]:
            raise ValueError(f"weights blob holds {blob.size} values, manifest expects {manifest['count']}")
        model = cls(SurrogateConfig.from_dict(manifest["config"]))
        params, bns = model.parameters(), model.bn_states()
        for e in manifest["entries"]:
            n = int(np.prod(e["shape"]))
            arr = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {e['name']}")
            if e["kind"] == "param":
                params[e["name"]].data = arr
            else:
                setattr(bns[e["name"]], e["kind"], arr)
        return model.eval()

    def snapshot(self) -> dict:
        """Deep copy of weights and batch-norm statistics."""
        snap = {k: v.data.copy() for k, v in self.parameters().items()}
        for k, st in self.bn_states().items():
            snap[k + "#mean"] = None if st.running_mean is None else st.running_mean.copy()
            snap[k + "#var"] = None if st.running_var is None else st.running_var.copy()
        return snap

    def restore(self, snap: dict) -> None:
        for k, v in self.parameters().items():
            v.data = snap[k].copy()
        for k, st in self.bn_states().items():
            st.running_mean = None if snap[k + "#mean"] is None else snap[k + "#mean"].copy()
            st.running_var = None if snap[k + "#var"] is None else snap[k + "#var"].copy()


def fit_normalization(cfg: SurrogateConfig, scenarios) -> SurrogateConfig:
    """Per-channel statistics over active cells of all training scenarios."""
    states, statics, bhp, inj = [], [], [], []
    for sc in scenarios:
        act = sc.model.grid.active
        states.append(sc.states[:, :, act])
        r = sc.model.rock
        statics.append(np.stack([r.porosity[act], np.log(r.perm_x[act]), np.log(r.perm_y[act]),
                                 np.log(r.perm_z[act])]))
        bhp.extend(np.concatenate(list(sc.model.schedule.bhp.values())).tolist() or [1.0])
        inj.extend(np.concatenate(list(sc.model.schedule.injection.values())).tolist() or [1.0])
    st = np.concatenate([s.transpose(1, 0, 2).reshape(3, -1) for s in states], axis=1)
    sa = np.concatenate(statics, axis=1)
    cfg.state_mean = st.mean(axis=1).tolist()
    cfg.state_std = np.maximum(st.std(axis=1), 1e-6).tolist()
    cfg.static_mean = sa.mean(axis=1).tolist()
    cfg.static_std = np.maximum(sa.std(axis=1), 1e-6).tolist()
    cfg.control_scale = [float(np.mean(np.abs(bhp))) or 1.0, float(np.mean(np.abs(inj))) or 1.0]
    cfg.grid_shape = tuple(scenarios[0].model.grid.shape)
    return cfg


@dataclass
class SimulationOutput:
    states: np.ndarray  # (T + 1, 3, nz, ny, nx) physical units
    times: np.ndarray  # (T + 1,) days
    rates: np.ndarray  # (T, n_wells, 2) m^3/s, injectors negative
    well_names: list


class RolloutInputs:
    """Precomputed arrays for rolling the surrogate over one reservoir model."""

    def __init__(self, surrogate: Surrogate, model: ReservoirModel, steps: int, schedule=None,
                 initial_state=None):
        from .oracle import report_controls

        schedule = model.schedule if schedule is None else schedule
        self.model = model
        self.steps = steps
        self.active = model.grid.active
        self.table = ConnectionTable.from_model(model)
        state = model.initial_state if initial_state is None else initial_state
        self.s0 = surrogate.normalize_state(state.as_cube(), self.active)
        self.static = surrogate.static_cube(model)
        t0 = schedule.times[0]
        self.times = t0 + np.arange(steps + 1) * surrogate.cfg.dt_days
        # just past t_k selects the control applied on [t_k, t_k+1)
        step_times = self.times[:max(steps, 1)] + 1e-9
        step_bhp, step_inj = report_controls(schedule, step_times, self.table)
        self.control_cubes = surrogate.rasterize_control(step_bhp, step_inj, self.table)
        self.report_bhp, self.report_inj = report_controls(schedule, self.times[1:], self.table)


def predict(surrogate: Surrogate, inp: RolloutInputs, fluid: FluidProperties, static_norm=None,
            log_mult=None, conn_index=None):
    """Tensor pipeline: (physical states [T+1,3,D,H,W], water rates, oil rates).

    Rates are producer-only tensors of shape (T, n_producers) in m^3/s.
    ``static_norm`` overrides the model statics (e.g. corrected); connection
    indices are then recomputed from its permeability channels unless given.
    """
    static_t = ad.Tensor(inp.static[None]) if static_norm is None else static_norm
    norm = surrogate.rollout(inp.s0, static_t, inp.control_cubes, inp.steps, inp.active)
    phys = surrogate.denormalize_state(norm, inp.active)
    if inp.steps == 0 or not inp.table.producer_ids():
        return phys, None, None
    ncell = int(np.prod(phys.shape[2:]))
    later = ad.getitem(phys, slice(1, None))
    p = ad.reshape(ad.getitem(later, (slice(None), 0)), (inp.steps, ncell))
    sw = ad.reshape(ad.getitem(later, (slice(None), 1)), (inp.steps, ncell))
    if conn_index is None and static_norm is not None:
        logk = surrogate.denormalize_static_logk(static_t)
        L = inp.table.n
        gather = (np.arange(3)[:, None] * ncell + inp.table.flat[None, :]).reshape(-1)
        conn_index = connection_index_tensor(ad.reshape(ad.take(logk, gather), (3, L)), inp.table,
                                             inp.model.grid.cell_size)
    mult = None if log_mult is None else ad.exp(log_mult)
    qw, qo = producer_rates_tensor(p, sw, inp.table, inp.report_bhp, fluid, index=conn_index,
                                   multipliers=mult)
    return phys, qw, qo


def simulate(surrogate: Surrogate, model: ReservoirModel, fluid: FluidProperties, steps: int,
             schedule=None) -> SimulationOutput:
    """Eval-mode rollout over ``steps`` report intervals with rates."""
    was_training = surrogate.training
    surrogate.eval()
    try:
        with ad.no_grad():
            inp = RolloutInputs(surrogate, model, steps, schedule)
            phys, qw, qo = predict(surrogate, inp, fluid)
    finally:
        surrogate.training = was_training
    tab = inp.table
    rates = np.zeros((steps, len(tab.wells), 2))
    prod = tab.producer_ids()
    if steps and prod:
        rates[:, prod, 0] = qw.data
        rates[:, prod, 1] = qo.data
    for w, kind in enumerate(tab.kinds):
        if kind == "injector":
            rates[:, w, 0] = -inp.report_inj[:, w] / 86400.0
    return SimulationOutput(phys.data, inp.times, rates, list(tab.wells))
