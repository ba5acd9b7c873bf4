"""Continuous-time Markov chain simulation of the particle system on the
discrete torus, driven by the generator  lambda(n) L + kappa(n) K.

The event engine uses uniformization: every bond carries a Poisson clock at
the maximal bond rate, candidate events are accepted with probability
(channel rate)/(max rate) given the current pair of spins.  This is exact in
law and costs O(1) per candidate.  Randomness comes from counter-based
Philox streams so replicas are independent and trajectories replayable.
"""

from __future__ import annotations

import struct
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .thermo import DomainPolygon, OutOfDomain, invert_parameters_grid

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f
        return wrap if not (len(a) == 1 and callable(a[0])) else a[0]


_EVENT_CHUNK = 20_000_000


@dataclass
class ScalingPlan:
    """Speed-up exponents and mesoscopic block size.

    Eulerian mode runs the asymmetric part at n and the symmetric part at
    n^(1+delta); intermediate mode multiplies both by n^beta and scales the
    density profiles down by n^(-2 beta) (resp. n^(-beta) for the slope).
    """

    mode: str = "eulerian"
    beta: float = 0.0
    delta: float = 0.25
    l: int = None
    strict: bool = False

    def __post_init__(self):
        if self.mode not in ("eulerian", "intermediate"):
            raise ValueError(f"unknown scaling mode {self.mode!r}")
        if self.mode == "eulerian":
            self.beta = 0.0
        elif self.beta <= 0:
            raise ValueError("intermediate mode needs beta > 0")
        if self.strict and self.mode == "intermediate":
            # admissible exponent region of the intermediate-scaling theorem
            if not (2 * self.delta - 8 * self.beta > 1 and
                    self.delta + 3 * self.beta < 1):
                raise ValueError(
                    f"(beta, delta)=({self.beta},{self.delta}) outside the "
                    "strict region {2d-8b>1, d+3b<1}")

    def lambda_speed(self, n):
        return float(n) ** (1.0 + self.beta)

    def kappa_speed(self, n):
        return float(n) ** (1.0 + self.beta + self.delta)

    def block_size(self, n):
        if self.l is not None:
            l = int(self.l)
        else:
            l = int(np.ceil(n ** 0.6))
        if self.strict and self.mode == "intermediate":
            lo = n ** ((1 + self.delta + 5 * self.beta) / 3.0)
            hi = n ** (self.delta - self.beta)
            if not (lo <= l <= hi):
                raise ValueError(f"block size {l} outside [{lo:.1f}, {hi:.1f}]")
        if 2 * l >= n:
            raise ValueError(f"block size {l} too large for n={n}")
        return l

    def scale_profile_values(self, rho_vals, u_vals, n):
        f_r = float(n) ** (-2.0 * self.beta)
        f_u = float(n) ** (-self.beta)
        return rho_vals * f_r, u_vals * f_u

    def field_scale(self, n):
        """(n^{2 beta}, n^{beta}) factors turning block averages into fields."""
        return float(n) ** (2.0 * self.beta), float(n) ** self.beta


def weight_function(x):
    """C^2 averaging bump a(x) = (15/16)(1-x^2)^2 on (-1,1), total weight 1."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 1.0, (15.0 / 16.0) * (1.0 - x ** 2) ** 2, 0.0)


def philox_stream(seed, stream=0):
    key = np.array([np.uint64(seed & (2 ** 64 - 1)), np.uint64(stream)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class LatticeState:
    spins: np.ndarray            # uint8 state indices on the torus
    time: float
    seed: int
    rng: np.random.Generator = field(repr=False)
    total_eta: int = 0
    total_zeta2: int = 0         # zeta totals in exact units of v0/2
    events: int = 0
    accepted: int = 0
    trajectory_hash: str = ""

    @property
    def n(self):
        return self.spins.size

    def recompute_totals(self, model):
        N = int(model.eta[self.spins].sum())
        Z2 = int(model.zeta_half_units[self.spins].sum())
        return N, Z2

    def totals(self, model):
        """(N, Z) with Z in physical (v0-scaled) units."""
        return self.total_eta, 0.5 * self.total_zeta2 * model.v0

    def update_hash(self):
        h = hashlib.blake2b(digest_size=16)
        h.update(self.spins.tobytes())
        h.update(struct.pack("<qqd", self.events, self.accepted, self.time))
        prev = bytes.fromhex(self.trajectory_hash) if self.trajectory_hash else b""
        h.update(prev)
        self.trajectory_hash = h.hexdigest()


def sample_local_equilibrium(model, rho_profile, u_profile, n, plan, seed,
                             stream=0):
    """Independent site draws from the tilted measures along a profile."""
    x = np.arange(n) / n
    rho_vals = np.asarray(rho_profile(x) if callable(rho_profile)
                          else rho_profile, dtype=float) + np.zeros(n)
    u_vals = np.asarray(u_profile(x) if callable(u_profile)
                        else u_profile, dtype=float) + np.zeros(n)
    rho_vals, u_vals = plan.scale_profile_values(rho_vals, u_vals, n)
    dom = DomainPolygon.from_model(model)
    if not np.all(dom.contains(rho_vals, u_vals, margin=1e-12)):
        bad = np.argmin(dom.interior_margin(rho_vals, u_vals))
        raise OutOfDomain(
            f"scaled profile leaves the domain at site {bad}: "
            f"({rho_vals[bad]:.4g}, {u_vals[bad]:.4g})")
    tau, theta, _ = invert_parameters_grid(model, rho_vals, u_vals)
    logits = (tau[:, None] * model.eta[None, :]
              + theta[:, None] * model.zeta[None, :]
              + np.log(model.pi)[None, :])
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    rng = philox_stream(seed, stream)
    cum = np.cumsum(p, axis=1)
    draws = rng.random(n)
    spins = (draws[:, None] > cum).sum(axis=1).astype(np.uint8)
    st = LatticeState(spins=spins, time=0.0, seed=seed, rng=rng)
    st.total_eta, st.total_zeta2 = st.recompute_totals(model)
    st.update_hash()
    return st


# ---------------------------------------------------------------------------
# event engine


@njit(cache=True)
def _apply_events(spins, bonds, us, cum, out_a, out_b, nchan, k):
    accepted = 0
    n = spins.shape[0]
    for i in range(bonds.shape[0]):
        j = bonds[i]
        jp = j + 1
        if jp == n:
            jp = 0
        c = np.int64(spins[j]) * k + np.int64(spins[jp])
        x = us[i]
        for q in range(nchan):
            if x < cum[c, q]:
                spins[j] = out_a[c, q]
                spins[jp] = out_b[c, q]
                accepted += 1
                break
    return accepted


class _ChannelTable:
    """Per-pair jump channels with cumulative acceptance thresholds."""

    def __init__(self, model, lam, kap):
        k = model.nstates
        rate = lam * model.r + kap * model.s      # (k,k,k,k)
        pair_rates = rate.reshape(k * k, k * k)
        self.k = k
        nchan = int((pair_rates > 0).sum(axis=1).max())
        self.nchan = max(nchan, 1)
        self.cum = np.zeros((k * k, self.nchan))
        self.out_a = np.zeros((k * k, self.nchan), dtype=np.uint8)
        self.out_b = np.zeros((k * k, self.nchan), dtype=np.uint8)
        self.bond_rate = float(pair_rates.sum(axis=1).max())
        for c in range(k * k):
            rates = pair_rates[c]
            idx = np.nonzero(rates)[0]
            acc = 0.0
            for q, target in enumerate(idx):
                acc += rates[target] / self.bond_rate
                self.cum[c, q] = acc
                self.out_a[c, q] = target // k
                self.out_b[c, q] = target % k
            # pad with the last threshold so unmatched draws mean rejection
            self.cum[c, len(idx):] = acc


def simulate(state, model, plan, t_end, observe_at=(), observer=None,
             check_conservation=True):
    """Advance the chain to macroscopic time t_end (exact in law).

    ``observer(state)`` fires at every time in ``observe_at`` (plus t_end if
    listed); times must be nondecreasing from state.time.
    """
    if t_end < state.time - 1e-15:
        raise ValueError("t_end precedes the current state time")
    n = state.n
    lam = plan.lambda_speed(n)
    kap = plan.kappa_speed(n)
    table = _ChannelTable(model, lam, kap)
    total_rate = n * table.bond_rate
    stops = sorted(set(float(t) for t in observe_at) | {float(t_end)})
    stops = [t for t in stops if t > state.time + 1e-15]
    for t_stop in stops:
        dt = t_stop - state.time
        n_events = int(state.rng.poisson(total_rate * dt))
        remaining = n_events
        while remaining > 0:
            chunk = min(remaining, _EVENT_CHUNK)
            bonds = state.rng.integers(0, n, size=chunk, dtype=np.int64)
            us = state.rng.random(chunk)
            acc = _apply_events(state.spins, bonds, us, table.cum,
                                table.out_a, table.out_b, table.nchan,
                                np.int64(table.k))
            state.events += chunk
            state.accepted += int(acc)
            remaining -= chunk
        state.time = t_stop
        if check_conservation:
            N, Z2 = state.recompute_totals(model)
            if N != state.total_eta or Z2 != state.total_zeta2:
                raise RuntimeError(
                    f"conservation violated: ({state.total_eta},{state.total_zeta2})"
                    f" -> ({N},{Z2})")
        state.update_hash()
        if observer is not None and (t_stop in observe_at or not observe_at):
            observer(state)
    return state


# ---------------------------------------------------------------------------
# explicit generators at tiny size


class TooLarge(ValueError):
    pass


def generator_matrix(model, n, part="L"):
    """Dense generator of the chosen part on the full configuration space."""
    k = model.nstates
    total = k ** n
    if total > 4096:
        raise TooLarge(f"{k}^{n} = {total} exceeds 4096 states")
    rates = model.r if part == "L" else model.s
    if part not in ("L", "K"):
        raise ValueError("part must be 'L' or 'K'")
    powers = k ** np.arange(n - 1, -1, -1, dtype=np.int64)
    confs = np.array(np.unravel_index(np.arange(total), (k,) * n)).T
    G = np.zeros((total, total))
    for a in range(k):
        for b in range(k):
            for ap in range(k):
                for bp in range(k):
                    w = rates[a, b, ap, bp]
                    if w <= 0:
                        continue
                    for j in range(n):
                        jp = (j + 1) % n
                        sel = (confs[:, j] == a) & (confs[:, jp] == b)
                        src = np.nonzero(sel)[0]
                        dst = src + (ap - a) * powers[j] + (bp - b) * powers[jp]
                        G[src, dst] += w
                        G[src, src] -= w
    return G


def product_measure_vector(model, n, tau, theta):
    """Stationary product weights pi^n_{tau,theta} on the configuration space."""
    from .thermo import gibbs_measure

    p1 = gibbs_measure(model, tau, theta)
    k = model.nstates
    total = k ** n
    confs = np.array(np.unravel_index(np.arange(total), (k,) * n)).T
    return np.prod(p1[confs], axis=1)


# ---------------------------------------------------------------------------
# block averages and empirical fields


def block_average(values, l, x, n=None, weight=weight_function):
    """Weighted mesoscopic average (1/l) sum_j a((nx-j)/l) xi_j at point x."""
    values = np.asarray(values, dtype=float)
    if n is None:
        n = values.size
    x = np.atleast_1d(np.asarray(x, dtype=float))
    center = x * n
    offs = np.arange(-int(np.ceil(l)) + 1, int(np.ceil(l)))
    j = (np.round(center)[:, None].astype(np.int64) + offs[None, :])
    wts = weight((center[:, None] - j) / l) / l
    vals = values[np.mod(j, n)]
    out = (wts * vals).sum(axis=1)
    return out if out.size > 1 else float(out[0])


def empirical_fields(state, model, plan, m):
    """Scaled block-averaged density and slope fields on an m-point grid."""
    from .fields import Field

    n = state.n
    l = plan.block_size(n)
    f_r, f_u = plan.field_scale(n)
    xs = np.arange(m) / m
    eta_vals = model.eta[state.spins].astype(float)
    zeta_vals = model.zeta[state.spins]
    rho_hat = f_r * block_average(eta_vals, l, xs, n)
    u_hat = f_u * block_average(zeta_vals, l, xs, n)
    return (Field(rho_hat, state.time, "rho"), Field(u_hat, state.time, "u"))


# ---------------------------------------------------------------------------
# snapshot I/O


_MAGIC = b"LGS1"


def write_snapshot_csv(path, fields_by_time, append=False):
    """CSV rows `t,x,rho_hat,u_hat` for a list of (t, rho Field, u Field)."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        if not append:
            fh.write("t,x,rho_hat,u_hat\n")
        for t, fr, fu in fields_by_time:
            xs = fr.x()
            for x, r, u in zip(xs, fr.values, fu.values):
                fh.write(f"{t:.10g},{x:.10g},{r:.10g},{u:.10g}\n")


def dump_state(path, state, model):
    header = struct.pack("<4sIQIQd", _MAGIC, 1, state.n, model.nstates,
                         state.seed & (2 ** 64 - 1), state.time)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(state.spins.tobytes())


def load_state(path, model):
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sIQIQd"))
        magic, ver, n, k, seed, time = struct.unpack("<4sIQIQd", head)
        if magic != _MAGIC or ver != 1:
            raise ValueError("not a lattice snapshot file")
        if k != model.nstates:
            raise ValueError("snapshot was written for a different model")
        spins = np.frombuffer(fh.read(n), dtype=np.uint8).copy()
    # restarts continue on a fresh substream derived from the stored clock
    rng = philox_stream(seed, stream=np.uint64(abs(hash(time)) & (2 ** 63 - 1)))
    st = LatticeState(spins=spins, time=time, seed=seed, rng=rng)
    st.total_eta, st.total_zeta2 = st.recompute_totals(model)
    st.update_hash()
    return st
