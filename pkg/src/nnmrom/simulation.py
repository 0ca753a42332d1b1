"""Time integration of full-order systems and forcing-signal synthesis."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import ContractViolation, ConvergenceError, DivergenceError
from .systems import MdofSystem, SystemState

__all__ = [
    "ForcingSignal",
    "Trajectory",
    "NewmarkParams",
    "integrate_rk4",
    "integrate_newmark",
    "make_filtered_noise",
    "make_sinusoid",
    "save_trajectory_csv",
    "load_trajectory_csv",
    "save_trajectory_binary",
    "load_trajectory_binary",
]


@dataclass(frozen=True, eq=False)
class ForcingSignal:
    """Sampled external loads, one row per input channel.

    ``channel_map[c]`` is the dof that channel ``c`` loads.  It may be
    ``None`` when a signal is only used as a regressor input.
    """

    dt: float
    samples: np.ndarray
    channel_map: tuple | None = None

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        object.__setattr__(self, "samples", samples)
        if not self.dt > 0:
            raise ContractViolation("forcing dt must be positive")
        if self.channel_map is not None:
            cmap = tuple(int(d) for d in self.channel_map)
            if len(cmap) != samples.shape[0]:
                raise ContractViolation(
                    f"channel_map has {len(cmap)} entries for {samples.shape[0]} channels"
                )
            object.__setattr__(self, "channel_map", cmap)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def steps(self) -> int:
        return self.samples.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps) * self.dt

    def scaled(self, factor: float) -> "ForcingSignal":
        return ForcingSignal(self.dt, self.samples * factor, self.channel_map)

    def window(self, start: int, stop: int) -> "ForcingSignal":
        return ForcingSignal(self.dt, self.samples[:, start:stop], self.channel_map)

    def on_dofs(self, n_dof: int) -> np.ndarray:
        if self.channel_map is None:
            raise ContractViolation("forcing has no channel_map")
        F = np.zeros((n_dof, self.steps))
        for c, dof in enumerate(self.channel_map):
            if not 0 <= dof < n_dof:
                raise ContractViolation(f"channel {c} maps to dof {dof}, system has {n_dof}")
            F[dof] += self.samples[c]
        return F


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Response histories; column ``j`` is time ``j * dt``."""

    dt: float
    displacements: np.ndarray
    forcing: ForcingSignal
    velocities: np.ndarray | None = None
    hysteretic: np.ndarray | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.displacements, dtype=float))
        object.__setattr__(self, "displacements", X)
        steps = X.shape[1]
        for name in ("velocities", "hysteretic"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.atleast_2d(np.asarray(arr, dtype=float))
                object.__setattr__(self, name, arr)
                if arr.shape[1] != steps:
                    raise ContractViolation(f"{name} has {arr.shape[1]} columns, expected {steps}")
        if self.forcing.steps != steps:
            raise ContractViolation(
                f"forcing has {self.forcing.steps} samples, displacements {steps}"
            )

    @property
    def n_dof(self) -> int:
        return self.displacements.shape[0]

    @property
    def steps(self) -> int:
        return self.displacements.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps) * self.dt

    def window(self, start: int, stop: int) -> "Trajectory":
        sl = slice(start, stop)
        return Trajectory(
            self.dt,
            self.displacements[:, sl],
            self.forcing.window(start, stop),
            None if self.velocities is None else self.velocities[:, sl],
            None if self.hysteretic is None else self.hysteretic[:, sl],
        )

    def state_at(self, j: int) -> SystemState:
        v = np.zeros(self.n_dof) if self.velocities is None else self.velocities[:, j]
        z = np.zeros(0) if self.hysteretic is None else self.hysteretic[:, j]
        return SystemState(self.displacements[:, j], v, z)


def _check_setup(sys: MdofSystem, initial: SystemState, forcing: ForcingSignal):
    initial.check(sys)
    if forcing.steps < 1:
        raise ContractViolation("forcing has no samples")
    if forcing.channel_map is None:
        if len(sys.force_map) != forcing.n_channels:
            raise ContractViolation(
                f"forcing has {forcing.n_channels} channels but the system maps {len(sys.force_map)}"
            )
        forcing = ForcingSignal(forcing.dt, forcing.samples, sys.force_map)
    return forcing.on_dofs(sys.n_dof)


def integrate_rk4(sys: MdofSystem, initial: SystemState, forcing: ForcingSignal) -> Trajectory:
    """Classical fixed-step RK4 on the first-order form.

    The step is the forcing sample interval; the load at half steps is the
    mean of the neighbouring samples.  The result has one column per
    forcing sample, the first being ``initial``.
    """
    F = _check_setup(sys, initial, forcing)
    n, steps, dt = sys.n_dof, forcing.steps, forcing.dt
    inv_m = 1.0 / sys.masses
    has_z = sys.n_links > 0

    U = np.empty((n, steps))
    V = np.empty((n, steps))
    Z = np.empty((sys.n_links, steps))
    u, v, z = initial.u.copy(), initial.v.copy(), initial.z.copy()
    U[:, 0], V[:, 0], Z[:, 0] = u, v, z

    def rhs(u, v, z, f):
        acc = (f - sys._internal(u, v, z)) * inv_m
        zd = sys._z_rate(sys._link_velocity(v), z) if has_z else z
        return v, acc, zd

    half = 0.5 * dt
    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(1, steps):
            f0, f1 = F[:, j - 1], F[:, j]
            fh = 0.5 * (f0 + f1)
            k1 = rhs(u, v, z, f0)
            k2 = rhs(u + half * k1[0], v + half * k1[1], z + half * k1[2], fh)
            k3 = rhs(u + half * k2[0], v + half * k2[1], z + half * k2[2], fh)
            k4 = rhs(u + dt * k3[0], v + dt * k3[1], z + dt * k3[2], f1)
            u = u + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
            v = v + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
            if has_z:
                z = z + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(np.isfinite(z))):
                raise DivergenceError(f"RK4 state became non-finite at step {j}", step=j)
            U[:, j], V[:, j], Z[:, j] = u, v, z
    return Trajectory(dt, U, forcing, V, Z if has_z else None)


@dataclass(frozen=True)
class NewmarkParams:
    gamma: float = 0.5
    beta: float = 0.25
    newton_tol: float = 1e-8
    max_iter: int = 50
    z_substeps: int = 4

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma >= 0.5):
            raise ContractViolation("Newmark needs beta > 0 and gamma >= 1/2")
        if self.max_iter < 1 or self.z_substeps < 1:
            raise ContractViolation("max_iter and z_substeps must be >= 1")


def _advance_z(sys: MdofSystem, z0, x0, x1, dt, nsub):
    """RK4 sub-stepping of the hysteretic variables over one step.

    ``nsub`` is a minimum; stiff steps (fast links near saturation) get
    more sub-steps.  Link velocity is interpolated linearly from ``x0`` to ``x1``.  Also
    returns ``dz1/dx1``, integrated as a forward sensitivity.
    """
    bw = sys._bw
    A, beta, gamma, nexp = bw["amplitude"], bw["beta"], bw["gamma"], bw["exponent"]

    def rate(s, z, w):
        xd = x0 + s * (x1 - x0)
        az = np.abs(z)
        azn1 = az ** (nexp - 1.0)
        zd = A * xd - beta * np.abs(xd) * z * azn1 - gamma * xd * az * azn1
        g_x = A - beta * np.sign(xd) * z * azn1 - gamma * az * azn1
        g_z = -nexp * azn1 * (beta * np.abs(xd) + gamma * xd * np.sign(z))
        return zd, g_x * s + g_z * w

    # the z equation relaxes at rate ~ n (beta + gamma) |xdot| z_max^(n-1);
    # keep h * rate <= 1 so RK4 stays stable and does not overshoot z_max
    rate_max = np.max(nexp * (beta + np.abs(gamma)) * np.maximum(np.abs(x0), np.abs(x1)) * bw["z_max"] ** (nexp - 1.0), initial=0.0)
    nsub = max(nsub, int(np.ceil(dt * rate_max)))
    h = dt / nsub
    ds = 1.0 / nsub
    z, w = z0.copy(), np.zeros_like(z0)
    for k in range(nsub):
        s = k * ds
        a1, b1 = rate(s, z, w)
        a2, b2 = rate(s + ds / 2, z + h / 2 * a1, w + h / 2 * b1)
        a3, b3 = rate(s + ds / 2, z + h / 2 * a2, w + h / 2 * b2)
        a4, b4 = rate(s + ds, z + h * a3, w + h * b3)
        z = z + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        w = w + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
    return z, w


def integrate_newmark(
    sys: MdofSystem,
    initial: SystemState,
    forcing: ForcingSignal,
    params: NewmarkParams | None = None,
) -> Trajectory:
    """Implicit Newmark integration with Newton-Raphson on the dynamic residual.

    Each Newton iterate of the end-of-step displacement fixes the end
    velocity, from which the hysteretic variables are re-integrated with
    RK4 sub-steps.  The tangent includes the exact sensitivity of those
    sub-steps, so convergence is quadratic away from velocity reversals.
    """
    p = params or NewmarkParams()
    F = _check_setup(sys, initial, forcing)
    n, steps, dt = sys.n_dof, forcing.steps, forcing.dt
    M = sys.masses
    K, C = sys._K, sys._C
    has_z = sys.n_links > 0
    has_cubic = bool(sys.cubic_springs)
    Bc, kc = sys._B_cubic, sys._k_cubic
    Bb, kb = sys._B_bw, sys._bw["link_stiffness"]

    c_u = 1.0 / (p.beta * dt * dt)
    c_v = p.gamma / (p.beta * dt)
    K_dyn = np.diag(M) * c_u + C * c_v + K

    U = np.empty((n, steps))
    V = np.empty((n, steps))
    Z = np.empty((sys.n_links, steps))
    u, v, z = initial.u.copy(), initial.v.copy(), initial.z.copy()
    a = (F[:, 0] - sys._internal(u, v, z)) / M
    U[:, 0], V[:, 0], Z[:, 0] = u, v, z

    for j in range(1, steps):
        f = F[:, j]
        x0 = Bb.T @ v if has_z else None
        u1 = u.copy()
        for it in range(p.max_iter + 1):
            a1 = c_u * (u1 - u - dt * v) - (0.5 / p.beta - 1.0) * a
            v1 = v + dt * ((1.0 - p.gamma) * a + p.gamma * a1)
            fint = K @ u1 + C @ v1
            J = K_dyn.copy()
            if has_cubic:
                d = Bc.T @ u1
                fint += Bc @ (kc * d**3)
                J += Bc @ ((3.0 * kc * d * d)[:, None] * Bc.T)
            if has_z:
                z1, dz = _advance_z(sys, z, x0, Bb.T @ v1, dt, p.z_substeps)
                fint += Bb @ (kb * z1)
                J += Bb @ ((kb * dz * c_v)[:, None] * Bb.T)
            inertia = M * a1
            R = inertia + fint - f
            rnorm = np.linalg.norm(R)
            ref = np.linalg.norm(f) + np.linalg.norm(fint) + np.linalg.norm(inertia)
            if not np.isfinite(rnorm):
                raise DivergenceError(f"Newmark residual became non-finite at step {j}", step=j)
            if rnorm <= p.newton_tol * ref or rnorm == 0.0:
                break
            if it == p.max_iter:
                raise ConvergenceError(
                    f"Newton did not converge at step {j}: relative residual {rnorm / ref:.3e}",
                    step=j,
                    residual=rnorm / ref,
                )
            u1 = u1 - np.linalg.solve(J, R)
        u, v, a = u1, v1, a1
        if has_z:
            z = z1
        U[:, j], V[:, j], Z[:, j] = u, v, z
    return Trajectory(dt, U, forcing, V, Z if has_z else None)


def make_filtered_noise(
    n_channels: int,
    steps: int,
    dt: float,
    cutoff_hz: float,
    target_variance: float,
    seed: int,
    channel_map: Sequence[int] | None = None,
    order: int = 4,
    warmup_s: float = 1.0,
) -> ForcingSignal:
    """Low-pass filtered Gaussian white noise, one independent stream per channel.

    A Butterworth filter runs forward over ``warmup_s`` seconds of extra
    samples, which are dropped; each channel is then scaled so its sample
    variance is exactly ``target_variance``.
    """
    nyquist = 0.5 / dt
    if not 0 < cutoff_hz < nyquist:
        raise ContractViolation(
            f"cutoff {cutoff_hz} Hz must lie below the Nyquist frequency {nyquist} Hz"
        )
    warm = int(round(warmup_s / dt))
    sos = signal.butter(order, cutoff_hz, btype="low", fs=1.0 / dt, output="sos")
    seqs = np.random.SeedSequence(seed).spawn(n_channels)
    out = np.empty((n_channels, steps))
    for c, ss in enumerate(seqs):
        white = np.random.default_rng(ss).standard_normal(steps + warm)
        x = signal.sosfilt(sos, white)[warm:]
        out[c] = x * np.sqrt(target_variance / np.var(x))
    return ForcingSignal(dt, out, None if channel_map is None else tuple(channel_map))


def make_sinusoid(
    n_channels: int,
    steps: int,
    dt: float,
    freq_hz: float,
    amplitudes: Sequence[float],
    phase_offsets: Sequence[float] | None = None,
    channel_map: Sequence[int] | None = None,
) -> ForcingSignal:
    """``amplitude_c * sin(2 pi f t + phase_c)`` on each channel."""
    if not 0 <= freq_hz < 0.5 / dt:
        raise ContractViolation("sinusoid frequency must lie below Nyquist")
    amp = np.broadcast_to(np.asarray(amplitudes, dtype=float), (n_channels,))
    phase = np.zeros(n_channels) if phase_offsets is None else np.broadcast_to(
        np.asarray(phase_offsets, dtype=float), (n_channels,)
    )
    t = np.arange(steps) * dt
    samples = amp[:, None] * np.sin(2 * np.pi * freq_hz * t[None, :] + phase[:, None])
    return ForcingSignal(dt, samples, None if channel_map is None else tuple(channel_map))


# ------------------------------------------------------------------- I/O

def save_trajectory_csv(path, traj: Trajectory) -> None:
    """Write ``t, u_0..u_{n-1}, f_0..f_{c-1}`` rows with round-trip float formatting."""
    n, c = traj.n_dof, traj.forcing.n_channels
    header = ["t"] + [f"u_{i}" for i in range(n)] + [f"f_{i}" for i in range(c)]
    data = np.vstack([traj.times[None, :], traj.displacements, traj.forcing.samples]).T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(x)) for x in row])


def load_trajectory_csv(path, channel_map=None) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(x) for x in r] for r in reader if r])
    n = sum(1 for h in header if h.startswith("u_"))
    c = sum(1 for h in header if h.startswith("f_"))
    if header[0] != "t" or len(header) != 1 + n + c:
        raise ContractViolation(f"{path}: unexpected trajectory header")
    rows = rows.reshape(-1, len(header))
    t = rows[:, 0]
    dt = float(t[1] - t[0]) if t.size > 1 else 1.0
    forcing = ForcingSignal(dt, rows[:, 1 + n :].T.reshape(c, -1), channel_map)
    return Trajectory(dt, rows[:, 1 : 1 + n].T, forcing)


_MAGIC = b"NNMTRAJ\x00"
_VERSION = 1
_HEAD = struct.Struct("<8sIIIIQd")


def save_trajectory_binary(path, traj: Trajectory) -> None:
    """Compact little-endian form.

    Layout: magic (8 bytes), version u32, n_dof u32, n_channels u32,
    flags u32 (bit0 velocities, bit1 channel_map, bit2 hysteretic), steps u64,
    dt f64, [n_links u32 if bit2], [channel_map i64 x c if bit1], then
    row-major f64 blocks: displacements, [velocities], [hysteretic], forcing.
    """
    n, c, T = traj.n_dof, traj.forcing.n_channels, traj.steps
    flags = (
        (traj.velocities is not None)
        | (traj.forcing.channel_map is not None) << 1
        | (traj.hysteretic is not None) << 2
    )
    parts = [_HEAD.pack(_MAGIC, _VERSION, n, c, flags, T, float(traj.dt))]
    if traj.hysteretic is not None:
        parts.append(struct.pack("<I", traj.hysteretic.shape[0]))
    if traj.forcing.channel_map is not None:
        parts.append(np.asarray(traj.forcing.channel_map, dtype="<i8").tobytes())
    for block in (traj.displacements, traj.velocities, traj.hysteretic, traj.forcing.samples):
        if block is not None:
            parts.append(np.ascontiguousarray(block, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_trajectory_binary(path) -> Trajectory:
    buf = Path(path).read_bytes()
    magic, version, n, c, flags, T, dt = _HEAD.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ContractViolation(f"{path}: not a trajectory file")
    if version != _VERSION:
        raise ContractViolation(f"{path}: unsupported trajectory version {version}")
    off = _HEAD.size
    n_links = 0
    if flags & 4:
        (n_links,) = struct.unpack_from("<I", buf, off)
        off += 4
    cmap = None
    if flags & 2:
        cmap = tuple(int(x) for x in np.frombuffer(buf, "<i8", c, off))
        off += 8 * c

    def block(rows):
        nonlocal off
        arr = np.frombuffer(buf, "<f8", rows * T, off).reshape(rows, T).copy()
        off += 8 * rows * T
        return arr

    X = block(n)
    V = block(n) if flags & 1 else None
    Zh = block(n_links) if flags & 4 else None
    forcing = ForcingSignal(dt, block(c), cmap)
    return Trajectory(dt, X, forcing, V, Zh)
