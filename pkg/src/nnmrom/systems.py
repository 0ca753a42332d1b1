"""Full-order nonlinear MDOF models: cubic chains and Bouc-Wen chains.

Every element joins two coordinates ``(a, b)`` where ``b`` may be
:data:`GROUND`.  The element deformation is ``u[a] - u[b]`` (ground
contributes zero) and the internal force it produces acts with a positive
sign on ``a`` and a negative sign on ``b``, i.e. it opposes a positive
relative displacement.  Equations of motion read ``M a = f_ext - f_int``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import ContractViolation

GROUND = -1

__all__ = [
    "GROUND",
    "BoucWenParams",
    "MdofSystem",
    "SystemState",
    "restoring_force",
    "linear_spring_force",
    "nonlinear_force",
    "bouc_wen_rate",
    "state_derivative",
    "linearized_frequencies",
    "mass_proportional_alpha",
    "system_from_dict",
]


@dataclass(frozen=True)
class BoucWenParams:
    """Parameters of one hysteretic link.

    ``exponent`` is used both in the rate law and in the saturation bound
    ``z_max = (A / (beta + gamma)) ** (1 / n)``.  The link force is
    ``link_stiffness * z``.
    """

    amplitude: float
    beta: float
    gamma: float
    exponent: float = 1.0
    link_stiffness: float = 1.0

    def __post_init__(self):
        if not self.beta + self.gamma > 0:
            raise ContractViolation("Bouc-Wen link needs beta + gamma > 0")
        if not self.exponent >= 1:
            raise ContractViolation("Bouc-Wen exponent must be >= 1")
        if not self.amplitude > 0:
            raise ContractViolation("Bouc-Wen amplitude A must be positive")

    @property
    def z_max(self) -> float:
        return (self.amplitude / (self.beta + self.gamma)) ** (1.0 / self.exponent)

    @classmethod
    def from_z_max(cls, amplitude, z_max, exponent=1.0, link_stiffness=1.0, beta_share=0.5):
        """Build parameters from ``A`` and the saturation bound ``z_max``.

        ``beta + gamma`` is solved from the bound; ``beta_share`` splits the
        sum between the two shape parameters (0.5 gives ``beta == gamma``).
        """
        if not z_max > 0:
            raise ContractViolation("z_max must be positive")
        total = amplitude / z_max**exponent
        return cls(
            amplitude=float(amplitude),
            beta=float(beta_share * total),
            gamma=float((1.0 - beta_share) * total),
            exponent=float(exponent),
            link_stiffness=float(link_stiffness),
        )


def _endpoint(b) -> int:
    if b is None or (isinstance(b, str) and b.lower() == "ground"):
        return GROUND
    return int(b)


def _broadcast(k, x):
    return k.reshape((-1,) + (1,) * (x.ndim - 1))


def _incidence(n_dof: int, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    B = np.zeros((n_dof, len(pairs)))
    for e, (a, b) in enumerate(pairs):
        B[a, e] += 1.0
        if b != GROUND:
            B[b, e] -= 1.0
    return B


@dataclass(frozen=True, eq=False)
class MdofSystem:
    """Lumped-mass model with linear, cubic and hysteretic connections.

    Element lists hold ``(a, b, value)`` triples (``value`` is a
    :class:`BoucWenParams` for hysteretic links).  ``mass_damping`` adds
    ``alpha * M`` to the damping matrix.
    """

    masses: np.ndarray
    linear_springs: tuple = ()
    linear_dampers: tuple = ()
    cubic_springs: tuple = ()
    bouc_wen_links: tuple = ()
    force_map: tuple = ()
    mass_damping: float = 0.0

    _K: np.ndarray = field(init=False, repr=False, compare=False)
    _C: np.ndarray = field(init=False, repr=False, compare=False)
    _B_cubic: np.ndarray = field(init=False, repr=False, compare=False)
    _k_cubic: np.ndarray = field(init=False, repr=False, compare=False)
    _B_bw: np.ndarray = field(init=False, repr=False, compare=False)
    _bw: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        masses = np.array(self.masses, dtype=float).reshape(-1)
        masses.setflags(write=False)
        object.__setattr__(self, "masses", masses)
        if masses.size == 0 or not np.all(masses > 0):
            raise ContractViolation("all masses must be strictly positive")
        n = masses.size

        def norm(elements, kind):
            out = []
            for el in elements:
                a, b, value = el
                a, b = int(a), _endpoint(b)
                if not (0 <= a < n) or not (b == GROUND or 0 <= b < n):
                    raise ContractViolation(f"{kind} endpoint ({a}, {b}) outside 0..{n - 1}")
                if a == b:
                    raise ContractViolation(f"{kind} joins dof {a} to itself")
                if kind != "bouc_wen":
                    value = float(value)
                elif not isinstance(value, BoucWenParams):
                    raise ContractViolation("Bouc-Wen links need BoucWenParams")
                out.append((a, b, value))
            return tuple(out)

        for name in ("linear_springs", "linear_dampers", "cubic_springs"):
            object.__setattr__(self, name, norm(getattr(self, name), name))
        object.__setattr__(self, "bouc_wen_links", norm(self.bouc_wen_links, "bouc_wen"))

        fmap = tuple(int(d) for d in self.force_map)
        if len(set(fmap)) != len(fmap):
            raise ContractViolation("force_map entries must be distinct dofs")
        if any(not 0 <= d < n for d in fmap):
            raise ContractViolation("force_map entry outside the dof range")
        object.__setattr__(self, "force_map", fmap)
        object.__setattr__(self, "mass_damping", float(self.mass_damping))

        def assemble(elements):
            B = _incidence(n, [(a, b) for a, b, _ in elements])
            k = np.array([v for _, _, v in elements], dtype=float)
            return B @ (k[:, None] * B.T)

        object.__setattr__(self, "_K", assemble(self.linear_springs))
        object.__setattr__(
            self, "_C", assemble(self.linear_dampers) + self.mass_damping * np.diag(masses)
        )
        object.__setattr__(
            self, "_B_cubic", _incidence(n, [(a, b) for a, b, _ in self.cubic_springs])
        )
        object.__setattr__(
            self, "_k_cubic", np.array([v for _, _, v in self.cubic_springs], dtype=float)
        )
        object.__setattr__(
            self, "_B_bw", _incidence(n, [(a, b) for a, b, _ in self.bouc_wen_links])
        )
        params = [p for _, _, p in self.bouc_wen_links]
        bw = {
            name: np.array([getattr(p, name) for p in params], dtype=float)
            for name in ("amplitude", "beta", "gamma", "exponent", "link_stiffness")
        }
        bw["z_max"] = np.array([p.z_max for p in params], dtype=float)
        object.__setattr__(self, "_bw", bw)

    @property
    def n_dof(self) -> int:
        return self.masses.size

    @property
    def n_links(self) -> int:
        return len(self.bouc_wen_links)

    @property
    def stiffness_matrix(self) -> np.ndarray:
        return self._K.copy()

    @property
    def damping_matrix(self) -> np.ndarray:
        return self._C.copy()

    @property
    def mass_matrix(self) -> np.ndarray:
        return np.diag(self.masses)

    @property
    def z_max(self) -> np.ndarray:
        return self._bw["z_max"].copy()

    def zero_state(self) -> "SystemState":
        return SystemState(np.zeros(self.n_dof), np.zeros(self.n_dof), np.zeros(self.n_links))

    def with_mass_damping_ratio(self, ratio: float) -> "MdofSystem":
        """Copy with ``alpha * M`` damping giving ``ratio`` in the first linear mode."""
        base = dataclasses.replace(self, mass_damping=0.0)
        return dataclasses.replace(self, mass_damping=mass_proportional_alpha(base, ratio))

    # fast paths used by the integrators; no validation
    def _cubic_force(self, u):
        if not self.cubic_springs:
            return np.zeros_like(u)
        d = self._B_cubic.T @ u
        return self._B_cubic @ (_broadcast(self._k_cubic, d) * d**3)

    def _hysteretic_force(self, z):
        return self._B_bw @ (_broadcast(self._bw["link_stiffness"], z) * z)

    def _link_velocity(self, v):
        return self._B_bw.T @ v

    def _z_rate(self, xdot, z):
        bw = self._bw
        return _bw_rate(bw["amplitude"], bw["beta"], bw["gamma"], bw["exponent"], xdot, z)

    def _internal(self, u, v, z):
        f = self._K @ u + self._C @ v + self._cubic_force(u)
        if self.bouc_wen_links:
            f = f + self._hysteretic_force(z)
        return f


@dataclass(frozen=True, eq=False)
class SystemState:
    """Displacements ``u``, velocities ``v`` and hysteretic variables ``z``."""

    u: np.ndarray
    v: np.ndarray
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("u", "v", "z"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))

    def check(self, sys: MdofSystem) -> None:
        if self.u.size != sys.n_dof or self.v.size != sys.n_dof:
            raise ContractViolation(
                f"state has {self.u.size}/{self.v.size} dofs, system has {sys.n_dof}"
            )
        if self.z.size != sys.n_links:
            raise ContractViolation(
                f"state has {self.z.size} hysteretic variables, system has {sys.n_links} links"
            )


def _bw_rate(A, beta, gamma, n, xdot, z):
    az = np.abs(z)
    return A * xdot - beta * np.abs(xdot) * z * az ** (n - 1.0) - gamma * xdot * az**n


def bouc_wen_rate(params: BoucWenParams, xdot, z):
    """Rate of the hysteretic variable for relative velocity ``xdot``.

    ``dz/dt = A xdot - beta |xdot| z |z|^(n-1) - gamma xdot |z|^n``.
    Works elementwise on arrays.
    """
    return _bw_rate(params.amplitude, params.beta, params.gamma, params.exponent, xdot, z)


def restoring_force(sys: MdofSystem, state: SystemState) -> np.ndarray:
    """Total internal force per dof (springs, dampers, cubic and hysteretic terms)."""
    state.check(sys)
    return sys._internal(state.u, state.v, state.z)


def linear_spring_force(sys: MdofSystem, u) -> np.ndarray:
    """Force from the linear springs alone; ``u`` may be ``n_dof`` or ``n_dof x T``."""
    return sys._K @ np.asarray(u, dtype=float)


def nonlinear_force(sys: MdofSystem, u, z=None) -> np.ndarray:
    """Cubic plus hysteretic force; columns of ``u``/``z`` are time samples."""
    u = np.asarray(u, dtype=float)
    f = sys._cubic_force(u)
    if sys.bouc_wen_links:
        if z is None:
            raise ContractViolation("hysteretic force needs the z history")
        f = f + sys._hysteretic_force(np.asarray(z, dtype=float))
    return f


def state_derivative(sys: MdofSystem, state: SystemState, force) -> SystemState:
    """First-order rate ``(v, M^-1 (f - f_int), dz/dt)`` as a :class:`SystemState`."""
    state.check(sys)
    force = np.asarray(force, dtype=float).reshape(-1)
    if force.size != sys.n_dof:
        raise ContractViolation(f"force has {force.size} entries, expected {sys.n_dof}")
    acc = (force - sys._internal(state.u, state.v, state.z)) / sys.masses
    zdot = sys._z_rate(sys._link_velocity(state.v), state.z) if sys.n_links else np.zeros(0)
    return SystemState(state.v.copy(), acc, zdot)


def _linear_stiffness(sys: MdofSystem) -> np.ndarray:
    K = sys._K.copy()
    if sys.n_links:
        kb = sys._bw["amplitude"] * sys._bw["link_stiffness"]
        K += sys._B_bw @ (kb[:, None] * sys._B_bw.T)
    return K


def linearized_frequencies(sys: MdofSystem) -> np.ndarray:
    """Natural frequencies in Hz of the linear part, ascending.

    Cubic terms are dropped and each hysteretic link contributes its
    initial stiffness ``A * link_stiffness``.
    """
    if not sys.linear_springs and not sys.n_links:
        raise ContractViolation("no linear stiffness to linearize")
    K = _linear_stiffness(sys)
    try:
        w2 = scipy.linalg.eigh(K, np.diag(sys.masses), eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("singular mass matrix") from exc
    return np.sqrt(np.clip(w2, 0.0, None)) / (2 * np.pi)


def mass_proportional_alpha(sys: MdofSystem, ratio: float) -> float:
    """``alpha`` for ``C = alpha M`` giving damping ``ratio`` in the first mode."""
    omega1 = 2 * np.pi * linearized_frequencies(sys)[0]
    return 2.0 * ratio * omega1


# ---------------------------------------------------------------- config

_CHAIN_ENDS = ("both", "first", "last", "none")


def _chain_pairs(n: int, ends: str) -> list[tuple[int, int]]:
    if ends not in _CHAIN_ENDS:
        raise ContractViolation(f"chain ends must be one of {_CHAIN_ENDS}, got {ends!r}")
    pairs = []
    if ends in ("both", "first"):
        pairs.append((0, GROUND))
    pairs += [(i + 1, i) for i in range(n - 1)]
    if ends in ("both", "last"):
        pairs.append((n - 1, GROUND))
    return pairs


def _bouc_wen_from_dict(spec: Mapping[str, Any]) -> BoucWenParams:
    if "z_max" in spec:
        return BoucWenParams.from_z_max(
            spec["amplitude"],
            spec["z_max"],
            exponent=spec.get("exponent", 1.0),
            link_stiffness=spec.get("link_stiffness", 1.0),
            beta_share=spec.get("beta_share", 0.5),
        )
    return BoucWenParams(
        amplitude=spec["amplitude"],
        beta=spec["beta"],
        gamma=spec["gamma"],
        exponent=spec.get("exponent", 1.0),
        link_stiffness=spec.get("link_stiffness", 1.0),
    )


_KINDS = {
    "linear_spring": "linear_springs",
    "linear_damper": "linear_dampers",
    "cubic_spring": "cubic_springs",
    "bouc_wen": "bouc_wen_links",
}


def system_from_dict(spec: Mapping[str, Any]) -> MdofSystem:
    """Build a system from the declarative mapping documented in ``docs/system_config.md``."""
    try:
        n = int(spec["n_dof"])
    except KeyError:
        raise ContractViolation("system config needs 'n_dof'") from None
    masses = spec.get("masses", 1.0)
    masses = np.full(n, float(masses)) if np.isscalar(masses) else np.asarray(masses, float)
    if masses.size != n:
        raise ContractViolation(f"{masses.size} masses given for {n} dofs")
    lists: dict[str, list] = {v: [] for v in _KINDS.values()}

    def value_of(kind, item):
        if kind == "bouc_wen":
            return _bouc_wen_from_dict(item)
        return float(item["value"])

    for item in spec.get("chains", []) or []:
        kind = item["type"]
        if kind not in _KINDS:
            raise ContractViolation(f"unknown element type {kind!r}")
        value = value_of(kind, item)
        for a, b in _chain_pairs(n, item.get("ends", "both")):
            lists[_KINDS[kind]].append((a, b, value))
    for item in spec.get("elements", []) or []:
        kind = item["type"]
        if kind not in _KINDS:
            raise ContractViolation(f"unknown element type {kind!r}")
        lists[_KINDS[kind]].append((item["a"], item.get("b", "ground"), value_of(kind, item)))

    sys = MdofSystem(
        masses=masses,
        force_map=tuple(spec.get("force_map", ())),
        mass_damping=float(spec.get("mass_damping", 0.0)),
        **{k: tuple(v) for k, v in lists.items()},
    )
    if spec.get("mass_damping_ratio") is not None:
        sys = sys.with_mass_damping_ratio(float(spec["mass_damping_ratio"]))
    return sys


def chain_system(
    n_dof: int,
    mass: float,
    k_linear: float,
    c_linear: float = 0.0,
    k_cubic: float | None = None,
    cubic_pairs: Iterable[tuple[int, int]] | None = None,
    force_map: Sequence[int] = (),
    ends: str = "both",
) -> MdofSystem:
    """Uniform chain; cubic springs on ``cubic_pairs`` (default: every connection)."""
    pairs = _chain_pairs(n_dof, ends)
    cubic = []
    if k_cubic is not None:
        cubic = [(a, b, k_cubic) for a, b in (pairs if cubic_pairs is None else cubic_pairs)]
    return MdofSystem(
        masses=np.full(n_dof, mass),
        linear_springs=tuple((a, b, k_linear) for a, b in pairs),
        linear_dampers=tuple((a, b, c_linear) for a, b in pairs) if c_linear else (),
        cubic_springs=tuple(cubic),
        force_map=tuple(force_map),
    )
