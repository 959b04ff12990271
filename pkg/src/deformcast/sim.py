"""Position-based dynamics for a soft surface hit by a kinematic rigid collider.

The soft body is a particle per mesh vertex with a distance constraint per
mesh edge. Each substep integrates velocities, runs Gauss-Seidel constraint
sweeps interleaved with collision projection, then rebuilds velocities from
the position change. The collider has infinite mass and follows a prescribed
straight-line path; it stops at a sampled penetration depth and holds, so the
soft body can settle into a quasi-static contact state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.spatial.transform import Rotation

from .encoding import ForceDescriptor
from .errors import InvalidArgumentError, UnstableScenarioError
from .mesh import TriMesh, build_graph

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 60.0
    substeps: int = 4
    solver_iterations: int = 10
    duration: float = 1.0
    gravity: tuple = (0.0, 0.0, 0.0)
    ground_height: float = 0.0
    max_speed: float = 50.0
    pin_band: float = 0.05  # fraction of object height pinned to the floor

    def __post_init__(self):
        if not self.dt > 0 or not self.duration > 0:
            raise InvalidArgumentError("dt and duration must be positive")
        if self.substeps < 1 or self.solver_iterations < 1:
            raise InvalidArgumentError("substeps and solver_iterations must be >= 1")

    @property
    def n_frames(self):
        return max(1, int(round(self.duration / self.dt)))

    def as_dict(self):
        return {"dt": self.dt, "substeps": self.substeps, "solver_iterations": self.solver_iterations,
                "duration": self.duration, "gravity": list(self.gravity),
                "ground_height": self.ground_height, "max_speed": self.max_speed,
                "pin_band": self.pin_band}


@dataclass
class SoftBodyState:
    particles: np.ndarray
    velocities: np.ndarray
    inverse_masses: np.ndarray
    edges: np.ndarray
    rest_lengths: np.ndarray
    stiffness: float = 1.0
    damping: float = 0.0

    def __post_init__(self):
        if not 0 < self.stiffness <= 1:
            raise InvalidArgumentError(f"stiffness must be in (0, 1], got {self.stiffness}")
        if not 0 <= self.damping < 1:
            raise InvalidArgumentError(f"damping must be in [0, 1), got {self.damping}")
        if (self.rest_lengths <= 0).any():
            raise InvalidArgumentError("rest lengths must be strictly positive")
        if (self.inverse_masses < 0).any():
            raise InvalidArgumentError("inverse masses must be >= 0")

    @classmethod
    def from_mesh(cls, mesh, stiffness=1.0, damping=0.0, pinned=None):
        g = build_graph(mesh)
        x = mesh.vertices.copy()
        w = np.ones(len(x))
        if pinned is not None:
            w[np.asarray(pinned)] = 0.0
        rest = edge_lengths(x, g.edges)
        return cls(x, np.zeros_like(x), w, g.edges.copy(), rest, stiffness, damping)

    @property
    def pinned(self):
        return self.inverse_masses == 0

    def constraint_violation(self, positions=None):
        """Relative edge-length error ``| |p_i - p_j| - L | / L`` per edge."""
        x = self.particles if positions is None else positions
        length = edge_lengths(x, self.edges)
        return np.abs(length - self.rest_lengths) / self.rest_lengths


def project_distance_constraint(p1, p2, w1, w2, rest_length, stiffness):
    """Position corrections restoring ``|p1 - p2|`` toward ``rest_length``.

    Returns ``None`` (skip this constraint for now) when the particles
    coincide or both are pinned.
    """
    p1, p2 = np.asarray(p1, float), np.asarray(p2, float)
    d = p1 - p2
    dist = float(np.linalg.norm(d))
    wsum = w1 + w2
    if dist == 0.0 or wsum == 0.0:
        return None
    n = d / dist
    c = dist - rest_length
    return -stiffness * (w1 / wsum) * c * n, stiffness * (w2 / wsum) * c * n


@numba.njit(cache=True)
def _edge_lengths(x, edges, out):
    for e in range(edges.shape[0]):
        i = edges[e, 0]
        j = edges[e, 1]
        d0 = x[i, 0] - x[j, 0]
        d1 = x[i, 1] - x[j, 1]
        d2 = x[i, 2] - x[j, 2]
        out[e] = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    return out


def edge_lengths(positions, edges):
    # same arithmetic as the solver kernel, so an unperturbed mesh has C == 0 exactly
    x = np.ascontiguousarray(positions, dtype=np.float64)
    e = np.ascontiguousarray(edges, dtype=np.int64)
    return _edge_lengths(x, e, np.empty(len(e)))


@numba.njit(cache=True)
def _gauss_seidel_sweep(x, w, edges, rest, stiffness):
    for e in range(edges.shape[0]):
        i = edges[e, 0]
        j = edges[e, 1]
        wsum = w[i] + w[j]
        if wsum == 0.0:
            continue
        d0 = x[i, 0] - x[j, 0]
        d1 = x[i, 1] - x[j, 1]
        d2 = x[i, 2] - x[j, 2]
        dist = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        if dist == 0.0:
            continue
        s = stiffness * (dist - rest[e]) / (wsum * dist)
        x[i, 0] -= s * w[i] * d0
        x[i, 1] -= s * w[i] * d1
        x[i, 2] -= s * w[i] * d2
        x[j, 0] += s * w[j] * d0
        x[j, 1] += s * w[j] * d1
        x[j, 2] += s * w[j] * d2


def solve_constraints(state, positions, iterations=1):
    """In-place Gauss-Seidel sweeps over every edge constraint, in edge order."""
    for _ in range(iterations):
        _gauss_seidel_sweep(positions, state.inverse_masses, state.edges, state.rest_lengths,
                            float(state.stiffness))
    return positions


# ----------------------------------------------------------------------------
# rigid collider

def pose_matrix(rotation, translation):
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


@dataclass(eq=False)
class RigidCollider:
    """Kinematic collider.

    The collider moves as ``translation + velocity * min(t, stop_time)``
    (forever when ``stop_time`` is None). ``mesh`` is in local coordinates.
    """

    mesh: TriMesh
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    applied_force: ForceDescriptor = field(default_factory=lambda: ForceDescriptor(np.zeros(3), 0.0))
    stop_time: float | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, float).reshape(3, 3)
        self.translation = np.asarray(self.translation, float).reshape(3)
        self.velocity = np.asarray(self.velocity, float).reshape(3)
        r = self.rotation
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6 or np.linalg.det(r) <= 0:
            raise InvalidArgumentError("collider rotation must be orthonormal with det +1")
        self._local_normals, self._local_offsets = _face_planes(self.mesh.vertices, self.mesh.faces)
        c = self.mesh.vertices.mean(axis=0)
        self._local_center = c
        self._radius = float(np.max(np.linalg.norm(self.mesh.vertices - c, axis=1)))
        s = self.mesh.vertices @ self._local_normals.T - self._local_offsets
        self.is_convex = bool(np.all(s <= 1e-9 * max(self._radius, 1.0)))

    @property
    def pose(self):
        return pose_matrix(self.rotation, self.translation)

    def at_time(self, t):
        """Copy of this collider moved along its path to time ``t``."""
        tau = t if self.stop_time is None else min(t, self.stop_time)
        return replace(self, translation=self.translation + self.velocity * tau)

    def world_vertices(self):
        return self.mesh.vertices @ self.rotation.T + self.translation

    def world_mesh(self):
        return TriMesh(self.world_vertices(), self.mesh.faces)

    def bounding_sphere(self):
        return self.rotation @ self._local_center + self.translation, self._radius

    def world_planes(self):
        n = self._local_normals @ self.rotation.T
        return n, self._local_offsets + n @ self.translation


def _face_planes(v, f):
    tri = v[f]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return n, np.einsum("ij,ij->i", n, tri[:, 0])


def closest_points_on_triangles(p, tri):
    """Closest point on each triangle to each point.

    ``p`` is (M, 3), ``tri`` is (F, 3, 3); returns (M, F, 3). Region tests
    follow the standard Voronoi-region decomposition of a triangle.
    """
    a, b, c = tri[:, 0][None], tri[:, 1][None], tri[:, 2][None]
    p = p[:, None, :]
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.sum(ab * ap, -1), np.sum(ac * ap, -1)
    bp = p - b
    d3, d4 = np.sum(ab * bp, -1), np.sum(ac * bp, -1)
    cp = p - c
    d5, d6 = np.sum(ab * cp, -1), np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
        out = a + ab * v_in[..., None] + ac * w_in[..., None]
        # edge regions
        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(m[..., None], a + ab * t_ab[..., None], out)
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(m[..., None], a + ac * t_ac[..., None], out)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        out = np.where(m[..., None], b + (c - b) * t_bc[..., None], out)
    # vertex regions
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    return out


def winding_numbers(p, tri):
    """Generalized winding number of closed triangle soup ``tri`` at points ``p``."""
    a = tri[:, 0][None] - p[:, None]
    b = tri[:, 1][None] - p[:, None]
    c = tri[:, 2][None] - p[:, None]
    la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
    det = np.einsum("mfi,mfi->mf", a, np.cross(b, c))
    den = (la * lb * lc + np.einsum("mfi,mfi->mf", a, b) * lc
           + np.einsum("mfi,mfi->mf", b, c) * la + np.einsum("mfi,mfi->mf", c, a) * lb)
    return np.sum(2 * np.arctan2(det, den), axis=1) / (4 * np.pi)


@dataclass
class Contacts:
    indices: np.ndarray
    points: np.ndarray
    on_collider: np.ndarray  # True for collider contacts, False for ground

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0, bool))

    def collider_only(self):
        m = self.on_collider
        return Contacts(self.indices[m], self.points[m], self.on_collider[m])

    def __len__(self):
        return len(self.indices)


def resolve_collisions(state, collider, ground_height=0.0, positions=None):
    """Push penetrating particles out of the collider and above the ground.

    Convex colliders use half-space tests against the face planes and project
    onto the nearest plane; other colliders use a winding-number inside test
    and project onto the closest surface point. Pinned particles are left
    alone. Operates in place on ``positions`` (default: ``state.particles``).

    Returns
    -------
    positions : ndarray
    contacts : Contacts
    """
    x = state.particles if positions is None else positions
    free = state.inverse_masses > 0
    idx_all, pts_all, kind_all = [], [], []

    center, radius = collider.bounding_sphere()
    cand = np.flatnonzero(free & (np.sum((x - center) ** 2, axis=1) < radius * radius))
    if len(cand):
        p = x[cand]
        if collider.is_convex:
            normals, offsets = collider.world_planes()
            s = p @ normals.T - offsets
            inside = s.max(axis=1) < 0
            if inside.any():
                k = np.argmax(s[inside], axis=1)
                depth = s[inside][np.arange(len(k)), k]
                proj = p[inside] - depth[:, None] * normals[k]
                hit = cand[inside]
                x[hit] = proj
                idx_all.append(hit)
                pts_all.append(proj)
        else:
            tri = collider.world_vertices()[collider.mesh.faces]
            inside = np.abs(winding_numbers(p, tri)) > 0.5
            if inside.any():
                q = p[inside]
                cp = closest_points_on_triangles(q, tri)
                k = np.argmin(np.sum((cp - q[:, None]) ** 2, axis=-1), axis=1)
                proj = cp[np.arange(len(k)), k]
                hit = cand[inside]
                x[hit] = proj
                idx_all.append(hit)
                pts_all.append(proj)
        if idx_all:
            kind_all.append(np.ones(len(idx_all[0]), bool))

    below = np.flatnonzero(free & (x[:, 1] < ground_height))
    if len(below):
        x[below, 1] = ground_height
        idx_all.append(below)
        pts_all.append(x[below].copy())
        kind_all.append(np.zeros(len(below), bool))

    if not idx_all:
        return x, Contacts.empty()
    return x, Contacts(np.concatenate(idx_all), np.concatenate(pts_all), np.concatenate(kind_all))


# ----------------------------------------------------------------------------
# scenarios

@dataclass(frozen=True)
class ColliderSpec:
    """How a random collider approach is drawn for one scenario.

    Penetration depth past first contact scales linearly with the sampled
    force magnitude, as a fraction of the soft body's bounding-box diagonal.
    """

    mesh: TriMesh
    name: str = "collider"
    force_range: tuple = (1.0, 10.0)
    depth_range: tuple = (0.03, 0.12)
    impact_time_range: tuple = (0.25, 0.5)  # fraction of duration spent approaching
    aim_jitter: float = 0.1
    min_elevation: float = 0.15  # minimum y component of the approach direction


@dataclass(eq=False)
class ContactSample:
    rest_mesh: TriMesh
    deformed_mesh: TriMesh
    rigid: RigidCollider
    contact_points: np.ndarray
    contact_node_indices: np.ndarray
    scenario_seed: int
    stiffness: float = 1.0
    damping: float = 0.0
    contact_frame: int = -1
    rigid_pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not np.array_equal(self.rest_mesh.faces, self.deformed_mesh.faces):
            from .errors import InvariantViolationError
            raise InvariantViolationError("rest and deformed meshes must share the face list")
        self.contact_points = np.asarray(self.contact_points, float).reshape(-1, 3)
        self.contact_node_indices = np.asarray(self.contact_node_indices, np.int64).reshape(-1)
        self.rigid_pose = np.asarray(self.rigid_pose, float).reshape(4, 4)
        if len(self.contact_points) != len(self.contact_node_indices):
            raise InvalidArgumentError("contact points and node indices differ in length")
        idx = self.contact_node_indices
        if len(idx) and (idx.min() < 0 or idx.max() >= self.rest_mesh.n_vertices):
            from .errors import InvariantViolationError
            raise InvariantViolationError("contact node index out of range")

    @property
    def force(self):
        return self.rigid.applied_force


def pinned_band(mesh, band, ground_height=0.0):
    """Indices of vertices within ``band * height`` of the lowest vertex."""
    y = mesh.vertices[:, 1]
    if band <= 0:
        return np.zeros(0, np.int64)
    return np.flatnonzero(y <= y.min() + band * (y.max() - y.min()))


def _first_contact_time(soft_x, collider, t_max, steps=64):
    """Earliest time the moving collider overlaps a soft vertex (bisection on
    a sampled bracket); ``None`` when it never does before ``t_max``."""
    def touching(t):
        c = collider.at_time(t)
        center, r = c.bounding_sphere()
        near = soft_x[np.sum((soft_x - center) ** 2, axis=1) < r * r]
        if not len(near):
            return False
        n, off = c.world_planes()
        return bool(((near @ n.T - off).max(axis=1) < 0).any())

    ts = np.linspace(0, t_max, steps + 1)
    prev = 0.0
    for t in ts[1:]:
        if touching(t):
            lo, hi = prev, t
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                lo, hi = (lo, mid) if touching(mid) else (mid, hi)
            return hi
        prev = t
    return None


def sample_collider(rest, spec, rng, config):
    """Draw a start pose, approach velocity and force aimed at the soft body."""
    x = rest.vertices
    centroid = x.mean(axis=0)
    diag = float(np.linalg.norm(x.max(0) - x.min(0)))
    soft_radius = float(np.max(np.linalg.norm(x - centroid, axis=1)))
    rot = Rotation.random(random_state=rng).as_matrix()
    local_r = float(np.max(np.linalg.norm(spec.mesh.vertices - spec.mesh.vertices.mean(0), axis=1)))

    while True:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if d[1] >= spec.min_elevation:
            break
    start = centroid + d * (soft_radius + local_r + 0.05 * diag)
    aim = centroid + rng.uniform(-1, 1, size=3) * spec.aim_jitter * diag
    direction = aim - start
    direction /= np.linalg.norm(direction)

    fmin, fmax = spec.force_range
    mag = float(rng.uniform(fmin, fmax))
    frac = (mag - fmin) / (fmax - fmin) if fmax > fmin else 0.5
    depth = (spec.depth_range[0] + frac * (spec.depth_range[1] - spec.depth_range[0])) * diag
    impact_frac = float(rng.uniform(*spec.impact_time_range))

    # probe at unit speed to find the travel distance to first contact
    probe = RigidCollider(spec.mesh, rot, start - rot @ spec.mesh.vertices.mean(0), direction)
    reach = 2 * (soft_radius + local_r + 0.05 * diag)
    t_contact = _first_contact_time(x, probe, reach)
    travel = (t_contact if t_contact is not None else reach) + depth
    t_impact = impact_frac * config.duration
    speed = travel / t_impact
    return RigidCollider(spec.mesh, rot, probe.translation, direction * speed,
                         ForceDescriptor(direction, mag), stop_time=t_impact)


@dataclass(eq=False)
class SimRun:
    """Everything one simulation produced.

    ``capture_*`` describe the frame with the most collider contacts (latest
    on ties; the final frame when nothing touched). ``final_positions`` is
    the state after the full duration.
    """

    capture_positions: np.ndarray
    capture_contacts: Contacts
    capture_frame: int
    capture_collider: RigidCollider
    final_positions: np.ndarray
    contact_counts: np.ndarray


def run_simulation(state, collider, config=None, seed=None):
    """Step ``state`` in place for ``config.duration`` against a moving collider."""
    config = config or SimConfig()
    h = config.dt / config.substeps
    gravity = np.asarray(config.gravity, float)
    free = state.inverse_masses > 0
    x, v = state.particles, state.velocities
    best = (-1, x.copy(), Contacts.empty(), collider, 0)
    counts = np.zeros(config.n_frames, np.int64)
    t = 0.0
    for frame in range(config.n_frames):
        for _ in range(config.substeps):
            t += h
            current = collider.at_time(t)
            if gravity.any():
                v[free] += gravity * h
            p = x + v * h
            touched = set()
            for _ in range(config.solver_iterations):
                solve_constraints(state, p)
                _, contacts = resolve_collisions(state, current, config.ground_height, p)
                touched.update(contacts.indices[contacts.on_collider].tolist())
            v = (p - x) / h * (1.0 - state.damping)
            x = p
            speed = float(np.sqrt(np.max(np.sum(v * v, axis=1))))
            if not np.isfinite(speed) or speed > config.max_speed:
                raise UnstableScenarioError(
                    seed, f"particle speed {speed:.3g} exceeds {config.max_speed} at frame {frame}")
        counts[frame] = len(touched)
        if counts[frame] >= best[0]:
            idx = np.array(sorted(touched), dtype=np.int64)
            best = (counts[frame], x.copy(), Contacts(idx, x[idx].copy(), np.ones(len(idx), bool)),
                    current, frame)
    state.particles, state.velocities = x, v
    _, xb, contacts, rigid_at, frame = best
    return SimRun(xb, contacts, int(frame), rigid_at, x.copy(), counts)


def simulate_contact(rest, collider_spec, scenario_seed, config=None, stiffness=1.0,
                     damping=None, pinned="band"):
    """Simulate one soft/rigid contact and capture the deformed mesh.

    Parameters
    ----------
    rest : TriMesh
    collider_spec : ColliderSpec or RigidCollider
        A ColliderSpec draws a random approach from ``scenario_seed``; a collider is
        used as given.
    pinned : "band", None or index array
        ``"band"`` pins the vertices within ``config.pin_band`` of the floor.

    Returns
    -------
    ContactSample
        Captured at the frame with the most collider contacts (the latest
        such frame on ties). Without any contact, the final frame.
    """
    config = config or SimConfig()
    rng = np.random.default_rng(scenario_seed)
    damping = 0.02 if damping is None else damping
    if isinstance(collider_spec, RigidCollider):
        collider = collider_spec
    else:
        collider = sample_collider(rest, collider_spec, rng, config)
    if isinstance(pinned, str):
        pinned = pinned_band(rest, config.pin_band, config.ground_height)
    state = SoftBodyState.from_mesh(rest, stiffness, damping, pinned)
    run = run_simulation(state, collider, config, seed=scenario_seed)
    rigid = run.capture_collider
    # the stored collider is baked into its contact-frame pose; the pose itself is metadata
    baked = RigidCollider(rigid.world_mesh(), velocity=rigid.velocity.copy(),
                          applied_force=rigid.applied_force, stop_time=rigid.stop_time)
    return ContactSample(
        rest_mesh=rest,
        deformed_mesh=rest.with_vertices(run.capture_positions),
        rigid=baked,
        rigid_pose=rigid.pose,
        contact_points=run.capture_contacts.points,
        contact_node_indices=run.capture_contacts.indices,
        scenario_seed=int(scenario_seed),
        stiffness=float(stiffness),
        damping=float(damping),
        contact_frame=run.capture_frame,
    )
