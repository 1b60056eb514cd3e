"""Deterministic 2D rigid-body microworld.

Generates long episodes for three interaction families (stability, contact,
containment): circles and axis-aligned boxes under gravity with impulse
contact resolution, rasterized to small RGB frames with per-object masks.
Everything is a pure function of (task, seed, config) through the bundled
splitmix64 PRNG, so episodes regenerate bit-identically on any platform.

Event annotations are derived from the trajectory after the fact and exist
only to evaluate where learned attention lands; they are never an input to
any model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError, GenerationError
from .rng import SplitMix64, derive

TASKS = ("stability", "contact", "containment")
TASK_IDS = {t: i for i, t in enumerate(TASKS)}

SHAPE_IDS = {"circle": 0, "square": 1, "triangle": 2, "u_container": 3,
             "wide_square": 4, "tall_triangle": 5}
SEEN_SHAPES = ("circle", "square", "triangle")
UNSEEN_SHAPES = ("wide_square", "tall_triangle")

# color index 0 is reserved for the probe ball in the contact task
PALETTE = np.array([
    [0.90, 0.15, 0.15],
    [0.20, 0.80, 0.25],
    [0.25, 0.40, 0.90],
    [0.90, 0.85, 0.20],
    [0.85, 0.25, 0.85],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.70, 0.60, 0.95],
])
BACKGROUND = np.array([0.08, 0.08, 0.10])
GROUND_COLOR = np.array([0.35, 0.35, 0.35])

EVENT_GROUND = "first_ground_contact"
EVENT_CONTACT = "object_object_contact"
EVENT_ENTRY = "containment_entry"
EVENT_SETTLE = "settle"
INTERACTION_EVENTS = (EVENT_GROUND, EVENT_CONTACT, EVENT_ENTRY)

_SLOP = 1e-7
_CONTACT_TOL = 1e-9
_SETTLE_SPEED = 0.02

# settling rule for the stability label; a stand-in threshold isolated here
# so it can be recalibrated in one place
STABILITY_WINDOW = 25
STABILITY_DRIFT = 0.02

_WALL_T = 0.34           # container wall/base thickness (full)
_WALL_HEIGHT_RATIO = 1.15  # wall height as a multiple of interior half-width


@dataclass
class WorldConfig:
    gravity: float = 9.81
    dt: float = 1.0 / 50.0
    raw_frames: int = 150
    resolution: int = 32
    channels: int = 3
    arena_half_width: float = 2.4
    arena_height: float = 4.8
    restitution: float = 0.3
    friction: float = 0.15

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.raw_frames < 6:
            raise ConfigError(f"raw_frames must be >= 6, got {self.raw_frames}")
        if not (0.0 <= self.restitution <= 1.0):
            raise ConfigError(f"restitution must be in [0, 1], got {self.restitution}")
        if self.friction < 0:
            raise ConfigError(f"friction must be >= 0, got {self.friction}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "gravity", "dt", "raw_frames", "resolution", "channels",
            "arena_half_width", "arena_height", "restitution", "friction")}

    @staticmethod
    def from_dict(d: dict) -> "WorldConfig":
        return WorldConfig(**d)


@dataclass
class ObjectSpec:
    shape: str
    color: int
    half_extent: float
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    static: bool = False

    def __post_init__(self):
        if self.shape not in SHAPE_IDS:
            raise DomainError(f"unknown shape {self.shape!r}")
        if self.half_extent <= 0:
            raise DomainError(f"half_extent must be positive, got {self.half_extent}")

    @property
    def is_circle(self) -> bool:
        return self.shape == "circle"

    @property
    def half_width(self) -> float:
        if self.shape == "wide_square":
            return 1.4 * self.half_extent
        if self.shape == "tall_triangle":
            return 0.7 * self.half_extent
        if self.shape == "u_container":
            return self.half_extent + _WALL_T
        return self.half_extent

    @property
    def half_height(self) -> float:
        if self.shape == "wide_square":
            return 0.7 * self.half_extent
        if self.shape == "tall_triangle":
            return 1.4 * self.half_extent
        if self.shape == "u_container":
            return (_WALL_T + _WALL_HEIGHT_RATIO * self.half_extent) / 2.0
        return self.half_extent

    @property
    def mass(self) -> float:
        if self.is_circle:
            return math.pi * self.half_extent ** 2
        return 4.0 * self.half_width * self.half_height


def container_parts(spec: ObjectSpec) -> list[tuple[float, float, float, float]]:
    """U-container as three static boxes: (cx, cy, half_w, half_h) each.

    spec.y is the bottom of the base; the interior spans x in
    [x - half_extent, x + half_extent] above the base, below the rim.
    """
    e = spec.half_extent
    t = _WALL_T
    wall_h = _WALL_HEIGHT_RATIO * e
    base = (spec.x, spec.y + t / 2.0, e + t, t / 2.0)
    left = (spec.x - (e + t / 2.0), spec.y + t + wall_h / 2.0, t / 2.0, wall_h / 2.0)
    right = (spec.x + (e + t / 2.0), spec.y + t + wall_h / 2.0, t / 2.0, wall_h / 2.0)
    return [base, left, right]


def container_interior(spec: ObjectSpec) -> tuple[float, float, float, float]:
    """(x_lo, x_hi, y_lo, rim_y) of the interior region."""
    e = spec.half_extent
    return spec.x - e, spec.x + e, spec.y + _WALL_T, spec.y + _WALL_T + _WALL_HEIGHT_RATIO * e


@dataclass
class EventAnnotation:
    kind: str
    frame: int
    objects: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "frame": self.frame, "objects": list(self.objects)}


@dataclass
class Trajectory:
    """Recorded states: frame 0 is the spawn state, frame k the state after k steps."""

    specs: list[ObjectSpec]
    positions: np.ndarray   # (frames, n, 2) float64
    velocities: np.ndarray  # (frames, n, 2) float64
    config: WorldConfig


@dataclass
class Episode:
    task: str
    seed: int
    specs: list[ObjectSpec]
    frames: np.ndarray          # (frames, 3, H, W) float32 in [0, 1]
    masks: np.ndarray           # (n_objects, frames, H, W) float32 in {0, 1}
    labels: dict[int, int]      # outcome per dynamic object
    queryable: list[int]        # objects a prediction query may target
    events: list[EventAnnotation]
    trajectory: Trajectory
    config: WorldConfig
    unseen: bool = False


# ---------------------------------------------------------------------------
# contact geometry


def _geom(spec: ObjectSpec, pos) -> list[tuple[str, float, float, float, float]]:
    """Collision primitives for an object at a position: (kind, x, y, a, b)."""
    x, y = float(pos[0]), float(pos[1])
    if spec.shape == "u_container":
        moved = replace(spec, x=x, y=y)
        return [("box", cx, cy, hw, hh) for cx, cy, hw, hh in container_parts(moved)]
    if spec.is_circle:
        return [("circle", x, y, spec.half_extent, spec.half_extent)]
    return [("box", x, y, spec.half_width, spec.half_height)]


def _prim_gap(p1, p2):
    """(gap, unit normal from primitive 1 toward primitive 2)."""
    k1, x1, y1, a1, b1 = p1
    k2, x2, y2, a2, b2 = p2
    if k1 == "circle" and k2 == "circle":
        dx, dy = x2 - x1, y2 - y1
        dist = math.hypot(dx, dy)
        if dist < 1e-12:
            return -(a1 + a2), (0.0, 1.0)
        return dist - (a1 + a2), (dx / dist, dy / dist)
    if k1 == "box" and k2 == "box":
        dx, dy = x2 - x1, y2 - y1
        ox = (a1 + a2) - abs(dx)
        oy = (b1 + b2) - abs(dy)
        sx = 1.0 if dx >= 0 else -1.0
        sy = 1.0 if dy >= 0 else -1.0
        if ox > 0 and oy > 0:
            if ox < oy:
                return -ox, (sx, 0.0)
            return -oy, (0.0, sy)
        if -ox >= -oy:
            return -ox, (sx, 0.0)
        return -oy, (0.0, sy)
    if k1 == "circle":
        gap, (nx, ny) = _prim_gap(p2, p1)
        return gap, (-nx, -ny)
    # box-circle: closest point on box to the circle center
    cx = min(max(x2 - x1, -a1), a1)
    cy = min(max(y2 - y1, -b1), b1)
    dx, dy = (x2 - x1) - cx, (y2 - y1) - cy
    dist = math.hypot(dx, dy)
    if dist > 1e-12:
        return dist - a2, (dx / dist, dy / dist)
    # center inside the box: exit along the cheapest axis
    px = a1 - abs(x2 - x1)
    py = b1 - abs(y2 - y1)
    sx = 1.0 if (x2 - x1) >= 0 else -1.0
    sy = 1.0 if (y2 - y1) >= 0 else -1.0
    if px < py:
        return -(px + a2), (sx, 0.0)
    return -(py + a2), (0.0, sy)


def surface_distance(spec_a: ObjectSpec, pos_a, spec_b: ObjectSpec, pos_b) -> float:
    """Smallest gap between two objects (negative when penetrating)."""
    best = math.inf
    for pa in _geom(spec_a, pos_a):
        for pb in _geom(spec_b, pos_b):
            gap, _ = _prim_gap(pa, pb)
            best = min(best, gap)
    return best


def ground_distance(spec: ObjectSpec, pos) -> float:
    return float(pos[1]) - spec.half_height if not spec.is_circle else float(pos[1]) - spec.half_extent


# ---------------------------------------------------------------------------
# dynamics


@dataclass
class SimState:
    specs: list[ObjectSpec]
    pos: np.ndarray   # (n, 2)
    vel: np.ndarray   # (n, 2)
    inv_mass: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inv_mass = np.array([0.0 if s.static else 1.0 / s.mass for s in self.specs])


def initial_state(specs: list[ObjectSpec]) -> SimState:
    pos = np.array([[s.x, s.y] for s in specs], dtype=np.float64)
    vel = np.array([[s.vx, s.vy] for s in specs], dtype=np.float64)
    return SimState(specs=list(specs), pos=pos, vel=vel)


def _contact_candidates(state: SimState):
    """Object pairs plus per-object ground contacts with their gap and normal."""
    n = len(state.specs)
    out = []
    for i in range(n):
        if state.specs[i].static:
            continue
        out.append((None, i, ground_distance(state.specs[i], state.pos[i]), (0.0, 1.0)))
    for i in range(n):
        for j in range(i + 1, n):
            if state.specs[i].static and state.specs[j].static:
                continue
            best = None
            for pa in _geom(state.specs[i], state.pos[i]):
                for pb in _geom(state.specs[j], state.pos[j]):
                    gap, nrm = _prim_gap(pa, pb)
                    if best is None or gap < best[0]:
                        best = (gap, nrm)
            out.append((i, j, best[0], best[1]))
    return out


def step_physics(state: SimState, config: WorldConfig) -> SimState:
    """Advance one step: gravity, impulse contacts, integration, settling correction.

    Semi-implicit Euler with impulses applied between the velocity and
    position updates, so resting contacts neither sink nor gain energy.
    Impact penetration (at most one step's displacement, sub-pixel at render
    scale) is deliberately left uncorrected: pushing bodies back out would add
    potential energy and break the no-energy-gain guarantee.
    """
    dt = config.dt
    g = config.gravity
    min_half = min(min(a, b) for i, s in enumerate(state.specs)
                   for _, _, _, a, b in _geom(s, state.pos[i]))
    max_speed = float(np.max(np.hypot(state.vel[:, 0], state.vel[:, 1]))) if len(state.specs) else 0.0
    if max_speed * dt > min_half * (1.0 + 1e-12):
        raise ConfigError(
            f"tunneling risk: displacement {max_speed * dt:.4f} per step exceeds half the "
            f"smallest extent {min_half:.4f}; reduce dt")

    dynamic = state.inv_mass > 0
    state.vel[dynamic, 1] -= g * dt

    # restitution is measured against the approach speed without this step's
    # gravity kick, and only above a threshold that guarantees the rebound
    # (kinetic + climb) never exceeds the impact energy for restitution < 1
    e_cfg = config.restitution
    bounce_thresh = 2.0 * g * dt
    if 0.0 < e_cfg < 1.0:
        bounce_thresh = max(bounce_thresh, 2.2 * g * dt * e_cfg / (1.0 - e_cfg * e_cfg))
    contacts = [c for c in _contact_candidates(state) if c[2] <= _SLOP]
    for sweep in range(8):
        any_impulse = False
        for i, j, _, (nx, ny) in contacts:
            inv_a = 0.0 if i is None else state.inv_mass[i]
            inv_b = state.inv_mass[j]
            inv_sum = inv_a + inv_b
            if inv_sum == 0.0:
                continue
            va = np.zeros(2) if i is None else state.vel[i]
            vb = state.vel[j]
            vn = (vb[0] - va[0]) * nx + (vb[1] - va[1]) * ny
            if vn >= -1e-12:
                continue
            target = 0.0
            if sweep == 0:
                kick = -g * dt * ny * ((1.0 if inv_b > 0 else 0.0) - (1.0 if i is not None and inv_a > 0 else 0.0))
                basis = vn - kick
                if -basis > bounce_thresh:
                    target = -e_cfg * basis
            jn = (target - vn) / inv_sum
            if i is not None:
                state.vel[i, 0] -= jn * nx * inv_a
                state.vel[i, 1] -= jn * ny * inv_a
            state.vel[j, 0] += jn * nx * inv_b
            state.vel[j, 1] += jn * ny * inv_b
            any_impulse = True
            # Coulomb friction, clamped so it can stop but never reverse sliding
            va = np.zeros(2) if i is None else state.vel[i]
            vb = state.vel[j]
            rvx, rvy = vb[0] - va[0], vb[1] - va[1]
            vt_x = rvx - (rvx * nx + rvy * ny) * nx
            vt_y = rvy - (rvx * nx + rvy * ny) * ny
            vt = math.hypot(vt_x, vt_y)
            if vt > 1e-12 and config.friction > 0:
                tx, ty = vt_x / vt, vt_y / vt
                jt = min(config.friction * jn, vt / inv_sum)
                if i is not None:
                    state.vel[i, 0] += jt * tx * inv_a
                    state.vel[i, 1] += jt * ty * inv_a
                state.vel[j, 0] -= jt * tx * inv_b
                state.vel[j, 1] -= jt * ty * inv_b
        if not any_impulse:
            break

    state.pos[dynamic] += state.vel[dynamic] * dt
    return state


def simulate(specs: list[ObjectSpec], config: WorldConfig) -> Trajectory:
    """Run the world for config.raw_frames frames (frame 0 is the spawn state)."""
    state = initial_state(specs)
    frames = config.raw_frames
    positions = np.empty((frames, len(specs), 2))
    velocities = np.empty((frames, len(specs), 2))
    positions[0] = state.pos
    velocities[0] = state.vel
    for k in range(1, frames):
        step_physics(state, config)
        positions[k] = state.pos
        velocities[k] = state.vel
    return Trajectory(specs=list(specs), positions=positions, velocities=velocities, config=config)


def total_energy(traj: Trajectory, frame: int) -> float:
    """Kinetic plus gravitational potential energy of the dynamic objects."""
    e = 0.0
    for i, spec in enumerate(traj.specs):
        if spec.static:
            continue
        vx, vy = traj.velocities[frame, i]
        e += 0.5 * spec.mass * (vx * vx + vy * vy)
        e += spec.mass * traj.config.gravity * traj.positions[frame, i, 1]
    return e


# ---------------------------------------------------------------------------
# labels and events


def _probe_id(specs: list[ObjectSpec]) -> int | None:
    for i, s in enumerate(specs):
        if s.is_circle and s.color == 0 and not s.static:
            return i
    return None


def label_outcome(traj: Trajectory, task: str, object_id: int) -> int:
    """Outcome for one object, derived purely from the trajectory record."""
    if task not in TASKS:
        raise DomainError(f"unknown task {task!r}")
    if not (0 <= object_id < len(traj.specs)):
        raise DomainError(f"unknown object id {object_id}")
    spec = traj.specs[object_id]
    frames = traj.positions.shape[0]

    if task == "stability":
        hw = traj.config.arena_half_width
        if np.any(np.abs(traj.positions[:, object_id, 0]) > hw):
            return 0
        w0 = max(0, frames - STABILITY_WINDOW)
        window = traj.positions[w0:, object_id]
        drift = float(np.max(np.hypot(window[:, 0] - window[0, 0], window[:, 1] - window[0, 1])))
        return int(drift < STABILITY_DRIFT)

    if task == "contact":
        probe = _probe_id(traj.specs)
        if probe is None or probe == object_id:
            raise DomainError(f"object {object_id} is not a valid contact-task target")
        for k in range(frames):
            d = surface_distance(traj.specs[probe], traj.positions[k, probe],
                                 spec, traj.positions[k, object_id])
            if d <= _CONTACT_TOL:
                return 1
        return 0

    container = next((i for i, s in enumerate(traj.specs) if s.shape == "u_container"), None)
    if container is None:
        raise DomainError("containment episode has no container")
    x_lo, x_hi, y_lo, rim = container_interior(traj.specs[container])
    xf, yf = traj.positions[-1, object_id]
    return int(x_lo < xf < x_hi and y_lo <= yf < rim)


def detect_events(traj: Trajectory) -> list[EventAnnotation]:
    """First frame of each qualitative change in the trajectory.

    The spawn state is the baseline: contacts already present at frame 0 are
    initial conditions, not events. Settle fires once an object that moved
    stays below the settle speed through the end of the episode.
    """
    specs = traj.specs
    frames = traj.positions.shape[0]
    n = len(specs)
    events: list[EventAnnotation] = []

    for i in range(n):
        if specs[i].static:
            continue
        touching = [ground_distance(specs[i], traj.positions[k, i]) <= _CONTACT_TOL for k in range(frames)]
        for k in range(1, frames):
            if touching[k] and not touching[k - 1]:
                events.append(EventAnnotation(EVENT_GROUND, k, (i,)))
                break

    for i in range(n):
        for j in range(i + 1, n):
            if specs[i].static and specs[j].static:
                continue
            prev = surface_distance(specs[i], traj.positions[0, i], specs[j], traj.positions[0, j]) <= _CONTACT_TOL
            for k in range(1, frames):
                cur = surface_distance(specs[i], traj.positions[k, i], specs[j], traj.positions[k, j]) <= _CONTACT_TOL
                if cur and not prev:
                    events.append(EventAnnotation(EVENT_CONTACT, k, (i, j)))
                    break
                prev = cur

    container = next((i for i, s in enumerate(specs) if s.shape == "u_container"), None)
    if container is not None:
        x_lo, x_hi, y_lo, rim = container_interior(specs[container])
        for i in range(n):
            if specs[i].static:
                continue
            for k in range(1, frames):
                x, y = traj.positions[k, i]
                if x_lo < x < x_hi and y_lo <= y < rim:
                    events.append(EventAnnotation(EVENT_ENTRY, k, (i, container)))
                    break

    for i in range(n):
        if specs[i].static:
            continue
        speed = np.hypot(traj.velocities[:, i, 0], traj.velocities[:, i, 1])
        moving = speed > _SETTLE_SPEED
        if not np.any(moving):
            continue
        last_moving = int(np.max(np.flatnonzero(moving)))
        if last_moving + 1 < frames:
            events.append(EventAnnotation(EVENT_SETTLE, last_moving + 1, (i,)))

    events.sort(key=lambda e: (e.frame, e.kind, e.objects))
    return events


# ---------------------------------------------------------------------------
# rendering


def _render_frame(specs, positions, config: WorldConfig):
    res = config.resolution
    hw = config.arena_half_width
    px = 2.0 * hw / res
    y_min = -0.3
    xs = -hw + (np.arange(res) + 0.5) * px
    ys = y_min + 2.0 * hw - (np.arange(res) + 0.5) * px  # row 0 is the top
    gx, gy = np.meshgrid(xs, ys)

    owner = np.zeros((res, res), dtype=np.int32)
    frame = np.empty((3, res, res))
    frame[:] = BACKGROUND[:, None, None]
    ground = gy < 0.0
    frame[:, ground] = GROUND_COLOR[:, None]

    for idx, spec in enumerate(specs):
        x, y = positions[idx]
        inside = np.zeros((res, res), dtype=bool)
        if spec.is_circle:
            inside = (gx - x) ** 2 + (gy - y) ** 2 <= spec.half_extent ** 2
        elif spec.shape in ("square", "wide_square"):
            inside = (np.abs(gx - x) <= spec.half_width) & (np.abs(gy - y) <= spec.half_height)
        elif spec.shape in ("triangle", "tall_triangle"):
            hwid, hh = spec.half_width, spec.half_height
            dy = gy - y
            band = np.abs(dy) <= hh
            width = hwid * (hh - dy) / (2.0 * hh)
            inside = band & (np.abs(gx - x) <= width)
        elif spec.shape == "u_container":
            moved = replace(spec, x=float(x), y=float(y))
            for cx, cy, phw, phh in container_parts(moved):
                inside |= (np.abs(gx - cx) <= phw) & (np.abs(gy - cy) <= phh)
        owner[inside] = idx + 1
        frame[:, inside] = PALETTE[spec.color][:, None]
    return frame, owner


def render_episode(specs, traj: Trajectory, config: WorldConfig):
    """Rasterize frames (F, 3, R, R) and per-object masks (n, F, R, R)."""
    frames = traj.positions.shape[0]
    n = len(specs)
    res = config.resolution
    out_frames = np.empty((frames, 3, res, res), dtype=np.float32)
    out_masks = np.zeros((n, frames, res, res), dtype=np.float32)
    for k in range(frames):
        frame, owner = _render_frame(specs, traj.positions[k], config)
        out_frames[k] = frame.astype(np.float32)
        for i in range(n):
            out_masks[i, k] = (owner == i + 1).astype(np.float32)
    return out_frames, out_masks


# ---------------------------------------------------------------------------
# episode recipes


def _spawn_stability(rng: SplitMix64, pool, config: WorldConfig):
    n = 1 + rng.randint(3)
    colors = list(range(1, 8))
    rng.shuffle(colors)
    specs = []
    prev_top = 0.0
    prev_x = 0.0
    prev_hw = 0.0
    for k in range(n):
        shape = pool[rng.randint(len(pool))]
        e = rng.uniform(0.3, 0.55) if k == 0 else rng.uniform(0.28, 0.5)
        spec = ObjectSpec(shape=shape, color=colors[k], half_extent=e, x=0.0, y=0.0)
        if k == 0:
            x = rng.uniform(-1.5, 1.5)
            y = spec.half_height
        else:
            side = 1.0 if rng.random() < 0.5 else -1.0
            offset = side * rng.uniform(0.15, 1.05) * (prev_hw + spec.half_width)
            x = max(-1.9, min(1.9, prev_x + offset))
            y = prev_top + spec.half_height + rng.uniform(0.25, 1.0)
        spec.x, spec.y = x, y
        specs.append(spec)
        prev_top = y + spec.half_height
        prev_x = x
        prev_hw = spec.half_width
    queryable = list(range(n))
    return specs, queryable


def _spawn_contact(rng: SplitMix64, pool, config: WorldConfig):
    r = rng.uniform(0.25, 0.38)
    ball = ObjectSpec(shape="circle", color=0, half_extent=r,
                      x=rng.uniform(-1.95, -1.6), y=r, vx=rng.uniform(1.2, 5.2))
    colors = list(range(1, 8))
    rng.shuffle(colors)
    shape1 = pool[rng.randint(len(pool))]
    e1 = rng.uniform(0.3, 0.5)
    t1 = ObjectSpec(shape=shape1, color=colors[0], half_extent=e1, x=rng.uniform(0.25, 1.0), y=0.0)
    t1.y = t1.half_height
    specs = [ball, t1]
    if rng.random() < 0.55:
        shape2 = pool[rng.randint(len(pool))]
        e2 = rng.uniform(0.3, 0.5)
        t2 = ObjectSpec(shape=shape2, color=colors[1], half_extent=e2, x=0.0, y=0.0)
        lo = t1.x + t1.half_width + t2.half_width + 0.45
        hi = 1.95 - t2.half_width
        if lo > hi:
            return None, None
        t2.x = rng.uniform(lo, hi)
        t2.y = t2.half_height
        specs.append(t2)
    return specs, list(range(1, len(specs)))


def _spawn_containment(rng: SplitMix64, pool, config: WorldConfig):
    e_int = rng.uniform(0.45, 0.7)
    container = ObjectSpec(shape="u_container", color=1 + rng.randint(7),
                           half_extent=e_int, x=rng.uniform(-0.7, 0.7), y=0.0, static=True)
    shape = pool[rng.randint(len(pool))]
    e = rng.uniform(0.22, 0.62)
    color = 1 + rng.randint(7)
    while color == container.color:
        color = 1 + rng.randint(7)
    obj = ObjectSpec(shape=shape, color=color, half_extent=e, x=0.0, y=0.0,
                     vx=rng.uniform(-0.4, 0.4))
    rim = container.y + _WALL_T + _WALL_HEIGHT_RATIO * e_int
    obj.x = container.x + rng.uniform(-1.4, 1.4) * e_int
    obj.y = rim + rng.uniform(0.35, 0.95) + obj.half_height
    return [container, obj], [1]


_RECIPES = {"stability": _spawn_stability, "contact": _spawn_contact, "containment": _spawn_containment}


def generate_episode(task: str, seed: int, config: WorldConfig | None = None,
                     unseen: bool = False) -> Episode:
    """Deterministically build one episode: spawn, simulate, render, annotate."""
    if task not in TASKS:
        raise DomainError(f"unknown task {task!r}; expected one of {TASKS}")
    config = config or WorldConfig()
    pool = UNSEEN_SHAPES if unseen else SEEN_SHAPES
    rng = SplitMix64(derive(seed, TASK_IDS[task], 1 if unseen else 0))

    for _ in range(100):
        specs, queryable = _RECIPES[task](rng, pool, config)
        if specs is None:
            continue
        traj = simulate(specs, config)
        events = detect_events(traj)
        if any(e.kind in INTERACTION_EVENTS and e.frame < 6 for e in events):
            continue
        frames, masks = render_episode(specs, traj, config)
        labels = {}
        for i, s in enumerate(specs):
            if s.static:
                continue
            if task == "contact" and i == _probe_id(specs):
                continue
            labels[i] = label_outcome(traj, task, i)
        return Episode(task=task, seed=seed, specs=specs, frames=frames, masks=masks,
                       labels=labels, queryable=queryable, events=events,
                       trajectory=traj, config=config, unseen=unseen)
    raise GenerationError(f"could not spawn a valid {task} scene for seed {seed} in 100 attempts")


def generate_balanced_episodes(task: str, n_scenes: int, seed: int,
                               config: WorldConfig | None = None,
                               balance: bool = True, unseen: bool = False):
    """Yield n_scenes episodes; contact/containment are label-balanced.

    Candidate scenes are drawn with seeds derived from (seed, counter) and
    accepted greedily against half-and-half label quotas over the queryable
    objects. Stability keeps its natural skew.
    """
    if n_scenes < 1:
        raise GenerationError(f"need at least one scene, got {n_scenes}")
    config = config or WorldConfig()
    do_balance = balance and task in ("contact", "containment")
    # keep |ones - zeros| small throughout; with ~1-2 queryable objects per
    # scene this pins the final positive rate well inside 0.5 +- 0.05
    bound = max(2, n_scenes // 12)

    accepted = 0
    ones = zeros = 0
    attempt = 0
    limit = 10 * n_scenes
    while accepted < n_scenes:
        if attempt >= limit:
            total = ones + zeros
            ratio = ones / total if total else float("nan")
            raise GenerationError(
                f"label balance unreachable for {task} after {limit} attempts "
                f"(achieved positive ratio {ratio:.3f})")
        ep = generate_episode(task, derive(seed, attempt), config, unseen)
        attempt += 1
        if do_balance:
            labels = [ep.labels[i] for i in ep.queryable]
            o = sum(labels)
            z = len(labels) - o
            if abs((ones + o) - (zeros + z)) > bound:
                continue
            ones += o
            zeros += z
        accepted += 1
        yield ep


# ---------------------------------------------------------------------------
# external dumps


def dump_frames_ppm(frames: np.ndarray, out_dir, prefix: str = "frame") -> list:
    """Write each (3, H, W) frame as a binary portable pixmap (P6)."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(frames):
        path = out_dir / f"{prefix}_{k:04d}.ppm"
        write_ppm(frame, path)
        paths.append(path)
    return paths


def write_ppm(frame: np.ndarray, path) -> None:
    """(3, H, W) float in [0,1] -> binary P6 file."""
    _, h, w = frame.shape
    pixels = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def trajectory_csv(traj: Trajectory, path) -> None:
    """Record as CSV rows: step, object id, x, y, vx, vy."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "object_id", "x", "y", "vx", "vy"])
        for k in range(traj.positions.shape[0]):
            for i in range(len(traj.specs)):
                x, y = traj.positions[k, i]
                vx, vy = traj.velocities[k, i]
                writer.writerow([k, i, f"{x:.9g}", f"{y:.9g}", f"{vx:.9g}", f"{vy:.9g}"])
