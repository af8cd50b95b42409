"""Synthetic fork scenarios with a known latent branch, and their JSON-lines format."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

AGENT_CLASSES = ("vehicle", "pedestrian", "cyclist")
SEMANTICS = ("lane_center", "boundary")

LANE_WIDTH = 3.5
ARC_RADIUS = 20.0
POINT_SPACING = 2.0
MAX_POINTS = 20
MAX_EXIT_ANGLE = math.radians(60.0)
MIN_EXIT_SEPARATION = math.radians(20.0)


class GeometryError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, line: int, field_name: str, reason: str):
        super().__init__(f"line {line}: field {field_name!r}: {reason}")
        self.line = line
        self.field_name = field_name


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=float), 2 * math.pi)


@dataclass
class Polyline:
    points: list[list[float]]
    semantic: str = "lane_center"

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("a polyline needs at least two points")
        if self.semantic not in SEMANTICS:
            raise ValueError(f"unknown semantic {self.semantic!r}")


@dataclass
class AgentTrack:
    positions: list[list[float]]
    headings: list[float]
    speeds: list[float]
    valid: list[bool]


@dataclass
class LatentBranch:
    index: int
    prior: float


@dataclass
class Scenario:
    map: list[Polyline]
    agents: list[AgentTrack]
    focal_index: int
    future: list[list[float]]
    latent_branch: LatentBranch
    agent_class: str = "vehicle"

    @property
    def focal(self) -> AgentTrack:
        return self.agents[self.focal_index]

    @property
    def history_steps(self) -> int:
        return len(self.focal.positions)

    @property
    def future_steps(self) -> int:
        return len(self.future)

    def future_array(self) -> np.ndarray:
        return np.asarray(self.future, dtype=float)

    def focal_pose(self) -> tuple[np.ndarray, float, float]:
        """(position, heading, speed) of the focal agent at the last observed step."""
        f = self.focal
        return np.asarray(f.positions[-1], dtype=float), float(f.headings[-1]), float(f.speeds[-1])


# -- geometry ---------------------------------------------------------------

def _branch_point(s: np.ndarray, exit_heading: float) -> tuple[np.ndarray, np.ndarray]:
    """Position and heading at arc length ``s`` along a path that is straight
    along +x for s < 0, then turns on a circular arc to ``exit_heading`` and
    continues straight."""
    s = np.asarray(s, dtype=float)
    pts = np.zeros(s.shape + (2,))
    head = np.zeros(s.shape)
    before = s < 0
    pts[before, 0] = s[before]
    if exit_heading == 0.0:
        pts[~before, 0] = s[~before]
        return pts, head
    sign = math.copysign(1.0, exit_heading)
    arc_len = ARC_RADIUS * abs(exit_heading)
    on_arc = (~before) & (s <= arc_len)
    ang = s[on_arc] / ARC_RADIUS
    pts[on_arc, 0] = ARC_RADIUS * np.sin(ang)
    pts[on_arc, 1] = sign * ARC_RADIUS * (1 - np.cos(ang))
    head[on_arc] = sign * ang
    after = s > arc_len
    end = np.array([ARC_RADIUS * math.sin(abs(exit_heading)), sign * ARC_RADIUS * (1 - math.cos(exit_heading))])
    d = s[after] - arc_len
    pts[after] = end + d[:, None] * np.array([math.cos(exit_heading), math.sin(exit_heading)])
    head[after] = exit_heading
    return pts, head


def _sample_path(start: float, stop: float, exit_heading: float = 0.0) -> np.ndarray:
    n = min(MAX_POINTS, max(2, int(math.ceil((stop - start) / POINT_SPACING)) + 1))
    return _branch_point(np.linspace(start, stop, n), exit_heading)[0]


def default_exit_headings(branches: int) -> list[float]:
    if branches == 1:
        return [0.0]
    return list(np.linspace(-MAX_EXIT_ANGLE, MAX_EXIT_ANGLE, branches))


def generate_fork_scenario(
    rng_seed,
    branches: int = 3,
    branch_priors: Sequence[float] | None = None,
    approach_speed: float = 8.0,
    num_neighbors: int = 2,
    *,
    history_steps: int = 11,
    future_steps: int = 30,
    dt: float = 0.5,
    noise_std: float = 0.15,
    agent_class: str = "vehicle",
    exit_headings: Sequence[float] | None = None,
    random_pose: bool = True,
) -> Scenario:
    """One approach lane splitting into ``branches`` exit lanes.

    The focal agent drives the approach lane at constant speed; its future
    follows a branch drawn from ``branch_priors`` with i.i.d. Gaussian
    position noise. Everything is finally moved to a random global pose.
    """
    if not 1 <= branches <= 6:
        raise ValueError(f"branches must be in 1..6, got {branches}")
    priors = np.full(branches, 1.0 / branches) if branch_priors is None else np.asarray(branch_priors, float)
    if priors.shape != (branches,) or abs(priors.sum() - 1.0) > 1e-9 or (priors < 0).any():
        raise ValueError(f"branch_priors must be {branches} probabilities summing to 1")
    if not 0.5 <= approach_speed <= 20.0:
        raise ValueError(f"approach_speed must be in [0.5, 20], got {approach_speed}")
    if agent_class not in AGENT_CLASSES:
        raise ValueError(f"unknown agent class {agent_class!r}")

    headings = default_exit_headings(branches) if exit_headings is None else [float(h) for h in exit_headings]
    if len(headings) != branches:
        raise GeometryError("one exit heading per branch is required")
    order = sorted(headings)
    if any(b - a < MIN_EXIT_SEPARATION - 1e-12 for a, b in zip(order, order[1:])):
        raise GeometryError("exit headings are closer than 20 degrees")

    rng = np.random.default_rng(rng_seed)
    branch = int(rng.choice(branches, p=priors))
    v = float(approach_speed)
    horizon = v * dt * future_steps
    lead = horizon * rng.uniform(0.1, 0.5)  # distance from last observed position to the fork
    approach_len = lead + 2.5 * v * dt * history_steps + 20.0 * (num_neighbors + 1) + 20.0
    exit_len = horizon + 20.0

    # focal history (noise-free) and future on the sampled branch
    s_hist = -lead - v * dt * np.arange(history_steps - 1, -1, -1)
    hist_pos, hist_head = _branch_point(s_hist, 0.0)
    s_fut = -lead + v * dt * np.arange(1, future_steps + 1)
    fut_pos, _ = _branch_point(s_fut, headings[branch])
    if noise_std > 0:
        fut_pos = fut_pos + rng.normal(0.0, noise_std, size=fut_pos.shape)

    polylines = [(_sample_path(-approach_len, 0.0), "lane_center")]
    for h in headings:
        polylines.append((_sample_path(0.0, exit_len, h), "lane_center"))
    for side in (-0.5, 0.5):
        pts = _sample_path(-approach_len, 0.0)
        pts[:, 1] += side * LANE_WIDTH
        polylines.append((pts, "boundary"))
    oncoming = _sample_path(-approach_len, -5.0)[::-1].copy()
    oncoming[:, 1] += LANE_WIDTH
    polylines.append((oncoming, "lane_center"))

    tracks = [(hist_pos, hist_head, np.full(history_steps, v))]
    tail = -lead - v * dt * (history_steps - 1)
    for j in range(num_neighbors):
        nv = float(rng.uniform(0.5, 1.2) * v)
        steps = nv * dt * np.arange(history_steps - 1, -1, -1)
        if j % 2 == 0:
            # following traffic on the approach lane
            tail -= rng.uniform(12.0, 20.0)
            pos, head = _branch_point(tail - steps, 0.0)
        else:
            # oncoming lane, ends before the fork
            x_end = -rng.uniform(5.0 + steps[0], 0.9 * approach_len)
            pos = np.stack([x_end + steps, np.full(history_steps, LANE_WIDTH)], axis=-1)
            head = np.full(history_steps, math.pi)
        tracks.append((pos, head, np.full(history_steps, nv)))

    # random global pose
    if random_pose:
        theta = float(rng.uniform(-math.pi, math.pi))
        offset = rng.uniform(-200.0, 200.0, size=2)
    else:
        theta, offset = 0.0, np.zeros(2)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])

    def place(p):
        return (np.asarray(p) @ rot.T + offset).tolist()

    agents = [
        AgentTrack(
            positions=place(pos),
            headings=wrap_angle(head + theta).tolist(),
            speeds=[float(x) for x in spd],
            valid=[True] * history_steps,
        )
        for pos, head, spd in tracks
    ]
    return Scenario(
        map=[Polyline(place(p), sem) for p, sem in polylines],
        agents=agents,
        focal_index=0,
        future=place(fut_pos),
        latent_branch=LatentBranch(index=branch, prior=float(priors[branch])),
        agent_class=agent_class,
    )


# -- dataset file -----------------------------------------------------------

def scenario_to_dict(sc: Scenario) -> dict:
    return asdict(sc)


def _points(value, name, line, dims=2):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise DatasetFormatError(line, name, "expected a list of numbers") from None
    if arr.ndim != 2 or arr.shape[1] != dims or not np.isfinite(arr).all():
        raise DatasetFormatError(line, name, f"expected finite [[x, y], ...] points, got shape {arr.shape}")
    return [[float(x) for x in row] for row in value]


def _numbers(value, name, line):
    if not isinstance(value, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
        raise DatasetFormatError(line, name, "expected a list of numbers")
    return [float(x) for x in value]


def _require(record, key, line):
    if key not in record:
        raise DatasetFormatError(line, key, "missing")
    return record[key]


def scenario_from_dict(record: dict, line: int = 1) -> Scenario:
    if not isinstance(record, dict):
        raise DatasetFormatError(line, "<record>", "expected a JSON object")
    polylines = []
    for i, pl in enumerate(_require(record, "map", line)):
        name = f"map[{i}]"
        if not isinstance(pl, dict):
            raise DatasetFormatError(line, name, "expected an object")
        pts = _points(_require(pl, "points", line), f"{name}.points", line)
        try:
            polylines.append(Polyline(pts, pl.get("semantic", "lane_center")))
        except ValueError as exc:
            raise DatasetFormatError(line, name, str(exc)) from None
    agents = []
    for i, ag in enumerate(_require(record, "agents", line)):
        name = f"agents[{i}]"
        if not isinstance(ag, dict):
            raise DatasetFormatError(line, name, "expected an object")
        pos = _points(_require(ag, "positions", line), f"{name}.positions", line)
        head = _numbers(_require(ag, "headings", line), f"{name}.headings", line)
        spd = _numbers(_require(ag, "speeds", line), f"{name}.speeds", line)
        valid = _require(ag, "valid", line)
        if not isinstance(valid, list) or not all(isinstance(v, bool) for v in valid):
            raise DatasetFormatError(line, f"{name}.valid", "expected a list of booleans")
        if not len(pos) == len(head) == len(spd) == len(valid):
            raise DatasetFormatError(line, name, "positions/headings/speeds/valid lengths differ")
        if any(s < 0 for s in spd):
            raise DatasetFormatError(line, f"{name}.speeds", "negative speed")
        agents.append(AgentTrack(pos, head, spd, list(valid)))
    focal = _require(record, "focal_index", line)
    if not isinstance(focal, int) or isinstance(focal, bool) or not 0 <= focal < len(agents):
        raise DatasetFormatError(line, "focal_index", "not a valid agent index")
    if not agents[focal].valid[-1]:
        raise DatasetFormatError(line, "focal_index", "focal agent is not valid at the last observed step")
    future = _points(_require(record, "future", line), "future", line)
    lb = _require(record, "latent_branch", line)
    if not isinstance(lb, dict) or "index" not in lb or "prior" not in lb:
        raise DatasetFormatError(line, "latent_branch", "expected {index, prior}")
    if not 0.0 < float(lb["prior"]) <= 1.0:
        raise DatasetFormatError(line, "latent_branch", "prior outside (0, 1]")
    cls = record.get("agent_class", "vehicle")
    if cls not in AGENT_CLASSES:
        raise DatasetFormatError(line, "agent_class", f"unknown class {cls!r}")
    return Scenario(
        map=polylines,
        agents=agents,
        focal_index=focal,
        future=future,
        latent_branch=LatentBranch(int(lb["index"]), float(lb["prior"])),
        agent_class=cls,
    )


def write_dataset(scenarios: Iterable[Scenario], path) -> None:
    with open(path, "w") as fh:
        for sc in scenarios:
            fh.write(json.dumps(scenario_to_dict(sc), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path) -> list[Scenario]:
    out = []
    with open(Path(path)) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(lineno, "<json>", exc.msg) from None
            out.append(scenario_from_dict(record, lineno))
    return out


def generate_dataset(
    count: int,
    branches: int = 3,
    branch_priors: Sequence[float] | None = None,
    seed: int = 0,
    speed_range: tuple[float, float] = (8.0, 14.0),
    num_neighbors: int = 2,
    agent_class: str = "vehicle",
) -> list[Scenario]:
    """``count`` fork scenarios; scenario i uses seed [seed, i] and draws its
    approach speed uniformly from ``speed_range``."""
    lo, hi = speed_range
    out = []
    for i in range(count):
        speed = float(np.random.default_rng([seed, i, 1]).uniform(lo, hi)) if hi > lo else float(lo)
        out.append(generate_fork_scenario([seed, i], branches, branch_priors, approach_speed=speed,
                                          num_neighbors=num_neighbors, agent_class=agent_class))
    return out
