"""Cooperative grid environments: Meetup, ColorGather, StagHunt, TaskList.

All four share one engine: a bordered cell grid with a 3-channel integer
encoding per cell (object, color, state), agents with a facing direction and
a one-slot inventory, simultaneous moves with a deterministic collision
protocol, and seed-reproducible layouts. Interactions (pickup/drop/toggle)
are resolved in agent-index order after movement; dynamic stags move last.

Episode rules:
  meetup       every agent is rewarded each step by how much closer it moved
               to the landmark whose summed distance to all agents is
               smallest (Manhattan, computed on the pre-step state); when
               all agents stand 4-adjacent to one landmark everyone gets +1
               and the episode ends.
  colorgather  picking a coin rewards every agent +1 if it is the first coin
               of the episode or its color is (tied for) the most collected
               so far; the coin respawns in the same color at a random free
               cell, so the coin count is conserved.
  staghunt     a berry pickup pays +1 to the collector and the berry is
               gone; a pickup on a faced stag removes it and pays +5 to the
               collector and every other agent standing 4-adjacent to the
               stag's cell - a lone hunter gets nothing. Stags random-walk:
               each step, with probability 0.5, a stag moves to a uniformly
               random free neighbor.
  tasklist     each agent works through an ordered subtask list (+1 each):
               pick up the key, open the door (toggling the door does
               nothing unless the key is in hand), pick up the ball, toggle
               the box open, drop the ball, reach the goal. Out-of-order
               interactions never advance the index. The single key/ball
               set is shared: agents drop the key to free their hands, which
               lets the next agent use it. The episode ends when every
               learning agent has finished or the cap is hit.

Variants: cluttered (extra walls over 10% of the base layout's free cells,
for meetup/colorgather/staghunt), single_target / multi_target (1 or 5
meetup landmarks), random_coins / random_colors (per-episode coin counts in
[1,4] per color / color count in [2,4]), no_stag / all_stags (berries only /
stags only).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

OBJECT_IDS = {
    "empty": 0, "wall": 1, "landmark": 2, "coin": 3, "berry": 4, "stag": 5,
    "key": 6, "door": 7, "ball": 8, "box": 9, "goal": 10, "agent": 11,
}
COLOR_IDS = {
    "none": 0, "red": 1, "green": 2, "blue": 3, "yellow": 4, "purple": 5,
    "grey": 6,
}
STATE_IDS = {"default": 0, "door-closed": 1, "door-locked": 2, "door-open": 3}

ENCODING_VERSION = "enc-1"

ACTIONS = {
    "turn-left": 0, "turn-right": 1, "forward": 2, "pickup": 3, "drop": 4,
    "toggle": 5, "no-op": 6,
}
TURN_LEFT, TURN_RIGHT, FORWARD, PICKUP, DROP, TOGGLE, NOOP = range(7)

# N, E, S, W
DIR_VECTORS = ((0, -1), (1, 0), (0, 1), (-1, 0))

ENV_KINDS = ("meetup", "colorgather", "staghunt", "tasklist")
VARIANTS = {
    "default": ENV_KINDS,
    "cluttered": ("meetup", "colorgather", "staghunt"),
    "single_target": ("meetup",),
    "multi_target": ("meetup",),
    "random_coins": ("colorgather",),
    "random_colors": ("colorgather",),
    "no_stag": ("staghunt",),
    "all_stags": ("staghunt",),
}

SUBTASKS = ("pickup_key", "open_door", "pickup_ball", "open_box",
            "drop_ball", "reach_goal")

_COIN_COLOR_POOL = ("red", "blue", "yellow", "purple")

_OBJ = OBJECT_IDS
_COL = COLOR_IDS
_ST = STATE_IDS


@dataclass
class EnvConfig:
    """Knobs shared by every environment; per-kind defaults via make_config."""
    interior: int = 10
    agent_count: int = 3
    episode_cap: int = 100
    landmarks: int = 3
    coin_colors: int = 3
    coins_per_color: int = 3
    berries: int = 4
    stags: int = 2
    tasklist_subtasks: int = 6
    non_learning: tuple = ()

    def __post_init__(self):
        if self.tasklist_subtasks not in (3, 6):
            raise ValueError("tasklist_subtasks must be 3 or 6")
        if self.interior < 2:
            raise ValueError("interior size must be at least 2")


def make_config(kind: str, variant: str = "default", **overrides) -> EnvConfig:
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown environment {kind!r}")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if kind not in VARIANTS[variant]:
        raise ValueError(f"variant {variant!r} does not apply to {kind!r}")
    cfg = EnvConfig()
    if kind == "staghunt":
        cfg = replace(cfg, agent_count=2)
    elif kind == "tasklist":
        cfg = replace(cfg, interior=12, agent_count=1)
    if variant == "single_target":
        cfg = replace(cfg, landmarks=1)
    elif variant == "multi_target":
        cfg = replace(cfg, landmarks=5)
    elif variant == "no_stag":
        cfg = replace(cfg, stags=0)
    elif variant == "all_stags":
        cfg = replace(cfg, berries=0)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


@dataclass
class AgentState:
    x: int
    y: int
    direction: int
    carry: tuple | None = None          # (object_id, color_id)
    task_index: int = 0
    finished: bool = False

    @property
    def pos(self) -> tuple:
        return (self.x, self.y)


@dataclass
class StepOutcome:
    rewards: np.ndarray
    done: bool
    info: list


@dataclass
class GridState:
    kind: str
    variant: str
    config: EnvConfig
    width: int                           # full extents including the border
    height: int
    cells: np.ndarray                    # (height, width, 3) int64
    agents: list
    movers: list = field(default_factory=list)   # stag positions (x, y)
    step_count: int = 0
    done: bool = False
    rng: np.random.Generator = None
    coin_tally: dict = field(default_factory=dict)
    subtasks: tuple = SUBTASKS


# ---------------------------------------------------------------------------
# layout


def _free_cells(state: GridState) -> list:
    """Empty interior cells with no agent, in row-major order."""
    occupied = {a.pos for a in state.agents if not a.finished}
    out = []
    for y in range(1, state.height - 1):
        for x in range(1, state.width - 1):
            if state.cells[y, x, 0] == _OBJ["empty"] and (x, y) not in occupied:
                out.append((x, y))
    return out


def _place(state: GridState, obj: str, color: str, n: int,
           state_id: int = 0, region=None) -> list:
    placed = []
    for _ in range(n):
        free = _free_cells(state)
        if region is not None:
            free = [c for c in free if region(c)]
        if not free:
            raise ValueError(
                f"grid too small: no free cell for {obj} in {state.kind}"
            )
        x, y = free[int(state.rng.integers(len(free)))]
        state.cells[y, x] = (_OBJ[obj], _COL[color], state_id)
        placed.append((x, y))
    return placed


def _place_agents(state: GridState, n: int, region=None) -> None:
    for i in range(n):
        free = _free_cells(state)
        if region is not None:
            free = [c for c in free if region(c)]
        if not free:
            raise ValueError(f"grid too small: no free cell for agent {i}")
        x, y = free[int(state.rng.integers(len(free)))]
        direction = int(state.rng.integers(4))
        state.agents.append(AgentState(x, y, direction))


def _build_layout(state: GridState) -> None:
    cfg = state.config
    if state.kind == "meetup":
        _place(state, "landmark", "red", cfg.landmarks)
    elif state.kind == "colorgather":
        if state.variant == "random_colors":
            n_colors = int(state.rng.integers(2, 5))
        else:
            n_colors = cfg.coin_colors
        colors = _COIN_COLOR_POOL[:n_colors]
        for color in colors:
            if state.variant == "random_coins":
                count = int(state.rng.integers(1, 5))
            else:
                count = cfg.coins_per_color
            _place(state, "coin", color, count)
        state.coin_tally = {c: 0 for c in colors}
    elif state.kind == "staghunt":
        _place(state, "berry", "green", cfg.berries)
        state.movers = _place(state, "stag", "grey", cfg.stags)
    elif state.kind == "tasklist":
        wall_x = state.width // 2
        for y in range(1, state.height - 1):
            state.cells[y, wall_x] = (_OBJ["wall"], 0, 0)
        door_y = int(state.rng.integers(1, state.height - 1))
        state.cells[door_y, wall_x] = (_OBJ["door"], _COL["yellow"],
                                       _ST["door-locked"])
        left = lambda c: c[0] < wall_x
        right = lambda c: c[0] > wall_x
        _place(state, "key", "yellow", 1, region=left)
        if cfg.tasklist_subtasks == 6:
            _place(state, "ball", "blue", 1, region=right)
            _place(state, "box", "grey", 1, region=right)
        _place(state, "goal", "green", 1, region=right)

    if state.variant == "cluttered":
        n_walls = int(round(0.10 * len(_free_cells(state))))
        _place(state, "wall", "none", n_walls)


def reset(kind: str, variant: str = "default", seed: int = 0,
          config: EnvConfig | None = None):
    """Build a fresh seeded episode; returns (GridState, observations)."""
    cfg = config if config is not None else make_config(kind, variant)
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown environment {kind!r}")
    if variant not in VARIANTS or kind not in VARIANTS[variant]:
        raise ValueError(f"variant {variant!r} does not apply to {kind!r}")
    size = cfg.interior + 2
    cells = np.zeros((size, size, 3), dtype=np.int64)
    cells[0, :, 0] = _OBJ["wall"]
    cells[-1, :, 0] = _OBJ["wall"]
    cells[:, 0, 0] = _OBJ["wall"]
    cells[:, -1, 0] = _OBJ["wall"]
    state = GridState(
        kind=kind, variant=variant, config=cfg, width=size, height=size,
        cells=cells, agents=[], rng=np.random.default_rng(seed),
        subtasks=SUBTASKS if cfg.tasklist_subtasks == 6
        else ("pickup_key", "open_door", "reach_goal"),
    )
    _build_layout(state)
    if kind == "tasklist":
        wall_x = state.width // 2
        _place_agents(state, cfg.agent_count, region=lambda c: c[0] < wall_x)
    else:
        _place_agents(state, cfg.agent_count)
    obs = [encode_observation(state, i) for i in range(len(state.agents))]
    return state, obs


# ---------------------------------------------------------------------------
# observations and rendering


def encode_observation(state: GridState, agent_index: int):
    """Fully observed (h, w, 3) integer grid plus p = (x, y, direction).

    Agents are drawn over their cells with object id ``agent`` and their
    index color; carried objects are not visible in the grid.
    """
    if not 0 <= agent_index < len(state.agents):
        raise IndexError(f"no agent {agent_index}")
    grid = state.cells.copy()
    for i, a in enumerate(state.agents):
        if a.finished:
            continue            # finished agents have left the grid
        grid[a.y, a.x] = (_OBJ["agent"], _agent_color(i), 0)
    me = state.agents[agent_index]
    return grid, (me.x, me.y, me.direction)


def _agent_color(index: int) -> int:
    return 1 + (index % 6)


_OBJ_CHARS = {
    _OBJ["empty"]: ".", _OBJ["wall"]: "#", _OBJ["landmark"]: "L",
    _OBJ["coin"]: "c", _OBJ["berry"]: "b", _OBJ["stag"]: "S",
    _OBJ["key"]: "k", _OBJ["ball"]: "o", _OBJ["box"]: "B",
    _OBJ["goal"]: "G",
}


def render_ascii(state: GridState) -> str:
    """One character per cell, agents as digits, then exact cell metadata.

    The ``cells:`` lines list every non-empty cell's (object, color, state)
    triple and the ``agents:`` lines the poses, so ``parse_ascii`` recovers
    the cell grid and agent list exactly.
    """
    agent_at = {a.pos: i for i, a in enumerate(state.agents) if not a.finished}
    lines = []
    for y in range(state.height):
        row = []
        for x in range(state.width):
            if (x, y) in agent_at:
                row.append(str(agent_at[(x, y)] % 10))
                continue
            obj, _, st = state.cells[y, x]
            if obj == _OBJ["door"]:
                row.append({_ST["door-locked"]: "D", _ST["door-closed"]: "d",
                            _ST["door-open"]: "/"}.get(int(st), "d"))
            else:
                row.append(_OBJ_CHARS.get(int(obj), "?"))
        lines.append("".join(row))
    lines.append(f"size: {state.width}x{state.height}")
    for y in range(state.height):
        for x in range(state.width):
            obj, col, st = state.cells[y, x]
            if obj != 0 or col != 0 or st != 0:
                lines.append(f"cell: {x},{y} {obj},{col},{st}")
    for i, a in enumerate(state.agents):
        carry = f"{a.carry[0]},{a.carry[1]}" if a.carry else "-"
        lines.append(f"agent: {i} {a.x},{a.y} dir={a.direction} "
                     f"carry={carry} task={a.task_index} "
                     f"finished={int(a.finished)}")
    return "\n".join(lines) + "\n"


def parse_ascii(text: str):
    """Inverse of render_ascii for the cell grid and agent poses."""
    cells = None
    agents = []
    for line in text.splitlines():
        if line.startswith("size: "):
            w, h = line[len("size: "):].split("x")
            cells = np.zeros((int(h), int(w), 3), dtype=np.int64)
        elif line.startswith("cell: "):
            coords, triple = line[len("cell: "):].split(" ")
            x, y = (int(v) for v in coords.split(","))
            cells[y, x] = tuple(int(v) for v in triple.split(","))
        elif line.startswith("agent: "):
            parts = line[len("agent: "):].split(" ")
            x, y = (int(v) for v in parts[1].split(","))
            direction = int(parts[2].split("=")[1])
            carry_txt = parts[3].split("=")[1]
            carry = (None if carry_txt == "-"
                     else tuple(int(v) for v in carry_txt.split(",")))
            task = int(parts[4].split("=")[1])
            fin = bool(int(parts[5].split("=")[1]))
            agents.append(AgentState(x, y, direction, carry, task, fin))
    if cells is None:
        raise ValueError("no size line in rendered text")
    return cells, agents


# ---------------------------------------------------------------------------
# stepping


def _walkable(state: GridState, x: int, y: int) -> bool:
    obj, _, st = state.cells[y, x]
    if obj == _OBJ["empty"] or obj == _OBJ["goal"]:
        return True
    return obj == _OBJ["door"] and st == _ST["door-open"]


def _resolve_moves(state: GridState, actions) -> None:
    """Turns plus simultaneous forward moves with the collision protocol:
    same-target movers all stay, swapping pairs stay, moving into an agent
    that stays means staying; chains and rotations are allowed."""
    for a, act in zip(state.agents, actions):
        if a.finished:
            continue
        if act == TURN_LEFT:
            a.direction = (a.direction - 1) % 4
        elif act == TURN_RIGHT:
            a.direction = (a.direction + 1) % 4

    targets = {}
    for i, (a, act) in enumerate(zip(state.agents, actions)):
        if a.finished or act != FORWARD:
            continue
        dx, dy = DIR_VECTORS[a.direction]
        tx, ty = a.x + dx, a.y + dy
        if _walkable(state, tx, ty):
            targets[i] = (tx, ty)

    # same target -> all stay
    by_target = {}
    for i, t in targets.items():
        by_target.setdefault(t, []).append(i)
    for t, movers in by_target.items():
        if len(movers) > 1:
            for i in movers:
                targets.pop(i)
    # swaps -> both stay (finished agents have left the grid and block nothing)
    active = [i for i, a in enumerate(state.agents) if not a.finished]
    pos = {i: state.agents[i].pos for i in active}
    for i in list(targets):
        for j in list(targets):
            if i < j and targets.get(i) == pos[j] and targets.get(j) == pos[i]:
                targets.pop(i, None)
                targets.pop(j, None)
    # moving into a stationary agent -> stay (fixpoint over chains)
    changed = True
    while changed:
        changed = False
        stationary = {pos[i] for i in active if i not in targets}
        for i in list(targets):
            if targets[i] in stationary:
                targets.pop(i)
                changed = True

    for i, (tx, ty) in targets.items():
        state.agents[i].x = tx
        state.agents[i].y = ty


def _faced_cell(agent: AgentState) -> tuple:
    dx, dy = DIR_VECTORS[agent.direction]
    return agent.x + dx, agent.y + dy


def _adjacent_agents(state: GridState, x: int, y: int) -> list:
    out = []
    for i, a in enumerate(state.agents):
        if a.finished:
            continue
        if abs(a.x - x) + abs(a.y - y) == 1:
            out.append(i)
    return out


def _advance_task(state, agent: AgentState, events: list, idx: int,
                  subtask: str) -> None:
    if not agent.finished and agent.task_index < len(state.subtasks) \
            and state.subtasks[agent.task_index] == subtask:
        agent.task_index += 1
        events.append({"kind": "subtask_completed", "agent": idx,
                       "subtask": subtask, "index": agent.task_index - 1,
                       "value": 1.0, "agents": [idx]})


def colorgather_reward(color: str, tally: dict) -> float:
    """+1 (to every agent) for the first coin or a modal-color coin.

    The tally is the per-color count of coins collected so far this
    episode, not counting the coin now being collected; ties for the mode
    all count as modal.
    """
    total = sum(tally.values())
    if total == 0:
        return 1.0
    top = max(tally.values())
    return 1.0 if tally.get(color, 0) == top else 0.0


def _interact(state: GridState, actions, events: list) -> None:
    n = len(state.agents)
    for i in range(n):
        agent = state.agents[i]
        act = actions[i]
        if agent.finished or act not in (PICKUP, DROP, TOGGLE):
            continue
        fx, fy = _faced_cell(agent)
        obj, col, st = (int(v) for v in state.cells[fy, fx])

        if act == PICKUP:
            if state.kind == "colorgather" and obj == _OBJ["coin"]:
                color = _color_name(col)
                value = colorgather_reward(color, state.coin_tally)
                state.coin_tally[color] = state.coin_tally.get(color, 0) + 1
                state.cells[fy, fx] = (0, 0, 0)
                _respawn_coin(state, col)
                events.append({"kind": "coin_collected", "agent": i,
                               "color": color, "value": value,
                               "agents": list(range(n))})
            elif state.kind == "staghunt" and obj == _OBJ["berry"]:
                state.cells[fy, fx] = (0, 0, 0)
                events.append({"kind": "berry_collected", "agent": i,
                               "value": 1.0, "agents": [i]})
            elif state.kind == "staghunt" and obj == _OBJ["stag"]:
                helpers = [j for j in _adjacent_agents(state, fx, fy) if j != i]
                if helpers:
                    state.cells[fy, fx] = (0, 0, 0)
                    state.movers.remove((fx, fy))
                    party = sorted([i] + helpers)
                    events.append({"kind": "stag_captured", "agent": i,
                                   "value": 5.0, "agents": party})
            elif state.kind == "tasklist" and obj in (_OBJ["key"], _OBJ["ball"]):
                if agent.carry is None:
                    agent.carry = (obj, col)
                    state.cells[fy, fx] = (0, 0, 0)
                    name = "pickup_key" if obj == _OBJ["key"] else "pickup_ball"
                    events.append({"kind": name, "agent": i, "value": 0.0,
                                   "agents": [i]})
                    _advance_task(state, agent, events, i, name)

        elif act == DROP:
            if state.kind == "tasklist" and agent.carry is not None \
                    and obj == _OBJ["empty"] \
                    and not any(a.pos == (fx, fy) for a in state.agents
                                if not a.finished):
                dropped_obj, dropped_col = agent.carry
                state.cells[fy, fx] = (dropped_obj, dropped_col, 0)
                agent.carry = None
                if dropped_obj == _OBJ["ball"]:
                    events.append({"kind": "drop_ball", "agent": i,
                                   "value": 0.0, "agents": [i]})
                    _advance_task(state, agent, events, i, "drop_ball")

        elif act == TOGGLE:
            if state.kind == "tasklist" and obj == _OBJ["door"]:
                holds_key = agent.carry is not None \
                    and agent.carry[0] == _OBJ["key"]
                if holds_key:
                    new_state = (_ST["door-closed"]
                                 if st == _ST["door-open"] else _ST["door-open"])
                    state.cells[fy, fx, 2] = new_state
                    if new_state == _ST["door-open"]:
                        events.append({"kind": "open_door", "agent": i,
                                       "value": 0.0, "agents": [i]})
                        _advance_task(state, agent, events, i, "open_door")
            elif state.kind == "tasklist" and obj == _OBJ["box"]:
                events.append({"kind": "open_box", "agent": i, "value": 0.0,
                               "agents": [i]})
                _advance_task(state, agent, events, i, "open_box")


def _respawn_coin(state: GridState, color_id: int) -> None:
    free = _free_cells(state)
    if not free:
        raise RuntimeError("no free cell to respawn a coin")
    x, y = free[int(state.rng.integers(len(free)))]
    state.cells[y, x] = (_OBJ["coin"], color_id, 0)


def _color_name(color_id: int) -> str:
    for name, cid in COLOR_IDS.items():
        if cid == color_id:
            return name
    raise ValueError(f"unknown color id {color_id}")


def _move_stags(state: GridState) -> None:
    occupied = {a.pos for a in state.agents}
    for idx in range(len(state.movers)):
        if state.rng.random() >= 0.5:
            continue
        x, y = state.movers[idx]
        options = []
        for dx, dy in DIR_VECTORS:
            nx, ny = x + dx, y + dy
            if state.cells[ny, nx, 0] == _OBJ["empty"] and (nx, ny) not in occupied:
                options.append((nx, ny))
        if not options:
            continue
        nx, ny = options[int(state.rng.integers(len(options)))]
        state.cells[y, x] = (0, 0, 0)
        state.cells[ny, nx] = (_OBJ["stag"], _COL["grey"], 0)
        state.movers[idx] = (nx, ny)


def _landmarks(state: GridState) -> list:
    ys, xs = np.nonzero(state.cells[:, :, 0] == _OBJ["landmark"])
    return sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))


def consensus_landmark(state: GridState) -> tuple:
    """The landmark minimizing the summed Manhattan distance to all agents;
    ties go to the first in row-major order."""
    best, best_sum = None, None
    for (lx, ly) in _landmarks(state):
        s = sum(abs(a.x - lx) + abs(a.y - ly) for a in state.agents)
        if best_sum is None or s < best_sum:
            best, best_sum = (lx, ly), s
    if best is None:
        raise ValueError("no landmark on the grid")
    return best


def meetup_reward(state_before: GridState, state_after: GridState,
                  agent_index: int) -> float:
    """Change in Manhattan distance to the consensus landmark of the
    pre-step state: positive when the agent moved closer.

    Distances stay Manhattan in every variant, including cluttered grids
    where the walkable shortest path can be longer."""
    lx, ly = consensus_landmark(state_before)
    b = state_before.agents[agent_index]
    a = state_after.agents[agent_index]
    d_before = abs(b.x - lx) + abs(b.y - ly)
    d_after = abs(a.x - lx) + abs(a.y - ly)
    return float(d_before - d_after)


def staghunt_rules(state: GridState, actions, events: list) -> None:
    """Interaction + stag-movement phase for StagHunt (events appended)."""
    _interact(state, actions, events)
    _move_stags(state)


def _shed_carry(state: GridState, agent: AgentState) -> None:
    """Leave a finishing agent's carried object on the grid: first empty,
    unoccupied neighbor of its cell (N/E/S/W order), else the first free
    cell row-major."""
    if agent.carry is None:
        return
    obj, col = agent.carry
    occupied = {a.pos for a in state.agents if not a.finished}
    for dx, dy in DIR_VECTORS:
        nx, ny = agent.x + dx, agent.y + dy
        if state.cells[ny, nx, 0] == _OBJ["empty"] and (nx, ny) not in occupied:
            state.cells[ny, nx] = (obj, col, 0)
            agent.carry = None
            return
    free = _free_cells(state)
    if not free:
        raise RuntimeError("no free cell to leave a carried object on")
    x, y = free[0]
    state.cells[y, x] = (obj, col, 0)
    agent.carry = None


def tasklist_rules(state: GridState, actions, events: list) -> None:
    """Interaction + goal-arrival phase for TaskList (events appended).

    An agent that completes its final subtask leaves the grid: it stops
    blocking movement, disappears from observations and renders, and any
    carried object is set down nearby so others can still use it.
    """
    _interact(state, actions, events)
    for i, agent in enumerate(state.agents):
        if agent.finished:
            continue
        obj = state.cells[agent.y, agent.x, 0]
        if obj == _OBJ["goal"] and agent.task_index == len(state.subtasks) - 1:
            _advance_task(state, agent, events, i, "reach_goal")
            agent.finished = True
            _shed_carry(state, agent)


def step(state: GridState, joint_action):
    """Advance one step; returns (state, StepOutcome, observations)."""
    if state.done:
        raise RuntimeError("episode is done; reset before stepping again")
    actions = list(joint_action)
    n = len(state.agents)
    if len(actions) != n:
        raise ValueError(f"need {n} actions, got {len(actions)}")

    before_positions = [(a.x, a.y) for a in state.agents]
    consensus = consensus_landmark(state) if state.kind == "meetup" else None

    _resolve_moves(state, actions)

    events: list = []
    if state.kind == "staghunt":
        staghunt_rules(state, actions, events)
    elif state.kind == "tasklist":
        tasklist_rules(state, actions, events)
    else:
        _interact(state, actions, events)

    done = False
    if state.kind == "meetup":
        lx, ly = consensus
        for i, a in enumerate(state.agents):
            bx, by = before_positions[i]
            delta = (abs(bx - lx) + abs(by - ly)) - (abs(a.x - lx) + abs(a.y - ly))
            if delta != 0.0:
                events.append({"kind": "meetup_delta", "agent": i,
                               "value": float(delta), "agents": [i]})
        for (mx, my) in _landmarks(state):
            if all(abs(a.x - mx) + abs(a.y - my) == 1 for a in state.agents):
                for i in range(n):
                    events.append({"kind": "meetup_bonus", "agent": i,
                                   "value": 1.0, "agents": [i]})
                done = True
                break
    elif state.kind == "tasklist":
        learners = [i for i in range(n) if i not in state.config.non_learning]
        if learners and all(state.agents[i].finished for i in learners):
            done = True

    rewards = np.zeros(n)
    info = [[] for _ in range(n)]
    for ev in events:
        for i in ev["agents"]:
            rewards[i] += ev["value"]
            info[i].append(ev)

    state.step_count += 1
    if state.step_count >= state.config.episode_cap:
        done = True
    state.done = done

    obs = [encode_observation(state, i) for i in range(n)]
    return state, StepOutcome(rewards=rewards, done=done, info=info), obs
