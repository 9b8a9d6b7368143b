#!/usr/bin/python3
'''
Three deterministic ball-and-paddle games on a 16x20 binary grid.

mini-pong     : agent paddle on the right column, scripted opponent on the left
mini-breakout : paddle on the bottom row, 30 two-cell bricks on rows 2-4, 3 lives
mini-court    : free movement in one half, net at column 10, sides swap after every point

File structure:
SPECS
STATE
DYNAMICS
RENDER
GOLDEN TRAJECTORIES
'''
import copy
import struct
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ActionError, ConfigError, FormatError
from .files import write_atomic

ROWS, COLS = 16, 20
FRAME_STACK = 2
OBSERVATION_SHAPE = (FRAME_STACK, ROWS, COLS)
MAX_EPISODE_STEPS = 1000

PONG_PADDLE = 3
BREAKOUT_PADDLE = 4
BRICK_TOP_ROW = 2
BRICK_ROWS = 3
BRICKS_PER_ROW = 10
BRICK_WIDTH = 2
ALL_BRICKS = (1 << (BRICK_ROWS * BRICKS_PER_ROW)) - 1
COURT_PLAYER = 2
NET_COL = 10


# SPECS

@dataclass(frozen=True)
class EnvironmentSpec:
    id: str
    action_count: int
    action_names: tuple
    points_to_win: int = 0
    lives: int = 0
    rows: int = ROWS
    cols: int = COLS
    max_episode_steps: int = MAX_EPISODE_STEPS


SPECS = {
    'mini-pong': EnvironmentSpec('mini-pong', 3, ('noop', 'up', 'down'), points_to_win=5),
    'mini-breakout': EnvironmentSpec('mini-breakout', 4, ('noop', 'left', 'right', 'fire'), lives=3),
    'mini-court': EnvironmentSpec('mini-court', 5, ('noop', 'up', 'down', 'left', 'right'), points_to_win=3),
}

def get_spec(env_id: str) -> EnvironmentSpec:
    if env_id not in SPECS:
        raise ConfigError(f'Unknown environment "{env_id}". Available environments: {", ".join(SPECS)}.')
    return SPECS[env_id]


# STATE

@dataclass
class EnvironmentState:
    spec: EnvironmentSpec
    ball_row: int
    ball_col: int
    ball_drow: int
    ball_dcol: int
    rng: np.random.Generator
    # Agent: paddle top row (pong), paddle left column (breakout), player cell (court)
    paddle_row: int = 0
    paddle_col: int = 0
    opponent_row: int = 0
    opponent_col: int = 0
    bricks: int = 0
    lives: int = 0
    ball_held: bool = False
    # mini-court: +1 agent plays the right half, -1 the left half
    agent_side: int = 1
    lagged_ball_row: int = 0
    agent_points: int = 0
    opponent_points: int = 0
    steps: int = 0
    terminal: bool = False
    frame: np.ndarray = field(default=None, repr=False)

    def copy(self):
        return copy.deepcopy(self)

    @property
    def brick_count(self) -> int:
        return bin(self.bricks).count('1')

    def info(self) -> dict:
        if self.spec.id == 'mini-breakout':
            return dict(lives=self.lives, bricks=self.brick_count,
                        bricks_cleared=BRICK_ROWS * BRICKS_PER_ROW - self.brick_count, steps=self.steps)
        return dict(agent_points=self.agent_points, opponent_points=self.opponent_points, steps=self.steps)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool
    info: dict
    state: EnvironmentState = field(default=None, repr=False)


def _sign(rng) -> int:
    return 1 if rng.integers(2) else -1

def _serve(state):
    state.ball_row = int(state.rng.integers(4, ROWS - 4))
    state.ball_col = COLS // 2
    state.ball_drow = _sign(state.rng)
    state.ball_dcol = _sign(state.rng)

def reset(spec: EnvironmentSpec, seed: int):
    '''Initial state and observation; both stacked frames are the initial render'''
    state = EnvironmentState(spec, 0, 0, 1, 1, np.random.default_rng(seed))
    if spec.id == 'mini-pong':
        _serve(state)
        state.paddle_row = state.opponent_row = (ROWS - PONG_PADDLE) // 2
        state.opponent_col = 0
    elif spec.id == 'mini-breakout':
        state.bricks = ALL_BRICKS
        state.lives = spec.lives
        state.paddle_col = (COLS - BREAKOUT_PADDLE) // 2
        _hold_ball(state)
        state.ball_dcol = _sign(state.rng)
    elif spec.id == 'mini-court':
        _serve(state)
        state.agent_side = 1
        state.paddle_row = state.opponent_row = (ROWS - COURT_PLAYER) // 2
        state.paddle_col = COLS - 4
        state.opponent_col = 0
        state.lagged_ball_row = state.ball_row
    else:
        raise ConfigError(f'Unknown environment "{spec.id}".')
    state.frame = render(state)
    return state, np.stack([state.frame, state.frame])


# DYNAMICS

def _clamp(value, low, high):
    return max(low, min(high, value))

def _english(offset, height, drow):
    '''Edge hits steer the ball: top cell sends it up, bottom cell down'''
    if offset == 0:
        return -1
    if offset == height - 1:
        return 1
    return drow

def _advance_rows(state):
    '''Next ball cell with the top/bottom wall bounce applied'''
    row = state.ball_row + state.ball_drow
    if row < 0 or row >= ROWS:
        state.ball_drow = -state.ball_drow
        row = state.ball_row + state.ball_drow
    return row, state.ball_col + state.ball_dcol

def _step_pong(state, action) -> int:
    if action == 1:
        state.paddle_row -= 1
    elif action == 2:
        state.paddle_row += 1
    state.paddle_row = _clamp(state.paddle_row, 0, ROWS - PONG_PADDLE)

    # Opponent tracks the ball but rests every third step, so it can be outrun
    if state.steps % 3 != 2:
        centre = state.opponent_row + PONG_PADDLE // 2
        if state.ball_row < centre:
            state.opponent_row -= 1
        elif state.ball_row > centre:
            state.opponent_row += 1
        state.opponent_row = _clamp(state.opponent_row, 0, ROWS - PONG_PADDLE)

    row, col = _advance_rows(state)
    for paddle_col, paddle_row, away in ((COLS - 1, state.paddle_row, -1), (0, state.opponent_row, 1)):
        if col == paddle_col and paddle_row <= row < paddle_row + PONG_PADDLE:
            state.ball_dcol = away
            state.ball_drow = _english(row - paddle_row, PONG_PADDLE, state.ball_drow)
            col = state.ball_col

    reward = 0
    if col == 0:
        state.agent_points += 1
        reward = 1
    elif col == COLS - 1:
        state.opponent_points += 1
        reward = -1
    if reward:
        _serve(state)
    else:
        state.ball_row, state.ball_col = row, col

    target = state.spec.points_to_win
    state.terminal = state.agent_points >= target or state.opponent_points >= target
    return reward

def _brick_at(bricks, row, col):
    if BRICK_TOP_ROW <= row < BRICK_TOP_ROW + BRICK_ROWS and 0 <= col < COLS:
        index = (row - BRICK_TOP_ROW) * BRICKS_PER_ROW + col // BRICK_WIDTH
        if bricks >> index & 1:
            return index
    return None

def _hold_ball(state):
    state.ball_held = True
    state.ball_row = ROWS - 2
    state.ball_col = state.paddle_col + 1

def _step_breakout(state, action) -> int:
    if action == 1:
        state.paddle_col -= 1
    elif action == 2:
        state.paddle_col += 1
    state.paddle_col = _clamp(state.paddle_col, 0, COLS - BREAKOUT_PADDLE)

    if state.ball_held:
        _hold_ball(state)
        if action == 3:
            state.ball_held = False
            state.ball_drow = -1
            state.ball_dcol = _sign(state.rng)
        return 0

    row = state.ball_row + state.ball_drow
    col = state.ball_col + state.ball_dcol
    if col < 0 or col >= COLS:
        state.ball_dcol = -state.ball_dcol
        col = state.ball_col + state.ball_dcol
    if row < 0:
        state.ball_drow = -state.ball_drow
        row = state.ball_row + state.ball_drow

    reward = 0
    brick = _brick_at(state.bricks, row, col)
    if brick is not None:
        state.bricks &= ~(1 << brick)
        reward = 1
        state.ball_drow = -state.ball_drow
        row = state.ball_row
        if _brick_at(state.bricks, row, col) is not None:
            # Only one brick per step: bounce back into the cell the ball came from
            state.ball_dcol = -state.ball_dcol
            col = state.ball_col
    elif row == ROWS - 1:
        offset = col - state.paddle_col
        if 0 <= offset < BREAKOUT_PADDLE:
            state.ball_drow = -1
            if offset == 0:
                state.ball_dcol = -1
            elif offset == BREAKOUT_PADDLE - 1:
                state.ball_dcol = 1
            row = state.ball_row
        else:
            state.lives -= 1
            _hold_ball(state)
            state.terminal = state.lives <= 0
            return reward
    state.ball_row, state.ball_col = row, col
    state.terminal = state.bricks == 0
    return reward

def _court_half(side):
    '''Inclusive column range of the half a player on side owns'''
    return (NET_COL + 1, COLS - 1) if side > 0 else (0, NET_COL - 1)

def _baseline(side):
    return COLS - 1 if side > 0 else 0

def _step_court(state, action) -> int:
    low, high = _court_half(state.agent_side)
    if action == 1:
        state.paddle_row -= 1
    elif action == 2:
        state.paddle_row += 1
    elif action == 3:
        state.paddle_col -= 1
    elif action == 4:
        state.paddle_col += 1
    state.paddle_row = _clamp(state.paddle_row, 0, ROWS - COURT_PLAYER)
    state.paddle_col = _clamp(state.paddle_col, low, high)

    # Opponent reacts to where the ball was one step ago
    if state.lagged_ball_row < state.opponent_row:
        state.opponent_row -= 1
    elif state.lagged_ball_row > state.opponent_row + COURT_PLAYER - 1:
        state.opponent_row += 1
    state.opponent_row = _clamp(state.opponent_row, 0, ROWS - COURT_PLAYER)
    state.lagged_ball_row = state.ball_row

    row, col = _advance_rows(state)
    players = ((state.paddle_row, state.paddle_col, state.agent_side),
               (state.opponent_row, state.opponent_col, -state.agent_side))
    for player_row, player_col, side in players:
        if col == player_col and player_row <= row < player_row + COURT_PLAYER:
            state.ball_dcol = -side
            state.ball_drow = _english(row - player_row, COURT_PLAYER, state.ball_drow)
            col = state.ball_col
            break

    reward = 0
    if col == _baseline(-state.agent_side):
        state.agent_points += 1
        reward = 1
    elif col == _baseline(state.agent_side):
        state.opponent_points += 1
        reward = -1

    if reward:
        # Sides swap after every point
        state.agent_side = -state.agent_side
        state.paddle_col = COLS - 1 - state.paddle_col
        state.opponent_col = _baseline(-state.agent_side)
        _serve(state)
        state.lagged_ball_row = state.ball_row
    else:
        state.ball_row, state.ball_col = row, col

    target = state.spec.points_to_win
    state.terminal = state.agent_points >= target or state.opponent_points >= target
    return reward

DYNAMICS = {
    'mini-pong': _step_pong,
    'mini-breakout': _step_breakout,
    'mini-court': _step_court,
}

def step_in_place(state: EnvironmentState, action: int) -> StepResult:
    '''Advances state itself by one step'''
    if not 0 <= action < state.spec.action_count:
        raise ActionError(f'Action {action} is outside the action space of {state.spec.id} '
                          f'(0..{state.spec.action_count - 1}).')
    if state.terminal:
        raise ActionError(f'{state.spec.id} episode is over; reset before stepping.')
    reward = DYNAMICS[state.spec.id](state, int(action))
    state.steps += 1
    if state.steps >= state.spec.max_episode_steps:
        state.terminal = True
    previous, state.frame = state.frame, render(state)
    return StepResult(np.stack([previous, state.frame]), float(reward), state.terminal, state.info(), state)

def step(state: EnvironmentState, action: int) -> StepResult:
    '''Pure step: the given state is left untouched, the successor is in the result'''
    return step_in_place(state.copy(), action)


class Environment:
    '''Single-owner game instance stepped in place'''

    def __init__(self, spec: EnvironmentSpec, seed: int = 0):
        self.spec = spec
        self.reset(seed)

    def reset(self, seed: int) -> np.ndarray:
        self.state, self.observation = reset(self.spec, seed)
        return self.observation

    def step(self, action: int) -> StepResult:
        result = step_in_place(self.state, action)
        self.observation = result.observation
        return result


# RENDER

def render(state: EnvironmentState) -> np.ndarray:
    '''Binary 16x20 frame: paddles, players, ball, bricks and net are 1'''
    frame = np.zeros((ROWS, COLS), dtype=np.float64)
    game = state.spec.id
    if game == 'mini-pong':
        frame[state.paddle_row:state.paddle_row + PONG_PADDLE, COLS - 1] = 1.0
        frame[state.opponent_row:state.opponent_row + PONG_PADDLE, 0] = 1.0
        frame[state.ball_row, state.ball_col] = 1.0
    elif game == 'mini-breakout':
        for index in range(BRICK_ROWS * BRICKS_PER_ROW):
            if state.bricks >> index & 1:
                row = BRICK_TOP_ROW + index // BRICKS_PER_ROW
                col = (index % BRICKS_PER_ROW) * BRICK_WIDTH
                frame[row, col:col + BRICK_WIDTH] = 1.0
        frame[ROWS - 1, state.paddle_col:state.paddle_col + BREAKOUT_PADDLE] = 1.0
        if not state.ball_held:
            frame[state.ball_row, state.ball_col] = 1.0
    elif game == 'mini-court':
        frame[0:ROWS:2, NET_COL] = 1.0
        frame[state.paddle_row:state.paddle_row + COURT_PLAYER, state.paddle_col] = 1.0
        frame[state.opponent_row:state.opponent_row + COURT_PLAYER, state.opponent_col] = 1.0
        frame[state.ball_row, state.ball_col] = 1.0
    return frame


# GOLDEN TRAJECTORIES

GOLDEN_MAGIC = b'AADG'
GOLDEN_VERSION = 1
_GOLDEN_HEADER = struct.Struct('<4sI')
# action, reward, hash of the current frame
_GOLDEN_RECORD = struct.Struct('<BbQ')

def frame_hash(frame: np.ndarray) -> int:
    digest = hashlib.blake2b(np.asarray(frame, dtype=np.uint8).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, 'little')

def replay_trajectory(spec: EnvironmentSpec, seed: int, actions) -> list:
    '''(action, reward, frame hash) per step; finished episodes restart with seed + episode index'''
    env = Environment(spec, seed)
    episode = 0
    records = []
    for action in actions:
        result = env.step(int(action))
        records.append((int(action), int(result.reward), frame_hash(result.observation[-1])))
        if result.terminal:
            episode += 1
            env.reset(seed + episode)
    return records

def record_trajectory(spec: EnvironmentSpec, seed: int, steps: int = MAX_EPISODE_STEPS) -> list:
    '''Uniform-random play drawn from a generator seeded like the game'''
    rng = np.random.default_rng(seed)
    return replay_trajectory(spec, seed, (rng.integers(spec.action_count) for _ in range(steps)))

def write_golden(path, records):
    payload = b''.join(_GOLDEN_RECORD.pack(*record) for record in records)
    write_atomic(path, _GOLDEN_HEADER.pack(GOLDEN_MAGIC, GOLDEN_VERSION) + payload)

def read_golden(path) -> list:
    with open(path, 'rb') as file:
        data = file.read()
    if len(data) < _GOLDEN_HEADER.size:
        raise FormatError(f'{path}: truncated golden trajectory header.')
    magic, version = _GOLDEN_HEADER.unpack_from(data)
    if magic != GOLDEN_MAGIC:
        raise FormatError(f'{path}: bad magic {magic!r}, expected {GOLDEN_MAGIC!r}.')
    if version != GOLDEN_VERSION:
        raise FormatError(f'{path}: unsupported golden trajectory version {version}.')
    body = data[_GOLDEN_HEADER.size:]
    if len(body) % _GOLDEN_RECORD.size:
        raise FormatError(f'{path}: truncated golden trajectory record.')
    return [record for record in _GOLDEN_RECORD.iter_unpack(body)]

def verify_golden(path, spec: EnvironmentSpec, seed: int) -> bool:
    '''Replays the stored actions and compares rewards and frame hashes'''
    expected = read_golden(path)
    if any(action >= spec.action_count for action, _, _ in expected):
        return False
    return replay_trajectory(spec, seed, [action for action, _, _ in expected]) == expected
