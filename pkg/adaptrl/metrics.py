'''
Learning-curve records, moving averages, cross-trial aggregation and CSV export.
'''
from collections import deque, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AdaptError, FormatError
from .files import write_atomic

SERIES = ('score_vs_batches', 'score_vs_games', 'ep_frames_ma100')
MOVING_AVERAGE_WINDOW = 100


@dataclass(frozen=True)
class CurveRecord:
    trial: int
    series: str
    x: int
    y: float


@dataclass
class AggregateCurve:
    series: str
    x: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    trials: int

    def __len__(self):
        return len(self.x)


class History(deque):
    def __init__(self, maxlen=MOVING_AVERAGE_WINDOW):
        super().__init__(maxlen=maxlen)

    def update(self, value):
        '''Stream value into deque'''
        if self.__len__() == self.maxlen:
            _ = self.popleft()
            self.append(value)
        else:
            self.append(value)

    def mean(self):
        '''Left-to-right sum over the window divided by its length'''
        if self.__len__():
            return sum(self) / self.__len__()
        else:
            return None


def moving_average(values, window: int = MOVING_AVERAGE_WINDOW) -> list:
    '''output[i] = mean(values[max(0, i - window + 1) .. i]); the first entries use the available prefix'''
    if window < 1:
        raise ValueError(f'moving average window must be at least 1, got {window}')
    history = History(maxlen=window)
    averages = []
    for value in values:
        history.update(float(value))
        averages.append(history.mean())
    return averages


def group(records) -> dict:
    '''{series: {trial: [records in emission order]}}'''
    grouped = defaultdict(lambda: defaultdict(list))
    for record in records:
        grouped[record.series][record.trial].append(record)
    return grouped

def _locf(points, grid):
    '''Last observation carried forward: value of the last point with x <= grid x'''
    xs = np.array([x for x, _ in points])
    ys = np.array([y for _, y in points])
    index = np.searchsorted(xs, grid, side='right') - 1
    return ys[index]

def aggregate(records, trials=None, series=SERIES) -> dict:
    '''
    Aligns each series across trials on the union of their x values (from the point
    every trial has data) with LOCF, then takes mean and population std.
    '''
    grouped = group(records)
    present = sorted({record.trial for record in records})
    trials = present if trials is None else sorted(trials)
    missing = sorted(set(trials) - set(present))
    if missing:
        raise AdaptError(f'Cannot aggregate: no records for trial(s) {missing}.')
    curves = {}
    for name in series:
        by_trial = grouped.get(name, {})
        if not by_trial:
            empty = np.array([])
            curves[name] = AggregateCurve(name, empty.astype(np.int64), empty, empty, len(trials))
            continue
        lacking = [trial for trial in trials if trial not in by_trial]
        if lacking:
            raise AdaptError(f'Cannot aggregate {name}: no records for trial(s) {lacking}.')
        points = {trial: sorted(((r.x, r.y) for r in by_trial[trial]), key=lambda point: point[0])
                  for trial in trials}
        start = max(trial_points[0][0] for trial_points in points.values())
        grid = np.array(sorted({x for trial_points in points.values() for x, _ in trial_points if x >= start}),
                        dtype=np.int64)
        values = np.stack([_locf(points[trial], grid) for trial in trials])
        curves[name] = AggregateCurve(name, grid, values.mean(axis=0), values.std(axis=0), len(trials))
    return curves


# CSV

def _format(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))

def _csv(header, rows) -> str:
    lines = [','.join(header)] + [','.join(_format(value) for value in row) for row in rows]
    return '\n'.join(lines) + '\n'

def export(curves: dict, directory) -> list:
    '''One x,mean,std CSV per series; returns the written paths'''
    directory = Path(directory)
    paths = []
    for name, curve in curves.items():
        path = directory / f'{name}.csv'
        rows = zip(curve.x.tolist(), curve.mean.tolist(), curve.std.tolist())
        write_atomic(path, _csv(('x', 'mean', 'std'), rows))
        paths.append(path)
    return paths

def export_trial(records, directory, series=SERIES) -> list:
    '''One x,y CSV per series for a single trial's records'''
    directory = Path(directory)
    grouped = group(records)
    paths = []
    for name in series:
        rows = [(record.x, record.y) for trial in sorted(grouped.get(name, {}))
                for record in grouped[name][trial]]
        path = directory / f'{name}.csv'
        write_atomic(path, _csv(('x', 'y'), rows))
        paths.append(path)
    return paths

def read_csv(path) -> tuple:
    '''(header, rows); the x column is parsed as int, the others as float'''
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    if not lines:
        raise FormatError(f'{path}: empty CSV file, expected a header.')
    header = lines[0].split(',')
    rows = []
    for line in lines[1:]:
        fields = line.split(',')
        if len(fields) != len(header):
            raise FormatError(f'{path}: row "{line}" has {len(fields)} fields, header has {len(header)}.')
        rows.append((int(fields[0]),) + tuple(float(field) for field in fields[1:]))
    return header, rows

def read_trial_records(directory, trial: int, series=SERIES) -> list:
    records = []
    for name in series:
        _, rows = read_csv(Path(directory) / f'{name}.csv')
        records.extend(CurveRecord(trial, name, x, y) for x, y in rows)
    return records


# Transfer summary

@dataclass
class TrialSummary:
    trial: int
    frames_to_threshold: int
    peak_episode_frames: float
    final_score: float

def frames_to_threshold(records, threshold: float, window: int = MOVING_AVERAGE_WINDOW,
                        frames_per_batch: int = 80):
    '''Frames consumed when the moving-average score of score_vs_batches first reaches threshold, or None'''
    points = [(record.x, record.y) for record in records if record.series == 'score_vs_batches']
    averages = moving_average([y for _, y in points], window)
    for (batch, _), average in zip(points, averages):
        if average >= threshold:
            return batch * frames_per_batch
    return None

def summarize_trial(records, trial: int, threshold: float, window: int = MOVING_AVERAGE_WINDOW,
                    frames_per_batch: int = 80) -> TrialSummary:
    records = [record for record in records if record.trial == trial]
    scores = [record.y for record in records if record.series == 'score_vs_games']
    lengths = [record.y for record in records if record.series == 'ep_frames_ma100']
    averages = moving_average(scores, window)
    return TrialSummary(trial,
                        frames_to_threshold(records, threshold, window, frames_per_batch),
                        max(lengths) if lengths else float('nan'),
                        averages[-1] if averages else float('nan'))

def median_or_none(values):
    '''Median treating None (never reached) as larger than any number'''
    ordered = sorted(values, key=lambda v: (v is None, v if v is not None else 0))
    if not ordered:
        return None
    middle = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[middle]
    low, high = ordered[middle - 1], ordered[middle]
    if low is None or high is None:
        return None
    return (low + high) / 2
