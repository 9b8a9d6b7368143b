import os
from time import sleep
from pathlib import Path
from concurrent.futures import ProcessPoolExecutor

import psutil

from . import log
from .errors import AdaptError


class OutputLock:
    '''
    Keeps two pipelines from writing into the same output directory.
    A lock whose owner pid is gone is stale and gets taken over.
    '''

    def __init__(self, out_dir):
        self.path = Path(out_dir) / '.lock'

    def owner(self):
        try:
            return int(self.path.read_text().strip())
        except (FileNotFoundError, ValueError):
            return None

    def _create(self) -> bool:
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            return False
        with os.fdopen(fd, 'w') as file:
            file.write(str(os.getpid()))
        return True

    def acquire(self, attempts: int = 3):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(attempts):
            if self._create():
                return
            owner = self.owner()
            if owner is None:
                # created but the pid not written yet
                sleep(0.1)
                continue
            if psutil.pid_exists(owner):
                raise AdaptError(f'{self.path.parent} is in use by adaptrl process {owner}.')
            log.log_warning(f'Removing stale lock of pid {owner} in {self.path.parent}.')
            if self.owner() == owner:
                self.path.unlink(missing_ok=True)
        raise AdaptError(f'Could not lock {self.path.parent}; remove {self.path} if no pipeline is running.')

    def release(self):
        if self.owner() == os.getpid():
            self.path.unlink()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc_info):
        self.release()


def default_workers() -> int:
    '''Physical core count, at least 1'''
    return max(1, psutil.cpu_count(logical=False) or 1)

def run_trials(fn, seeds, workers: int = 1) -> list:
    '''fn(seed) for every seed; results in seed order whatever the completion order'''
    seeds = list(seeds)
    if workers <= 1 or len(seeds) <= 1:
        return [fn(seed) for seed in seeds]
    log.log_info(f'Running {len(seeds)} trials on {min(workers, len(seeds))} worker processes.')
    with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
        return list(pool.map(fn, seeds))
