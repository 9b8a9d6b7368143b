import sys
import platform
from time import time

import numpy
import scipy
import psutil

from .__init__ import __version__

DEBUG = '--debug' in sys.argv

# Variable string, None's will get filtered out
SYSTEM_INFO = ('\n'+' '*4).join(filter(None, (
    ' '*4+'System',
    f'OS:\t\t\t{platform.platform()}',
    f'adaptrl:\t\t{__version__} running on Python{platform.python_version()} with psutil{psutil.__version__}',
    f'Numerics:\t\tnumpy{numpy.__version__}, scipy{scipy.__version__}',
    f'Core configuration:\t{psutil.cpu_count(logical=False)}/{psutil.cpu_count()}',
    f'Memory:\t\t{psutil.virtual_memory().total / 2**30:.1f}GiB',
)))


def print_version():
    print(f'adaptrl {__version__}')

def training_status(env_id, update, frames, episodes, mean_score, parts) -> str:
    '''One-line progress summary of a training run'''
    score_repr = 'N/A' if mean_score is None else f'{mean_score:+.2f}'
    return '\t'.join([f'{env_id} update {update}',
                      f'frames {frames}',
                      f'games {episodes}',
                      f'ma100 score {score_repr}',
                      f"loss {parts['loss']:.4f} (pi {parts['policy']:.4f}, "
                      f"v {parts['value']:.4f}, H {parts['entropy']:.3f})"])

def adapt_status(epoch, row) -> str:
    return '\t'.join([f'epoch {epoch}',
                      f"ae {row['ae_loss']:.5f}",
                      f"critic {row['critic_loss']:+.5f}",
                      f"generator {row['gen_loss']:+.5f}",
                      f"alignment {row['alignment']:.4f}"])

def current_process():
    process = psutil.Process()
    process.cpu_percent()  # first call primes the counter
    return process

def read_process_cpu_mem(running_process):
    return running_process.cpu_percent(), running_process.memory_percent()

def debug_runtime_info(process, iteration_start):
    process_util, process_mem = read_process_cpu_mem(process)
    time_iter = (time() - iteration_start) * 1000  # ms
    print(f'Process resources: CPU {process_util:.2f}%, Memory {process_mem:.2f}%, Time {time_iter:.3f}ms')
