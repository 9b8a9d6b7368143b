import sys
from pathlib import Path

VERBOSE = '--verbose' in sys.argv

# Run log of the pipeline currently writing, if any
LOGFILE = None

def set_logfile(path):
    global LOGFILE
    LOGFILE = None if path is None else Path(path)

def _append(message):
    if LOGFILE is not None:
        with open(LOGFILE, 'a', encoding='utf-8') as file:
            file.write(message + '\n')

def log_error(message, code=1):
    message = '[ERROR] ' + message
    print(message, flush=True)
    _append(message)
    sys.exit(code)

def log_warning(message):
    message = 'Warning: ' + message
    print(message, flush=True)
    _append(message)

def log_info(message):
    message = 'Info: ' + message
    _append(message)
    if VERBOSE:
        print(message, flush=True)

def print_log(out_dir):
    logfile = Path(out_dir) / 'run.log'
    if logfile.exists():
        print(logfile.read_text(encoding='utf-8'), end='')
    else:
        log_error(f'No run log found in {out_dir}. Run "adaptrl pipeline --out {out_dir}" first.')
