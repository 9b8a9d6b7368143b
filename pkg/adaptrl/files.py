import os
import hashlib
from pathlib import Path


def path_is_writable(path) -> bool:
    path = Path(path)
    directory = path if path.is_dir() else path.parent
    return os.access(directory, os.W_OK)

def write_atomic(path, data):
    '''Writes bytes or str to a temporary sibling, then renames it over path'''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode('utf-8')
    tmp_path = path.with_name(f'.{path.name}.{os.getpid()}.tmp')
    try:
        with open(tmp_path, 'wb') as file:
            file.write(data)
            file.flush()
            os.fsync(file.fileno())
        os.replace(tmp_path, path)
    finally:
        if tmp_path.exists():
            tmp_path.unlink()

def file_hash(path) -> str:
    '''sha256 hex digest of a file's content'''
    digest = hashlib.sha256()
    with open(path, 'rb') as file:
        for chunk in iter(lambda: file.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
