"""Download and cache Matrix Market files from the SuiteSparse collection.

Archives live at ``<base>/MM/<group>/<name>.tar.gz``. The extracted ``.mtx``
is cached as ``<cache>/<group>/<name>.mtx`` and written atomically, so a
failed download never leaves a partial file behind.
"""

from __future__ import annotations

import io
import logging
import os
import tarfile
import urllib.error
import urllib.request
from pathlib import Path

__all__ = ["KNOWN_GROUPS", "UnknownMatrixError", "FetchError", "fetch_suitesparse", "suitesparse_path", "base_url"]

log = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://sparse.tamu.edu"

# matrices used by the experiments; anything else can be named "Group/name"
KNOWN_GROUPS = {
    "orani678": "HB",
    "bcspwr10": "HB",
}


class UnknownMatrixError(KeyError):
    def __str__(self):
        return f"unknown matrix {self.args[0]!r}; known: {sorted(KNOWN_GROUPS)} (or use 'Group/name')"


class FetchError(RuntimeError):
    pass


def base_url() -> str:
    return os.environ.get("MPEXP_SUITESPARSE_URL", DEFAULT_BASE_URL).rstrip("/")


def _cache_root(cache_dir) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    from .problems import default_cache_dir

    return default_cache_dir() / "suitesparse"


def _resolve(name: str):
    if "/" in name:
        group, _, short = name.partition("/")
        if not group or not short or "/" in short:
            raise UnknownMatrixError(name)
        return group, short
    try:
        return KNOWN_GROUPS[name], name
    except KeyError:
        raise UnknownMatrixError(name) from None


def suitesparse_path(name: str, cache_dir=None) -> Path:
    group, short = _resolve(name)
    return _cache_root(cache_dir) / group / f"{short}.mtx"


def _download(url: str, timeout: float) -> bytes:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise FetchError(f"could not download {url}: {exc}") from exc


def _extract_mtx(archive: bytes, short: str) -> bytes:
    try:
        with tarfile.open(fileobj=io.BytesIO(archive), mode="r:*") as tar:
            wanted = [m for m in tar.getmembers() if m.isfile() and Path(m.name).name == f"{short}.mtx"]
            if not wanted:
                raise FetchError(f"archive has no {short}.mtx")
            data = tar.extractfile(wanted[0]).read()
    except (tarfile.TarError, EOFError, OSError) as exc:
        raise FetchError(f"corrupt archive for {short}: {exc}") from exc
    if not data.startswith(b"%%MatrixMarket"):
        raise FetchError(f"{short}.mtx is not a Matrix Market file")
    return data


def fetch_suitesparse(name: str, cache_dir=None, timeout: float = 60.0):
    """Binary stream over the cached ``.mtx`` file, downloading it if needed."""
    path = ensure_cached(name, cache_dir, timeout)
    return open(path, "rb")


def ensure_cached(name: str, cache_dir=None, timeout: float = 60.0) -> Path:
    group, short = _resolve(name)
    path = suitesparse_path(name, cache_dir)
    if path.is_file():
        return path
    url = f"{base_url()}/MM/{group}/{short}.tar.gz"
    log.info("downloading %s", url)
    data = _extract_mtx(_download(url, timeout), short)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        tmp.unlink(missing_ok=True)
    return path
