from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Optional

import requests

from pushsum_fl.config import MNIST_BASE_URL, MNIST_FILES, USER_AGENT

logger = logging.getLogger(__name__)


class Downloader:
    """
    Single responsibility: fetch the four gzip IDX files of MNIST into a
    cache directory. Files already present are left alone.
    """

    def __init__(self, cache_dir: Path, base_url: str = MNIST_BASE_URL) -> None:
        self.cache_dir = cache_dir
        self.base_url = base_url if base_url.endswith("/") else base_url + "/"
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def fetch(self, name: str, timeout: int = 60) -> Path:
        out = self.cache_dir / name
        if out.exists() and out.stat().st_size > 0:
            logger.debug("cached: %s", out)
            return out

        r = requests.get(
            self.base_url + name,
            timeout=timeout,
            headers={"user-agent": USER_AGENT},
        )
        r.raise_for_status()

        tmp = out.with_suffix(out.suffix + ".part")
        tmp.write_bytes(r.content)
        tmp.replace(out)
        logger.info("downloaded %s (%d bytes)", name, len(r.content))
        return out

    def fetch_mnist(self, on_file: Optional[Callable[[Path], None]] = None) -> Path:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        for name in MNIST_FILES.values():
            path = self.fetch(name)
            if on_file is not None:
                on_file(path)
        return self.cache_dir

    @staticmethod
    def cleanup_partial(cache_dir: Path) -> None:
        if not cache_dir.exists():
            return
        for p in cache_dir.glob("*.part"):
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass
