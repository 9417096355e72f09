import os


def worker_count():
    """Worker threads allowed by ``MKGC_THREADS`` (default: available cores)."""
    raw = os.environ.get("MKGC_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
