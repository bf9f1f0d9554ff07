# modules/extensions.py
import os
from concurrent.futures import ThreadPoolExecutor

_WORKERS = min(8, os.cpu_count() or 1)

# Shared pool: batch evaluation, independent simulations, verification trials
executor = ThreadPoolExecutor(max_workers=_WORKERS)

# Per-step decoding only. Jobs on `executor` may wait on this pool, never the reverse.
step_executor = ThreadPoolExecutor(max_workers=_WORKERS, thread_name_prefix="painet-step")
