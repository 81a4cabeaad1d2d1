import json
import logging
import threading
from pathlib import Path
from queue import Queue

logger = logging.getLogger("dflat_metrics")

# Metrics records queue (shared with trainer)
metrics_queue = Queue(maxsize=20000)

# Signal for clean shutdown
STOP_SIGNAL = object()


def metrics_worker(path: Path):
    logger.info("Metrics writer started: %s", path)

    with open(path, "w", encoding="utf-8") as stream:
        while True:
            record = metrics_queue.get()

            if record is STOP_SIGNAL:
                metrics_queue.task_done()
                logger.info("Metrics writer stopping")
                break

            try:
                stream.write(json.dumps(record) + "\n")
                stream.flush()
            except Exception as e:
                logger.exception("Failed to write metrics record %s: %s", record, e)

            metrics_queue.task_done()


def start_metrics_worker(path: str | Path):
    """
    Spawns the metrics writer thread; records put on `metrics_queue` are written
    as JSON lines in queue order. Stop with stop_metrics_worker + join_metrics_worker.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    thread = threading.Thread(target=metrics_worker, args=(path,), daemon=True)
    thread.start()
    return thread


def stop_metrics_worker():
    metrics_queue.put(STOP_SIGNAL)


def join_metrics_worker(thread):
    thread.join()
