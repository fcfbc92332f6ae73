"""Bounded thread pool for reading images ahead of extraction."""
import concurrent.futures
import threading


class ThreadPoolExecutor(concurrent.futures.ThreadPoolExecutor):
    """Extends `ThreadPoolExecutor` by limiting simultaneous work items."""

    def __init__(self, max_items, **kwargs):
        """Initialize a thread pool.

        :param max_items: maximum number of simultaneous work items.
            Calls to `.submit` will block if there are too many unprocessed
            items.
        :param kwargs: key-word arguments to `ThreadPoolExecutor`.
        """
        super().__init__(**kwargs)
        self.semaphore = threading.BoundedSemaphore(max_items)

    def submit(self, fn, *args, **kwargs):
        """Schedule a call, blocking while `max_items` are outstanding."""
        self.semaphore.acquire()
        future = super().submit(fn, *args, **kwargs)
        future.add_done_callback(lambda _: self.semaphore.release())
        return future


def prefetch(fn, items, threads=1, ahead=2):
    """Apply a function to items in background threads, in order.

    Exceptions are returned, not raised, so that one failing item does
    not stop the others.

    :param fn: function of one item.
    :param items: iterable of items.
    :param threads: worker threads.
    :param ahead: results computed ahead of the consumer.

    :returns: generator of (item, result or exception).
    """
    pending = []
    with ThreadPoolExecutor(ahead + 1, max_workers=threads) as pool:
        for item in items:
            pending.append((item, pool.submit(fn, item)))
            if len(pending) > ahead:
                yield _collect(*pending.pop(0))
        while pending:
            yield _collect(*pending.pop(0))


def _collect(item, future):
    try:
        return item, future.result()
    except Exception as e:
        return item, e
