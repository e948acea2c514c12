"""Bounded producer/consumer queue of aligned random-crop training samples."""
import queue
import threading
from dataclasses import dataclass

import numpy as np

from .errors import PipelineError
from .volume_io import random_crop


@dataclass
class Sample:
    subject_id: str
    image: np.ndarray          # [1, d, h, w] float32
    labels: list               # one [d, h, w] int64 array per protocol
    offset: tuple


class EndOfData(Exception):
    """Raised by :meth:`SubjectQueue.next_batch` once finite epochs are exhausted."""


_END = object()


class SubjectQueue:
    """Shuffling crop queue fed by producer threads.

    Each producer walks its own seeded permutation of the subjects every epoch
    and pushes one random crop per subject. With ``n_producers=1`` the sample
    sequence is a pure function of ``seed``.
    """

    def __init__(self, subjects, protocols, crop_size, capacity=16, seed=0,
                 n_producers=1, epochs=None, timeout=60.0):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        if not subjects:
            raise PipelineError("no subjects to draw from")
        self.subjects = list(subjects)
        self.protocols = list(protocols)
        self.crop_size = tuple(int(c) for c in crop_size)
        self.capacity = capacity
        self.seed = seed
        self.n_producers = n_producers
        self.epochs = epochs
        self.timeout = timeout
        self._queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._threads = []
        self._finished = 0
        self._error = None

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()
        return False

    def start(self):
        if self._threads:
            return self
        for worker in range(self.n_producers):
            rng = np.random.default_rng([self.seed, worker])
            t = threading.Thread(target=self._produce, args=(rng,), daemon=True,
                                 name=f"neuronet-producer-{worker}")
            t.start()
            self._threads.append(t)
        return self

    def stop(self):
        self._stop.set()
        # unblock producers waiting on a full queue
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        for t in self._threads:
            t.join(timeout=5)
        self._threads = []

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self, rng):
        try:
            epoch = 0
            while not self._stop.is_set() and (self.epochs is None or epoch < self.epochs):
                for idx in rng.permutation(len(self.subjects)):
                    s = self.subjects[idx]
                    img, crops, offset = random_crop(
                        s.image, [s.labels[p] for p in self.protocols], self.crop_size, rng)
                    sample = Sample(s.id, np.ascontiguousarray(img, dtype=np.float32)[None],
                                    [np.ascontiguousarray(c) for c in crops], offset)
                    if not self._put(sample):
                        return
                epoch += 1
            self._put(_END)
        except Exception as exc:  # surfaced to the consumer
            self._error = exc
            self._put(_END)

    def qsize(self):
        return self._queue.qsize()

    def next_batch(self, timeout=None):
        """Next sample; raises EndOfData when every producer is exhausted."""
        if not self._threads:
            raise PipelineError("queue not started")
        timeout = self.timeout if timeout is None else timeout
        while True:
            try:
                item = self._queue.get(timeout=timeout)
            except queue.Empty:
                raise PipelineError(f"no sample arrived within {timeout:.1f}s (queue starved)") from None
            if item is _END:
                if self._error is not None:
                    raise PipelineError(f"producer failed: {self._error}") from self._error
                self._finished += 1
                if self._finished >= len(self._threads):
                    raise EndOfData()
                continue
            return item


def next_batch(handle, timeout=None):
    return handle.next_batch(timeout)
