#!/usr/bin/python3
"""Thread-safe memo storage for immutable, expensive artifacts.

Enumerated state spaces and perfect policies never change once built, so one
instance per process spec is kept and shared between threads.
"""

# Standard modules
import threading


class ArtifactStorage:
  """Build-once artifacts keyed on (kind, process id) tuples."""
  def __init__(self):
    self._artifacts = {}
    self._lock = threading.RLock()

  def __contains__(self, key):
    return key in self._artifacts

  def __len__(self):
    return len(self._artifacts)

  def Memoize(self, key, builder):
    """Returns the artifact for `key`, calling `builder()` once if it is absent.

    Arguments:
      @ key: hashable
        For example ('state_space', 'p1').
      @ builder: callable
        Zero argument callable producing the artifact. It runs under the
        storage lock, so concurrent callers never build the same artifact twice.
    """
    with self._lock:
      if key not in self._artifacts:
        self._artifacts[key] = builder()
      return self._artifacts[key]


ARTIFACTS = ArtifactStorage()
