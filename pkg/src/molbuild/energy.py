"""Energy backends behind the reward.

Two implementations of :class:`EnergyBackend`:

* :class:`SurrogateBackend`: a deterministic pairwise Morse potential with
  analytic gradients (the default, used by every test).
* :class:`ExternalBackend`: a client for a child process speaking a
  line-oriented protocol over stdio. A request is an XYZ block followed by
  a line ``END``; the reply is one line, ``ENERGY <hartree>`` or
  ``ERROR <message>``.
"""
from __future__ import annotations

import json
import os
import queue
import shlex
import subprocess
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from importlib import resources
from itertools import combinations_with_replacement

import numpy as np

from molbuild import kernels
from molbuild.chem import SYMBOLS, Canvas, State, atomic_number_of
from molbuild.errors import (BackendError, BackendFailure, BackendProtocolError,
                             BackendTimeout, MissingPairParams)
from molbuild.xyz import format_xyz

BACKEND_ENV_VAR = "MOLBUILD_BACKEND_CMD"


class EnergyBackend(ABC):
    """Maps a canvas to an energy in Hartree. E(empty canvas) = 0."""

    supports_gradient = False

    @abstractmethod
    def evaluate(self, canvas: Canvas) -> float:
        ...

    def atomic_energy(self, element) -> float:
        z = element if isinstance(element, int) else atomic_number_of(str(element))
        return self.evaluate(Canvas([z], [[0.0, 0.0, 0.0]]))

    def energy_and_gradient(self, canvas: Canvas) -> tuple[float, np.ndarray]:
        raise NotImplementedError(f"{type(self).__name__} has no analytic gradient")

    def close(self) -> None:
        pass


@dataclass(frozen=True)
class MorseParams:
    """Symmetric per-element-pair Morse parameters, indexed by atomic number.

    Missing pairs hold NaN.
    """

    well_depth: np.ndarray
    width: np.ndarray
    r0: np.ndarray

    def __post_init__(self):
        for table in (self.well_depth, self.width, self.r0):
            known = ~np.isnan(table)
            if not np.array_equal(known, known.T) or not np.allclose(table[known], table.T[known]):
                raise ValueError("Morse parameter tables must be symmetric")
            if np.any(table[known] <= 0):
                raise ValueError("Morse parameters must be positive")
            table.flags.writeable = False

    @classmethod
    def from_dict(cls, data: dict) -> MorseParams:
        size = len(SYMBOLS) + 1
        tables = [np.full((size, size), np.nan) for _ in range(3)]
        radii = {atomic_number_of(s): r for s, r in data.get("covalent_radii", {}).items()}
        floor = float(data.get("min_equilibrium", 0.0))
        for key, entry in data["pairs"].items():
            a, b = (atomic_number_of(s) for s in key.split("-"))
            if "r0" in entry:
                r0 = float(entry["r0"])
            else:
                r0 = max(radii[a] + radii[b], floor)
            for t, value in zip(tables, (entry["well_depth"], entry["width"], r0)):
                t[a, b] = t[b, a] = float(value)
        return cls(*tables)

    @classmethod
    def default(cls) -> MorseParams:
        return _default_params()

    @classmethod
    def from_file(cls, path) -> MorseParams:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def has(self, z1: int, z2: int) -> bool:
        return not np.isnan(self.well_depth[z1, z2])

    def pair(self, e1, e2) -> tuple[float, float, float]:
        z1, z2 = (e if isinstance(e, int) else atomic_number_of(e) for e in (e1, e2))
        if not self.has(z1, z2):
            raise MissingPairParams(f"no Morse parameters for {SYMBOLS[z1 - 1]}-{SYMBOLS[z2 - 1]}")
        return float(self.well_depth[z1, z2]), float(self.width[z1, z2]), float(self.r0[z1, z2])

    def check(self, numbers) -> None:
        present = sorted(set(numbers))
        for z1, z2 in combinations_with_replacement(present, 2):
            if (z1 != z2 or list(numbers).count(z1) > 1) and not self.has(z1, z2):
                raise MissingPairParams(
                    f"no Morse parameters for {SYMBOLS[z1 - 1]}-{SYMBOLS[z2 - 1]}")


_DEFAULT = None


def _default_params() -> MorseParams:
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("molbuild.data").joinpath("morse.json").read_text()
        _DEFAULT = MorseParams.from_dict(json.loads(text))
    return _DEFAULT


def surrogate_energy(canvas: Canvas, params: MorseParams | None = None) -> float:
    """Sum over pairs of D_e * [(1 - exp(-a (r - r0)))^2 - 1]."""
    params = params or _default_params()
    if len(canvas) < 2:
        return 0.0
    params.check(canvas.numbers)
    return kernels.morse_energy(canvas.positions, canvas.numbers,
                                params.well_depth, params.width, params.r0)


def surrogate_energy_and_gradient(canvas: Canvas, params: MorseParams | None = None):
    params = params or _default_params()
    if len(canvas) < 2:
        return 0.0, np.zeros((len(canvas), 3))
    params.check(canvas.numbers)
    return kernels.morse_energy_grad(canvas.positions, canvas.numbers,
                                     params.well_depth, params.width, params.r0)


class SurrogateBackend(EnergyBackend):
    supports_gradient = True

    def __init__(self, params: MorseParams | None = None):
        self.params = params or MorseParams.default()

    def evaluate(self, canvas: Canvas) -> float:
        return surrogate_energy(canvas, self.params)

    def atomic_energy(self, element) -> float:
        return 0.0

    def energy_and_gradient(self, canvas: Canvas) -> tuple[float, np.ndarray]:
        return surrogate_energy_and_gradient(canvas, self.params)

    def positions_energy_and_gradient(self, numbers, positions):
        """Energy/gradient on raw arrays; callers run ``params.check`` once."""
        return kernels.morse_energy_grad(positions, numbers, self.params.well_depth,
                                         self.params.width, self.params.r0)


def canvas_key(canvas: Canvas) -> tuple:
    """Cache key: element sequence plus positions rounded to 1e-6 Angstrom."""
    rounded = np.round(canvas.positions, 6) + 0.0  # folds -0.0 into 0.0
    return canvas.numbers, rounded.tobytes()


class ExternalBackend(EnergyBackend):
    """Client for an external energy engine run as a child process.

    One request/response pair per evaluation over the child's stdin/stdout.
    Results are cached per canvas; the cache tolerates concurrent readers.
    """

    def __init__(self, command, timeout: float = 30.0, cache: bool = True):
        if isinstance(command, str):
            command = shlex.split(command)
        self.command = list(command)
        self.timeout = float(timeout)
        self._cache: dict | None = {} if cache else None
        self._cache_lock = threading.Lock()
        self._request_lock = threading.Lock()
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None

    @classmethod
    def from_env(cls, timeout: float = 30.0) -> ExternalBackend:
        command = os.environ.get(BACKEND_ENV_VAR)
        if not command:
            raise BackendFailure(f"{BACKEND_ENV_VAR} is not set")
        return cls(command, timeout=timeout)

    def _start(self) -> None:
        try:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          stderr=subprocess.DEVNULL, text=True, bufsize=1)
        except OSError as exc:
            raise BackendFailure(f"cannot start {self.command[0]!r}: {exc}") from exc
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()

    @staticmethod
    def _pump(proc, lines):
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def _stop(self) -> None:
        if self._proc is not None:
            if self._proc.poll() is None:
                self._proc.kill()
            self._proc.wait()
            self._proc = None

    def close(self) -> None:
        with self._request_lock:
            if self._proc is not None and self._proc.poll() is None:
                try:
                    self._proc.stdin.close()
                except OSError:
                    pass
            self._stop()

    def _request(self, canvas: Canvas) -> float:
        if self._proc is None or self._proc.poll() is not None:
            self._stop()
            self._start()
        try:
            self._proc.stdin.write(format_xyz(canvas) + "END\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            pass  # the exit status below explains what happened
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self._stop()
            raise BackendTimeout(f"no reply within {self.timeout:g} s") from None
        if line is None:
            code = self._proc.wait()
            self._proc = None
            if code != 0:
                raise BackendFailure(f"backend exited with status {code}")
            raise BackendProtocolError("backend closed its output without replying")
        fields = line.split(None, 1)
        if len(fields) == 2 and fields[0] == "ENERGY":
            try:
                value = float(fields[1])
            except ValueError:
                raise BackendProtocolError(f"malformed reply {line.strip()!r}") from None
            if not np.isfinite(value):
                raise BackendProtocolError(f"non-finite energy {line.strip()!r}")
            return value
        if fields and fields[0] == "ERROR":
            raise BackendFailure(f"backend error: {fields[1].strip() if len(fields) > 1 else ''}")
        raise BackendProtocolError(f"malformed reply {line.strip()!r}")

    def evaluate(self, canvas: Canvas) -> float:
        if len(canvas) == 0:
            return 0.0
        key = canvas_key(canvas) if self._cache is not None else None
        if key is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        with self._request_lock:
            value = self._request(canvas)
        if key is not None:
            with self._cache_lock:
                self._cache[key] = value
        return value

    def __del__(self):
        try:
            self._stop()
        except Exception:
            pass


def reward_delta_e(backend: EnergyBackend, state: State, next_canvas: Canvas, placed_element,
                   current_energy: float | None = None) -> float:
    """Negative energy change: -(E(next) - E(current) - E(atom)).

    ``current_energy`` may be passed to skip re-evaluating the current canvas.
    """
    z = placed_element if isinstance(placed_element, int) else atomic_number_of(str(placed_element))
    try:
        e_cur = backend.evaluate(state.canvas) if current_energy is None else current_energy
        e_next = backend.evaluate(next_canvas)
        e_atom = backend.atomic_energy(z)
    except BackendError:
        raise
    except (OSError, ValueError) as exc:
        raise BackendError(str(exc)) from exc
    return -(e_next - e_cur - e_atom)
