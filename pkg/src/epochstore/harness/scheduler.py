"""Deterministic cooperative scheduling of real threads.

Exactly one participant runs at a time.  At every yield point the running
thread asks a seeded RNG which participant goes next and hands over the
baton, so a run is reproducible from its seed.
"""

from __future__ import annotations

import random
import threading


class Aborted(BaseException):
    """Raised inside participants when the run is being torn down."""


class _Participant:
    __slots__ = ("name", "fn", "thread", "done", "critical", "runnable")

    def __init__(self, name, fn, runnable):
        self.name = name
        self.fn = fn
        self.thread = None
        self.done = False
        self.critical = False
        self.runnable = runnable


class CooperativeScheduler:

    def __init__(self, seed: int):
        self.rng = random.Random(seed)
        self._cv = threading.Condition()
        self._turn: str | None = None
        self._parts: dict[str, _Participant] = {}
        self._local = threading.local()
        self.steps = 0
        self.on_step = None          # called by the running thread at each yield
        self.error: BaseException | None = None
        self._abort = False

    def add(self, name: str, fn, runnable=None) -> None:
        """Register ``fn`` to run on its own thread; ``runnable()`` gates when it may be picked."""
        self._parts[name] = _Participant(name, fn, runnable)

    # -- state used by the picker ------------------------------------------
    def current(self) -> str | None:
        return getattr(self._local, "name", None)

    def set_critical(self, flag: bool) -> None:
        """Mark the running participant as holding structure locks."""
        self._parts[self.current()].critical = flag

    def workers_done(self, *exclude) -> bool:
        return all(p.done for n, p in self._parts.items() if n not in exclude)

    def _candidates(self, me: str, site: str) -> list[str]:
        live = [p for p in self._parts.values() if not p.done]
        crit = [p.name for p in live if p.critical]
        out = []
        for p in live:
            if crit and p.name not in crit and p.runnable is None:
                continue    # another worker holds locks; plain workers would block
            if p.runnable is not None and not p.runnable():
                continue
            out.append(p.name)
        if site == "wait_all" and len(out) > 1 and me in out:
            out.remove(me)
        return sorted(out)

    # -- baton passing -----------------------------------------------------
    def yield_(self, site: str = "") -> None:
        me = self.current()
        if me is None:
            return
        if self._abort:
            raise Aborted()
        self.steps += 1
        if self.on_step is not None:
            self.on_step(site)
        cands = self._candidates(me, site)
        if not cands:
            return
        nxt = self.rng.choice(cands)
        if nxt != me:
            self._handoff(me, nxt)

    def _handoff(self, me: str, nxt: str) -> None:
        with self._cv:
            self._turn = nxt
            self._cv.notify_all()
            while self._turn != me and not self._abort:
                self._cv.wait()
        if self._abort:
            raise Aborted()

    def _finish(self, me: str) -> None:
        with self._cv:
            self._parts[me].done = True
            cands = self._candidates(me, "exit")
            self._turn = self.rng.choice(cands) if cands else None
            self._cv.notify_all()

    def _body(self, p: _Participant) -> None:
        self._local.name = p.name
        with self._cv:
            while self._turn != p.name and not self._abort:
                self._cv.wait()
        try:
            if not self._abort:
                p.fn()
        except Aborted:
            pass
        except BaseException as exc:
            with self._cv:
                if self.error is None:
                    self.error = exc
                self._abort = True
                self._cv.notify_all()
        finally:
            self._finish(p.name)

    def run(self) -> None:
        """Run every participant to completion; re-raise the first failure."""
        for p in self._parts.values():
            p.thread = threading.Thread(target=self._body, args=(p,), name=f"sched-{p.name}",
                                        daemon=True)
            p.thread.start()
        with self._cv:
            names = sorted(n for n, p in self._parts.items()
                           if p.runnable is None or p.runnable())
            self._turn = self.rng.choice(names) if names else None
            self._cv.notify_all()
        for p in self._parts.values():
            p.thread.join()
        if self.error is not None:
            raise self.error
