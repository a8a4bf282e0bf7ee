"""Process execution: supervised jobs with walltime kills, and detachable
named sessions with a replayable output ring buffer.

Jobs run the job-script body under the system shell in non-aborting mode (a
failing line does not stop later lines), with the PBS_*/SLURM_* environment
injected and stdout/stderr routed per the job's output policy.  Sessions are
daemon-owned child processes that keep running while no client is attached;
their combined output is captured into a bounded ring so a later attach can
replay everything (up to capacity) before following the live stream.
"""

from __future__ import annotations

import os
import queue
import signal
import subprocess
import threading
from dataclasses import dataclass, field
from subprocess import Popen

from .errors import (
    DuplicateSession,
    InvalidCommand,
    NotAttached,
    SpawnFailed,
    UnknownSession,
)
from .jobspec import JobSpec, expand_output_template, job_environment, validate_job_name
from .sched import Allocation

GRACE_SECONDS = 2.0
DEFAULT_RING_CAPACITY = 1024 * 1024


def _signal_group(proc: Popen, signum: int) -> None:
    """Signal the process group (jobs/sessions start their own)."""
    if proc.poll() is not None:
        return
    try:
        os.killpg(proc.pid, signum)
    except (ProcessLookupError, PermissionError):
        pass


# --------------------------------------------------------------------- #
# supervised jobs
# --------------------------------------------------------------------- #

@dataclass
class RunningJob:
    job_id: int
    proc: Popen
    deadline: float
    stdout_path: str
    stderr_path: str | None  # None when stderr is merged into stdout
    term_sent_at: float | None = None


def output_paths(spec: JobSpec, job_id: int, submit_dir: str) -> tuple[str, str | None]:
    """Expanded sink paths; relative templates land in the submit directory."""

    def resolve(template: str) -> str:
        path = expand_output_template(template, job_id, spec.name)
        return path if os.path.isabs(path) else os.path.join(submit_dir, path)

    stdout_path = resolve(spec.output.stdout_template)
    stderr_path = None
    if not spec.output.merge_stderr:
        stderr_path = resolve(spec.output.stderr_template)
    return stdout_path, stderr_path


def launch_job(
    spec: JobSpec,
    allocation: Allocation,
    job_id: int,
    submit_dir: str,
    *,
    now: float,
    base_env: dict[str, str] | None = None,
) -> RunningJob:
    """Spawn the job body under /bin/sh with sinks opened before the process.

    The job's exit code is the shell's exit code (its last command); failing
    lines such as unavailable ``module load`` commands do not abort the rest.
    """
    del allocation  # slot bookkeeping lives in sched; execution is host-local
    script = "\n".join(spec.body) + "\n"
    env = dict(os.environ if base_env is None else base_env)
    env.update(job_environment(spec, job_id, submit_dir))

    stdout_path, stderr_path = output_paths(spec, job_id, submit_dir)
    try:
        stdout_file = open(stdout_path, "wb")
    except OSError as exc:
        raise SpawnFailed(f"cannot open stdout sink: {exc}") from exc
    if spec.output.merge_stderr:
        stderr_target = subprocess.STDOUT
        stderr_file = None
    else:
        try:
            stderr_file = open(stderr_path, "wb")
        except OSError as exc:
            stdout_file.close()
            raise SpawnFailed(f"cannot open stderr sink: {exc}") from exc
        stderr_target = stderr_file
    try:
        proc = Popen(
            ["/bin/sh", "-c", script],
            cwd=submit_dir,
            env=env,
            stdout=stdout_file,
            stderr=stderr_target,
            stdin=subprocess.DEVNULL,
            start_new_session=True,
        )
    except OSError as exc:
        raise SpawnFailed(str(exc)) from exc
    finally:
        stdout_file.close()
        if stderr_file is not None:
            stderr_file.close()

    return RunningJob(
        job_id=job_id,
        proc=proc,
        deadline=now + spec.walltime_s,
        stdout_path=stdout_path,
        stderr_path=stderr_path,
    )


def poll_walltime(
    jobs: list[RunningJob] | set[RunningJob],
    now: float,
    *,
    grace: float = GRACE_SECONDS,
) -> list[int]:
    """Enforce walltime deadlines; returns job ids newly timed out.

    A job strictly past its deadline gets a termination signal and is
    reported once; if it is still alive ``grace`` seconds later, it is
    hard-killed on a later poll.  A job using exactly its limit is spared.
    """
    timed_out: list[int] = []
    for job in jobs:
        if job.term_sent_at is None:
            if now > job.deadline and job.proc.poll() is None:
                _signal_group(job.proc, signal.SIGTERM)
                job.term_sent_at = now
                timed_out.append(job.job_id)
        elif job.proc.poll() is None and now > job.term_sent_at + grace:
            _signal_group(job.proc, signal.SIGKILL)
    return timed_out


def collect_exits(jobs: list[RunningJob]) -> list[tuple[int, int]]:
    """(job_id, exit_code) for jobs whose process has finished on its own."""
    finished = []
    for job in jobs:
        if job.term_sent_at is not None:
            continue  # already accounted as a timeout
        code = job.proc.poll()
        if code is not None:
            finished.append((job.job_id, code))
    return finished


# --------------------------------------------------------------------- #
# sessions
# --------------------------------------------------------------------- #

class RingBuffer:
    """Keeps the most recent <= capacity bytes; remembers if it ever dropped."""

    def __init__(self, capacity: int = DEFAULT_RING_CAPACITY):
        self.capacity = capacity
        self._data = bytearray()
        self.truncated = False

    def append(self, chunk: bytes) -> None:
        self._data.extend(chunk)
        overflow = len(self._data) - self.capacity
        if overflow > 0:
            del self._data[:overflow]
            self.truncated = True

    def snapshot(self) -> bytes:
        return bytes(self._data)

    def __len__(self) -> int:
        return len(self._data)


class StreamEnd:
    """Terminator delivered to attachments: reason is exit|killed|detached|lost."""

    __slots__ = ("reason",)

    def __init__(self, reason: str):
        self.reason = reason


class Attachment:
    """One client's view of a session: buffered replay, then live chunks."""

    def __init__(self, session_name: str, truncated: bool):
        self.session_name = session_name
        self.truncated = truncated
        self.end_reason: str | None = None
        self._queue: queue.SimpleQueue = queue.SimpleQueue()

    def _push(self, item: bytes | StreamEnd) -> None:
        self._queue.put(item)

    def read(self, timeout: float | None = None) -> bytes | None:
        """Next chunk, or None once the stream has ended.

        Raises queue.Empty on timeout.
        """
        if self.end_reason is not None:
            return None
        item = self._queue.get(timeout=timeout)
        if isinstance(item, StreamEnd):
            self.end_reason = item.reason
            return None
        return item

    def __iter__(self):
        while True:
            chunk = self.read()
            if chunk is None:
                return
            yield chunk


@dataclass
class Session:
    name: str
    command: tuple[str, ...]
    created_at: float
    proc: Popen | None = None
    ring: RingBuffer = field(default_factory=RingBuffer)
    live: bool = True
    lost: bool = False
    exit_code: int | None = None
    attachments: list[Attachment] = field(default_factory=list)

    @property
    def attached(self) -> int:
        return len(self.attachments)


class SessionRegistry:
    """Named detachable sessions; mutations serialized through one lock."""

    def __init__(self, *, cwd: str | None = None, ring_capacity: int = DEFAULT_RING_CAPACITY):
        self._cwd = cwd
        self._ring_capacity = ring_capacity
        self._lock = threading.Lock()
        self._sessions: dict[str, Session] = {}
        self._ended_unreported: list[str] = []

    def create(self, name: str, command: list[str], now: float) -> Session:
        """Spawn a session process immediately; sessions bypass the scheduler."""
        validate_job_name(name)
        if not command:
            raise InvalidCommand("session command must not be empty")
        with self._lock:
            existing = self._sessions.get(name)
            if existing is not None and existing.live:
                raise DuplicateSession(f"session {name!r} already exists")
            session = Session(
                name=name,
                command=tuple(command),
                created_at=now,
                ring=RingBuffer(self._ring_capacity),
            )
            try:
                session.proc = Popen(
                    command,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.STDOUT,
                    stdin=subprocess.DEVNULL,
                    cwd=self._cwd,
                    start_new_session=True,
                    bufsize=0,
                )
            except OSError as exc:
                raise SpawnFailed(str(exc)) from exc
            self._sessions[name] = session
        pump = threading.Thread(
            target=self._pump, args=(session,), name=f"session-{name}", daemon=True
        )
        pump.start()
        return session

    def _pump(self, session: Session) -> None:
        stream = session.proc.stdout
        while True:
            chunk = stream.read(65536)
            if not chunk:
                break
            with self._lock:
                session.ring.append(chunk)
                for attachment in session.attachments:
                    attachment._push(chunk)
        session.proc.wait()
        with self._lock:
            session.live = False
            session.exit_code = session.proc.returncode
            registered = self._sessions.get(session.name) is session
            reason = "exit" if registered else "killed"
            for attachment in session.attachments:
                attachment._push(StreamEnd(reason))
            session.attachments.clear()
            if registered:
                self._ended_unreported.append(session.name)

    def attach(self, name: str) -> Attachment:
        """Replay everything the ring holds, then follow the live stream."""
        with self._lock:
            session = self._sessions.get(name)
            if session is None or session.lost:
                raise UnknownSession(f"no session named {name!r}")
            attachment = Attachment(name, truncated=session.ring.truncated)
            replay = session.ring.snapshot()
            if replay:
                attachment._push(replay)
            if session.live:
                session.attachments.append(attachment)
            else:
                attachment._push(StreamEnd("exit"))
            return attachment

    def detach(self, name: str, attachment: Attachment) -> None:
        """Drop one client; the process and ring are untouched."""
        with self._lock:
            session = self._sessions.get(name)
            if session is None:
                raise UnknownSession(f"no session named {name!r}")
            try:
                session.attachments.remove(attachment)
            except ValueError:
                raise NotAttached(f"not attached to session {name!r}") from None
            attachment._push(StreamEnd("detached"))

    def rows(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "name": s.name,
                    "live": s.live,
                    "attached": s.attached,
                    "created_at": s.created_at,
                    "lost": s.lost,
                }
                for _, s in sorted(self._sessions.items())
            ]

    def get(self, name: str) -> Session | None:
        with self._lock:
            return self._sessions.get(name)

    def kill(self, name: str, *, grace: float = GRACE_SECONDS) -> None:
        """Terminate the process and drop the name; attached clients get what
        is already queued plus an end marker once the process dies."""
        with self._lock:
            session = self._sessions.pop(name, None)
            if session is None:
                raise UnknownSession(f"no session named {name!r}")
            if not session.live or session.proc is None:
                return
            proc = session.proc
        _signal_group(proc, signal.SIGTERM)

        def escalate():
            if proc.poll() is None:
                _signal_group(proc, signal.SIGKILL)

        timer = threading.Timer(grace, escalate)
        timer.daemon = True
        timer.start()

    def adopt_lost(self, name: str, created_at: float) -> None:
        """Register a tombstone for a session that did not survive a restart."""
        with self._lock:
            self._sessions[name] = Session(
                name=name,
                command=(),
                created_at=created_at,
                proc=None,
                live=False,
                lost=True,
            )

    def drain_ended(self) -> list[str]:
        """Names of sessions that ended on their own since the last call."""
        with self._lock:
            ended = self._ended_unreported
            self._ended_unreported = []
            return ended

    def shutdown(self) -> None:
        """Kill every live session process (daemon-owned children do not
        outlive the daemon)."""
        with self._lock:
            procs = [s.proc for s in self._sessions.values() if s.live and s.proc is not None]
        for proc in procs:
            _signal_group(proc, signal.SIGKILL)
