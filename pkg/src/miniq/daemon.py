"""The long-running server: owns cluster state and the session registry,
speaks the wire protocol, runs the scheduling tick loop, and persists a
crash-recoverable journal.

Concurrency model: every client connection runs in its own thread, but all
state mutations funnel through one lock, so the journal sequence and the job
ledger always agree.  State-changing requests are journaled before their
response is sent (write-ahead).
"""

from __future__ import annotations

import argparse
import hmac
import json
import os
import queue
import signal
import socket
import sys
import threading
import time
import traceback
from dataclasses import dataclass

from . import journal as journal_mod
from . import protocol
from .errors import (
    BindFailed,
    ConfigError,
    JournalCorrupt,
    MiniqError,
    ProtocolError,
    ScriptError,
)
from .jobspec import Dialect, parse_script
from .protocol import data_frame, end_frame, err, ok
from .runtime import (
    RunningJob,
    SessionRegistry,
    _signal_group,
    collect_exits,
    launch_job,
    poll_walltime,
)
from .sched import ClusterState, JobStatus, Node, Outcome, status_from_code

TOKEN_ENV_VAR = "MINIQ_TOKEN"

DEFAULT_TICK_INTERVAL_S = 0.2
MIN_TICK_INTERVAL_S = 0.01


@dataclass
class DaemonConfig:
    host: str
    port: int
    token: str
    nodes: list[Node]
    journal_path: str
    workdir_root: str
    tick_interval_s: float = DEFAULT_TICK_INTERVAL_S

    def __post_init__(self):
        if not self.token:
            raise ConfigError("auth token must not be empty (set it in the config or MINIQ_TOKEN)")
        if not self.nodes:
            raise ConfigError("at least one node must be configured")
        if self.tick_interval_s < MIN_TICK_INTERVAL_S:
            raise ConfigError(f"tick interval must be >= {MIN_TICK_INTERVAL_S} s")


def load_config(path: str) -> DaemonConfig:
    """Read the daemon configuration file (one JSON document).

    Relative journal/workdir paths resolve against the config file location;
    the token falls back to the MINIQ_TOKEN environment variable.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    base_dir = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    host, port = protocol.parse_address(doc.get("listen", "127.0.0.1"))
    nodes = []
    for spec in doc.get("nodes", []):
        nodes.append(
            Node(
                id=spec["id"],
                slots_total=int(spec["slots"]),
                features=frozenset(spec.get("features", ())),
            )
        )
    journal_path = doc.get("journal")
    if not journal_path:
        raise ConfigError("config needs a journal path")
    return DaemonConfig(
        host=host,
        port=port,
        token=doc.get("token") or os.environ.get(TOKEN_ENV_VAR, ""),
        nodes=nodes,
        journal_path=resolve(journal_path),
        workdir_root=resolve(doc.get("workdir", ".")),
        tick_interval_s=float(doc.get("tick_interval_s", DEFAULT_TICK_INTERVAL_S)),
    )


class Daemon:
    """One daemon instance; create, then ``start()`` (or ``run()`` to block)."""

    def __init__(self, config: DaemonConfig, *, clock=time.monotonic):
        self.config = config
        self._clock = clock
        self._mu = threading.Lock()
        self._stop = threading.Event()

        journal_dir = os.path.dirname(os.path.abspath(config.journal_path))
        os.makedirs(journal_dir, exist_ok=True)
        recovered = journal_mod.recover(config.journal_path, config.nodes)
        self.state: ClusterState = recovered.cluster
        self.journal = journal_mod.Journal.open(config.journal_path)
        self.sessions = SessionRegistry(cwd=config.workdir_root)
        for name, created_at in recovered.lost_sessions:
            self.sessions.adopt_lost(name, created_at)

        self._running: dict[int, RunningJob] = {}
        self._dying: list[RunningJob] = []
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self.bound_address: tuple[str, int] | None = None

    # ----- lifecycle -------------------------------------------------- #

    def start(self) -> None:
        os.makedirs(self.config.workdir_root, exist_ok=True)
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((self.config.host, self.config.port))
        except OSError as exc:
            listener.close()
            raise BindFailed(
                f"cannot bind {self.config.host}:{self.config.port}: {exc}"
            ) from exc
        listener.listen(32)
        self._listener = listener
        self.bound_address = listener.getsockname()[:2]

        for target, name in ((self._accept_loop, "miniqd-accept"), (self._tick_loop, "miniqd-tick")):
            thread = threading.Thread(target=target, name=name, daemon=True)
            thread.start()
            self._threads.append(thread)

    def run(self) -> None:
        """start(), then block until SIGTERM/SIGINT, then shut down."""
        self.start()

        def on_signal(signum, frame):
            self._stop.set()

        signal.signal(signal.SIGTERM, on_signal)
        signal.signal(signal.SIGINT, on_signal)
        self._stop.wait()
        self.shutdown()

    def shutdown(self) -> None:
        """Stop loops, kill child processes, drain the journal, release sockets."""
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._mu:
            procs = [rj.proc for rj in self._running.values()]
            procs += [rj.proc for rj in self._dying]
        for proc in procs:
            _signal_group(proc, signal.SIGKILL)
        self.sessions.shutdown()
        with self._mu:
            self.journal.close()

    # ----- scheduling loop -------------------------------------------- #

    def _tick_loop(self) -> None:
        while not self._stop.wait(self.config.tick_interval_s):
            try:
                self.tick_once(self._clock())
            except Exception:
                if self._stop.is_set():
                    return  # racing a shutdown; the journal may be closed
                traceback.print_exc()

    def tick_once(self, now: float) -> None:
        """Reap exits, enforce walltimes, journal session ends, start jobs."""
        with self._mu:
            active = list(self._running.values())
            for job_id, code in collect_exits(active):
                self.state.transition(job_id, Outcome.exit(code), now)
                self._journal_ended(job_id)
                del self._running[job_id]

            for job_id in poll_walltime(active, now):
                self.state.transition(job_id, Outcome.timeout(), now)
                self._journal_ended(job_id)
                self._dying.append(self._running.pop(job_id))
            poll_walltime(self._dying, now)  # escalate to SIGKILL after grace
            self._dying = [rj for rj in self._dying if rj.proc.poll() is None]

            for name in self.sessions.drain_ended():
                self.journal.append(
                    journal_mod.EVENT_SESSION_ENDED, {"name": name}, at=time.time()
                )

            for event in self.state.tick(now):
                rec = self.state.jobs[event.job_id]
                self.journal.append(
                    journal_mod.EVENT_STARTED,
                    {"job_id": event.job_id, "allocation": event.allocation},
                    at=time.time(),
                )
                try:
                    self._running[event.job_id] = launch_job(
                        rec.spec, event.allocation, event.job_id, rec.submit_dir, now=now
                    )
                except MiniqError as exc:
                    self.state.transition(event.job_id, Outcome.daemon_failure(str(exc)), now)
                    self._journal_ended(event.job_id)

    def _journal_ended(self, job_id: int) -> None:
        rec = self.state.jobs[job_id]
        self.journal.append(
            journal_mod.EVENT_ENDED,
            {
                "job_id": job_id,
                "state": rec.state.code,
                "exit_code": rec.exit_code,
                "reason": rec.reason,
            },
            at=time.time(),
        )

    # ----- request handling -------------------------------------------- #

    def handle_request(self, message: dict):
        """Dispatch one request; returns (response, attachment or None).

        The attachment is non-None only for a successful attach, which the
        connection then serves as a frame stream.
        """
        kind = message.get("type")
        handler = self._handlers.get(kind)
        if handler is None:
            return err("unknown-request", f"unknown request type {kind!r}"), None
        try:
            return handler(self, message)
        except MiniqError as exc:
            extra = {}
            if isinstance(exc, ScriptError) and exc.line_no is not None:
                extra["line"] = exc.line_no
            return err(exc.code, str(exc), **extra), None

    def _handle_submit(self, message: dict):
        script = message.get("script")
        submit_dir = message.get("submit_dir")
        if not isinstance(script, str) or not isinstance(submit_dir, str):
            return err("invalid-request", "submit needs script text and submit_dir"), None
        if not os.path.isabs(submit_dir):
            return err("invalid-request", "submit_dir must be an absolute path"), None
        dialect = None
        if message.get("dialect"):
            dialect = Dialect(message["dialect"])
        parsed = parse_script(
            script,
            dialect=dialect,
            default_name=message.get("script_name") or "job",
            strict=bool(message.get("strict", False)),
        )
        with self._mu:
            job_id = self.state.submit(parsed.spec, submit_dir, self._clock())
            self.journal.append(
                journal_mod.EVENT_SUBMITTED,
                {"job_id": job_id, "spec": parsed.spec.to_dict(), "submit_dir": submit_dir},
                at=time.time(),
            )
        return ok({"job_id": job_id, "warnings": parsed.warnings}), None

    def _handle_status(self, message: dict):
        states = None
        if message.get("state"):
            try:
                states = {status_from_code(message["state"])}
            except ValueError as exc:
                return err("invalid-request", str(exc)), None
        job_id = message.get("job_id")
        with self._mu:
            rows = self.state.snapshot(self._clock(), states=states, job_id=job_id)
        return ok({"rows": [row.to_dict() for row in rows]}), None

    def _handle_cancel(self, message: dict):
        job_id = message.get("job_id")
        if not isinstance(job_id, int):
            return err("invalid-request", "cancel needs a job_id"), None
        now = self._clock()
        with self._mu:
            rec = self.state.jobs.get(job_id)
            was_running = rec is not None and rec.state is JobStatus.RUNNING
            rec = self.state.transition(job_id, Outcome.cancel(), now)
            if was_running:
                running = self._running.pop(job_id, None)
                if running is not None:
                    _signal_group(running.proc, signal.SIGTERM)
                    running.term_sent_at = now
                    self._dying.append(running)
            self._journal_ended(job_id)
            return ok({"job_id": job_id, "state": rec.state.code}), None

    def _handle_session_create(self, message: dict):
        name = message.get("name")
        command = message.get("command")
        if not isinstance(name, str) or not isinstance(command, list):
            return err("invalid-request", "session_create needs a name and command list"), None
        with self._mu:
            self.sessions.create(name, command, self._clock())
            self.journal.append(
                journal_mod.EVENT_SESSION_CREATED, {"name": name}, at=time.time()
            )
        return ok({"name": name}), None

    def _handle_session_list(self, message: dict):
        return ok({"sessions": self.sessions.rows()}), None

    def _handle_session_kill(self, message: dict):
        name = message.get("name")
        if not isinstance(name, str):
            return err("invalid-request", "session_kill needs a name"), None
        with self._mu:
            self.sessions.kill(name)
            self.journal.append(
                journal_mod.EVENT_SESSION_ENDED, {"name": name}, at=time.time()
            )
        return ok({"name": name}), None

    def _handle_attach(self, message: dict):
        name = message.get("name")
        if not isinstance(name, str):
            return err("invalid-request", "attach needs a session name"), None
        attachment = self.sessions.attach(name)
        return ok({"name": name, "truncated": attachment.truncated}), attachment

    _handlers = {
        "submit": _handle_submit,
        "status": _handle_status,
        "cancel": _handle_cancel,
        "session_create": _handle_session_create,
        "session_list": _handle_session_list,
        "session_kill": _handle_session_kill,
        "attach": _handle_attach,
    }

    # ----- connections --------------------------------------------------- #

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return  # listener closed during shutdown
            thread = threading.Thread(
                target=self._serve_connection, args=(sock,), daemon=True
            )
            thread.start()

    def _serve_connection(self, sock: socket.socket) -> None:
        reader = sock.makefile("rb")
        try:
            if not self._authenticate(sock, reader):
                return
            while not self._stop.is_set():
                try:
                    message = protocol.read_message(reader)
                except ProtocolError as exc:
                    protocol.send_message(sock, err(exc.code, str(exc)))
                    return
                if message is None:
                    return
                if message.get("type") == "detach":
                    # Only meaningful while this connection streams an attach;
                    # handled inside _stream_attachment.
                    protocol.send_message(sock, err("not-attached", "no attach on this connection"))
                    continue
                response, attachment = self.handle_request(message)
                protocol.send_message(sock, response)
                if attachment is not None:
                    self._stream_attachment(sock, reader, message["name"], attachment)
                    return  # attach consumes the rest of the connection
        except (OSError, ValueError):
            pass  # client went away mid-conversation
        finally:
            try:
                reader.close()
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass

    def _authenticate(self, sock: socket.socket, reader) -> bool:
        """First message on a connection must present the shared token."""
        try:
            message = protocol.read_message(reader)
        except ProtocolError as exc:
            protocol.send_message(sock, err(exc.code, str(exc)))
            return False
        if message is None:
            return False
        token = message.get("token", "") if message.get("type") == "auth" else ""
        if not (isinstance(token, str) and token
                and hmac.compare_digest(token, self.config.token)):
            protocol.send_message(sock, err("auth-failed", "bad or missing token"))
            return False
        protocol.send_message(sock, ok({"server": "miniqd"}))
        return True

    def _stream_attachment(self, sock, reader, name: str, attachment) -> None:
        """Forward session output as data frames until the stream ends.

        A reader thread watches the same connection for a detach request (or
        client disconnect) and unsubscribes, which terminates the stream.
        """

        def watch_for_detach():
            while True:
                try:
                    message = protocol.read_message(reader)
                except (ProtocolError, OSError, ValueError):
                    message = None
                if message is None or message.get("type") == "detach":
                    try:
                        self.sessions.detach(name, attachment)
                    except MiniqError:
                        pass  # stream already ended
                    return

        watcher = threading.Thread(target=watch_for_detach, daemon=True)
        watcher.start()
        try:
            while True:
                try:
                    chunk = attachment.read(timeout=0.5)
                except queue.Empty:
                    if self._stop.is_set():
                        return
                    continue
                if chunk is None:
                    protocol.send_message(sock, end_frame(attachment.end_reason or "exit"))
                    return
                protocol.send_message(sock, data_frame(chunk))
        except OSError:
            try:
                self.sessions.detach(name, attachment)
            except MiniqError:
                pass


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="miniqd", description="miniq batch daemon")
    parser.add_argument("--config", required=True, help="path to the daemon config file (JSON)")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        daemon = Daemon(config)
        daemon.start()
    except (ConfigError, BindFailed, JournalCorrupt) as exc:
        print(f"miniqd: {exc}", file=sys.stderr)
        return 1
    host, port = daemon.bound_address
    print(f"miniqd listening on {host}:{port}", flush=True)

    def on_signal(signum, frame):
        daemon._stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    daemon._stop.wait()
    daemon.shutdown()
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
