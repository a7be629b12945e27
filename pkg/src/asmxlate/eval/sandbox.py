"""Compile a C program and run it under wall-clock and memory limits.

Every sample gets a fresh temporary directory. The compile command is a
template whose ``{src}`` and ``{out}`` placeholders are replaced verbatim with
the source and binary paths. The binary runs in its own session with no stdin.
Memory is measured as the process's resident high-water mark, polled while it
runs; it is killed as soon as that passes the limit. The kernel's exit-time
``ru_maxrss`` is not used because it still carries the forked parent's
footprint from before exec. A generous address-space rlimit (four times the
limit, at least 1 GiB over it) is only a backstop against runaway growth.
"""

from __future__ import annotations

import errno
import os
import resource
import shlex
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import psutil

DEFAULT_COMPILE = "gcc -O2 -o {out} {src}"
POLL_INTERVAL = 0.002


class SandboxUnavailable(RuntimeError):
    """The configured compiler cannot be found; nothing was scored."""


@dataclass(frozen=True)
class SandboxConfig:
    compile_command: str = DEFAULT_COMPILE
    time_limit: float = 5.0
    memory_limit: int = 256 * 1024 * 1024
    compile_timeout: float = 60.0

    def __post_init__(self):
        for placeholder in ("{src}", "{out}"):
            if placeholder not in self.compile_command:
                raise ValueError(f"compile command must contain {placeholder}")
        if self.time_limit <= 0 or self.memory_limit <= 0:
            raise ValueError("limits must be positive")

    def command(self, src: str, out: str) -> list[str]:
        return shlex.split(self.compile_command.replace("{src}", shlex.quote(src)).replace("{out}", shlex.quote(out)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExecResult:
    score: int
    stage: str | None = None  # compile | timeout | memory | crash | mismatch
    exit_code: int | None = None
    detail: str = ""


def compiler_path(cfg: SandboxConfig) -> str:
    exe = shlex.split(cfg.compile_command)[0]
    found = shutil.which(exe)
    if found is None:
        raise SandboxUnavailable(f"compiler {exe!r} not found on PATH")
    return found


def _limits(cfg: SandboxConfig):
    cpu = int(cfg.time_limit) + 2
    address_space = max(4 * cfg.memory_limit, cfg.memory_limit + (1 << 30))

    def apply():
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu))
        resource.setrlimit(resource.RLIMIT_AS, (address_space, address_space))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
        resource.setrlimit(resource.RLIMIT_FSIZE, (16 * 1024 * 1024,) * 2)

    return apply


def _kill(pid: int) -> None:
    try:
        os.killpg(pid, signal.SIGKILL)
    except ProcessLookupError:
        pass


def _peak_rss(ps: psutil.Process) -> int:
    """VmHWM of a live process in bytes (current RSS where /proc is unavailable); 0 once it has exited."""
    try:
        with open(f"/proc/{ps.pid}/status", "rb") as fh:
            for line in fh:
                if line.startswith(b"VmHWM:"):
                    return int(line.split()[1]) * 1024
        return 0
    except FileNotFoundError:
        pass
    try:
        return ps.memory_info().rss
    except psutil.Error:
        return 0


def _execute(binary: Path, cfg: SandboxConfig, workdir: Path) -> tuple[str | None, int | None, int, str]:
    """Returns (limit_stage, wait_status, peak_rss_bytes, detail)."""
    peak = 0
    with open(workdir / "stdout", "wb") as out, open(workdir / "stderr", "wb") as err:
        try:
            proc = subprocess.Popen([str(binary)], cwd=workdir, stdin=subprocess.DEVNULL, stdout=out, stderr=err,
                                    start_new_session=True, preexec_fn=_limits(cfg))
        except OSError as exc:
            if exc.errno in (errno.ENOMEM, errno.E2BIG):
                return "memory", None, 0, f"exec failed: {os.strerror(exc.errno)}"
            raise
    ps = psutil.Process(proc.pid)
    start = time.monotonic()
    killed_for = None
    while True:
        pid, status, _ = os.wait4(proc.pid, os.WNOHANG)
        if pid:
            proc.returncode = status  # reaped here; keep Popen from waiting again
            return killed_for, status, peak, ""
        if killed_for is None:
            if time.monotonic() - start > cfg.time_limit:
                killed_for = "timeout"
                _kill(proc.pid)
                continue
            peak = max(peak, _peak_rss(ps))
            if peak > cfg.memory_limit:
                killed_for = "memory"
                _kill(proc.pid)
                continue
        time.sleep(POLL_INTERVAL)


def reexecutability(src: str, sandbox: SandboxConfig = SandboxConfig(), expected: int | None = None) -> ExecResult:
    """1 when ``src`` compiles and runs to completion within the limits (and
    exits with ``expected`` when given), else 0 with the failing stage.

    Raises SandboxUnavailable when the compiler is missing.
    """
    compiler_path(sandbox)
    with tempfile.TemporaryDirectory(prefix="asmxlate-") as tmp:
        workdir = Path(tmp)
        src_path = workdir / "prog.c"
        bin_path = workdir / "prog"
        src_path.write_text(src, encoding="utf-8")
        try:
            comp = subprocess.run(sandbox.command(str(src_path), str(bin_path)), cwd=workdir, capture_output=True,
                                  timeout=sandbox.compile_timeout, stdin=subprocess.DEVNULL)
        except subprocess.TimeoutExpired:
            return ExecResult(0, "compile", None, "compiler timed out")
        except FileNotFoundError as exc:
            raise SandboxUnavailable(str(exc)) from exc
        if comp.returncode != 0 or not bin_path.exists():
            log = comp.stderr.decode("utf-8", "replace").replace(str(workdir), "<workdir>")
            return ExecResult(0, "compile", None, log[-2000:])

        killed_for, status, peak_rss, detail = _execute(bin_path, sandbox, workdir)
        if killed_for == "memory" or peak_rss > sandbox.memory_limit:
            return ExecResult(0, "memory", None, detail or f"resident set above {sandbox.memory_limit} bytes")
        if killed_for == "timeout":
            return ExecResult(0, "timeout", None, f"exceeded {sandbox.time_limit}s")
        if os.WIFSIGNALED(status):
            sig = os.WTERMSIG(status)
            if sig == signal.SIGXCPU:
                return ExecResult(0, "timeout", None, "CPU time limit")
            return ExecResult(0, "crash", None, f"killed by {signal.Signals(sig).name}")
        code = os.WEXITSTATUS(status)
        if expected is not None and code != expected:
            return ExecResult(0, "mismatch", code, f"exit code {code}, expected {expected}")
        return ExecResult(1, None, code, "")
