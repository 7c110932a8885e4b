"""
Isolated execution of generated physics scripts.

Each script is written to its own temporary directory and run with a minimal
environment, an empty working directory and a wall-clock timeout. A timed-out
script is killed together with every process it spawned.
"""
import logging
import os
import shlex
import shutil
import signal
import subprocess
import tempfile
import time
from pathlib import Path
from typing import List

from pydantic import BaseModel

from utils.errors import InterpreterMissing

logger = logging.getLogger(__name__)

ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "SYSTEMROOT")


class ScriptOutcome(BaseModel):
    exit_code: int
    timed_out: bool = False
    duration: float = 0.0
    stderr_tail: str = ""

    @property
    def succeeded(self) -> bool:
        return self.exit_code == 0 and not self.timed_out


def resolve_interpreter(interpreter_command: str) -> List[str]:
    """
    Split the interpreter command and check its binary is on PATH.

    Raises:
        InterpreterMissing: the command is empty or its binary cannot be found
    """
    argv = [interpreter_command] if os.path.isfile(interpreter_command) else shlex.split(interpreter_command)
    if not argv or shutil.which(argv[0]) is None:
        raise InterpreterMissing(f"interpreter {interpreter_command!r} not found")
    return argv


def _kill_process_tree(proc: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (AttributeError, ProcessLookupError, PermissionError, OSError):
        proc.kill()


def run_script(code: str, interpreter: List[str], args: List[str], timeout: float) -> ScriptOutcome:
    """Run `code` as `{interpreter} script.py {args}` inside a fresh scratch directory."""
    env = {k: os.environ[k] for k in ENV_ALLOWLIST if k in os.environ}
    with tempfile.TemporaryDirectory(prefix="dsgforge_script_") as scratch:
        script_dir = Path(scratch) / "src"
        work_dir = Path(scratch) / "work"
        script_dir.mkdir()
        work_dir.mkdir()
        script = script_dir / "model.py"
        script.write_text(code, encoding="utf-8")

        started = time.perf_counter()
        proc = subprocess.Popen(
            [*interpreter, str(script), *args],
            cwd=work_dir,
            env=env,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
        try:
            _, stderr = proc.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            _kill_process_tree(proc)
            proc.communicate()
            logger.warning(f"Script killed after {timeout:g} s timeout")
            return ScriptOutcome(exit_code=-1, timed_out=True, duration=time.perf_counter() - started)

        tail = stderr.decode("utf-8", errors="replace")[-500:]
        return ScriptOutcome(exit_code=proc.returncode, duration=time.perf_counter() - started, stderr_tail=tail)
