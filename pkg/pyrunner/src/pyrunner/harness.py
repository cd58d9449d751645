"""Test-runner harness executed inside the grading sandbox.

Reads one JSON request from stdin:

    {"program": "...", "cases": [{"case_id", "expected",
      "function"? , "args"?, "stdin"?, "float_tol"?}, ...],
     "per_case_timeout_s": 5.0, "stdout_cap_bytes": 65536}

and emits exactly one JSON report line on stdout:

    {"per_case": [{"case_id", "passed", "observed", "expected", "error"}, ...],
     "error_trace": null, "timed_out": false}

Exit code 0 whenever a report was produced; 2 on unrecoverable harness
faults (diagnostics on stderr). Isolation and hard wall-clock limits are the
spawning side's job; this process only keeps case failures contained.
"""

from __future__ import annotations

import io
import json
import signal
import sys
from contextlib import redirect_stderr, redirect_stdout

DEFAULT_STDOUT_CAP = 65536


class _CaseTimeout(Exception):
    pass


def _on_alarm(signum, frame):
    raise _CaseTimeout()


def _normalize(text: str) -> str:
    """Trailing whitespace per line and surrounding blank lines are not
    significant for comparison."""
    return "\n".join(line.rstrip() for line in text.strip().splitlines())


def _exception_line(exc: BaseException) -> str:
    message = str(exc)
    name = type(exc).__name__
    return f"{name}: {message}" if message else name


def _limited(text: str, cap: int) -> str:
    return text if len(text) <= cap else text[:cap]


def _exec_program(program: str, module_name: str, stdin_text: str) -> tuple[dict, str]:
    """Run the program source in a fresh namespace with scripted stdin and
    captured output; returns (namespace, stdout text)."""
    env: dict = {"__name__": module_name}
    out = io.StringIO()
    old_stdin = sys.stdin
    sys.stdin = io.StringIO(stdin_text)
    try:
        with redirect_stdout(out), redirect_stderr(io.StringIO()):
            exec(compile(program, "<student>", "exec"), env)
    finally:
        sys.stdin = old_stdin
    return env, out.getvalue()


def _call_function(env: dict, name: str, args: list) -> tuple[object, str]:
    func = env.get(name)
    if not callable(func):
        raise NameError(f"function {name!r} is not defined")
    out = io.StringIO()
    with redirect_stdout(out), redirect_stderr(io.StringIO()):
        result = func(*args)
    return result, out.getvalue()


def _compare(observed: str, expected: str, float_tol) -> bool:
    if float_tol is not None:
        try:
            return abs(float(observed) - float(expected)) <= float_tol
        except (TypeError, ValueError):
            pass
    return _normalize(observed) == _normalize(expected)


def run_tests(request: dict) -> dict:
    program = request["program"]
    cases = request["cases"]
    timeout_s = float(request.get("per_case_timeout_s", 0) or 0)
    cap = int(request.get("stdout_cap_bytes", DEFAULT_STDOUT_CAP))

    # one interpreter load per submission when a case calls into it; a crashed
    # load fails the whole run. Pure script suites re-execute per case instead.
    env: dict = {}
    if any(case.get("function") is not None for case in cases):
        try:
            env, _ = _exec_program(program, "__student__", "")
        except BaseException as exc:  # noqa: BLE001  (student code may raise anything)
            return {"per_case": [], "error_trace": _exception_line(exc), "timed_out": False}

    per_case = []
    for case in cases:
        expected = str(case.get("expected", ""))
        observed = ""
        passed = False
        error = False
        if timeout_s > 0:
            signal.setitimer(signal.ITIMER_REAL, timeout_s)
        try:
            if case.get("function") is not None:
                result, printed = _call_function(env, case["function"], case.get("args") or [])
                # value-returning tasks compare the repr; print-style tasks
                # compare what they wrote
                observed = printed if result is None else repr(result)
            else:
                _, observed = _exec_program(program, "__main__", case.get("stdin") or "")
            observed = _limited(observed, cap)
            passed = _compare(observed, expected, case.get("float_tol"))
        except _CaseTimeout:
            observed = f"TimeoutError: case exceeded {timeout_s}s"
            error = True
        except BaseException as exc:  # noqa: BLE001
            observed = _limited(_exception_line(exc), cap)
            error = True
        finally:
            if timeout_s > 0:
                signal.setitimer(signal.ITIMER_REAL, 0)
        per_case.append(
            {
                "case_id": case.get("case_id", ""),
                "passed": passed,
                "observed": observed,
                "expected": expected,
                "error": error,
            }
        )
    return {"per_case": per_case, "error_trace": None, "timed_out": False}


def main() -> int:
    try:
        request = json.loads(sys.stdin.read())
        if "program" not in request or "cases" not in request:
            raise KeyError("request needs 'program' and 'cases'")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"harness fault: bad request: {exc}", file=sys.stderr)
        return 2
    if hasattr(signal, "SIGALRM"):
        signal.signal(signal.SIGALRM, _on_alarm)
    try:
        report = run_tests(request)
    except Exception as exc:  # harness bug, not a grading outcome
        print(f"harness fault: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(json.dumps(report) + "\n")
    sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
