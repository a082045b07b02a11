import time

SUITE_LIMIT = 300.0
_start = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    # second half of the determinism criterion: the whole suite within the limit
    elapsed = time.perf_counter() - _start
    ok = elapsed < SUITE_LIMIT
    tr = session.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None and session.testscollected > 1:
        tr.write_line(f"[criterion 11] {'PASS' if ok else 'FAIL'}: full suite ran in {elapsed:.1f} s "
                      f"(< {SUITE_LIMIT:.0f} s)")
    if not ok and session.exitstatus == 0:
        session.exitstatus = 1
