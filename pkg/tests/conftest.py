def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines after the run."""
    lines = [value for key in ("passed", "failed") for rep in terminalreporter.stats.get(key, [])
             for name, value in getattr(rep, "user_properties", ()) if name == "acceptance"]
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
