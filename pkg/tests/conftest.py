import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class ScriptedServer:
    """Local HTTP server answering POSTs from a list of ``(status, body)`` pairs.

    The last entry repeats once the script runs out. Received bodies are kept.
    """

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        self.headers = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                server.requests.append(body)
                server.headers.append(dict(self.headers))
                i = min(len(server.requests) - 1, len(server.script) - 1)
                status, payload = server.script[i]
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/assess"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def attempts(self) -> int:
        return len(self.requests)

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def scripted_server():
    servers = []

    def start(script):
        s = ScriptedServer(script)
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.close()


# acceptance criteria: tests marked ``criterion(number, title)`` get a pass/fail
# line in the terminal summary; ``record_property("detail", ...)`` adds context
_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or report.failed):
        number, title = marker.args
        detail = dict(item.user_properties).get("detail", "")
        results = item.config.stash[_CRITERIA]
        if report.when == "call" or number not in results:
            results[number] = (title, "PASS" if report.passed else "FAIL", detail)
    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, outcome, detail = results[number]
        line = f"criterion {number:2d} {outcome}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
    passed = sum(r[1] == "PASS" for r in results.values())
    terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")
