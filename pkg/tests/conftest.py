import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
import uvicorn

from teskit.config import ServiceConfig, WorkerConfig
from teskit.server import build_app


class LiveServer:
    """A uvicorn server on an ephemeral port, run in a daemon thread."""

    def __init__(self, app):
        self.server = uvicorn.Server(
            uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
        )
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        deadline = time.monotonic() + 15
        while not self.server.started:
            if time.monotonic() > deadline or not self.thread.is_alive():
                raise RuntimeError("uvicorn did not start")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc_info):
        self.server.should_exit = True
        self.thread.join(timeout=15)

    @property
    def url(self) -> str:
        port = self.server.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"


def make_service_config(tmp_path, **overrides) -> ServiceConfig:
    worker = overrides.pop(
        "worker",
        WorkerConfig(sandbox_dir=str(tmp_path / "sandboxes"), poll_interval_s=0.05),
    )
    return ServiceConfig(worker=worker, **overrides)


@pytest.fixture
def live_server(tmp_path):
    app = build_app(make_service_config(tmp_path))
    with LiveServer(app) as server:
        yield server, app


class _StorageHandler(BaseHTTPRequestHandler):
    """Dict-backed object store over HTTP, for staging tests.

    Paths under /flaky/ return 500 until their per-path failure budget is
    spent; PUTs under /forbidden/ are refused with 403.
    """

    def log_message(self, *args):
        pass

    def do_GET(self):
        server = self.server
        remaining = server.flaky_failures.get(self.path, 0)
        if remaining > 0:
            server.flaky_failures[self.path] = remaining - 1
            self.send_response(500)
            self.end_headers()
            return
        data = server.objects.get(self.path)
        if data is None:
            self.send_response(404)
            self.end_headers()
            return
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_PUT(self):
        if self.path.startswith("/forbidden/"):
            self.send_response(403)
            self.end_headers()
            return
        length = int(self.headers.get("Content-Length", 0))
        self.server.objects[self.path] = self.rfile.read(length)
        self.send_response(201)
        self.end_headers()


class StorageServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self):
        super().__init__(("127.0.0.1", 0), _StorageHandler)
        self.objects: dict[str, bytes] = {}
        self.flaky_failures: dict[str, int] = {}

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.server_address[1]}"


@pytest.fixture
def http_storage():
    server = StorageServer()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()


@pytest.fixture
def https_storage(tmp_path_factory):
    """Same dict-backed store, behind TLS with a throwaway self-signed cert."""
    import datetime
    import ipaddress
    import ssl

    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import rsa
    from cryptography.x509.oid import NameOID

    key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "127.0.0.1")])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(days=1))
        .not_valid_after(now + datetime.timedelta(days=1))
        .add_extension(
            x509.SubjectAlternativeName([x509.IPAddress(ipaddress.IPv4Address("127.0.0.1"))]),
            critical=False,
        )
        .sign(key, hashes.SHA256())
    )
    tls_dir = tmp_path_factory.mktemp("tls")
    cert_path = tls_dir / "cert.pem"
    key_path = tls_dir / "key.pem"
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.TraditionalOpenSSL,
            serialization.NoEncryption(),
        )
    )

    server = StorageServer()
    context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    context.load_cert_chain(str(cert_path), str(key_path))
    server.socket = context.wrap_socket(server.socket, server_side=True)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
