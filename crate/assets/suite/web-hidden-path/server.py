import os
import socketserver
from http.server import BaseHTTPRequestHandler

SOCKET = "web.sock"

with open("flag.txt") as f:
    FLAG = f.read().strip()

PAGES = {
    "/": "<html><body><h1>Under construction</h1></body></html>\n",
    "/robots.txt": "User-agent: *\nDisallow: /s3cr3t-admin/\n",
    "/s3cr3t-admin/": "<html><body>admin console: " + FLAG + "</body></html>\n",
}


class Handler(BaseHTTPRequestHandler):
    def do_GET(self):
        body = PAGES.get(self.path)
        status = 200 if body is not None else 404
        data = (body or "not found\n").encode()
        self.send_response(status)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def address_string(self):
        return "unix"

    def log_message(self, fmt, *args):
        pass


class Server(socketserver.UnixStreamServer):
    def get_request(self):
        conn, _ = super().get_request()
        return conn, ("unix", 0)


if os.path.exists(SOCKET):
    os.unlink(SOCKET)
with Server(SOCKET, Handler) as srv:
    srv.serve_forever()
