"""
The code-execution service under fire
=====================================

Boot the HTTP sandbox in-process, then throw well-behaved and hostile
payloads at it: the service classifies each outcome and keeps running.
"""

from ztir.sandbox.client import ExecClient
from ztir.sandbox.service import SandboxService, ServiceConfig
from ztir.sandbox.types import ExecRequest

service = SandboxService(ServiceConfig(bind_port=0, pool_size=4))
service.start()
client = ExecClient(service.url)
print(f"service listening at {service.url}")
print()

# A tour of the verdict space.  Timeouts and memory bombs are contained by
# the per-request limits; a plain exception is just a failed program.
payloads = [
    ("hello", ExecRequest(code="print('hello from the sandbox')")),
    ("failure", ExecRequest(code="1/0")),
    ("spin", ExecRequest(code="while True: pass", timeout_ms=800)),
    ("hog", ExecRequest(code="x = bytearray(2 * 1024**3)", memory_limit_mb=128)),
    ("flood", ExecRequest(code="print('y' * 10_000_000)", stdout_limit_bytes=512)),
]
for name, request in payloads:
    result = client.execute(request)
    stream = result.stdout if result.exit_status == 0 else result.stderr
    summary = stream.strip().splitlines()[-1][:60] if stream.strip() else ""
    print(f"{name:8s} verdict={result.verdict.value:14s} "
          f"exit={result.exit_status:4d} truncated={result.truncated} {summary}")

print()
print(f"health after the abuse: {client.healthz()}")
service.stop()
