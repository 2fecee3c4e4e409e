import socket

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("gradax", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gradax")


@pytest.fixture
def free_port_base():
    """A base port with a handful of free ports after it (best effort)."""
    for _ in range(50):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            base = s.getsockname()[1]
        if base + 16 < 65535:
            ok = True
            for off in range(8):
                with socket.socket() as t:
                    try:
                        t.bind(("127.0.0.1", base + off))
                    except OSError:
                        ok = False
                        break
            if ok:
                return base
    pytest.skip("no free port range")
