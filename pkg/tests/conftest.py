import socket
import threading

import pytest

from pgas_sim.config import RuntimeConfig
from pgas_sim.runtime import Runtime


@pytest.fixture
def make_runtime():
    """Factory for runtimes that are finalized at test teardown; the cost
    model defaults to off so correctness tests run at raw speed."""
    created = []

    def factory(**kwargs):
        kwargs.setdefault("time_scale", 0)
        runtime = Runtime(RuntimeConfig(**kwargs))
        created.append(runtime)
        return runtime

    yield factory
    for runtime in created:
        if not runtime.finalized:
            runtime.finalize()


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def make_node_pair():
    """Bring up a two-node world over loopback; returns (node_a, node_b)."""
    created = []

    def factory(npes_a=2, npes_b=2, **kwargs):
        kwargs.setdefault("time_scale", 0)
        endpoint = f"127.0.0.1:{free_port()}"
        out = {}
        errors = []

        def boot(role, npes):
            try:
                cfg = RuntimeConfig(npes=npes, internode_role=role,
                                    peer_endpoint=endpoint, **kwargs)
                out[role] = Runtime(cfg)
            except BaseException as exc:  # noqa: BLE001
                errors.append(exc)

        ta = threading.Thread(target=boot, args=("node_a", npes_a))
        tb = threading.Thread(target=boot, args=("node_b", npes_b))
        ta.start(); tb.start(); ta.join(); tb.join()
        if errors:
            for rt in out.values():
                rt.finalize()
            raise errors[0]
        created.extend(out.values())
        return out["node_a"], out["node_b"]

    yield factory
    for runtime in created:
        if not runtime.finalized:
            try:
                runtime.finalize()
            except Exception:
                pass
