import os

import hypothesis
import pytest

from rtcg import jit, ndarray

hypothesis.settings.register_profile(
    "default", deadline=None, max_examples=60)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session", autouse=True)
def _sandbox_default_cache(tmp_path_factory):
    """Point the default cache root into the test tmp tree, so code paths
    that fall back to it (operators, CLI without --cache-dir) stay sandboxed."""
    root = tmp_path_factory.mktemp("default-cache")
    old = os.environ.get("RTCG_CACHE_DIR")
    os.environ["RTCG_CACHE_DIR"] = str(root)
    yield
    if old is None:
        os.environ.pop("RTCG_CACHE_DIR", None)
    else:
        os.environ["RTCG_CACHE_DIR"] = old


@pytest.fixture(scope="session")
def toolchain():
    # fixed flags, not from_env: tests must not depend on ambient RTCG_CFLAGS
    return jit.ToolchainConfig()


@pytest.fixture()
def cache(tmp_path):
    """A fresh, empty compile cache."""
    return jit.CacheStore(tmp_path / "cache")


@pytest.fixture(scope="session")
def shared_cache(tmp_path_factory):
    """One compile cache for the whole session; kernels are content-addressed
    so tests can share it safely and skip recompiles."""
    return jit.CacheStore(tmp_path_factory.mktemp("shared-cache"))


@pytest.fixture()
def pool():
    return ndarray.MemoryPool()
