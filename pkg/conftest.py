"""
Pytest configuration for compsym tests
"""
import os

from hypothesis import settings

settings.register_profile("ci", max_examples=25, deadline=None)
settings.register_profile("dev", max_examples=50, deadline=None)


# Skip the full-scale traffic run in CI mode
def is_ci_mode():
    return os.environ.get("COMPSYM_CI_MODE", "false").lower() in ("true", "1", "yes", "y", "on")


settings.load_profile("ci" if is_ci_mode() else "dev")


def pytest_ignore_collect(collection_path):
    """Skip full-scale test files in CI mode"""
    if is_ci_mode() and "full_scale" in str(collection_path):
        return True
    return None
