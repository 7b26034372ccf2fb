import os
import subprocess
import sys

from avsr_temporal import kernels


def backend_in_subprocess(env_value):
    env = dict(os.environ)
    env.pop("AVSR_TEMPORAL_PURE_PYTHON", None)
    if env_value is not None:
        env["AVSR_TEMPORAL_PURE_PYTHON"] = env_value
    out = subprocess.run([sys.executable, "-c",
                          "from avsr_temporal import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_fallback_can_be_forced():
    assert backend_in_subprocess("1") == "python"


def test_default_backend_is_best_available():
    expected = "cython" if "cython" in kernels.backends() else "python"
    assert backend_in_subprocess(None) == expected


def test_known_distances():
    for impl in kernels.backends().values():
        assert impl([], []) == 0
        assert impl([1, 2, 3], []) == 3
        assert impl([], [4, 4]) == 2
        assert impl([1, 2, 3, 4], [2, 3, 4, 5]) == 2
        assert impl([5, 6], [6, 5]) == 2
