"""Ground-air collaborative perception workbench.

The compiled extension carries the main operations: rotated 3D IoU, convex
polygon clipping, pose transforms, average precision, synthetic scenario
generation, config validation, and the gradcheck/selftest suites.
"""

import os
import sys


def _load_core():
    try:
        from . import _core  # packaged install (scikit-build-core wheel)
        return _core
    except ImportError:
        pass
    # development fallback: locate the CMake-built extension
    candidates = [
        os.environ.get("AIRCOOP_CORE_DIR", ""),
        os.path.join(os.path.dirname(__file__), "..", "..", "build"),
    ]
    for cand in candidates:
        if cand and os.path.isdir(cand):
            sys.path.insert(0, os.path.abspath(cand))
            try:
                import _core  # noqa: F401
                return sys.modules["_core"]
            finally:
                sys.path.pop(0)
    raise ImportError(
        "aircoop._core not found; build with `pip install .` or "
        "`cmake -DAIRCOOP_BUILD_PYTHON=ON` and set AIRCOOP_CORE_DIR"
    )


_core = _load_core()

iou_3d = _core.iou_3d
iou_bev = _core.iou_bev
convex_polygon_intersection_area = _core.convex_polygon_intersection_area
transform_to_ego = _core.transform_to_ego
average_precision = _core.average_precision
generate_scenario_summary = _core.generate_scenario_summary
generate_dataset = _core.generate_dataset
parse_config = _core.parse_config
run_selftest = _core.run_selftest
run_gradcheck = _core.run_gradcheck
Pose3 = _core.Pose3

__version__ = _core.__version__
__all__ = [
    "iou_3d",
    "iou_bev",
    "convex_polygon_intersection_area",
    "transform_to_ego",
    "average_precision",
    "generate_scenario_summary",
    "generate_dataset",
    "parse_config",
    "run_selftest",
    "run_gradcheck",
    "Pose3",
]
