"""Few-view object reconstruction with noisy camera poses.

Subpackages are imported on demand; the command line entry point lives in
:mod:`fewview.cli`.
"""

__version__ = "0.1.0"
