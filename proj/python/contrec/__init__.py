try:
    from ._contrec import *  # noqa: F401,F403  (installed layout)
except ImportError:
    from _contrec import *  # noqa: F401,F403  (in-tree build on PYTHONPATH)
