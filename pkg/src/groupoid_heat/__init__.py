"""Heat kernels on boundary groupoids: built-in models, flows and
exponential maps, exponential charts, the parametrix/Volterra heat kernel
and numerical regularity checks near the singular stratum."""

__version__ = "0.1.0"

from .models import (  # noqa: E402
    DEFAULT_SEED,
    MODEL_NAMES,
    GroupoidPoint,
    build_model,
    classify_degeneracy,
)

__all__ = ["DEFAULT_SEED", "MODEL_NAMES", "GroupoidPoint", "build_model", "classify_degeneracy", "__version__"]
