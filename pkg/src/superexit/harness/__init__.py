from .config import RunConfig, RunManifest
from .suites import suite_identities, suite_montecarlo

__all__ = ["RunConfig", "RunManifest", "suite_identities",
           "suite_montecarlo"]
