"""medaide: staged medical-assistant pipeline with offline evaluation.

Core surface:

- `config.load_config` / `EngineConfig` / `RunFlags`
- `engine.Engine` for direct embedding into another program
- `service.create_app` for the HTTP service
- `cli.main` for the command line

Everything model-shaped is reachable only through `gateway`, so offline
profiles (mock, replay) are exact and reproducible.
"""

from .config import EngineConfig, RunFlags, load_config
from .engine import Engine
from .errors import MedAideError

__all__ = ["EngineConfig", "RunFlags", "load_config", "Engine", "MedAideError"]

__version__ = "0.1.0"
