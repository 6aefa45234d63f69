from .extractor import (
    ExtractorConfig,
    ExtractorError,
    ModelNotMoeError,
    SchemaValidationError,
    extract,
    find_router_gates,
    load_prompts,
)

__version__ = "0.1.0"
