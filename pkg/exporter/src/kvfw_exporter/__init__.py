"""Checkpoint exporter for the KVFW binary weight format."""

from .export import ExportManifest, convert_state_dict, export
from .format import ExportError, Header, expected_names, expected_shapes, write_kvfw
from .tokens import encode_to_file

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "ExportManifest",
    "Header",
    "convert_state_dict",
    "encode_to_file",
    "expected_names",
    "expected_shapes",
    "export",
    "write_kvfw",
    "__version__",
]
