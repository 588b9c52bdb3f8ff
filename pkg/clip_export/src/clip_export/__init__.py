"""Offline exporter: encode images/texts and write XABK feature banks."""

__version__ = "0.1.0"

from .bank_io import BankFormatError, BankReport, read_bank, write_bank
from .encoders import ClipEncoder, StubEncoder, make_encoder
from .export import ExportManifest, export_bank, load_manifest, verify_bank
