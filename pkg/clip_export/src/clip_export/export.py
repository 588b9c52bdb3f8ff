"""Manifest-driven bank export and standalone bank verification."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .bank_io import BankFormatError, BankReport, read_bank, write_bank
from .encoders import make_encoder

log = logging.getLogger(__name__)


@dataclass
class ExportManifest:
    """What to encode: (id, path-or-text) rows plus the output location."""

    entries: list[tuple[str, str]]       # (id, image path or caption text)
    modality: str                        # "image" | "text"
    output_path: str
    model: str = "stub:16"
    batch_size: int = 8
    problems: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.modality not in ("image", "text"):
            raise ValueError(f"modality must be image or text, got {self.modality!r}")
        seen = set()
        for entry_id, _ in self.entries:
            if entry_id in seen:
                raise ValueError(f"duplicate manifest id {entry_id!r}")
            seen.add(entry_id)


def load_manifest(csv_path: str, modality: str, output_path: str,
                  model: str = "stub:16", batch_size: int = 8) -> ExportManifest:
    """CSV rows of id,payload (payload = image path or caption text)."""
    entries = []
    with open(csv_path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 2:
                raise ValueError(f"{csv_path}: row {row!r} needs id and payload")
            entries.append((row[0], ",".join(row[1:])))
    return ExportManifest(entries=entries, modality=modality,
                          output_path=output_path, model=model,
                          batch_size=batch_size)


def export_bank(manifest: ExportManifest) -> BankReport:
    """Encode every readable entry and write the bank; skips bad inputs."""
    encoder = make_encoder(manifest.model, batch_size=manifest.batch_size)
    usable: list[tuple[str, str]] = []
    for entry_id, payload in manifest.entries:
        if manifest.modality == "image" and not os.path.isfile(payload):
            log.warning("skipping %s: unreadable input %s", entry_id, payload)
            continue
        usable.append((entry_id, payload))
    if not usable:
        raise ValueError("no readable manifest entries; nothing to export")

    ids = [entry_id for entry_id, _ in usable]
    payloads = [payload for _, payload in usable]
    if manifest.modality == "text":
        vectors = encoder.encode_texts(payloads)
    else:
        vectors = encoder.encode_images(payloads)
    write_bank(manifest.output_path, ids, vectors)
    report = verify_bank(manifest.output_path)
    report.problems.extend(
        f"skipped {entry_id}" for entry_id, payload in manifest.entries
        if (entry_id, payload) not in usable)
    return report


def verify_bank(path: str) -> BankReport:
    """Validate magic/version/CRC/dim/count and row norms."""
    report = BankReport(path=path)
    try:
        ids, vectors = read_bank(path)
    except BankFormatError as exc:
        report.problems.append(str(exc))
        return report
    report.crc_ok = True
    report.dim = vectors.shape[1]
    report.count = vectors.shape[0]
    if len(set(ids)) != len(ids):
        report.problems.append("duplicate record ids")
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    report.min_norm = float(norms.min()) if len(norms) else 0.0
    report.max_norm = float(norms.max()) if len(norms) else 0.0
    zero_rows = int((norms == 0.0).sum())
    if zero_rows:
        report.problems.append(f"{zero_rows} zero-norm rows")
    if not np.all(np.isfinite(vectors)):
        report.problems.append("non-finite values present")
    return report
