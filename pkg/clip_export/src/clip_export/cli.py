"""clip-export: encode a manifest into an XABK bank, or verify one."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .bank_io import BankFormatError
from .export import export_bank, load_manifest, verify_bank

log = logging.getLogger("clip_export")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(prog="clip-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="encode a CSV manifest into a bank")
    exp.add_argument("--manifest", required=True, help="CSV of id,path-or-text")
    exp.add_argument("--modality", choices=("image", "text"), required=True)
    exp.add_argument("--model", default="stub:16",
                     help="stub:<dim>[:salt] | tiny-clip[:seed] | hf-clip:<id>")
    exp.add_argument("--out", required=True)
    exp.add_argument("--batch-size", type=int, default=8)

    ver = sub.add_parser("verify", help="validate an existing bank file")
    ver.add_argument("path")

    args = parser.parse_args(argv)
    try:
        if args.command == "export":
            manifest = load_manifest(args.manifest, args.modality, args.out,
                                     model=args.model, batch_size=args.batch_size)
            report = export_bank(manifest)
        else:
            report = verify_bank(args.path)
    except (ValueError, BankFormatError) as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 3
    sys.stdout.write(json.dumps(report.as_dict()) + "\n")
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
